//! Shared feature encoder: a small tanh MLP followed by row L2 normalization.
//!
//! Both views go through the same [`EncoderParams`]. The backward pass is
//! exact, including the Jacobian of the output normalization, so the training
//! losses can be checked against finite differences end to end.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{dot, Matrix, Rng};

/// Pre-normalization outputs below this norm are treated as collapsed.
pub const COLLAPSE_NORM: f64 = 1e-12;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMPW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One affine layer, `y = W x + b`, with `W` stored as (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Encoder weights. tanh follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input to each layer; `inputs[0]` is the raw batch.
    inputs: Vec<Matrix>,
    /// Final-layer output before normalization.
    pre_norm: Matrix,
    norms: Vec<f64>,
    embeddings: Matrix,
}

impl ForwardTape {
    pub fn rows(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn pre_norm(&self) -> &Matrix {
        &self.pre_norm
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }
}

impl EncoderParams {
    /// Layer widths `[input, hidden.., embed]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::fan_out));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::fan_in)
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Flat view over all parameters in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) into an existing shape.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("encoder has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::DimensionMismatch(format!("layer {i} bias length")));
            }
        }
        Ok(())
    }
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        EncoderParams {
            layers: self.layers.clone(),
        }
        .flatten()
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &EncoderGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Kaiming (fan-in, normal) initialization with zero biases.
pub fn init_params(rng: &mut Rng, dims: &[usize]) -> Result<EncoderParams> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "encoder needs at least input and output widths".into(),
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("zero width in {dims:?}")));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
            Layer {
                weight: Matrix::new(fan_out, fan_in, data).expect("finite normals"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(EncoderParams { layers })
}

fn affine_row(layer: &Layer, x: &[f64], out: &mut [f64]) {
    for (o, (w, b)) in out
        .iter_mut()
        .zip(layer.weight.iter_rows().zip(&layer.bias))
    {
        *o = dot(w, x) + b;
    }
}

fn affine(layer: &Layer, x: &Matrix, tanh: bool, exec: Exec) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.fan_out());
    exec.fill_rows(out.as_mut_slice(), layer.fan_out(), |i, row| {
        affine_row(layer, x.row(i), row);
        if tanh {
            row.iter_mut().for_each(|v| *v = v.tanh());
        }
    });
    out
}

fn check_input(params: &EncoderParams, x: &Matrix) -> Result<()> {
    params.validate()?;
    if x.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects {} input columns, got {}",
            params.input_dim(),
            x.cols()
        )));
    }
    Ok(())
}

/// Runs the encoder on a batch and keeps the tape for [`backward`].
pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<(Matrix, ForwardTape)> {
    forward_with(params, x, Exec::default())
}

pub fn forward_with(
    params: &EncoderParams,
    x: &Matrix,
    exec: Exec,
) -> Result<(Matrix, ForwardTape)> {
    check_input(params, x)?;
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut cur = x.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let next = affine(layer, &cur, li + 1 < n_layers, exec);
        inputs.push(std::mem::replace(&mut cur, next));
    }
    let pre_norm = cur;
    let mut norms = Vec::with_capacity(pre_norm.rows());
    let mut embeddings = pre_norm.clone();
    for i in 0..pre_norm.rows() {
        let n = dot(pre_norm.row(i), pre_norm.row(i)).sqrt();
        if !n.is_finite() || n < COLLAPSE_NORM {
            return Err(Error::Degenerate(format!(
                "embedding row {i} collapsed (pre-normalization norm {n:e})"
            )));
        }
        embeddings.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    let tape = ForwardTape {
        inputs,
        pre_norm,
        norms,
        embeddings: embeddings.clone(),
    };
    Ok((embeddings, tape))
}

/// Embeddings only, no tape.
pub fn embed(params: &EncoderParams, x: &Matrix, exec: Exec) -> Result<Matrix> {
    forward_with(params, x, exec).map(|(e, _)| e)
}

/// Exact gradient of a loss with respect to all parameters, given
/// `dL/d(embeddings)` for the batch recorded in `tape`.
pub fn backward(
    params: &EncoderParams,
    tape: &ForwardTape,
    grad_embeddings: &Matrix,
) -> Result<EncoderGrads> {
    if grad_embeddings.shape() != tape.embeddings.shape() {
        return Err(Error::DimensionMismatch(format!(
            "gradient shape {:?} vs embeddings {:?}",
            grad_embeddings.shape(),
            tape.embeddings.shape()
        )));
    }
    let rows = tape.rows();
    // through the normalization: dy = (g - e (e·g)) / ‖y‖
    let mut delta = Matrix::zeros(rows, params.embed_dim());
    for i in 0..rows {
        let e = tape.embeddings.row(i);
        let g = grad_embeddings.row(i);
        let eg = dot(e, g);
        let n = tape.norms[i];
        for ((d, &gv), &ev) in delta.row_mut(i).iter_mut().zip(g).zip(e) {
            *d = (gv - ev * eg) / n;
        }
    }

    let mut grads = EncoderGrads::zeros_like(params);
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &tape.inputs[li];
        let g = &mut grads.layers[li];
        let (fan_out, fan_in) = (layer.fan_out(), layer.fan_in());
        for r in 0..rows {
            let d = delta.row(r);
            let x = input.row(r);
            let gw = g.weight.as_mut_slice();
            for o in 0..fan_out {
                let dv = d[o];
                if dv == 0.0 {
                    continue;
                }
                let wrow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (w, xv) in wrow.iter_mut().zip(x) {
                    *w += dv * xv;
                }
            }
            for (b, dv) in g.bias.iter_mut().zip(d) {
                *b += dv;
            }
        }
        if li == 0 {
            break;
        }
        // propagate to the previous layer's (tanh) output, then through tanh
        let mut prev = Matrix::zeros(rows, fan_in);
        for r in 0..rows {
            let d = delta.row(r);
            let a = input.row(r);
            let out = prev.row_mut(r);
            for o in 0..fan_out {
                let dv = d[o];
                if dv == 0.0 {
                    continue;
                }
                for (p, w) in out.iter_mut().zip(layer.weight.row(o)) {
                    *p += dv * w;
                }
            }
            for (p, av) in out.iter_mut().zip(a) {
                *p *= 1.0 - av * av;
            }
        }
        delta = prev;
    }
    Ok(grads)
}

/// Plain SGD: `θ ← θ − lr·g`.
pub fn sgd_step(params: &EncoderParams, grads: &EncoderGrads, lr: f64) -> Result<EncoderParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut EncoderParams, grads: &EncoderGrads, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("encoder gradient".into()));
    }
    if grads.layers.len() != params.layers.len() {
        return Err(Error::DimensionMismatch("gradient layer count".into()));
    }
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        if p.weight.shape() != g.weight.shape() || p.bias.len() != g.bias.len() {
            return Err(Error::DimensionMismatch("gradient layer shape".into()));
        }
        for (w, gw) in p.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
            *w -= lr * gw;
        }
        for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(())
}

/// Writes a `DMPW` checkpoint.
pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut w: W) -> Result<()> {
    params.validate()?;
    let dims = params.dims();
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in params.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("checkpoint {what}")),
        _ => Error::Io(e.to_string()),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a `DMPW` checkpoint.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EncoderParams> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = read_u32(&mut r, "dimension count")? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Malformed(format!("{n} layer widths")));
    }
    let dims = (0..n)
        .map(|_| read_u32(&mut r, "dimensions").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims.iter().any(|&d| d == 0 || d > 1 << 20) {
        return Err(Error::Malformed(format!("layer widths {dims:?}")));
    }
    let mut params = EncoderParams {
        layers: dims
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect(),
    };
    let mut flat = vec![0.0; params.num_params()];
    let mut b = [0u8; 8];
    for v in flat.iter_mut() {
        read_exact(&mut r, &mut b, "payload")?;
        *v = f64::from_le_bytes(b);
        if !v.is_finite() {
            return Err(Error::NonFinite("checkpoint parameter".into()));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Malformed("trailing bytes after checkpoint payload".into()));
    }
    params.assign_flat(&flat);
    Ok(params)
}
