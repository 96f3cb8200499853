//! Dense numeric kernels: similarity, normalization, softmax, selection.
//!
//! All sums run left to right in index order so results are reproducible
//! bit for bit, whichever [`Exec`] mode drives the row loop.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn row_norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::Degenerate(format!("zero-norm row {i} in {what}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// All-pairs cosine similarity; `out[i][j] = cos(A_i, B_j)`.
pub fn pairwise_sim(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    pairwise_sim_with(a, b, Exec::default())
}

pub fn pairwise_sim_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "pairwise_sim of {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let na = row_norms(a, "left operand")?;
    let nb = row_norms(b, "right operand")?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    exec.fill_rows(out.as_mut_slice(), b.rows(), |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = (dot(ai, b.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0);
        }
    });
    Ok(out)
}

/// Plain dot products of every row of `a` with every row of `b`.
///
/// Equals [`pairwise_sim`] when both operands are row-normalized.
pub fn gram_with(a: &Matrix, b: &Matrix, exec: Exec) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "gram operands must share width");
    let mut out = Matrix::zeros(a.rows(), b.rows());
    exec.fill_rows(out.as_mut_slice(), b.rows(), |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    out
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Degenerate("zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(a: &Matrix) -> Result<Matrix> {
    let norms = row_norms(a, "l2_normalize_rows")?;
    let mut out = a.clone();
    for (i, n) in norms.into_iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().fold(0.0, |acc, x| acc + (x - m).exp()).ln()
}

/// Softmax of `v / temperature`, with max-subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z = e.iter().sum::<f64>();
    Ok(e.into_iter().map(|x| x / z).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries, by descending value then ascending index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k={k} over {} values",
            v.len()
        )));
    }
    Ok(top_k_unchecked(v, k))
}

pub(crate) fn top_k_unchecked(v: &[f64], k: usize) -> Vec<usize> {
    // partial_cmp keeps -0.0 and 0.0 tied; inputs are finite by contract
    let cmp = |a: &usize, b: &usize| {
        v[*b]
            .partial_cmp(&v[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Index of the maximum entry, lowest index on ties. `None` for empty input.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= *x => {}
            _ => best = Some(i),
        }
    }
    best
}
