//! Synthetic two-view corpora and the binary feature-file format.
//!
//! A synthetic location is a random unit latent `z`. Drone rows are
//! `A_d·z + noise` and satellite rows `A_s·z + noise`, where `A_d` and `A_s`
//! have orthonormal columns, so the latent is linearly recoverable from
//! either view.
//!
//! Feature files (one per view) are little-endian:
//!
//! ```text
//! "DMFV" | version u32 | view u8 (0 drone, 1 satellite) | count u32 | dim u32
//! count × dim f32, row-major
//! optional: "LBLS" | count × i32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, l2_normalize, Matrix, Rng};
use crate::View;

pub const FEATURE_MAGIC: [u8; 4] = *b"DMFV";
pub const LABEL_MAGIC: [u8; 4] = *b"LBLS";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_locations: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub drone_per_loc: usize,
    pub sat_per_loc: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Use one view map for both views (noiseless sanity corpora).
    #[serde(default)]
    pub shared_view_map: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_locations: 64,
            latent_dim: 16,
            input_dim: 32,
            drone_per_loc: 8,
            sat_per_loc: 1,
            noise_std: 0.05,
            seed: 0,
            shared_view_map: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_locations == 0 || self.drone_per_loc == 0 || self.sat_per_loc == 0 {
            return Err(Error::Config("synthetic corpus needs locations and instances".into()));
        }
        if self.latent_dim == 0 || self.input_dim < self.latent_dim {
            return Err(Error::Config(format!(
                "need 1 <= latent_dim <= input_dim, got {} and {}",
                self.latent_dim, self.input_dim
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Per-instance location ids. Only evaluation code should ask for these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub drone: Vec<usize>,
    pub satellite: Vec<usize>,
}

/// Raw two-view features, optionally with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    drone: Matrix,
    satellite: Matrix,
    truth: Option<GroundTruth>,
}

/// The label-free part of a corpus handed to training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingCorpus<'a> {
    pub drone: &'a Matrix,
    pub satellite: &'a Matrix,
}

impl Corpus {
    pub fn new(drone: Matrix, satellite: Matrix, truth: Option<GroundTruth>) -> Result<Self> {
        if drone.cols() != satellite.cols() {
            return Err(Error::DimensionMismatch(format!(
                "drone dim {} vs satellite dim {}",
                drone.cols(),
                satellite.cols()
            )));
        }
        if drone.rows() == 0 || satellite.rows() == 0 {
            return Err(Error::Malformed("corpus view without instances".into()));
        }
        if let Some(t) = &truth {
            if t.drone.len() != drone.rows() || t.satellite.len() != satellite.rows() {
                return Err(Error::DimensionMismatch("ground truth length differs from instance count".into()));
            }
        }
        Ok(Self {
            drone,
            satellite,
            truth,
        })
    }

    pub fn training_view(&self) -> TrainingCorpus<'_> {
        TrainingCorpus {
            drone: &self.drone,
            satellite: &self.satellite,
        }
    }

    /// Evaluation-only access to location ids.
    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.drone.cols()
    }

    pub fn num_drone(&self) -> usize {
        self.drone.rows()
    }

    pub fn num_satellite(&self) -> usize {
        self.satellite.rows()
    }

    pub fn features(&self, view: View) -> &Matrix {
        match view {
            View::Drone => &self.drone,
            View::Satellite => &self.satellite,
        }
    }
}

/// Random `rows × cols` matrix with orthonormal columns (Gram–Schmidt).
pub fn random_orthonormal(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if cols > rows {
        return Err(Error::InvalidArgument(format!("{cols} orthonormal columns in dimension {rows}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        // two passes keep the basis orthogonal to rounding level
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if let Ok(u) = l2_normalize(&v) {
            basis.push(u);
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    for (c, b) in basis.iter().enumerate() {
        for (r, x) in b.iter().enumerate() {
            out.set(r, c, *x);
        }
    }
    Ok(out)
}

fn project(a: &Matrix, z: &[f64]) -> Vec<f64> {
    a.iter_rows().map(|r| dot(r, z)).collect()
}

/// Latent location vectors of a spec, in location order.
pub fn latents(spec: &SyntheticSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = Rng::substream(spec.seed, 0);
    let mut rows = Vec::with_capacity(spec.num_locations);
    while rows.len() < spec.num_locations {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng.normal()).collect();
        if let Ok(u) = l2_normalize(&z) {
            rows.push(u);
        }
    }
    Matrix::from_rows(&rows)
}

/// Deterministic corpus for a spec. Rows are grouped by location.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    let z = latents(spec)?;
    let a_d = random_orthonormal(&mut Rng::substream(spec.seed, 1), spec.input_dim, spec.latent_dim)?;
    let a_s = if spec.shared_view_map {
        a_d.clone()
    } else {
        random_orthonormal(&mut Rng::substream(spec.seed, 2), spec.input_dim, spec.latent_dim)?
    };
    let mut noise = Rng::substream(spec.seed, 3);
    let mut sample = |a: &Matrix, per_loc: usize| {
        let mut data = Vec::with_capacity(spec.num_locations * per_loc * spec.input_dim);
        let mut gt = Vec::with_capacity(spec.num_locations * per_loc);
        for p in 0..spec.num_locations {
            let clean = project(a, z.row(p));
            for _ in 0..per_loc {
                data.extend(clean.iter().map(|x| x + spec.noise_std * noise.normal()));
                gt.push(p);
            }
        }
        (Matrix::new(gt.len(), spec.input_dim, data), gt)
    };
    let (drone, drone_gt) = sample(&a_d, spec.drone_per_loc);
    let (sat, sat_gt) = sample(&a_s, spec.sat_per_loc);
    Corpus::new(
        drone?,
        sat?,
        Some(GroundTruth {
            drone: drone_gt,
            satellite: sat_gt,
        }),
    )
}

/// Contents of one feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub view: View,
    pub features: Matrix,
    pub labels: Option<Vec<i64>>,
}

fn view_tag(view: View) -> u8 {
    match view {
        View::Drone => 0,
        View::Satellite => 1,
    }
}

pub fn write_features<W: Write>(mut w: W, view: View, features: &Matrix, labels: Option<&[i64]>) -> Result<()> {
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(17 + features.as_slice().len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.push(view_tag(view));
    buf.extend_from_slice(&to_u32(features.rows(), "count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(features.cols(), "dim")?.to_le_bytes());
    for &x in features.as_slice() {
        let v = x as f32;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("feature value {x} does not fit f32")));
        }
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = labels {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        buf.extend_from_slice(&LABEL_MAGIC);
        for &l in labels {
            let l = i32::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds i32")))?;
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let out = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(out)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn parse_features(bytes: &[u8]) -> Result<FeatureFile> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = c.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let view = match c.take(1, "view tag")?[0] {
        0 => View::Drone,
        1 => View::Satellite,
        t => return Err(Error::Malformed(format!("view tag {t}"))),
    };
    let count = c.u32("count")? as usize;
    let dim = c.u32("dim")? as usize;
    let n = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
    let payload = c.take(n, "feature payload")?;
    let mut data = Vec::with_capacity(count * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) is {v}",
                i / dim.max(1),
                i % dim.max(1)
            )));
        }
        data.push(f64::from(v));
    }
    let labels = if c.remaining() == 0 {
        None
    } else {
        let marker = c.take(4.min(c.remaining()), "label marker")?;
        if marker != LABEL_MAGIC {
            return Err(Error::Malformed("trailing bytes after the feature payload".into()));
        }
        let raw = c.take(count * 4, "label block")?;
        let labels = raw
            .chunks_exact(4)
            .map(|b| i64::from(i32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        if c.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", c.remaining())));
        }
        Some(labels)
    };
    Ok(FeatureFile {
        view,
        features: Matrix::new(count, dim, data)?,
        labels,
    })
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

pub fn save_features(path: &Path, view: View, features: &Matrix, labels: Option<&[i64]>) -> Result<()> {
    write_features(BufWriter::new(File::create(path)?), view, features, labels)
}

pub fn load_feature_file(path: &Path) -> Result<FeatureFile> {
    read_features(BufReader::new(File::open(path)?))
}

/// Loads a drone file and a satellite file into a corpus.
///
/// Ground truth is attached only when both files carry non-negative labels.
pub fn load_features(drone_path: &Path, sat_path: &Path) -> Result<Corpus> {
    let d = load_feature_file(drone_path)?;
    let s = load_feature_file(sat_path)?;
    if d.view != View::Drone || s.view != View::Satellite {
        return Err(Error::Malformed(format!(
            "expected drone and satellite files, found {} and {}",
            d.view, s.view
        )));
    }
    let as_ids = |l: Option<Vec<i64>>| -> Option<Vec<usize>> {
        l.and_then(|v| v.into_iter().map(|x| usize::try_from(x).ok()).collect())
    };
    let truth = match (as_ids(d.labels), as_ids(s.labels)) {
        (Some(drone), Some(satellite)) => Some(GroundTruth { drone, satellite }),
        _ => None,
    };
    Corpus::new(d.features, s.features, truth)
}

/// Writes both views of a corpus, with ground truth labels when present.
pub fn save_corpus(corpus: &Corpus, drone_path: &Path, sat_path: &Path) -> Result<()> {
    let gt = corpus.ground_truth();
    let labels = |v: Option<&Vec<usize>>| v.map(|v| v.iter().map(|&x| x as i64).collect::<Vec<_>>());
    let dl = labels(gt.map(|g| &g.drone));
    let sl = labels(gt.map(|g| &g.satellite));
    save_features(drone_path, View::Drone, corpus.features(View::Drone), dl.as_deref())?;
    save_features(sat_path, View::Satellite, corpus.features(View::Satellite), sl.as_deref())
}
