//! Per-unit surrogate: a normalized two-hidden-layer softplus MLP with a
//! linear skip connection, plus its binary checkpoint format.
//!
//! ```text
//! x̂ = (x − μ_in) / σ_in
//! a₁ = softplus(x̂ W₁ + b₁)
//! a₂ = softplus(a₁ W₂ + b₂)
//! z  = a₂ W_out + b_out + x̂ W_skip
//! y  = z σ_out + μ_out
//! ```
//!
//! # Checkpoint layout
//!
//! All integers are `u32` little-endian, all reals `f64` little-endian,
//! matrices row-major:
//!
//! | field | size |
//! |---|---|
//! | magic `FTCKPT1` | 7 bytes |
//! | `d_in`, `hidden`, `d_out` | 3 × u32 |
//! | `W₁`, `b₁`, `W₂`, `b₂`, `W_out`, `b_out`, `W_skip` | parameter blocks |
//! | `μ_in`, `σ_in`, `μ_out`, `σ_out` | norm stats |

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{self, AutogradError, Tape, Var};

/// Width of both hidden layers.
pub const HIDDEN: usize = 100;

/// Standard deviations are floored here; a floored variable is "pinned".
pub const SIGMA_FLOOR: f64 = 1e-8;

const MAGIC_PREFIX: &[u8; 6] = b"FTCKPT";
const FORMAT_VERSION: u8 = b'1';

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite input value at position {0}")]
    NonFinite(usize),
    #[error("checkpoint is not in FTCKPT format")]
    BadMagic,
    #[error("unsupported checkpoint version {0:?}")]
    Version(char),
    #[error("checkpoint truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint invariant violated: {0}")]
    Invariant(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Per-variable mean and (floored) population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Column statistics of `data` (rows are samples).
    pub fn from_data(data: ArrayView2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mean: Vec<f64> = data.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        let std = data
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(col, &m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                var.sqrt().max(SIGMA_FLOOR)
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.std[i] <= SIGMA_FLOOR
    }

    pub fn pinned(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_pinned(i)).collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn reverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Concatenation of several stat blocks, in order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a NormStats>) -> NormStats {
        let mut out = NormStats {
            mean: Vec::new(),
            std: Vec::new(),
        };
        for p in parts {
            out.mean.extend_from_slice(&p.mean);
            out.std.extend_from_slice(&p.std);
        }
        out
    }

    pub fn mean_array(&self) -> Array1<f64> {
        Array1::from(self.mean.clone())
    }

    pub fn std_array(&self) -> Array1<f64> {
        Array1::from(self.std.clone())
    }
}

/// Parameters of one surrogate recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub w_skip: Var,
}

impl MlpVars {
    pub fn as_array(&self) -> [Var; 7] {
        [self.w1, self.b1, self.w2, self.b2, self.w_out, self.b_out, self.w_skip]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSurrogate {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
    pub w_skip: Array2<f64>,
    pub input_norm: NormStats,
    pub output_norm: NormStats,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

impl MlpSurrogate {
    /// Seeded initialization, each layer uniform in ±√(1/fan_in).
    pub fn new(
        input_norm: NormStats,
        output_norm: NormStats,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let (d_in, d_out) = (input_norm.len(), output_norm.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpSurrogate {
            w1: uniform(&mut rng, d_in, hidden, d_in),
            b1: uniform(&mut rng, 1, hidden, d_in),
            w2: uniform(&mut rng, hidden, hidden, hidden),
            b2: uniform(&mut rng, 1, hidden, hidden),
            w_out: uniform(&mut rng, hidden, d_out, hidden),
            b_out: uniform(&mut rng, 1, d_out, hidden),
            w_skip: uniform(&mut rng, d_in, d_out, d_in),
            input_norm,
            output_norm,
        }
    }

    /// All weights and biases zero.
    pub fn zeros(input_norm: NormStats, output_norm: NormStats, hidden: usize) -> Self {
        let (d_in, d_out) = (input_norm.len(), output_norm.len());
        MlpSurrogate {
            w1: Array2::zeros((d_in, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array2::zeros((1, hidden)),
            w_out: Array2::zeros((hidden, d_out)),
            b_out: Array2::zeros((1, d_out)),
            w_skip: Array2::zeros((d_in, d_out)),
            input_norm,
            output_norm,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn params(&self) -> [&Array2<f64>; 7] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_out,
            &self.b_out,
            &self.w_skip,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 7] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_skip,
        ]
    }

    /// Zeroes `grads` (ordered like [`MlpSurrogate::params`]) on every
    /// weight that reads a pinned input or writes a pinned output.
    pub fn mask_pinned(&self, grads: &mut [Array2<f64>]) {
        let pin_in = self.input_norm.pinned();
        let pin_out = self.output_norm.pinned();
        for (i, _) in pin_in.iter().enumerate().filter(|(_, p)| **p) {
            grads[0].row_mut(i).fill(0.0);
            grads[6].row_mut(i).fill(0.0);
        }
        for (j, _) in pin_out.iter().enumerate().filter(|(_, p)| **p) {
            grads[4].column_mut(j).fill(0.0);
            grads[5].column_mut(j).fill(0.0);
            grads[6].column_mut(j).fill(0.0);
        }
    }

    /// Disconnects pinned variables: their input weights and output weights
    /// become zero, so a pinned output is exactly its mean and a pinned
    /// input has no influence.
    pub fn detach_pinned(&mut self) {
        let mut p: Vec<Array2<f64>> = self.params().iter().map(|a| Array2::ones(a.dim())).collect();
        self.mask_pinned(&mut p);
        for (w, m) in self.params_mut().into_iter().zip(&p) {
            *w *= m;
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Forward pass on one raw-unit input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.d_in() {
            return Err(NnError::Dimension {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(i));
        }
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(xb).into_raw_vec_and_offset().0)
    }

    /// Forward pass on a batch (rows are samples), without a tape.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let z = self.forward_normalized_batch(x);
        let mut y = z * &self.output_norm.std_array();
        y += &self.output_norm.mean_array();
        y
    }

    /// Pre-reverse-normalization output `z` for a batch of raw inputs.
    pub fn forward_normalized_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut xn = &x - &self.input_norm.mean_array();
        xn /= &self.input_norm.std_array();
        let mut h1 = xn.dot(&self.w1);
        h1 += &self.b1;
        h1.mapv_inplace(autograd::softplus);
        let mut h2 = h1.dot(&self.w2);
        h2 += &self.b2;
        h2.mapv_inplace(autograd::softplus);
        let mut z = h2.dot(&self.w_out);
        z += &self.b_out;
        z += &xn.dot(&self.w_skip);
        z
    }

    /// Places the parameters on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |a: &Array2<f64>| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        MlpVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            w_out: put(&self.w_out),
            b_out: put(&self.b_out),
            w_skip: put(&self.w_skip),
        }
    }

    /// Records the normalized output `z` for raw input `x` (rows are samples).
    pub fn record_normalized(&self, tape: &mut Tape, p: &MlpVars, x: Var) -> Result<Var, AutogradError> {
        let xn = tape.normalize(x, self.input_norm.mean_array(), self.input_norm.std_array())?;
        let h1 = tape.affine(xn, p.w1, p.b1)?;
        let a1 = tape.softplus(h1)?;
        let h2 = tape.affine(a1, p.w2, p.b2)?;
        let a2 = tape.softplus(h2)?;
        let out = tape.affine(a2, p.w_out, p.b_out)?;
        let skip = tape.matmul(xn, p.w_skip)?;
        tape.add(out, skip)
    }

    /// Records the full raw-unit forward pass.
    pub fn record_forward(&self, tape: &mut Tape, p: &MlpVars, x: Var) -> Result<Var, AutogradError> {
        let z = self.record_normalized(tape, p, x)?;
        tape.col_affine(z, self.output_norm.std_array(), self.output_norm.mean_array())
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let (d_in, h, d_out) = (self.d_in(), self.hidden(), self.d_out());
        let shapes = [
            (d_in, h),
            (1, h),
            (h, h),
            (1, h),
            (h, d_out),
            (1, d_out),
            (d_in, d_out),
        ];
        for (p, want) in self.params().iter().zip(shapes) {
            if p.dim() != want {
                return Err(NnError::Invariant(format!(
                    "parameter shape {:?}, expected {want:?}",
                    p.dim()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Invariant("non-finite parameter".into()));
            }
        }
        for (label, stats, dim) in [("input", &self.input_norm, d_in), ("output", &self.output_norm, d_out)] {
            if stats.mean.len() != dim || stats.std.len() != dim {
                return Err(NnError::Invariant(format!("{label} norm stats have wrong length")));
            }
            if stats.mean.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Invariant(format!("{label} mean is not finite")));
            }
            if let Some(s) = stats.std.iter().find(|s| !(s.is_finite() && **s >= SIGMA_FLOOR)) {
                return Err(NnError::Invariant(format!(
                    "{label} standard deviation {s} below floor {SIGMA_FLOOR}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + 8 * (self.param_count() + 2 * (self.d_in() + self.d_out())));
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(FORMAT_VERSION);
        for d in [self.d_in(), self.hidden(), self.d_out()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut put = |vals: &mut dyn Iterator<Item = f64>| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.params() {
            // standard layout arrays iterate row-major
            put(&mut p.iter().copied());
        }
        for stats in [&self.input_norm, &self.output_norm] {
            put(&mut stats.mean.iter().copied());
            put(&mut stats.std.iter().copied());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(7)?;
        if &magic[..6] != MAGIC_PREFIX {
            return Err(NnError::BadMagic);
        }
        if magic[6] != FORMAT_VERSION {
            return Err(NnError::Version(magic[6] as char));
        }
        let d_in = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let mat = |r: &mut Reader, rows: usize, cols: usize| -> Result<Array2<f64>, NnError> {
            let v = r.f64s(rows * cols)?;
            Ok(Array2::from_shape_vec((rows, cols), v).expect("block shape"))
        };
        let w1 = mat(&mut r, d_in, hidden)?;
        let b1 = mat(&mut r, 1, hidden)?;
        let w2 = mat(&mut r, hidden, hidden)?;
        let b2 = mat(&mut r, 1, hidden)?;
        let w_out = mat(&mut r, hidden, d_out)?;
        let b_out = mat(&mut r, 1, d_out)?;
        let w_skip = mat(&mut r, d_in, d_out)?;
        let input_norm = NormStats {
            mean: r.f64s(d_in)?,
            std: r.f64s(d_in)?,
        };
        let output_norm = NormStats {
            mean: r.f64s(d_out)?,
            std: r.f64s(d_out)?,
        };
        if r.pos != bytes.len() {
            return Err(NnError::TrailingBytes(bytes.len() - r.pos));
        }
        let model = MlpSurrogate {
            w1,
            b1,
            w2,
            b2,
            w_out,
            b_out,
            w_skip,
            input_norm,
            output_norm,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(NnError::Truncated {
                needed: end - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(n.checked_mul(8).ok_or(NnError::Truncated { needed: usize::MAX })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Unit name → checkpoint path, stored as TOML next to the checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub units: BTreeMap<String, PathBuf>,
}

impl CheckpointManifest {
    /// Writes every model as `<dir>/<unit>.ckpt` plus `<dir>/manifest.toml`.
    pub fn write_models<'a>(
        dir: impl AsRef<Path>,
        models: impl IntoIterator<Item = (&'a str, &'a MlpSurrogate)>,
    ) -> Result<CheckpointManifest, NnError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = CheckpointManifest::default();
        for (name, model) in models {
            let file = PathBuf::from(format!("{name}.ckpt"));
            model.save(dir.join(&file))?;
            manifest.units.insert(name.to_string(), file);
        }
        let text = toml::to_string(&manifest).map_err(|e| NnError::Manifest(e.to_string()))?;
        fs::write(dir.join("manifest.toml"), text)?;
        Ok(manifest)
    }

    /// Loads `<dir>/manifest.toml` and every checkpoint it lists. Relative
    /// paths resolve against `dir`.
    pub fn read_models(dir: impl AsRef<Path>) -> Result<BTreeMap<String, MlpSurrogate>, NnError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| NnError::Manifest(e.to_string()))?;
        manifest
            .units
            .into_iter()
            .map(|(name, path)| {
                let path = if path.is_relative() { dir.join(path) } else { path };
                Ok((name, MlpSurrogate::load(path)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn random_model(d_in: usize, d_out: usize, hidden: usize, seed: u64) -> MlpSurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut stats = |d: usize| NormStats {
            mean: (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            std: (0..d).map(|_| rng.gen_range(0.1..3.0)).collect(),
        };
        let (a, b) = (stats(d_in), stats(d_out));
        MlpSurrogate::new(a, b, hidden, seed)
    }

    /// Straight-line scalar evaluation, independent of ndarray and the tape.
    fn reference_forward(m: &MlpSurrogate, x: &[f64]) -> Vec<f64> {
        let sp = |v: f64| (1.0 + v.exp()).ln();
        let xn: Vec<f64> = (0..m.d_in())
            .map(|i| (x[i] - m.input_norm.mean[i]) / m.input_norm.std[i])
            .collect();
        let layer = |inp: &[f64], w: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
            (0..w.ncols())
                .map(|j| b[[0, j]] + (0..inp.len()).map(|i| inp[i] * w[[i, j]]).sum::<f64>())
                .collect()
        };
        let a1: Vec<f64> = layer(&xn, &m.w1, &m.b1).into_iter().map(sp).collect();
        let a2: Vec<f64> = layer(&a1, &m.w2, &m.b2).into_iter().map(sp).collect();
        let out = layer(&a2, &m.w_out, &m.b_out);
        (0..m.d_out())
            .map(|j| {
                let skip: f64 = (0..m.d_in()).map(|i| xn[i] * m.w_skip[[i, j]]).sum();
                (out[j] + skip) * m.output_norm.std[j] + m.output_norm.mean[j]
            })
            .collect()
    }

    #[test]
    fn zero_model_outputs_the_mean() {
        let m = MlpSurrogate::zeros(
            NormStats {
                mean: vec![1.0, 2.0],
                std: vec![3.0, 4.0],
            },
            NormStats {
                mean: vec![7.5, -2.0, 0.25],
                std: vec![1.0, 2.0, 0.5],
            },
            8,
        );
        assert_eq!(m.forward(&[10.0, -3.0]).unwrap(), vec![7.5, -2.0, 0.25]);
    }

    #[test]
    fn skip_identity_reproduces_input() {
        let stats = NormStats {
            mean: vec![300.0, 0.5, 2.0],
            std: vec![10.0, 0.1, 1e-8],
        };
        let mut m = MlpSurrogate::zeros(stats.clone(), stats, 4);
        m.w_skip = Array2::eye(3);
        let x = [312.5, 0.43, 2.0];
        let y = m.forward(&x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_matches_reference_and_tape() {
        for seed in 0..20 {
            let m = random_model(7, 4, 16, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let want = reference_forward(&m, &x);
            let got = m.forward(&x).unwrap();
            let mut tape = Tape::new();
            let p = m.register(&mut tape, true);
            let xv = tape.row(&x);
            let yv = m.record_forward(&mut tape, &p, xv).unwrap();
            let taped = tape.value(yv).unwrap().row(0).to_vec();
            for j in 0..4 {
                let tol = 1e-12 * want[j].abs().max(1.0);
                assert!((got[j] - want[j]).abs() <= tol, "seed {seed}: {} vs {}", got[j], want[j]);
                assert!((taped[j] - want[j]).abs() <= tol);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = random_model(3, 2, 5, 1);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(NnError::Dimension { expected: 3, got: 2 })));
        assert!(matches!(m.forward(&[1.0, f64::NAN, 2.0]), Err(NnError::NonFinite(1))));
    }

    #[test]
    fn hidden_activations_are_positive() {
        let m = random_model(4, 2, 10, 5);
        let x = Array2::from_elem((1, 4), -1e3);
        let mut h = x.dot(&m.w1);
        h += &m.b1;
        assert!(h.mapv(autograd::softplus).iter().all(|&v| v >= 0.0));
        assert!(autograd::softplus(-30.0) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = random_model(9, 5, 12, 3);
        let back = MlpSurrogate::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_errors() {
        let m = random_model(2, 2, 3, 4);
        let mut bytes = m.to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(MlpSurrogate::from_bytes(&wrong), Err(NnError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[6] = b'2';
        assert!(matches!(MlpSurrogate::from_bytes(&v2), Err(NnError::Version('2'))));
        assert!(matches!(
            MlpSurrogate::from_bytes(&bytes[..bytes.len() - 3]),
            Err(NnError::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(MlpSurrogate::from_bytes(&extra), Err(NnError::TrailingBytes(1))));

        // σ_out[0] is the second-to-last block's first entry
        let n = bytes.len();
        let sigma_out0 = n - 8 * 2 * m.d_out() + 8 * m.d_out();
        bytes[sigma_out0..sigma_out0 + 8].copy_from_slice(&0.0f64.to_le_bytes());
        assert!(matches!(MlpSurrogate::from_bytes(&bytes), Err(NnError::Invariant(_))));

        let mut nan = m.to_bytes();
        nan[19..27].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(MlpSurrogate::from_bytes(&nan), Err(NnError::Invariant(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = random_model(3, 2, 4, 1);
        let b = random_model(2, 5, 4, 2);
        CheckpointManifest::write_models(dir.path(), [("A", &a), ("B", &b)]).unwrap();
        let back = CheckpointManifest::read_models(dir.path()).unwrap();
        assert_eq!(back["A"], a);
        assert_eq!(back["B"], b);
    }

    #[test]
    fn norm_stats_floor_constant_columns() {
        let data = ndarray::array![[1.0, 5.0], [3.0, 5.0]];
        let s = NormStats::from_data(data.view());
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, SIGMA_FLOOR]);
        assert_eq!(s.pinned(), vec![false, true]);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(
            x in proptest::collection::vec(-1e6f64..1e6, 1..8),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = NormStats {
                mean: x.iter().map(|_| rng.gen_range(-1e3..1e3)).collect(),
                std: x.iter().map(|_| rng.gen_range(1e-3..1e3)).collect(),
            };
            let back = stats.reverse(&stats.normalize(&x));
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
