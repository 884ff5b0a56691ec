//! Training: independent per-unit fitting, fine-tuning through the unrolled
//! tear solve, and end-to-end evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Var};
use crate::flowsheet::{self, Flowsheet, FlowsheetError, SweepState, TapeBackend, UnitModel};
use crate::nn::{MlpSurrogate, MlpVars, NormStats, HIDDEN};
use crate::plantgen::{Dataset, PlantError};
use crate::solvers::{solve_cycles, FlowsheetResponse, Method, SolveConfig, SolveError, Status};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("unit `{unit}`: non-finite loss at epoch {epoch} (last finite loss {last:e})")]
    NonFiniteUnit { unit: String, epoch: usize, last: f64 },
    #[error("fine-tuning: non-finite loss at epoch {epoch} after halving the learning rate")]
    NonFinite { epoch: usize },
    #[error("parameter shapes do not match the optimizer state")]
    Shape,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Flowsheet(#[from] FlowsheetError),
    #[error(transparent)]
    Data(#[from] PlantError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Bias-corrected Adam over a fixed list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Array2<f64>> = shapes.into_iter().map(Array2::zeros).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || params.iter().zip(grads).zip(&self.m).any(|((p, g), m)| p.dim() != m.dim() || g.dim() != m.dim())
        {
            return Err(TrainError::Shape);
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Coefficient of determination over the non-pinned columns of `stats`,
/// pooled on standard-deviation-scaled values. `None` when the truth has no
/// variance in those columns.
pub fn r2_scaled(pred: &Array2<f64>, truth: &Array2<f64>, stats: &NormStats) -> Option<f64> {
    let (mut sse, mut sst) = (0.0, 0.0);
    for c in 0..truth.ncols() {
        if stats.is_pinned(c) {
            continue;
        }
        let s = stats.std[c];
        let col = truth.column(c);
        let mean = col.mean()?;
        for (p, t) in pred.column(c).iter().zip(col) {
            sse += ((p - t) / s).powi(2);
            sst += ((t - mean) / s).powi(2);
        }
    }
    (sst > 0.0).then(|| 1.0 - sse / sst)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let w = pos - lo as f64;
    if w == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Records `mean(((x − μ)/σ − target)²)` over non-pinned columns, or `None`
/// when every column is pinned.
fn scaled_mse(tape: &mut Tape, pred: Var, target: &Target) -> Result<Option<Var>> {
    if target.active == 0 {
        return Ok(None);
    }
    let z = tape.normalize(pred, target.stats.mean_array(), target.stats.std_array())?;
    let t = tape.constant(target.normalized.clone());
    let d = tape.sub(z, t)?;
    let d = tape.col_affine(d, target.mask.clone(), Array1::zeros(target.mask.len()))?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(Some(tape.scale(s, 1.0 / (target.normalized.nrows() * target.active) as f64)?))
}

/// Normalized target block with its pinned-column mask.
struct Target {
    stats: NormStats,
    normalized: Array2<f64>,
    mask: Array1<f64>,
    active: usize,
}

impl Target {
    fn new(raw: &Array2<f64>, stats: NormStats) -> Self {
        let mut normalized = raw - &stats.mean_array();
        normalized /= &stats.std_array();
        let mask: Array1<f64> = (0..stats.len()).map(|i| if stats.is_pinned(i) { 0.0 } else { 1.0 }).collect();
        let active = mask.iter().filter(|&&m| m > 0.0).count();
        normalized *= &mask;
        Target {
            stats,
            normalized,
            mask,
            active,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for UnitTrainConfig {
    fn default() -> Self {
        UnitTrainConfig {
            epochs: 20_000,
            lr: 2.0e-5,
            hidden: HIDDEN,
            seed: 0,
        }
    }
}

impl UnitTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || self.hidden == 0 {
            return Err(TrainError::Config("epochs, lr and hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Per-unit accuracy line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: String,
    /// Test-row r²; `None` when every output is pinned.
    pub r2: Option<f64>,
    pub train_loss: f64,
}

/// Fits `model` to `(x, y)` by full-batch Adam on the normalized MSE of the
/// non-pinned outputs. Returns the per-epoch loss.
pub fn fit_unit(model: &mut MlpSurrogate, x: &Array2<f64>, y: &Array2<f64>, epochs: usize, lr: f64) -> Result<Vec<f64>> {
    let target = Target::new(y, model.output_norm.clone());
    let mut adam = Adam::new(lr, model.params().map(|p| p.dim()));
    let mut losses = Vec::with_capacity(epochs);
    if target.active == 0 {
        return Ok(vec![0.0; epochs]);
    }
    let mut tape = Tape::new();
    for epoch in 0..epochs {
        tape.clear();
        let p = model.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let z = model.record_normalized(&mut tape, &p, xv)?;
        let t = tape.constant(target.normalized.clone());
        let d = tape.sub(z, t)?;
        let d = tape.col_affine(d, target.mask.clone(), Array1::zeros(target.mask.len()))?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        let loss = tape.scale(s, 1.0 / (x.nrows() * target.active) as f64)?;
        let value = tape.value(loss)?[[0, 0]];
        if !value.is_finite() {
            return Err(TrainError::NonFiniteUnit {
                unit: String::new(),
                epoch,
                last: losses.last().copied().unwrap_or(f64::NAN),
            });
        }
        losses.push(value);
        let grads = tape.backward_leaves(loss)?;
        let mut g: Vec<Array2<f64>> = p
            .as_array()
            .iter()
            .map(|v| grads.get_or_zeros(&tape, *v))
            .collect::<std::result::Result<_, _>>()?;
        model.mask_pinned(&mut g);
        adam.step(&mut model.params_mut(), &g)?;
    }
    Ok(losses)
}

/// Input/output statistics of one unit from the dataset's training rows.
pub fn unit_stats(fs: &Flowsheet, ds: &Dataset, unit: usize) -> Result<(NormStats, NormStats)> {
    Ok((
        ds.stream_stats(fs, fs.unit_inputs(unit))?,
        ds.stream_stats(fs, fs.unit_outputs(unit))?,
    ))
}

/// Test-row r² of each unit evaluated in isolation on true inputs.
pub fn unit_reports(fs: &Flowsheet, ds: &Dataset, models: &[MlpSurrogate]) -> Result<Vec<UnitReport>> {
    let test = ds.test_rows();
    let train = ds.train_rows();
    (0..fs.units().len())
        .map(|u| {
            let (x, y) = ds.unit_table(fs, u, &test)?;
            let pred = models[u].forward_batch(x.view());
            let (xt, yt) = ds.unit_table(fs, u, &train)?;
            let target = Target::new(&yt, models[u].output_norm.clone());
            let z = models[u].forward_normalized_batch(xt.view());
            let train_loss = if target.active == 0 {
                0.0
            } else {
                let mut d = z - &target.normalized;
                d *= &target.mask;
                d.mapv(|v| v * v).sum() / (xt.nrows() * target.active) as f64
            };
            Ok(UnitReport {
                unit: fs.units()[u].name.clone(),
                r2: r2_scaled(&pred, &y, &models[u].output_norm),
                train_loss,
            })
        })
        .collect()
}

/// Training step 1: every unit fitted on its own from the dataset's
/// training rows, units in parallel.
pub fn train_single_units(fs: &Flowsheet, ds: &Dataset, cfg: &UnitTrainConfig) -> Result<(Vec<MlpSurrogate>, Vec<UnitReport>)> {
    cfg.validate()?;
    let train = ds.train_rows();
    let models = (0..fs.units().len())
        .into_par_iter()
        .map(|u| {
            let (x, y) = ds.unit_table(fs, u, &train)?;
            let (ins, outs) = unit_stats(fs, ds, u)?;
            let mut model = MlpSurrogate::new(ins, outs, cfg.hidden, cfg.seed.wrapping_mul(1_000_003).wrapping_add(u as u64));
            model.detach_pinned();
            let losses = fit_unit(&mut model, &x, &y, cfg.epochs, cfg.lr).map_err(|e| match e {
                TrainError::NonFiniteUnit { epoch, last, .. } => TrainError::NonFiniteUnit {
                    unit: fs.units()[u].name.clone(),
                    epoch,
                    last,
                },
                other => other,
            })?;
            log::info!(
                "unit {} trained: loss {:.3e} -> {:.3e}",
                fs.units()[u].name,
                losses.first().copied().unwrap_or(0.0),
                losses.last().copied().unwrap_or(0.0)
            );
            Ok(model)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = unit_reports(fs, ds, &models)?;
    Ok((models, reports))
}

/// Training step 2 schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Solve-iteration counts trained on each epoch.
    pub k_set: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Units whose parameters stay fixed.
    pub frozen: Vec<String>,
    /// Solver producing the tear iterates during training.
    pub method: Method,
    /// Settings of that solver when it is not direct substitution.
    pub solve: SolveConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            k_set: (0..=10).collect(),
            epochs: 500,
            lr: 2.0e-5,
            frozen: vec![],
            method: Method::Direct,
            solve: SolveConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, fs: &Flowsheet) -> Result<()> {
        if self.k_set.is_empty() {
            return Err(TrainError::Config("k_set is empty".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        for u in &self.frozen {
            fs.unit(u)
                .map_err(|_| TrainError::Config(format!("frozen unit `{u}` is not in the flowsheet")))?;
        }
        self.solve.validate()?;
        Ok(())
    }
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub k: usize,
    /// Loss of this `K` at the start of the epoch.
    pub loss: f64,
    /// Norm of the epoch's full gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub rows: Vec<LogRow>,
    /// Set once the learning rate was halved after a non-finite loss.
    pub lr_halved: bool,
}

impl FinetuneLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,K,loss,grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:e},{:e}", r.epoch, r.k, r.loss, r.grad_norm);
        }
        out
    }

    /// Mean loss over `K` of every epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut by_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = by_epoch.entry(r.epoch).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        by_epoch.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// Training targets and inputs of the unrolled loss, fixed over epochs.
pub struct UnrollData {
    rows: usize,
    sources: Vec<(usize, Array2<f64>)>,
    guess: Array2<f64>,
    targets: Vec<Option<Target>>,
}

impl UnrollData {
    pub fn new(fs: &Flowsheet, ds: &Dataset, rows: &[usize]) -> Result<Self> {
        let guess_row = ds.tear_mean(fs)?;
        let guess = Array2::from_shape_fn((rows.len(), guess_row.len()), |(_, j)| guess_row[j]);
        let targets = (0..fs.streams().len())
            .map(|s| {
                if fs.producer(s).is_none() {
                    return Ok(None);
                }
                let raw = ds.stream_block(fs, s, rows)?;
                Ok(Some(Target::new(&raw, ds.stream_stats(fs, &[s])?)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UnrollData {
            rows: rows.len(),
            sources: ds.sources(fs, rows)?,
            guess,
            targets,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Records the loss of every `K` in `k_set` on one tape. The sweeps are
/// shared: sweep `j` starts from tear iterate `x_j`, so a single unroll of
/// `max(K) + 1` sweeps holds every schedule entry. `L_K` averages the
/// scaled MSE of every produced stream after sweep `K` and of the tear
/// outputs of sweeps `0..K`. With `iterates` the tear inputs of sweeps
/// `1..` are those constants instead of the previous sweep's output.
pub fn record_unrolled_loss(
    tape: &mut Tape,
    fs: &Flowsheet,
    models: &[&MlpSurrogate],
    params: &[MlpVars],
    data: &UnrollData,
    k_set: &[usize],
    iterates: Option<&[Array2<f64>]>,
) -> Result<Vec<(usize, Var)>> {
    let k_max = *k_set.iter().max().ok_or_else(|| TrainError::Config("k_set is empty".into()))?;
    let mut state: SweepState<Var> = SweepState::new(fs);
    for (s, v) in &data.sources {
        let c = tape.constant(v.clone());
        state.set(*s, c);
    }
    let split = |tape: &mut Tape, x: &Array2<f64>| -> Vec<Var> {
        flowsheet::sweep::split_tears(fs, x.view())
            .into_iter()
            .map(|b| tape.constant(b))
            .collect()
    };
    let mut tears = split(tape, &data.guess);
    let mut sums: BTreeMap<usize, (Option<Var>, usize)> = k_set.iter().map(|&k| (k, (None, 0))).collect();
    let add = |tape: &mut Tape, acc: &mut (Option<Var>, usize), term: Var| -> Result<()> {
        acc.0 = Some(match acc.0 {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
        acc.1 += 1;
        Ok(())
    };
    for j in 0..=k_max {
        let out = {
            let mut backend = TapeBackend {
                tape: &mut *tape,
                models,
                params,
            };
            flowsheet::sweep(fs, &mut backend, &mut state, &tears)?
        };
        if sums.contains_key(&j) {
            for s in 0..fs.streams().len() {
                let (Some(target), Some(v)) = (&data.targets[s], state.values[s]) else { continue };
                if let Some(term) = scaled_mse(tape, v, target)? {
                    add(tape, sums.get_mut(&j).expect("present"), term)?;
                }
            }
        }
        if k_set.iter().any(|&k| k > j) {
            for (pos, &t) in fs.tears().iter().enumerate() {
                let Some(target) = &data.targets[t] else { continue };
                if let Some(term) = scaled_mse(tape, out[pos], target)? {
                    for (_, acc) in sums.range_mut(j + 1..) {
                        add(tape, acc, term)?;
                    }
                }
            }
        }
        tears = match iterates {
            Some(xs) if j < k_max => split(tape, &xs[j + 1]),
            _ => out,
        };
    }
    sums.into_iter()
        .map(|(k, (sum, n))| {
            let sum = sum.ok_or_else(|| TrainError::Config("no stream carries a loss".into()))?;
            Ok((k, tape.scale(sum, 1.0 / n as f64)?))
        })
        .collect()
}

/// Tear iterates `x_0..=x_{k_max}` of `method` per row, stacked per iteration.
fn solver_iterates(
    fs: &Flowsheet,
    models: &[MlpSurrogate],
    data: &UnrollData,
    cfg: &FinetuneConfig,
    k_max: usize,
    scale: &[f64],
) -> Result<Vec<Array2<f64>>> {
    let solve_cfg = SolveConfig {
        method: cfg.method,
        max_iterations: k_max,
        ..cfg.solve
    };
    let per_row: Vec<Vec<Vec<f64>>> = (0..data.rows)
        .into_par_iter()
        .map(|r| {
            let sources = data
                .sources
                .iter()
                .map(|(s, v)| (*s, v.slice(ndarray::s![r..r + 1, ..]).to_owned()))
                .collect();
            let resp = FlowsheetResponse::with_surrogates(fs, models.iter().collect(), sources, scale.to_vec());
            let x0 = data.guess.row(r).to_vec();
            let trace = crate::solvers::solve(&resp, &x0, &solve_cfg)?;
            let mut xs: Vec<Vec<f64>> = trace
                .records
                .iter()
                .map(|rec| rec.x.clone())
                .take_while(|x| x.iter().all(|v| v.is_finite()))
                .collect();
            if xs.is_empty() {
                xs.push(x0);
            }
            while xs.len() <= k_max {
                xs.push(xs.last().expect("non-empty").clone());
            }
            Ok(xs)
        })
        .collect::<Result<_>>()?;
    let dim = data.guess.ncols();
    Ok((0..=k_max)
        .map(|j| Array2::from_shape_fn((data.rows, dim), |(r, c)| per_row[r][j][c]))
        .collect())
}

/// Per-variable solver scale from the training statistics; pinned
/// variables use 1.
pub fn tear_scale(fs: &Flowsheet, ds: &Dataset) -> Result<Vec<f64>> {
    let stats = ds.stats(fs.tear_labels().into_iter())?;
    Ok((0..stats.len())
        .map(|i| if stats.is_pinned(i) { 1.0 } else { stats.std[i] })
        .collect())
}

/// Training step 2: fine-tunes all non-frozen surrogates through the
/// unrolled tear solve on the training rows.
pub fn finetune(fs: &Flowsheet, ds: &Dataset, models: &mut [MlpSurrogate], cfg: &FinetuneConfig) -> Result<FinetuneLog> {
    cfg.validate(fs)?;
    if models.len() != fs.units().len() {
        return Err(TrainError::Config(format!(
            "{} models for {} units",
            models.len(),
            fs.units().len()
        )));
    }
    let data = UnrollData::new(fs, ds, &ds.train_rows())?;
    let scale = tear_scale(fs, ds)?;
    let k_max = *cfg.k_set.iter().max().expect("validated");
    let trainable: Vec<bool> = fs.units().iter().map(|u| !cfg.frozen.contains(&u.name)).collect();
    let shapes: Vec<(usize, usize)> = models
        .iter()
        .zip(&trainable)
        .filter(|(_, t)| **t)
        .flat_map(|(m, _)| m.params().map(|p| p.dim()))
        .collect();
    let mut adam = Adam::new(cfg.lr, shapes);
    let mut log = FinetuneLog::default();
    let mut backup: Option<(Vec<MlpSurrogate>, Adam)> = None;
    let mut tape = Tape::new();
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let iterates = match cfg.method {
            Method::Direct => None,
            _ => Some(solver_iterates(fs, models, &data, cfg, k_max, &scale)?),
        };
        tape.clear();
        let refs: Vec<&MlpSurrogate> = models.iter().collect();
        let params: Vec<MlpVars> = refs.iter().zip(&trainable).map(|(m, t)| m.register(&mut tape, *t)).collect();
        let attempt = (|| -> Result<Option<(Vec<(usize, f64)>, f64, Vec<Array2<f64>>)>> {
            let losses = match record_unrolled_loss(&mut tape, fs, &refs, &params, &data, &cfg.k_set, iterates.as_deref()) {
                Ok(l) => l,
                Err(TrainError::Flowsheet(FlowsheetError::NonFinite { .. })) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut total: Option<Var> = None;
            for (_, l) in &losses {
                total = Some(match total {
                    Some(t) => tape.add(t, *l)?,
                    None => *l,
                });
            }
            let total = tape.scale(total.expect("k_set non-empty"), 1.0 / losses.len() as f64)?;
            let values: Vec<(usize, f64)> = losses
                .iter()
                .map(|(k, l)| Ok((*k, tape.value(*l)?[[0, 0]])))
                .collect::<Result<_>>()?;
            if !tape.value(total)?[[0, 0]].is_finite() {
                return Ok(None);
            }
            let grads = tape.backward_leaves(total)?;
            let mut g = Vec::new();
            for ((p, t), m) in params.iter().zip(&trainable).zip(refs.iter()) {
                if *t {
                    let mut unit: Vec<Array2<f64>> = p
                        .as_array()
                        .iter()
                        .map(|v| grads.get_or_zeros(&tape, *v))
                        .collect::<std::result::Result<_, _>>()?;
                    m.mask_pinned(&mut unit);
                    g.extend(unit);
                }
            }
            let norm = g.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Ok(None);
            }
            Ok(Some((values, norm, g)))
        })()?;
        drop(refs);
        let Some((values, norm, g)) = attempt else {
            if log.lr_halved {
                return Err(TrainError::NonFinite { epoch });
            }
            log.lr_halved = true;
            log::warn!("non-finite loss at epoch {epoch}; halving the learning rate");
            if let Some((m, a)) = backup.take() {
                models.clone_from_slice(&m);
                adam = a;
                epoch = epoch.saturating_sub(1);
                log.rows.retain(|r| r.epoch < epoch);
            }
            adam.lr *= 0.5;
            continue;
        };
        for (k, loss) in values {
            log.rows.push(LogRow {
                epoch,
                k,
                loss,
                grad_norm: norm,
            });
        }
        backup = Some((models.to_vec(), adam.clone()));
        let mut ps: Vec<&mut Array2<f64>> = Vec::new();
        for (m, t) in models.iter_mut().zip(&trainable) {
            if *t {
                ps.extend(m.params_mut());
            }
        }
        adam.step(&mut ps, &g)?;
        if epoch % 10 == 0 {
            log::info!("finetune epoch {epoch}: grad norm {norm:.3e}");
        }
        epoch += 1;
    }
    Ok(log)
}

/// Models used for evaluation.
pub enum ModelSet<'a> {
    Surrogates(Vec<&'a MlpSurrogate>),
    Analytic(Vec<&'a dyn UnitModel>),
}

impl<'a> ModelSet<'a> {
    pub fn surrogates(models: &'a [MlpSurrogate]) -> Self {
        ModelSet::Surrogates(models.iter().collect())
    }

    pub fn response(&self, fs: &'a Flowsheet, sources: Vec<(usize, Array2<f64>)>, scale: Vec<f64>) -> FlowsheetResponse<'a> {
        match self {
            ModelSet::Surrogates(m) => FlowsheetResponse::with_surrogates(fs, m.clone(), sources, scale),
            ModelSet::Analytic(m) => FlowsheetResponse::new(fs, m.clone(), sources, scale),
        }
    }
}

/// Outcome of predicting one data row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: usize,
    pub status: Status,
    pub iterations: usize,
    pub final_residual: f64,
    /// Mean scaled absolute error of the key product; infinite on failure.
    pub product_error: f64,
    /// Predicted key-product values; empty on failure.
    pub prediction: Vec<f64>,
}

/// Evaluation of one prediction method at one iteration budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: Method,
    pub k: usize,
    pub key_product: String,
    /// 25th, 50th and 75th percentile of the key-product error.
    pub percentiles: [f64; 3],
    /// Key-product r² over rows that produced finite values.
    pub end_to_end_r2: Option<f64>,
    pub stream_r2: BTreeMap<String, Option<f64>>,
    pub failures: usize,
    pub rows: Vec<RowResult>,
}

impl Metrics {
    /// Parity table of the key product: `row,variable,true,predicted`.
    pub fn parity_csv(&self, fs: &Flowsheet, ds: &Dataset) -> Result<String> {
        let key = fs.key_product();
        let labels: Vec<String> = fs.stream_spec(key).labels().collect();
        let mut out = String::from("row,variable,true,predicted\n");
        for r in &self.rows {
            if r.prediction.is_empty() {
                continue;
            }
            for (l, p) in labels.iter().zip(&r.prediction) {
                let t = ds.data[[r.row, ds.column(l)?]];
                let _ = writeln!(out, "{},{l},{t:e},{p:e}", r.row);
            }
        }
        Ok(out)
    }
}

/// Predicts `rows` by solving the tears from the training-mean guess with
/// `cfg` (its `max_iterations` is the iteration budget `K`) and compares
/// the final sweep with the dataset.
pub fn evaluate(fs: &Flowsheet, ds: &Dataset, rows: &[usize], models: &ModelSet, cfg: &SolveConfig) -> Result<Metrics> {
    let guess = ds.tear_mean(fs)?;
    let scale = tear_scale(fs, ds)?;
    let key = fs.key_product();
    let key_stats = ds.stream_stats(fs, &[key])?;
    let produced: Vec<usize> = (0..fs.streams().len()).filter(|&s| fs.producer(s).is_some()).collect();
    let results: Vec<(RowResult, Option<Vec<Array2<f64>>>)> = rows
        .par_iter()
        .map(|&row| {
            let sources = ds.sources(fs, &[row])?;
            let response = models.response(fs, sources, scale.clone());
            let truth = ds.stream_block(fs, key, &[row])?;
            let failed = |status: Status| {
                (
                    RowResult {
                        row,
                        status,
                        iterations: 0,
                        final_residual: f64::INFINITY,
                        product_error: f64::INFINITY,
                        prediction: vec![],
                    },
                    None,
                )
            };
            let sol = match solve_cycles(&response, &guess, cfg) {
                Ok(s) => s,
                Err(SolveError::Flowsheet(e)) => return Ok(failed(Status::Failed(e.to_string()))),
                Err(e) => return Err(e.into()),
            };
            let pred = sol.state.get(fs, key)?.row(0).to_vec();
            let finite = produced
                .iter()
                .all(|&s| sol.state.values[s].as_ref().is_some_and(|v| v.iter().all(|x| x.is_finite())));
            if !finite {
                return Ok(failed(sol.trace.status.clone()));
            }
            let mut err = 0.0;
            let mut n = 0;
            for (c, (p, t)) in pred.iter().zip(truth.row(0)).enumerate() {
                if !key_stats.is_pinned(c) {
                    err += ((p - t) / key_stats.std[c]).abs();
                    n += 1;
                }
            }
            let blocks = produced
                .iter()
                .map(|&s| sol.state.values[s].clone().expect("checked"))
                .collect();
            Ok((
                RowResult {
                    row,
                    status: sol.trace.status.clone(),
                    iterations: sol.trace.iterations(),
                    final_residual: sol.trace.final_residual(),
                    product_error: if n == 0 { 0.0 } else { err / n as f64 },
                    prediction: pred,
                },
                Some(blocks),
            ))
        })
        .collect::<Result<_>>()?;

    let ok: Vec<usize> = results.iter().enumerate().filter(|(_, r)| r.1.is_some()).map(|(i, _)| i).collect();
    let ok_rows: Vec<usize> = ok.iter().map(|&i| rows[i]).collect();
    let mut stream_r2 = BTreeMap::new();
    let mut end_to_end_r2 = None;
    for (p, &s) in produced.iter().enumerate() {
        let name = fs.stream_spec(s).name.clone();
        if ok.is_empty() {
            stream_r2.insert(name, None);
            continue;
        }
        let views: Vec<_> = ok.iter().map(|&i| results[i].1.as_ref().expect("ok")[p].view()).collect();
        let pred = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        let truth = ds.stream_block(fs, s, &ok_rows)?;
        let r2 = r2_scaled(&pred, &truth, &ds.stream_stats(fs, &[s])?);
        if s == key {
            end_to_end_r2 = r2;
        }
        stream_r2.insert(name, r2);
    }
    let rows_out: Vec<RowResult> = results.into_iter().map(|r| r.0).collect();
    let mut errors: Vec<f64> = rows_out.iter().map(|r| r.product_error).collect();
    errors.sort_by(f64::total_cmp);
    Ok(Metrics {
        method: cfg.method,
        k: cfg.max_iterations,
        key_product: fs.stream_spec(key).name.clone(),
        percentiles: [percentile(&errors, 25.0), percentile(&errors, 50.0), percentile(&errors, 75.0)],
        end_to_end_r2,
        stream_r2,
        failures: rows_out.iter().filter(|r| r.prediction.is_empty()).count(),
        rows: rows_out,
    })
}

/// Evaluation at every budget `0..=k_max` for each method.
pub fn convergence_table(
    fs: &Flowsheet,
    ds: &Dataset,
    rows: &[usize],
    models: &ModelSet,
    base: &SolveConfig,
    methods: &[Method],
    k_max: usize,
) -> Result<Vec<Metrics>> {
    let mut out = Vec::new();
    for &method in methods {
        for k in 0..=k_max {
            let cfg = SolveConfig {
                method,
                max_iterations: k,
                ..*base
            };
            out.push(evaluate(fs, ds, rows, models, &cfg)?);
        }
    }
    Ok(out)
}

/// CSV of a convergence table: `method,K,p25,p50,p75,r2,failures`.
pub fn convergence_csv(table: &[Metrics]) -> String {
    let mut out = String::from("method,K,p25,p50,p75,r2,failures\n");
    for m in table {
        let r2 = m.end_to_end_r2.map_or("pinned".to_string(), |v| format!("{v:e}"));
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{r2},{}",
            m.method, m.k, m.percentiles[0], m.percentiles[1], m.percentiles[2], m.failures
        );
    }
    out
}

/// Table of per-unit r² before and after, `unit,r2_before,r2_after`.
pub fn unit_report_csv(before: &[UnitReport], after: Option<&[UnitReport]>) -> String {
    let fmt = |r: Option<f64>| r.map_or("pinned".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from(if after.is_some() { "unit,r2_before,r2_after\n" } else { "unit,r2\n" });
    for (i, b) in before.iter().enumerate() {
        match after {
            Some(a) => {
                let _ = writeln!(out, "{},{},{}", b.unit, fmt(b.r2), fmt(a[i].r2));
            }
            None => {
                let _ = writeln!(out, "{},{}", b.unit, fmt(b.r2));
            }
        }
    }
    out
}
