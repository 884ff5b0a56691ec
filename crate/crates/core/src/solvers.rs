//! Tear-stream solvers: direct substitution, Wegstein, Newton and BFGS on a
//! fixed-point map `x ↦ f(x)`, with per-iteration traces.
//!
//! Residuals are `‖(f(x) − x) / σ‖∞` with `σ` the map's per-variable scale.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::flowsheet::{self, sweep::join_tears, BatchBackend, Flowsheet, SweepState, TapeBackend, UnitModel};
use crate::nn::{MlpSurrogate, MlpVars};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solve config: {0}")]
    Config(String),
    #[error("unknown solve method `{0}` (expected direct, wegstein, newton or bfgs)")]
    UnknownMethod(String),
    #[error("initial guess has {got} values, map expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Flowsheet(#[from] flowsheet::FlowsheetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Wegstein,
    Newton,
    Bfgs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Direct, Method::Wegstein, Method::Newton, Method::Bfgs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Wegstein => "wegstein",
            Method::Newton => "newton",
            Method::Bfgs => "bfgs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SolveError;

    fn from_str(s: &str) -> Result<Self, SolveError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SolveError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// Scaled ∞-norm residual below which the solve has converged.
    pub tolerance: f64,
    /// Clamp for the Wegstein factor `q = a / (a − 1)`.
    pub wegstein_bounds: (f64, f64),
    pub newton_damping: f64,
    /// Scaled condition number above which the Newton Jacobian is singular.
    pub max_condition: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    pub max_halvings: usize,
    /// Divergence when the residual exceeds this multiple of `max(r₀, 1)`.
    pub divergence_factor: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            method: Method::Direct,
            max_iterations: 50,
            tolerance: 1e-8,
            wegstein_bounds: (-5.0, 0.9),
            newton_damping: 1.0,
            max_condition: 1e12,
            armijo_c1: 1e-4,
            max_halvings: 30,
            divergence_factor: 1e6,
        }
    }
}

impl SolveConfig {
    pub fn with_method(method: Method) -> Self {
        SolveConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::Config(m.to_string()));
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.wegstein_bounds.0 <= self.wegstein_bounds.1) {
            return bad("wegstein_bounds must be ordered (q_min, q_max)");
        }
        if !(self.newton_damping > 0.0 && self.newton_damping <= 1.0) {
            return bad("newton_damping must lie in (0, 1]");
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return bad("armijo_c1 must lie in (0, 1)");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1");
        }
        Ok(())
    }
}

/// A map whose fixed point is sought.
pub trait FixedPointMap {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, String>;

    /// Jacobian of `f`; central differences unless overridden.
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, String> {
        finite_difference_jacobian(|v| self.eval(v), x)
    }

    /// Per-variable residual scale.
    fn scale(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }
}

/// Central-difference Jacobian with step `1e-6 · max(|xⱼ|, 1)`.
pub fn finite_difference_jacobian(
    f: impl Fn(&[f64]) -> Result<Vec<f64>, String>,
    x: &[f64],
) -> Result<DMatrix<f64>, String> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut m = 0;
    let mut probe = x.to_vec();
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let up = f(&probe)?;
        probe[j] = x[j] - h;
        let down = f(&probe)?;
        probe[j] = x[j];
        m = up.len();
        cols.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    Ok(DMatrix::from_fn(m, n, |i, j| cols[j][i]))
}

/// `f(x) = A x + b`, with its exact Jacobian.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl FixedPointMap for AffineMap {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        Ok((&self.a * DVector::from_column_slice(x) + &self.b).as_slice().to_vec())
    }

    fn jacobian(&self, _x: &[f64]) -> Result<DMatrix<f64>, String> {
        Ok(self.a.clone())
    }
}

/// A closure-backed map with unit scale.
pub struct FnMap<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FixedPointMap for FnMap<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        Ok((self.f)(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub x: Vec<f64>,
    pub fx: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIterations,
    Diverged,
    Failed(String),
}

/// Per-iteration history of one solve; `records[k]` holds `x_k` and `f(x_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub method: Method,
    pub records: Vec<IterRecord>,
    pub status: Status,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn diverged(&self) -> bool {
        self.status == Status::Diverged
    }

    pub fn failed(&self) -> bool {
        matches!(self.status, Status::Failed(_) | Status::Diverged)
    }

    pub fn last(&self) -> &IterRecord {
        self.records.last().expect("trace holds the initial point")
    }

    pub fn final_residual(&self) -> f64 {
        self.last().residual
    }

    /// Record with the smallest finite residual.
    pub fn best(&self) -> &IterRecord {
        self.records
            .iter()
            .filter(|r| r.residual.is_finite())
            .min_by(|a, b| a.residual.total_cmp(&b.residual))
            .unwrap_or(&self.records[0])
    }

    /// The tear values a solve settles on: the last iterate, or the
    /// best-residual one when the solve failed.
    pub fn solution(&self) -> &IterRecord {
        if self.failed() {
            self.best()
        } else {
            self.last()
        }
    }

    /// CSV with columns `iteration,residual,<labels...>` (tear values `x_k`).
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("iteration,residual");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (k, r) in self.records.iter().enumerate() {
            out.push_str(&format!("{k},{:e}", r.residual));
            for v in &r.x {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn scaled_residual(x: &[f64], fx: &[f64], scale: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for ((a, b), s) in fx.iter().zip(x).zip(scale) {
        let r = ((a - b) / s).abs();
        if !r.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(r);
    }
    worst
}

struct Recorder<'a, M: ?Sized> {
    map: &'a M,
    cfg: &'a SolveConfig,
    scale: Vec<f64>,
    records: Vec<IterRecord>,
}

impl<M: FixedPointMap + ?Sized> Recorder<'_, M> {
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        let fx = self.map.eval(x)?;
        if fx.len() != x.len() {
            return Err(format!("map returned {} values for {} inputs", fx.len(), x.len()));
        }
        Ok(fx)
    }

    /// Appends `(x, f(x))`; returns the terminal status if the solve stops here.
    fn push(&mut self, x: Vec<f64>, fx: Result<Vec<f64>, String>) -> Option<Status> {
        let k = self.records.len();
        let (fx, residual, err) = match fx {
            Ok(fx) => {
                let r = scaled_residual(&x, &fx, &self.scale);
                (fx, r, None)
            }
            Err(e) => (vec![f64::NAN; x.len()], f64::NAN, Some(e)),
        };
        self.records.push(IterRecord { x, fx, residual });
        if let Some(e) = err {
            return Some(Status::Failed(format!("evaluation failed at iteration {k}: {e}")));
        }
        let r0 = self.records[0].residual;
        if !residual.is_finite() || self.records.last().is_some_and(|r| r.x.iter().chain(&r.fx).any(|v| !v.is_finite())) {
            return Some(Status::Failed(format!("non-finite value at iteration {k}")));
        }
        if residual < self.cfg.tolerance {
            return Some(Status::Converged);
        }
        if residual > self.cfg.divergence_factor * r0.max(1.0) {
            return Some(Status::Diverged);
        }
        if k >= self.cfg.max_iterations {
            return Some(Status::MaxIterations);
        }
        None
    }

    fn finish(self, status: Status) -> SolveTrace {
        SolveTrace {
            method: self.cfg.method,
            records: self.records,
            status,
        }
    }
}

/// Runs the configured method from `x0`. Always returns a trace; failures are
/// recorded in its status.
pub fn solve<M: FixedPointMap + ?Sized>(map: &M, x0: &[f64], cfg: &SolveConfig) -> Result<SolveTrace, SolveError> {
    if x0.len() != map.dim() {
        return Err(SolveError::Dimension {
            expected: map.dim(),
            got: x0.len(),
        });
    }
    let mut rec = Recorder {
        map,
        cfg,
        scale: map.scale(),
        records: Vec::new(),
    };
    let fx0 = rec.eval(x0);
    if let Some(status) = rec.push(x0.to_vec(), fx0) {
        return Ok(rec.finish(status));
    }
    let status = match cfg.method {
        Method::Direct => run_direct(&mut rec),
        Method::Wegstein => run_wegstein(&mut rec),
        Method::Newton => run_newton(&mut rec),
        Method::Bfgs => run_bfgs(&mut rec),
    };
    Ok(rec.finish(status))
}

fn run_direct<M: FixedPointMap + ?Sized>(rec: &mut Recorder<M>) -> Status {
    loop {
        let x = rec.records.last().expect("seeded").fx.clone();
        let fx = rec.eval(&x);
        if let Some(s) = rec.push(x, fx) {
            return s;
        }
    }
}

fn run_wegstein<M: FixedPointMap + ?Sized>(rec: &mut Recorder<M>) -> Status {
    let (q_min, q_max) = rec.cfg.wegstein_bounds;
    loop {
        let n = rec.records.len();
        let cur = &rec.records[n - 1];
        let x = if n == 1 {
            cur.fx.clone()
        } else {
            let prev = &rec.records[n - 2];
            (0..cur.x.len())
                .map(|i| {
                    let dx = cur.x[i] - prev.x[i];
                    let df = cur.fx[i] - prev.fx[i];
                    if dx == 0.0 {
                        return cur.fx[i];
                    }
                    let a = df / dx;
                    if a == 1.0 || !a.is_finite() {
                        return cur.fx[i];
                    }
                    let q = (a / (a - 1.0)).clamp(q_min, q_max);
                    q * cur.x[i] + (1.0 - q) * cur.fx[i]
                })
                .collect()
        };
        let fx = rec.eval(&x);
        if let Some(s) = rec.push(x, fx) {
            return s;
        }
    }
}

/// Singular values of `D⁻¹ M D` decide conditioning, `D = diag(scale)`.
fn scaled_condition(m: &DMatrix<f64>, scale: &[f64]) -> f64 {
    let n = m.nrows();
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * scale[j] / scale[i]);
    let sv = scaled.singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if lo == 0.0 || !lo.is_finite() || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn run_newton<M: FixedPointMap + ?Sized>(rec: &mut Recorder<M>) -> Status {
    loop {
        let k = rec.records.len() - 1;
        let cur = rec.records.last().expect("seeded");
        let j = match rec.map.jacobian(&cur.x) {
            Ok(j) => j,
            Err(e) => return Status::Failed(format!("jacobian failed at iteration {k}: {e}")),
        };
        let n = cur.x.len();
        let jf = j - DMatrix::<f64>::identity(n, n);
        if scaled_condition(&jf, &rec.scale) > rec.cfg.max_condition {
            return Status::Failed(format!("singular Jacobian at iteration {k}"));
        }
        let neg_f = DVector::from_iterator(n, cur.x.iter().zip(&cur.fx).map(|(x, f)| x - f));
        let Some(delta) = jf.lu().solve(&neg_f) else {
            return Status::Failed(format!("singular Jacobian at iteration {k}"));
        };
        let damping = rec.cfg.newton_damping;
        let x: Vec<f64> = cur.x.iter().zip(delta.iter()).map(|(x, d)| x + damping * d).collect();
        let fx = rec.eval(&x);
        if let Some(s) = rec.push(x, fx) {
            return s;
        }
    }
}

/// BFGS on `φ(y) = ½‖g(y) − y‖²` in scaled coordinates `y = x / σ`.
fn run_bfgs<M: FixedPointMap + ?Sized>(rec: &mut Recorder<M>) -> Status {
    let n = rec.records[0].x.len();
    let scale = DVector::from_column_slice(&rec.scale);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (step s, gradient)

    let residual_vec = |r: &IterRecord| DVector::from_iterator(n, r.fx.iter().zip(&r.x).zip(scale.iter()).map(|((f, x), s)| (f - x) / s));
    let phi_of = |r: &DVector<f64>| 0.5 * r.norm_squared();

    loop {
        let k = rec.records.len() - 1;
        let cur = rec.records.last().expect("seeded").clone();
        let jac = match rec.map.jacobian(&cur.x) {
            Ok(j) => j,
            Err(e) => return Status::Failed(format!("jacobian failed at iteration {k}: {e}")),
        };
        // J_g − I in scaled coordinates
        let jr = DMatrix::from_fn(n, n, |i, j| jac[(i, j)] * scale[j] / scale[i] - if i == j { 1.0 } else { 0.0 });
        let r = residual_vec(&cur);
        let phi = phi_of(&r);
        let grad = jr.transpose() * &r;
        if k == 0 {
            // Gauss-Newton curvature as the initial inverse-Hessian estimate
            if let Some(inv) = (jr.transpose() * &jr).try_inverse() {
                if inv.iter().all(|v| v.is_finite()) {
                    h_inv = inv;
                }
            }
        }

        if let Some((s, g_prev)) = prev.take() {
            let yv = &grad - g_prev;
            let sy = s.dot(&yv);
            if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
                let rho = 1.0 / sy;
                let eye = DMatrix::<f64>::identity(n, n);
                let left = &eye - rho * &s * yv.transpose();
                let right = &eye - rho * &yv * s.transpose();
                h_inv = &left * &h_inv * &right + rho * &s * s.transpose();
            }
        }

        if grad.iter().all(|g| *g == 0.0) {
            return Status::Failed(format!("stationary point of the residual objective at iteration {k}"));
        }
        let mut p = -(&h_inv * &grad);
        let mut slope = grad.dot(&p);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(n, n);
            p = -grad.clone();
            slope = grad.dot(&p);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=rec.cfg.max_halvings {
            let x: Vec<f64> = (0..n).map(|i| cur.x[i] + alpha * p[i] * scale[i]).collect();
            if let Ok(fx) = rec.eval(&x) {
                let trial = IterRecord {
                    residual: 0.0,
                    x: x.clone(),
                    fx: fx.clone(),
                };
                let phi_new = phi_of(&residual_vec(&trial));
                if phi_new.is_finite() && phi_new <= phi + rec.cfg.armijo_c1 * alpha * slope {
                    accepted = Some((x, fx));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x, fx)) = accepted else {
            return Status::Failed(format!(
                "line search failed after {} halvings at iteration {k}",
                rec.cfg.max_halvings
            ));
        };
        prev = Some((alpha * p, grad));
        if let Some(s) = rec.push(x, Ok(fx)) {
            return s;
        }
    }
}

/// The flowsheet response `f` over the concatenated tear vector of one data
/// point, with feeds and setpoints held fixed.
pub struct FlowsheetResponse<'a> {
    fs: &'a Flowsheet,
    models: Vec<&'a dyn UnitModel>,
    surrogates: Option<Vec<&'a MlpSurrogate>>,
    sources: Vec<(usize, Array2<f64>)>,
    scale: Vec<f64>,
}

impl<'a> FlowsheetResponse<'a> {
    /// `sources` maps every source stream (feed or setpoint) to its 1×d value.
    pub fn new(
        fs: &'a Flowsheet,
        models: Vec<&'a dyn UnitModel>,
        sources: Vec<(usize, Array2<f64>)>,
        scale: Vec<f64>,
    ) -> Self {
        FlowsheetResponse {
            fs,
            models,
            surrogates: None,
            sources,
            scale,
        }
    }

    /// Uses surrogate models, with Jacobians taken by reverse-mode autodiff.
    pub fn with_surrogates(
        fs: &'a Flowsheet,
        surrogates: Vec<&'a MlpSurrogate>,
        sources: Vec<(usize, Array2<f64>)>,
        scale: Vec<f64>,
    ) -> Self {
        FlowsheetResponse {
            fs,
            models: surrogates.iter().map(|m| *m as &dyn UnitModel).collect(),
            surrogates: Some(surrogates),
            sources,
            scale,
        }
    }

    pub fn flowsheet(&self) -> &Flowsheet {
        self.fs
    }

    /// One sweep at tear vector `x`, returning every stream value.
    pub fn state_at(&self, x: &[f64]) -> Result<SweepState<Array2<f64>>, flowsheet::FlowsheetError> {
        let mut state = SweepState::new(self.fs);
        for (s, v) in &self.sources {
            state.set(*s, v.clone());
        }
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let tears = flowsheet::sweep::split_tears(self.fs, xm.view());
        let mut backend = BatchBackend::new(self.models.clone());
        flowsheet::sweep(self.fs, &mut backend, &mut state, &tears)?;
        Ok(state)
    }
}

impl FixedPointMap for FlowsheetResponse<'_> {
    fn dim(&self) -> usize {
        self.fs.tear_dim()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        let state = self.state_at(x).map_err(|e| e.to_string())?;
        let blocks: Vec<Array2<f64>> = self
            .fs
            .tears()
            .iter()
            .map(|&t| state.values[t].clone().expect("tears are produced"))
            .collect();
        Ok(join_tears(&blocks).into_raw_vec_and_offset().0)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, String> {
        let Some(surrogates) = &self.surrogates else {
            return finite_difference_jacobian(|v| self.eval(v), x);
        };
        let run = || -> Result<DMatrix<f64>, flowsheet::FlowsheetError> {
            let mut tape = Tape::new();
            let params: Vec<MlpVars> = surrogates.iter().map(|m| m.register(&mut tape, false)).collect();
            let mut state = SweepState::new(self.fs);
            for (s, v) in &self.sources {
                let c = tape.constant(v.clone());
                state.set(*s, c);
            }
            let xv = tape.leaf(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
            let mut tears = Vec::new();
            let mut start = 0;
            for &t in self.fs.tears() {
                let d = self.fs.stream_spec(t).dim();
                tears.push(tape.slice(xv, start, start + d)?);
                start += d;
            }
            let mut backend = TapeBackend {
                tape: &mut tape,
                models: surrogates,
                params: &params,
            };
            let out = flowsheet::sweep(self.fs, &mut backend, &mut state, &tears)?;
            let y = tape.concat(&out)?;
            let jac = tape.row_jacobians(y, xv)?.remove(0);
            Ok(DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| jac[[i, j]]))
        };
        run().map_err(|e| e.to_string())
    }

    fn scale(&self) -> Vec<f64> {
        self.scale.clone()
    }
}

/// Result of [`solve_cycles`]: the trace and every stream after the final
/// consistency sweep.
pub struct CycleSolution {
    pub trace: SolveTrace,
    pub state: SweepState<Array2<f64>>,
}

/// Solves the tear streams, then sweeps once more at the settled tear values
/// so all streams are mutually consistent. With `max_iterations = 0` this is
/// a single sweep at `x0`.
pub fn solve_cycles(response: &FlowsheetResponse, x0: &[f64], cfg: &SolveConfig) -> Result<CycleSolution, SolveError> {
    let trace = solve(response, x0, cfg)?;
    let x = trace.solution().x.clone();
    let state = match response.state_at(&x) {
        Ok(s) => s,
        Err(_) => response.state_at(x0)?,
    };
    Ok(CycleSolution { trace, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64) -> AffineMap {
        AffineMap {
            a: DMatrix::from_element(1, 1, a),
            b: DVector::from_element(1, b),
        }
    }

    fn cfg(method: Method) -> SolveConfig {
        SolveConfig {
            tolerance: 1e-10,
            max_iterations: 100,
            ..SolveConfig::with_method(method)
        }
    }

    fn wide(method: Method) -> SolveConfig {
        SolveConfig {
            wegstein_bounds: (-5.0, 5.0),
            ..cfg(method)
        }
    }

    #[test]
    fn direct_contraction_converges() {
        let t = solve(&scalar(0.5, 1.0), &[0.0], &cfg(Method::Direct)).unwrap();
        assert!(t.converged());
        assert!(t.final_residual() < 1e-10);
        assert!((t.last().x[0] - 2.0).abs() < 1e-9);
        assert!(t.iterations() <= 40, "{}", t.iterations());
        assert_eq!(t.records.len(), t.iterations() + 1);
    }

    #[test]
    fn direct_expansion_diverges() {
        let t = solve(&scalar(2.0, 1.0), &[0.0], &cfg(Method::Direct)).unwrap();
        assert!(t.diverged());
    }

    #[test]
    fn identity_is_converged_immediately() {
        let id = scalar(1.0, 0.0);
        for m in [Method::Direct, Method::Wegstein, Method::Bfgs] {
            let t = solve(&id, &[3.5], &cfg(m)).unwrap();
            assert!(t.converged());
            assert_eq!(t.iterations(), 0);
            assert_eq!(t.final_residual(), 0.0);
        }
    }

    #[test]
    fn wegstein_hand_cases() {
        // x1 = 1, a = 0.5, q = -1: x2 = -1·1 + 2·1.5 = 2
        let t = solve(&scalar(0.5, 1.0), &[0.0], &cfg(Method::Wegstein)).unwrap();
        assert_eq!(t.records[1].x, vec![1.0]);
        assert!((t.records[2].x[0] - 2.0).abs() < 1e-15);
        assert!(t.converged());
        // x1 = 1, a = 2, q = 2: x2 = 2·1 − 1·3 = −1
        let t = solve(&scalar(2.0, 1.0), &[0.0], &wide(Method::Wegstein)).unwrap();
        assert!((t.records[2].x[0] + 1.0).abs() < 1e-15);
        assert!(t.converged());
        // constant map
        let t = solve(&scalar(0.0, 4.25), &[1.0], &cfg(Method::Wegstein)).unwrap();
        assert_eq!(t.records[1].x, vec![4.25]);
        assert!(t.converged());
    }

    #[test]
    fn wegstein_narrow_clamp_cannot_fix_expansion() {
        let t = solve(&scalar(2.0, 1.0), &[0.0], &cfg(Method::Wegstein)).unwrap();
        assert!(!t.converged());
    }

    #[test]
    fn newton_hand_cases() {
        let t = solve(&scalar(0.5, 1.0), &[0.0], &cfg(Method::Newton)).unwrap();
        assert!((t.records[1].x[0] - 2.0).abs() < 1e-15);
        assert!(t.converged());

        // f = identity is a fixed point everywhere; unit slope without a root is singular
        assert!(solve(&scalar(1.0, 0.0), &[2.0], &cfg(Method::Newton)).unwrap().converged());
        let t = solve(&scalar(1.0, 1.0), &[2.0], &cfg(Method::Newton)).unwrap();
        assert_eq!(t.status, Status::Failed("singular Jacobian at iteration 0".into()));

        let sq = FnMap { dim: 1, f: |x: &[f64]| vec![x[0] * x[0]] };
        let t = solve(&sq, &[3.0], &cfg(Method::Newton)).unwrap();
        assert!((t.records[1].x[0] - 1.8).abs() < 1e-6);
        assert!(t.converged());
        assert!((t.last().x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bfgs_hand_cases() {
        let t = solve(&scalar(0.5, 1.0), &[0.0], &cfg(Method::Bfgs)).unwrap();
        assert!(t.converged());
        assert!(t.iterations() <= 2);
        let r = t.last().fx[0] - t.last().x[0];
        assert!(0.5 * r * r < 1e-16);
        assert!((t.last().x[0] - 2.0).abs() < 1e-9);

        let t = solve(&scalar(2.0, 1.0), &[0.0], &cfg(Method::Bfgs)).unwrap();
        assert!(t.converged());
        assert!((t.last().x[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_fails_the_trace() {
        let m = FnMap { dim: 1, f: |x: &[f64]| vec![if x[0] > 0.5 { f64::NAN } else { 1.0 }] };
        let t = solve(&m, &[0.0], &cfg(Method::Direct)).unwrap();
        assert!(matches!(t.status, Status::Failed(_)));
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.best().x, vec![0.0]);
        assert_eq!(t.solution().x, vec![0.0]);
    }

    #[test]
    fn zero_iterations_records_only_the_guess() {
        let t = solve(&scalar(0.5, 1.0), &[0.0], &SolveConfig { max_iterations: 0, ..cfg(Method::Newton) }).unwrap();
        assert_eq!(t.status, Status::MaxIterations);
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].fx, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SolveConfig::default().validate().is_ok());
        assert!(SolveConfig { tolerance: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolveConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
        assert_eq!("BFGS".parse::<Method>().unwrap(), Method::Bfgs);
        assert!("anderson".parse::<Method>().is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let t = solve(&scalar(0.5, 1.0), &[0.0], &SolveConfig { max_iterations: 2, ..cfg(Method::Direct) }).unwrap();
        let csv = t.to_csv(&["s.x".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,residual,s.x");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("1,"));
    }

    fn random_affine(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> AffineMap {
        // A = Q diag(λ) Q⁻¹ with a random well-conditioned Q gives spectral radius max|λ|
        let q = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { 0.0 } + rng.gen_range(-0.5..0.5));
        let q_inv = q.clone().try_inverse().expect("diagonally dominant");
        let mut lambda: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let top = lambda.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        for l in &mut lambda {
            *l *= radius / top;
        }
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(lambda)) * q_inv;
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        AffineMap { a, b }
    }

    fn linear_fixed_point(m: &AffineMap) -> DVector<f64> {
        let n = m.dim();
        (DMatrix::identity(n, n) - &m.a).lu().solve(&m.b).unwrap()
    }

    #[test]
    fn direct_converges_iff_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = rng.gen_range(1..=20);
            let contract = trial % 2 == 0;
            let radius = if contract { rng.gen_range(0.1..0.9) } else { rng.gen_range(1.1..2.0) };
            let m = random_affine(&mut rng, n, radius);
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t = solve(&m, &x0, &SolveConfig { max_iterations: 2000, ..cfg(Method::Direct) }).unwrap();
            assert_eq!(t.converged(), contract, "trial {trial}, radius {radius}");
            if contract {
                let xs = linear_fixed_point(&m);
                for (a, b) in t.last().x.iter().zip(xs.iter()) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn newton_is_exact_on_affine_maps(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let radius = rng.gen_range(0.1..3.0);
            let m = random_affine(&mut rng, n, radius);
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t = solve(&m, &x0, &SolveConfig { max_iterations: 1, ..cfg(Method::Newton) }).unwrap();
            let xs = linear_fixed_point(&m);
            for (a, b) in t.records[1].x.iter().zip(xs.iter()) {
                prop_assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
            }
        }

        #[test]
        fn wegstein_is_exact_on_scalar_affine(a in -4.0f64..4.0, b in -10.0f64..10.0, x0 in -10.0f64..10.0) {
            prop_assume!((a - 1.0).abs() > 0.05 && a.abs() > 1e-3);
            let q = a / (a - 1.0);
            prop_assume!((-5.0..=5.0).contains(&q));
            prop_assume!(((a * x0 + b) - x0).abs() > 1e-6);
            let t = solve(&scalar(a, b), &[x0], &SolveConfig { max_iterations: 2, ..wide(Method::Wegstein) }).unwrap();
            let xs = b / (1.0 - a);
            let x2 = t.records.get(2).map(|r| r.x[0]).unwrap_or(t.last().x[0]);
            prop_assert!((x2 - xs).abs() < 1e-9 * xs.abs().max(1.0));
        }

        #[test]
        fn methods_agree_on_contractions(seed in 0u64..10_000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let radius = rng.gen_range(0.05..0.7);
            let m = random_affine(&mut rng, n, radius);
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = SolveConfig { tolerance: 1e-9, max_iterations: 500, ..Default::default() };
            let reference = solve(&m, &x0, &c).unwrap();
            for method in Method::ALL {
                let t = solve(&m, &x0, &SolveConfig { method, ..c.clone() }).unwrap();
                prop_assert!(t.converged(), "{method}: {:?}", t.status);
                for (a, b) in t.last().x.iter().zip(&reference.last().x) {
                    prop_assert!((a - b).abs() < 10.0 * c.tolerance, "{method}");
                }
            }
        }
    }
}
