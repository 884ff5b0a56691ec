//! Synthetic ground-truth plant, its damped fixed-point oracle and
//! steady-state data generation.

pub mod dataset;
pub mod units;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::flowsheet::sweep::{join_tears, split_tears};
use crate::flowsheet::{self, BatchBackend, Flowsheet, FlowsheetDef, FlowsheetError, StreamKind, SweepState, UnitModel};

pub use dataset::{generate_dataset, Dataset, DatasetMeta, Split, MIN_POINTS};
pub use units::{AnalyticUnit, STREAM_VARIABLES};

/// Definition file of the built-in plant.
pub const BUILTIN_PLANT: &str = include_str!("../../plants/synthetic_cumene.toml");

#[derive(Debug, Error)]
pub enum PlantError {
    #[error(transparent)]
    Flowsheet(#[from] FlowsheetError),
    #[error("plant definition: {0}")]
    Definition(String),
    #[error("no nominal value for `{0}`")]
    MissingNominal(String),
    #[error("ground-truth solve did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("{skipped} of {requested} points failed, more than 10%")]
    TooManyFailures { skipped: usize, requested: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PlantError>;

/// Structural variants of the built-in plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantOptions {
    /// Route the column-1 top back to the mixer.
    pub recycle: bool,
    /// Preheat the reactor feed with the reactor effluent.
    pub heat_integration: bool,
}

impl Default for PlantOptions {
    fn default() -> Self {
        PlantOptions {
            recycle: true,
            heat_integration: true,
        }
    }
}

impl PlantOptions {
    /// Rewrites a definition that uses the built-in stream and unit names.
    pub fn apply(&self, mut def: FlowsheetDef) -> Result<FlowsheetDef> {
        let missing = |what: &str| PlantError::Definition(format!("option needs {what}"));
        if !self.recycle {
            let m01 = def.units.iter_mut().find(|u| u.name == "M01").ok_or_else(|| missing("unit M01"))?;
            m01.inputs.retain(|s| s != "recycle");
            let c1 = def.units.iter_mut().find(|u| u.name == "C1").ok_or_else(|| missing("unit C1"))?;
            for s in &mut c1.outputs {
                if s == "recycle" {
                    *s = "c1_top".into();
                }
            }
            def.products.push("c1_top".into());
            if let Some(t) = &mut def.tears {
                t.retain(|s| s != "recycle");
            }
        }
        if !self.heat_integration {
            def.units.retain(|u| u.name != "FEHE");
            for u in &mut def.units {
                for s in &mut u.inputs {
                    match s.as_str() {
                        "fehe_cold_out" => *s = "evap_out".into(),
                        "fehe_hot_out" => *s = "c100_out".into(),
                        _ => {}
                    }
                }
            }
            if let Some(t) = &mut def.tears {
                t.retain(|s| s != "c100_out");
            }
        }
        Ok(def)
    }
}

/// Damped direct substitution used to produce ground truth.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleConfig {
    pub damping: f64,
    /// Bound on `max |f(x) − x|`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            damping: 0.5,
            tolerance: 1e-10,
            max_iterations: 10_000,
        }
    }
}

/// `max |f(x) − x|`, infinite when any entry is NaN.
pub fn residual_inf(x: &[f64], fx: &[f64]) -> f64 {
    x.iter()
        .zip(fx)
        .map(|(a, b)| (b - a).abs())
        .fold(0.0, |m, r| if r.is_nan() { f64::INFINITY } else { m.max(r) })
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// Tear values stored in the snapshot (the last recomputed ones).
    pub tears: Vec<f64>,
    /// Every stream after the final sweep.
    pub state: SweepState<Array2<f64>>,
    pub iterations: usize,
    /// Residual at `tears`.
    pub residual: f64,
}

fn response(
    fs: &Flowsheet,
    models: &[&dyn UnitModel],
    sources: &[(usize, Array2<f64>)],
    x: &[f64],
) -> std::result::Result<(Vec<f64>, SweepState<Array2<f64>>), FlowsheetError> {
    let mut state = SweepState::new(fs);
    for (s, v) in sources {
        state.set(*s, v.clone());
    }
    let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    let mut backend = BatchBackend::new(models.to_vec());
    let out = flowsheet::sweep(fs, &mut backend, &mut state, &split_tears(fs, xm.view()))?;
    let fx = if out.is_empty() {
        Vec::new()
    } else {
        join_tears(&out).into_raw_vec_and_offset().0
    };
    Ok((fx, state))
}

/// Solves the tears by `x ← x + d (f(x) − x)` until both `x` and the stored
/// point `f(x)` meet the tolerance. The returned snapshot is the sweep at
/// `x`, so every unit balance holds exactly and the tear entries hold `f(x)`.
pub fn oracle_steady_state(
    fs: &Flowsheet,
    models: &[&dyn UnitModel],
    sources: &[(usize, Array2<f64>)],
    guess: &[f64],
    cfg: &OracleConfig,
) -> Result<OracleSolution> {
    let mut x = guess.to_vec();
    let mut residual = f64::INFINITY;
    for it in 0..=cfg.max_iterations {
        let (fx, state) = response(fs, models, sources, &x)?;
        residual = residual_inf(&x, &fx);
        if !residual.is_finite() {
            break;
        }
        if residual < cfg.tolerance {
            let (ffx, _) = response(fs, models, sources, &fx)?;
            let stored = residual_inf(&fx, &ffx);
            if stored < cfg.tolerance {
                return Ok(OracleSolution {
                    tears: fx,
                    state,
                    iterations: it,
                    residual: stored,
                });
            }
        }
        for (a, b) in x.iter_mut().zip(&fx) {
            *a += cfg.damping * (b - *a);
        }
    }
    Err(PlantError::NotConverged {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// The synthetic plant: flowsheet plus analytic unit models.
#[derive(Debug, Clone)]
pub struct Plant {
    pub fs: Flowsheet,
    pub units: Vec<AnalyticUnit>,
}

impl Plant {
    pub fn new(def: FlowsheetDef) -> Result<Plant> {
        let fs = Flowsheet::new(def)?;
        let units = fs
            .units()
            .iter()
            .enumerate()
            .map(|(i, u)| {
                AnalyticUnit::check_layout(&fs, i)?;
                AnalyticUnit::from_def(u)
            })
            .collect::<std::result::Result<Vec<_>, String>>()
            .map_err(PlantError::Definition)?;
        Ok(Plant { fs, units })
    }

    pub fn builtin() -> Plant {
        Plant::new(FlowsheetDef::from_toml(BUILTIN_PLANT).expect("built-in plant parses")).expect("built-in plant is valid")
    }

    pub fn builtin_with(options: PlantOptions) -> Result<Plant> {
        Plant::new(options.apply(FlowsheetDef::from_toml(BUILTIN_PLANT)?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Plant> {
        Plant::new(FlowsheetDef::load(path)?)
    }

    pub fn models(&self) -> Vec<&dyn UnitModel> {
        self.units.iter().map(|u| u as &dyn UnitModel).collect()
    }

    fn nominal(&self, label: &str) -> Result<f64> {
        self.fs
            .def
            .nominal
            .get(label)
            .copied()
            .ok_or_else(|| PlantError::MissingNominal(label.to_string()))
    }

    /// Source values (feeds and setpoints) at nominal, with `overrides`
    /// applied by `stream.variable` label.
    pub fn sources(&self, overrides: &BTreeMap<String, f64>) -> Result<Vec<(usize, Array2<f64>)>> {
        for label in overrides.keys() {
            let known = self.fs.sources().iter().any(|&s| self.fs.stream_spec(s).labels().any(|l| &l == label));
            if !known {
                return Err(PlantError::Definition(format!("`{label}` is not a feed or setpoint variable")));
            }
        }
        self.fs
            .sources()
            .into_iter()
            .map(|s| {
                let row = self
                    .fs
                    .stream_spec(s)
                    .labels()
                    .map(|l| overrides.get(&l).copied().map_or_else(|| self.nominal(&l), Ok))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((s, Array2::from_shape_vec((1, row.len()), row).expect("row")))
            })
            .collect()
    }

    /// Initial tear guess from the nominal table.
    pub fn tear_guess(&self) -> Result<Vec<f64>> {
        self.fs.tear_labels().iter().map(|l| self.nominal(l)).collect()
    }

    pub fn oracle(&self, overrides: &BTreeMap<String, f64>, cfg: &OracleConfig) -> Result<OracleSolution> {
        oracle_steady_state(&self.fs, &self.models(), &self.sources(overrides)?, &self.tear_guess()?, cfg)
    }

    /// Worst absolute total-mass imbalance over all units in `state`.
    pub fn mass_imbalance(&self, state: &SweepState<Array2<f64>>, row: usize) -> f64 {
        let values: BTreeMap<usize, Vec<f64>> = state
            .values
            .iter()
            .enumerate()
            .filter_map(|(s, v)| v.as_ref().map(|v| (s, v.row(row).to_vec())))
            .collect();
        (0..self.units.len())
            .map(|u| units::mass_imbalance(&self.fs, u, &values).abs())
            .fold(0.0, f64::max)
    }
}

/// Worst simplex violation over all process streams of one snapshot: the
/// distance of the fraction sum from one, or of any fraction from `[0, 1]`.
pub fn simplex_violation(fs: &Flowsheet, state: &SweepState<Array2<f64>>, row: usize) -> f64 {
    let mut worst = 0.0f64;
    for (s, v) in state.values.iter().enumerate() {
        let Some(v) = v else { continue };
        if fs.stream_spec(s).kind != StreamKind::Process {
            continue;
        }
        let w: Vec<f64> = v.row(row).iter().skip(3).copied().collect();
        let sum: f64 = w.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        for x in w {
            worst = worst.max((-x).max(x - 1.0).max(0.0));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowsheet::UnitDef;

    #[test]
    fn builtin_plant_structure() {
        let p = Plant::builtin();
        assert_eq!(p.fs.tear_names(), vec!["c100_out", "recycle"]);
        assert!(p.fs.has_nested_cycles().unwrap());
        assert_eq!(p.fs.sccs()[0].len(), 9);
        assert_eq!(p.fs.tear_dim(), 16);
        assert_eq!(p.fs.order_names()[0], "M01");
    }

    #[test]
    fn default_feed_reaches_a_fixed_point() {
        let p = Plant::builtin();
        let sol = p.oracle(&BTreeMap::new(), &OracleConfig::default()).unwrap();
        assert!(sol.residual < 1e-10);
        let (fx, _) = response(&p.fs, &p.models(), &p.sources(&BTreeMap::new()).unwrap(), &sol.tears).unwrap();
        assert!(residual_inf(&sol.tears, &fx) < 1e-10);
        assert!(p.mass_imbalance(&sol.state, 0) < 1e-9);
        assert!(simplex_violation(&p.fs, &sol.state, 0) < 1e-12);
        // benzene is recycled in excess
        let recycle = sol.state.values[p.fs.stream("recycle").unwrap()].as_ref().unwrap();
        assert!(recycle[[0, 0]] > 1.0 && recycle[[0, 3]] > 0.9, "{recycle}");
    }

    #[test]
    fn acyclic_variant_is_a_single_sweep() {
        let p = Plant::builtin_with(PlantOptions {
            recycle: false,
            heat_integration: false,
        })
        .unwrap();
        assert!(p.fs.tears().is_empty());
        let sol = p.oracle(&BTreeMap::new(), &OracleConfig::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        let (_, state) = response(&p.fs, &p.models(), &p.sources(&BTreeMap::new()).unwrap(), &[]).unwrap();
        for (a, b) in sol.state.values.iter().zip(&state.values) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn recycle_closed_leaves_a_decoupled_inner_cycle() {
        let p = Plant::builtin_with(PlantOptions {
            recycle: false,
            heat_integration: true,
        })
        .unwrap();
        assert_eq!(p.fs.tear_names(), vec!["c100_out"]);
        let sol = p.oracle(&BTreeMap::new(), &OracleConfig::default()).unwrap();
        // the heater resets the temperature, so one sweep from any guess is exact
        let sources = p.sources(&BTreeMap::new()).unwrap();
        let (fx, _) = response(&p.fs, &p.models(), &sources, &p.tear_guess().unwrap()).unwrap();
        for (a, b) in fx.iter().zip(&sol.tears) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    /// u(x) = A x + b on one stream, for a linear-plant oracle check.
    struct Linear {
        a: Array2<f64>,
        b: Array2<f64>,
        take_last: usize,
    }

    impl UnitModel for Linear {
        fn eval(&self, x: ndarray::ArrayView2<f64>) -> std::result::Result<Array2<f64>, String> {
            let w = x.ncols();
            let tail = x.slice(ndarray::s![.., w - self.take_last..]);
            Ok(tail.dot(&self.a.t()) + &self.b)
        }
    }

    #[test]
    fn linear_plant_matches_linear_solve() {
        use nalgebra::{DMatrix, DVector};
        let unit = |name: &str, inputs: &[&str], outputs: &[&str]| UnitDef {
            name: name.into(),
            kind: "linear".into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            setpoints: vec![],
            calculated: vec![],
            params: BTreeMap::new(),
        };
        let def = FlowsheetDef {
            name: "linear".into(),
            variables: vec!["a".into(), "b".into()],
            stream_variables: BTreeMap::new(),
            feeds: vec!["feed".into()],
            products: vec!["out".into()],
            key_product: None,
            tears: None,
            nominal: BTreeMap::new(),
            vary: vec![],
            units: vec![unit("U0", &["feed", "loop"], &["mid"]), unit("U1", &["mid"], &["loop", "out"])],
        };
        let fs = Flowsheet::new(def).unwrap();
        let a0 = ndarray::array![[0.6, 0.2], [-0.1, 0.5]];
        let a1 = ndarray::array![[0.9, 0.0], [0.3, 0.8]];
        let u0 = Linear { a: a0.clone(), b: ndarray::array![[1.0, 2.0]], take_last: 2 };
        let u1 = Linear {
            a: ndarray::concatenate![ndarray::Axis(0), a1, a1],
            b: ndarray::array![[0.5, -0.5, 0.5, -0.5]],
            take_last: 2,
        };
        let models: Vec<&dyn UnitModel> = vec![&u0, &u1];
        let sources = vec![(fs.stream("feed").unwrap(), ndarray::array![[0.0, 0.0]])];
        let sol = oracle_steady_state(&fs, &models, &sources, &[0.0, 0.0], &OracleConfig::default()).unwrap();
        // loop = A1 (A0 loop + b0) + b1
        let a0n = DMatrix::from_row_slice(2, 2, a0.as_slice().unwrap());
        let a1n = DMatrix::from_row_slice(2, 2, a1.as_slice().unwrap());
        let m = &a1n * &a0n;
        let c = &a1n * DVector::from_vec(vec![1.0, 2.0]) + DVector::from_vec(vec![0.5, -0.5]);
        let want = (DMatrix::identity(2, 2) - m).lu().solve(&c).unwrap();
        for (a, b) in sol.tears.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn unknown_override_is_rejected() {
        let p = Plant::builtin();
        let mut o = BTreeMap::new();
        o.insert("recycle.flow".to_string(), 1.0);
        assert!(p.sources(&o).is_err());
    }

    #[test]
    fn product_flow_rises_with_benzene_feed() {
        let p = Plant::builtin();
        let product = p.fs.stream("cumene_product").unwrap();
        let mut last = f64::NEG_INFINITY;
        for i in 0..=8 {
            let flow = 1.9 * (0.8 + 0.05 * i as f64);
            let o = BTreeMap::from([("benzene_feed.flow".to_string(), flow)]);
            let sol = p.oracle(&o, &OracleConfig::default()).unwrap();
            let f = sol.state.values[product].as_ref().unwrap()[[0, 0]];
            assert!(f > last, "product flow {f} after {last}");
            last = f;
        }
    }
}
