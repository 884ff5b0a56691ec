//! Closed-form unit models of the synthetic plant.
//!
//! Process streams carry `[flow kg/s, T K, P bar, w_benzene, w_cumene,
//! w_dipb, w_propane, w_propylene]`. Units work on species mass flows and
//! rebuild fractions from them, so outlet fractions always sum to one.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::flowsheet::{Flowsheet, StreamKind, UnitDef, UnitModel};

pub const STREAM_VARIABLES: [&str; 8] = [
    "flow",
    "T",
    "P",
    "w_benzene",
    "w_cumene",
    "w_dipb",
    "w_propane",
    "w_propylene",
];

pub const N_SPECIES: usize = 5;
pub const BENZENE: usize = 0;
pub const CUMENE: usize = 1;
pub const DIPB: usize = 2;
pub const PROPANE: usize = 3;
pub const PROPYLENE: usize = 4;

/// kg/kmol. Benzene + propylene → cumene and cumene + propylene → DIPB are
/// mass-exact with these values.
pub const MOLAR_MASS: [f64; N_SPECIES] = [78.11, 120.19, 162.27, 44.10, 42.08];

/// Normal boiling points, K.
pub const BOILING_POINT: [f64; N_SPECIES] = [353.2, 425.6, 483.0, 231.1, 225.5];

/// Heat capacity used for every stream, kJ/(kg·K).
pub const CP: f64 = 2.2;

/// One process stream in species-flow form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub mass: [f64; N_SPECIES],
    pub t: f64,
    pub p: f64,
}

impl Material {
    pub fn from_stream(v: &[f64]) -> Material {
        let f = v[0];
        let mut mass = [0.0; N_SPECIES];
        for (i, m) in mass.iter_mut().enumerate() {
            *m = f * v[3 + i];
        }
        Material { mass, t: v[1], p: v[2] }
    }

    pub fn flow(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn to_stream(&self) -> [f64; 8] {
        let f = self.flow();
        let mut out = [0.0; 8];
        out[0] = f;
        out[1] = self.t;
        out[2] = self.p;
        for i in 0..N_SPECIES {
            out[3 + i] = if f > 0.0 { self.mass[i] / f } else { 0.0 };
        }
        out
    }

    pub fn moles(&self) -> [f64; N_SPECIES] {
        let mut n = [0.0; N_SPECIES];
        for i in 0..N_SPECIES {
            n[i] = self.mass[i] / MOLAR_MASS[i];
        }
        n
    }

    fn with_mass(&self, mass: [f64; N_SPECIES]) -> Material {
        Material { mass, ..*self }
    }

    /// Composition-weighted boiling point at pressure `p` (bar).
    fn boiling_temperature(&self, p: f64) -> f64 {
        let f = self.flow();
        let base: f64 = (0..N_SPECIES).map(|i| self.mass[i] / f * BOILING_POINT[i]).sum();
        base * (1.0 + 0.06 * (p / 1.013).ln())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnitKind {
    /// Combines all inputs; flow-weighted temperature and pressure.
    Mixer { dp: f64 },
    /// Total evaporator with an outlet temperature setpoint; duty output.
    Evaporator { dp: f64, latent: f64 },
    /// Heater or cooler with an outlet temperature setpoint; duty output.
    Heater { dp: f64 },
    /// Counter-current exchanger: inputs (cold, hot), outputs (cold, hot).
    HeatExchanger { effectiveness: f64, dp: f64 },
    /// Two consecutive alkylations with Arrhenius conversions; outputs the
    /// benzene and propylene conversions.
    Reactor {
        a1: f64,
        e1: f64,
        a2: f64,
        e2: f64,
        heat1: f64,
        heat2: f64,
        retention: f64,
        dp: f64,
    },
    /// Pressure setpoint with a small Joule-Thomson cooling.
    Valve { jt: f64 },
    /// Two-phase split with temperature- and pressure-dependent volatility.
    Flash { volatility: [f64; N_SPECIES], slope: f64, t_ref: f64 },
    /// Sharp split with top recoveries shifted by reflux and reboil ratios.
    Column {
        pressure: f64,
        logit: [f64; N_SPECIES],
        reflux_gain: f64,
        reboil_gain: f64,
        reflux_ref: f64,
        reboil_ref: f64,
    },
}

/// An analytic unit bound to one flowsheet unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticUnit {
    pub name: String,
    pub kind: UnitKind,
    /// Widths of the process input streams (setpoints come last).
    pub n_inputs: usize,
}

fn param(def: &UnitDef, key: &str, default: f64) -> f64 {
    def.params.get(key).copied().unwrap_or(default)
}

fn species_params(def: &UnitDef, prefix: &str, default: [f64; N_SPECIES]) -> [f64; N_SPECIES] {
    let names = ["benzene", "cumene", "dipb", "propane", "propylene"];
    let mut out = default;
    for (i, n) in names.iter().enumerate() {
        if let Some(v) = def.params.get(&format!("{prefix}_{n}")) {
            out[i] = *v;
        }
    }
    out
}

impl AnalyticUnit {
    pub fn from_def(def: &UnitDef) -> Result<AnalyticUnit, String> {
        let kind = match def.kind.as_str() {
            "mixer" => UnitKind::Mixer { dp: param(def, "dp", 0.0) },
            "evaporator" => UnitKind::Evaporator {
                dp: param(def, "dp", 0.5),
                latent: param(def, "latent", 390.0),
            },
            "heater" | "cooler" => UnitKind::Heater { dp: param(def, "dp", 0.2) },
            "heat-exchanger" => UnitKind::HeatExchanger {
                effectiveness: param(def, "effectiveness", 0.4),
                dp: param(def, "dp", 0.3),
            },
            "reactor" => UnitKind::Reactor {
                a1: param(def, "a1", 7.2e5),
                e1: param(def, "e1", 8000.0),
                a2: param(def, "a2", 7.6e5),
                e2: param(def, "e2", 10000.0),
                heat1: param(def, "heat1", 98_000.0),
                heat2: param(def, "heat2", 90_000.0),
                retention: param(def, "retention", 0.3),
                dp: param(def, "dp", 0.5),
            },
            "valve" => UnitKind::Valve { jt: param(def, "jt", 0.3) },
            "flash" => UnitKind::Flash {
                volatility: species_params(def, "k", [0.15, 0.0177, 0.0035, 33.0, 23.0]),
                slope: param(def, "slope", 0.03),
                t_ref: param(def, "t_ref", 363.0),
            },
            "column" => UnitKind::Column {
                pressure: param(def, "pressure", 1.75),
                logit: species_params(def, "logit", [5.3, -6.2, -9.2, 6.9, 6.9]),
                reflux_gain: param(def, "reflux_gain", 1.0),
                reboil_gain: param(def, "reboil_gain", -0.5),
                reflux_ref: param(def, "reflux_ref", 0.44),
                reboil_ref: param(def, "reboil_ref", 1.2),
            },
            other => return Err(format!("unknown unit kind `{other}` for unit `{}`", def.name)),
        };
        let (need_in, need_out, need_set, need_calc): (Option<usize>, usize, usize, usize) = match &kind {
            UnitKind::Mixer { .. } => (None, 1, 0, 0),
            UnitKind::Evaporator { .. } | UnitKind::Heater { .. } => (Some(1), 1, 1, 1),
            UnitKind::HeatExchanger { .. } => (Some(2), 2, 0, 0),
            UnitKind::Reactor { .. } => (Some(1), 1, 0, 2),
            UnitKind::Valve { .. } => (Some(1), 1, 1, 0),
            UnitKind::Flash { .. } => (Some(1), 2, 0, 0),
            UnitKind::Column { .. } => (Some(1), 2, 2, 0),
        };
        let shape_ok = need_in.is_none_or(|n| n == def.inputs.len())
            && !def.inputs.is_empty()
            && def.outputs.len() == need_out
            && def.setpoints.len() == need_set
            && def.calculated.len() == need_calc;
        if !shape_ok {
            return Err(format!(
                "unit `{}` of kind `{}` has the wrong number of streams, setpoints or calculated outputs",
                def.name, def.kind
            ));
        }
        Ok(AnalyticUnit {
            name: def.name.clone(),
            kind,
            n_inputs: def.inputs.len(),
        })
    }

    /// Checks that every process stream of the unit uses the standard layout.
    pub fn check_layout(fs: &Flowsheet, unit: usize) -> Result<(), String> {
        let ok = |s: &usize| {
            let spec = fs.stream_spec(*s);
            spec.kind != StreamKind::Process || spec.variables.iter().map(String::as_str).eq(STREAM_VARIABLES)
        };
        if fs.unit_inputs(unit).iter().all(ok) && fs.unit_outputs(unit).iter().all(ok) {
            Ok(())
        } else {
            Err(format!("unit `{}` needs standard 8-variable process streams", fs.units()[unit].name))
        }
    }

    /// Evaluates one concatenated input row.
    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        let ins: Vec<Material> = (0..self.n_inputs).map(|i| Material::from_stream(&x[8 * i..8 * i + 8])).collect();
        let set = &x[8 * self.n_inputs..];
        let mut out = Vec::with_capacity(18);
        match &self.kind {
            UnitKind::Mixer { dp } => {
                let mut mass = [0.0; N_SPECIES];
                let (mut ft, mut fp) = (0.0, 0.0);
                for m in &ins {
                    for (a, b) in mass.iter_mut().zip(&m.mass) {
                        *a += b;
                    }
                    ft += m.flow() * m.t;
                    fp += m.flow() * m.p;
                }
                let total: f64 = mass.iter().sum();
                out.extend(Material { mass, t: ft / total, p: fp / total - dp }.to_stream());
            }
            UnitKind::Evaporator { dp, latent } => {
                let m = ins[0];
                let t = set[0];
                let duty = m.flow() * (CP * (t - m.t) + latent);
                out.extend(Material { t, p: m.p - dp, ..m }.to_stream());
                out.push(duty);
            }
            UnitKind::Heater { dp } => {
                let m = ins[0];
                let t = set[0];
                out.extend(Material { t, p: m.p - dp, ..m }.to_stream());
                out.push(m.flow() * CP * (t - m.t));
            }
            UnitKind::HeatExchanger { effectiveness, dp } => {
                let (c, h) = (ins[0], ins[1]);
                let (fc, fh) = (c.flow(), h.flow());
                // Q / cp; equals ε·F·ΔT when both sides carry the same flow
                let q = 2.0 * effectiveness * (h.t - c.t) * fc * fh / (fc + fh);
                out.extend(Material { t: c.t + q / fc, p: c.p - dp, ..c }.to_stream());
                out.extend(Material { t: h.t - q / fh, p: h.p - dp, ..h }.to_stream());
            }
            UnitKind::Reactor {
                a1,
                e1,
                a2,
                e2,
                heat1,
                heat2,
                retention,
                dp,
            } => {
                let m = ins[0];
                let n = m.moles();
                let x1 = 1.0 - (-a1 * (-e1 / m.t).exp()).exp();
                let x2 = 1.0 - (-a2 * (-e2 / m.t).exp()).exp();
                let (nb, npe, nc) = (n[BENZENE], n[PROPYLENE], n[CUMENE]);
                let xi1 = x1 * nb * npe / (nb + npe);
                let (nb1, npe1, nc1) = (nb - xi1, npe - xi1, nc + xi1);
                let xi2 = x2 * npe1 * nc1 / (nc1 + nb1);
                let mut moles = n;
                moles[BENZENE] = nb1;
                moles[PROPYLENE] = npe1 - xi2;
                moles[CUMENE] = nc1 - xi2;
                moles[DIPB] += xi2;
                let mut mass = m.mass;
                for i in [BENZENE, CUMENE, DIPB, PROPYLENE] {
                    mass[i] = moles[i] * MOLAR_MASS[i];
                }
                let dt = retention * (xi1 * heat1 + xi2 * heat2) / (m.flow() * CP);
                let product = Material {
                    mass,
                    t: m.t + dt,
                    p: m.p - dp,
                };
                out.extend(product.to_stream());
                out.push((m.mass[BENZENE] - mass[BENZENE]) / m.mass[BENZENE]);
                out.push((m.mass[PROPYLENE] - mass[PROPYLENE]) / m.mass[PROPYLENE]);
            }
            UnitKind::Valve { jt } => {
                let m = ins[0];
                let p = set[0];
                out.extend(Material { t: m.t - jt * (m.p - p), p, ..m }.to_stream());
            }
            UnitKind::Flash { volatility, slope, t_ref } => {
                let m = ins[0];
                let mut vap = [0.0; N_SPECIES];
                let mut liq = [0.0; N_SPECIES];
                for i in 0..N_SPECIES {
                    let k = volatility[i] * (slope * (m.t - t_ref)).exp() / m.p;
                    let beta = k / (1.0 + k);
                    vap[i] = beta * m.mass[i];
                    liq[i] = m.mass[i] - vap[i];
                }
                out.extend(m.with_mass(vap).to_stream());
                out.extend(m.with_mass(liq).to_stream());
            }
            UnitKind::Column {
                pressure,
                logit,
                reflux_gain,
                reboil_gain,
                reflux_ref,
                reboil_ref,
            } => {
                let m = ins[0];
                let (reflux, reboil) = (set[0], set[1]);
                let shift = reflux_gain * (reflux - reflux_ref) + reboil_gain * (reboil - reboil_ref);
                let mut top = [0.0; N_SPECIES];
                let mut bottom = [0.0; N_SPECIES];
                for i in 0..N_SPECIES {
                    // lights move up and heavies down as reflux grows
                    let direction = if logit[i] > 0.0 { 1.0 } else { -1.0 };
                    let r = sigmoid(logit[i] + direction * shift);
                    top[i] = r * m.mass[i];
                    bottom[i] = m.mass[i] - top[i];
                }
                let mut t_top = Material { mass: top, t: 0.0, p: *pressure };
                t_top.t = t_top.boiling_temperature(*pressure);
                let mut t_bottom = Material { mass: bottom, t: 0.0, p: *pressure };
                t_bottom.t = t_bottom.boiling_temperature(*pressure) + 5.0;
                out.extend(t_top.to_stream());
                out.extend(t_bottom.to_stream());
            }
        }
        out
    }
}

impl UnitModel for AnalyticUnit {
    fn eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, String> {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| self.eval_row(&r.to_vec())).collect();
        let width = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((x.nrows(), width), flat).map_err(|e| e.to_string())
    }
}

/// Total mass flow in minus total mass flow out, over process streams.
pub fn mass_imbalance(fs: &Flowsheet, unit: usize, values: &BTreeMap<usize, Vec<f64>>) -> f64 {
    let total = |streams: &[usize]| -> f64 {
        streams
            .iter()
            .filter(|&&s| fs.stream_spec(s).kind == StreamKind::Process)
            .map(|s| values[s][0])
            .sum()
    };
    total(fs.unit_inputs(unit)) - total(fs.unit_outputs(unit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn def(kind: &str, inputs: usize, outputs: usize, set: usize, calc: usize) -> UnitDef {
        UnitDef {
            name: "U".into(),
            kind: kind.into(),
            inputs: (0..inputs).map(|i| format!("in{i}")).collect(),
            outputs: (0..outputs).map(|i| format!("out{i}")).collect(),
            setpoints: (0..set).map(|i| format!("s{i}")).collect(),
            calculated: (0..calc).map(|i| format!("c{i}")).collect(),
            params: BTreeMap::new(),
        }
    }

    fn stream(f: f64, t: f64, p: f64, w: [f64; 5]) -> Vec<f64> {
        let mut v = vec![f, t, p];
        v.extend(w);
        v
    }

    fn reactor_feed() -> Vec<f64> {
        stream(7.5, 633.0, 24.0, [0.62, 0.01, 0.0, 0.02, 0.35])
    }

    fn assert_simplex(s: &[f64]) {
        let sum: f64 = s[3..8].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        assert!(s[3..8].iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn reactor_conserves_mass_and_atoms() {
        let u = AnalyticUnit::from_def(&def("reactor", 1, 1, 0, 2)).unwrap();
        let x = reactor_feed();
        let y = u.eval_row(&x);
        assert!((y[0] - x[0]).abs() < 1e-12);
        assert_simplex(&y);
        // carbon-ring count: benzene + cumene + dipb moles is conserved
        let rings = |s: &[f64]| (0..3).map(|i| s[0] * s[3 + i] / MOLAR_MASS[i]).sum::<f64>();
        assert!((rings(&x) - rings(&y)).abs() < 1e-14);
        // conversions recomputed from species flows
        let conv_b = (x[0] * x[3] - y[0] * y[3]) / (x[0] * x[3]);
        let conv_pe = (x[0] * x[7] - y[0] * y[7]) / (x[0] * x[7]);
        assert!((y[8] - conv_b).abs() < 1e-12);
        assert!((y[9] - conv_pe).abs() < 1e-12);
        assert!(y[1] > x[1], "exothermic");
        assert!(y[9] > 0.2 && y[9] < 1.0, "propylene conversion {}", y[9]);
    }

    #[test]
    fn exchanger_balances_heat() {
        let u = AnalyticUnit::from_def(&def("heat-exchanger", 2, 2, 0, 0)).unwrap();
        let cold = stream(7.0, 480.0, 25.0, [0.6, 0.0, 0.0, 0.05, 0.35]);
        let hot = stream(7.0, 680.0, 23.0, [0.4, 0.3, 0.01, 0.05, 0.24]);
        let x: Vec<f64> = cold.iter().chain(&hot).copied().collect();
        let y = u.eval_row(&x);
        let gained = y[0] * (y[1] - cold[1]);
        let lost = y[8] * (hot[1] - y[9]);
        assert!((gained - lost).abs() < 1e-9);
        assert!((y[1] - (480.0 + 0.4 * 200.0)).abs() < 1e-9);
    }

    #[test]
    fn flash_and_column_split_mass() {
        let f = AnalyticUnit::from_def(&def("flash", 1, 2, 0, 0)).unwrap();
        let x = stream(7.5, 363.0, 1.75, [0.45, 0.35, 0.02, 0.03, 0.15]);
        let y = f.eval_row(&x);
        assert!((y[0] + y[8] - x[0]).abs() < 1e-12);
        assert_simplex(&y[0..8]);
        assert_simplex(&y[8..16]);
        assert!(y[6] > x[6], "propane goes to the vapor");

        let c = AnalyticUnit::from_def(&def("column", 1, 2, 2, 0)).unwrap();
        let mut x = y[8..16].to_vec();
        x.extend([0.44, 1.2]);
        let z = c.eval_row(&x);
        assert!((z[0] + z[8] - y[8]).abs() < 1e-12);
        assert!(z[3] > 0.9, "benzene-rich top");
        assert!(z[8 + 4] > 0.9, "cumene-rich bottom");
    }

    #[test]
    fn mixer_weights_temperature_by_flow() {
        let m = AnalyticUnit::from_def(&def("mixer", 2, 1, 0, 0)).unwrap();
        let a = stream(1.0, 300.0, 20.0, [1.0, 0.0, 0.0, 0.0, 0.0]);
        let b = stream(3.0, 400.0, 10.0, [0.0, 0.0, 0.0, 0.05, 0.95]);
        let x: Vec<f64> = a.iter().chain(&b).copied().collect();
        let y = m.eval_row(&x);
        assert!((y[0] - 4.0).abs() < 1e-12);
        assert!((y[1] - 375.0).abs() < 1e-12);
        assert!((y[2] - 12.5).abs() < 1e-12);
        assert_simplex(&y);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(AnalyticUnit::from_def(&def("reactor", 1, 1, 0, 0)).is_err());
        assert!(AnalyticUnit::from_def(&def("warp-drive", 1, 1, 0, 0)).is_err());
    }
}
