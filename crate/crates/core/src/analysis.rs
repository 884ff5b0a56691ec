//! Phase portraits of the tear update field and their alignment with the
//! true fixed point.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solvers::FixedPointMap;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("portrait: {0}")]
    Config(String),
    #[error("portrait has no valid arrows")]
    NoArrows,
    #[error("every arrow is zero; alignment is undefined")]
    ZeroField,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Which vector is drawn at each grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    /// `f(x) − x`, the direct-substitution step.
    #[default]
    Update,
    /// Negative gradient of `½‖(f(x) − x)/σ‖²`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitAxis {
    pub label: String,
    pub unit: String,
    /// Position of the variable in the tear vector.
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    /// Scale used for cosines; the tear solver's σ.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    /// `None` where the model could not be evaluated.
    pub arrow: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePortrait {
    pub axes: [PortraitAxis; 2],
    pub resolution: usize,
    pub field: Field,
    /// Row-major over `y`, then `x`.
    pub points: Vec<GridPoint>,
    pub fixed_point: [f64; 2],
    pub data: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortraitConfig {
    pub resolution: usize,
    /// Fractional widening of the data range.
    pub margin: f64,
    pub field: Field,
}

impl Default for PortraitConfig {
    fn default() -> Self {
        PortraitConfig {
            resolution: 20,
            margin: 0.2,
            field: Field::Update,
        }
    }
}

/// Physical unit of a stream variable, inferred from its name.
pub fn variable_unit(variable: &str) -> &'static str {
    match variable {
        "T" | "T_target" => "K",
        "P" | "P_target" => "bar",
        "flow" => "kg/s",
        v if v.starts_with("w_") => "kg/kg",
        _ => "-",
    }
}

fn grid_bounds(values: impl Iterator<Item = f64>, fixed: f64, margin: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (fixed, fixed);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.5 * margin * span } else { 0.5 * margin * fixed.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn linspace(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

fn pair_gradient(map: &dyn FixedPointMap, x: &[f64], fx: &[f64], pair: [usize; 2], scale: &[f64]) -> std::result::Result<[f64; 2], String> {
    let jac = map.jacobian(x)?;
    let mut g = [0.0; 2];
    for (slot, &j) in pair.iter().enumerate() {
        for k in 0..x.len() {
            let dr = jac[(k, j)] - if k == j { 1.0 } else { 0.0 };
            g[slot] -= (fx[k] - x[k]) / (scale[k] * scale[k]) * dr;
        }
    }
    Ok(g)
}

/// Samples the update field of `map` on a grid over the tear variables
/// `pair`, holding the others at `truth`. `data` holds observed values of the
/// pair and sets the grid range.
pub fn phase_portrait(
    map: &dyn FixedPointMap,
    truth: &[f64],
    pair: [usize; 2],
    labels: [&str; 2],
    data: Vec<[f64; 2]>,
    cfg: &PortraitConfig,
) -> Result<PhasePortrait> {
    let n = map.dim();
    if truth.len() != n {
        return Err(AnalysisError::Config(format!("truth has {} values for {n} tear variables", truth.len())));
    }
    if pair[0] == pair[1] || pair.iter().any(|&i| i >= n) {
        return Err(AnalysisError::Config(format!("invalid variable pair {pair:?} for {n} tear variables")));
    }
    if cfg.resolution < 2 {
        return Err(AnalysisError::Config("resolution must be at least 2".into()));
    }
    if !(cfg.margin >= 0.0) {
        return Err(AnalysisError::Config("margin must be non-negative".into()));
    }
    let scale = map.scale();
    let axes = [0, 1].map(|a| {
        let (lo, hi) = grid_bounds(data.iter().map(|d| d[a]), truth[pair[a]], cfg.margin);
        let variable = labels[a].rsplit('.').next().unwrap_or(labels[a]);
        PortraitAxis {
            label: labels[a].to_string(),
            unit: variable_unit(variable).to_string(),
            index: pair[a],
            lo,
            hi,
            scale: scale[pair[a]],
        }
    });
    let r = cfg.resolution;
    let mut points = Vec::with_capacity(r * r);
    for iy in 0..r {
        for ix in 0..r {
            let px = linspace(axes[0].lo, axes[0].hi, r, ix);
            let py = linspace(axes[1].lo, axes[1].hi, r, iy);
            let mut x = truth.to_vec();
            x[pair[0]] = px;
            x[pair[1]] = py;
            let arrow = map.eval(&x).ok().and_then(|fx| {
                let a = match cfg.field {
                    Field::Update => Ok([fx[pair[0]] - px, fx[pair[1]] - py]),
                    Field::Gradient => pair_gradient(map, &x, &fx, pair, &scale),
                };
                a.ok().filter(|a| a.iter().all(|v| v.is_finite()))
            });
            points.push(GridPoint { x: px, y: py, arrow });
        }
    }
    Ok(PhasePortrait {
        axes,
        resolution: r,
        field: cfg.field,
        points,
        fixed_point: [truth[pair[0]], truth[pair[1]]],
        data,
    })
}

impl PhasePortrait {
    /// Grid points closer than this scaled distance to the fixed point are
    /// left out of the alignment metric: half the smaller grid step.
    pub fn exclusion_radius(&self) -> f64 {
        let step = |a: &PortraitAxis| (a.hi - a.lo) / (self.resolution - 1) as f64 / a.scale;
        0.5 * step(&self.axes[0]).min(step(&self.axes[1]))
    }

    /// Scaled arrows and offsets to `fixed_point` at every valid grid point.
    fn scaled(&self, fixed_point: [f64; 2]) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let (sx, sy) = (self.axes[0].scale, self.axes[1].scale);
        self.points.iter().filter_map(move |p| {
            p.arrow.map(|a| {
                (
                    [a[0] / sx, a[1] / sy],
                    [(fixed_point[0] - p.x) / sx, (fixed_point[1] - p.y) / sy],
                )
            })
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,dx,dy\n");
        for p in &self.points {
            match p.arrow {
                Some([dx, dy]) => writeln!(out, "{},{},{dx},{dy}", p.x, p.y),
                None => writeln!(out, "{},{},,", p.x, p.y),
            }
            .expect("write to string");
        }
        out
    }

    /// Self-contained SVG: unit-length arrows on the grid, data points in
    /// grey and the fixed point in red.
    pub fn to_svg(&self, title: &str) -> String {
        const SIZE: f64 = 560.0;
        const PAD: f64 = 70.0;
        let [ax, ay] = &self.axes;
        let px = |x: f64| PAD + (x - ax.lo) / (ax.hi - ax.lo) * SIZE;
        let py = |y: f64| PAD + SIZE - (y - ay.lo) / (ay.hi - ay.lo) * SIZE;
        let cell = SIZE / (self.resolution - 1) as f64;
        let total = SIZE + 2.0 * PAD;
        let mut s = String::new();
        let mut w = |line: String| {
            s.push_str(&line);
            s.push('\n');
        };
        w(format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="13">"#
        ));
        w(r#"<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="black"/></marker></defs>"#.into());
        w(format!(r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#));
        w(format!(r#"<text x="{}" y="{}" text-anchor="middle" font-size="15">{}</text>"#, total / 2.0, PAD / 2.0, xml_escape(title)));
        w(format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{} [{}]</text>"#,
            total / 2.0,
            total - 20.0,
            xml_escape(&ax.label),
            xml_escape(&ax.unit)
        ));
        w(format!(
            r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{} [{}]</text>"#,
            total / 2.0,
            total / 2.0,
            xml_escape(&ay.label),
            xml_escape(&ay.unit)
        ));
        for (i, (lo, hi)) in [(ax.lo, ax.hi), (ay.lo, ay.hi)].into_iter().enumerate() {
            for t in 0..=4 {
                let v = lo + (hi - lo) * t as f64 / 4.0;
                if i == 0 {
                    w(format!(r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(v), PAD + SIZE + 18.0, tick(v)));
                } else {
                    w(format!(r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, PAD - 6.0, py(v) + 4.0, tick(v)));
                }
            }
        }
        for d in &self.data {
            w(format!(r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#999"/>"##, px(d[0]), py(d[1])));
        }
        for p in &self.points {
            let (x0, y0) = (px(p.x), py(p.y));
            match p.arrow {
                Some(a) => {
                    // direction in scaled coordinates, drawn at fixed length
                    let (dx, dy) = (a[0] / ax.scale, a[1] / ay.scale);
                    let norm = (dx * dx + dy * dy).sqrt();
                    if norm == 0.0 {
                        w(format!(r#"<circle cx="{x0:.2}" cy="{y0:.2}" r="1.5" fill="black"/>"#));
                        continue;
                    }
                    let (ux, uy) = (
                        dx / norm / (ax.hi - ax.lo) * ax.scale,
                        dy / norm / (ay.hi - ay.lo) * ay.scale,
                    );
                    let un = (ux * ux + uy * uy).sqrt();
                    let len = 0.4 * cell;
                    let (ex, ey) = (x0 + len * ux / un, y0 - len * uy / un);
                    w(format!(
                        r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{ex:.2}" y2="{ey:.2}" stroke="black" marker-end="url(#head)"/>"#
                    ));
                }
                None => w(format!(r#"<text x="{x0:.2}" y="{:.2}" text-anchor="middle" fill="gray">×</text>"#, y0 + 4.0)),
            }
        }
        let [fx, fy] = self.fixed_point;
        w(format!(r#"<circle cx="{:.2}" cy="{:.2}" r="6" fill="red" stroke="black"/>"#, px(fx), py(fy)));
        w("</svg>".into());
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean cosine between each arrow and the direction to `fixed_point`, in
/// scaled coordinates. Points within [`PhasePortrait::exclusion_radius`] of
/// the fixed point and zero arrows are skipped.
pub fn alignment_metric(portrait: &PhasePortrait, fixed_point: [f64; 2]) -> Result<f64> {
    let radius = portrait.exclusion_radius();
    let (mut sum, mut count, mut valid) = (0.0, 0usize, 0usize);
    for (a, d) in portrait.scaled(fixed_point) {
        valid += 1;
        let dn = d[0].hypot(d[1]);
        let an = a[0].hypot(a[1]);
        if dn < radius || an == 0.0 {
            continue;
        }
        sum += (a[0] * d[0] + a[1] * d[1]) / (an * dn);
        count += 1;
    }
    if valid == 0 {
        return Err(AnalysisError::NoArrows);
    }
    if count == 0 {
        return Err(AnalysisError::ZeroField);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::AffineMap;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine(a: f64) -> AffineMap {
        AffineMap {
            a: DMatrix::from_diagonal_element(2, 2, a),
            b: DVector::zeros(2),
        }
    }

    fn box_data() -> Vec<[f64; 2]> {
        vec![[-1.0, -2.0], [1.0, 2.0]]
    }

    fn portrait(map: &dyn FixedPointMap, field: Field) -> PhasePortrait {
        let cfg = PortraitConfig { field, ..Default::default() };
        phase_portrait(map, &[0.0, 0.0], [0, 1], ["s.T", "s.w_a"], box_data(), &cfg).unwrap()
    }

    #[test]
    fn contraction_points_at_the_origin() {
        let p = portrait(&affine(0.5), Field::Update);
        assert_eq!(p.points.len(), 400);
        for g in &p.points {
            let a = g.arrow.unwrap();
            assert!((a[0] + 0.5 * g.x).abs() < 1e-15 && (a[1] + 0.5 * g.y).abs() < 1e-15);
        }
        assert!((alignment_metric(&p, [0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        let g = portrait(&affine(0.5), Field::Gradient);
        assert!((alignment_metric(&g, [0.0, 0.0]).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn expansion_points_away() {
        let p = portrait(&affine(2.0), Field::Update);
        assert!((alignment_metric(&p, [0.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_has_zero_arrows() {
        let p = portrait(&affine(1.0), Field::Update);
        assert!(p.points.iter().all(|g| g.arrow == Some([0.0, 0.0])));
        assert_eq!(alignment_metric(&p, [0.0, 0.0]), Err(AnalysisError::ZeroField));
    }

    #[test]
    fn grid_covers_widened_data_range() {
        let p = portrait(&affine(0.5), Field::Update);
        assert!((p.axes[0].lo + 1.2).abs() < 1e-12 && (p.axes[0].hi - 1.2).abs() < 1e-12);
        assert!((p.axes[1].lo + 2.4).abs() < 1e-12 && (p.axes[1].hi - 2.4).abs() < 1e-12);
        assert_eq!(p.axes[0].unit, "K");
        assert_eq!(p.axes[1].unit, "kg/kg");
    }

    #[test]
    fn random_field_is_unaligned() {
        let mut p = portrait(&affine(0.5), Field::Update);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in &mut p.points {
            let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            g.arrow = Some([t.cos(), t.sin()]);
        }
        let m = alignment_metric(&p, [0.0, 0.0]).unwrap();
        assert!(m.abs() < 0.1, "{m}");
    }

    #[test]
    fn failed_points_are_missing() {
        struct Hole;
        impl FixedPointMap for Hole {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, x: &[f64]) -> std::result::Result<Vec<f64>, String> {
                if x[0] > 0.0 {
                    Err("outside".into())
                } else {
                    Ok(vec![0.5 * x[0], 0.5 * x[1]])
                }
            }
        }
        let p = portrait(&Hole, Field::Update);
        let missing = p.points.iter().filter(|g| g.arrow.is_none()).count();
        assert_eq!(missing, 200);
        assert!((alignment_metric(&p, [0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(p.to_csv().lines().any(|l| l.ends_with(",,")));
    }

    #[test]
    fn outputs_are_deterministic() {
        let a = portrait(&affine(0.3), Field::Update);
        let b = portrait(&affine(0.3), Field::Update);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_svg("t"), b.to_svg("t"));
        let svg = a.to_svg("a < b");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(a.to_csv().lines().count(), 401);
    }

    #[test]
    fn rejects_bad_requests() {
        let m = affine(0.5);
        let cfg = PortraitConfig::default();
        assert!(phase_portrait(&m, &[0.0], [0, 1], ["a", "b"], box_data(), &cfg).is_err());
        assert!(phase_portrait(&m, &[0.0, 0.0], [1, 1], ["a", "b"], box_data(), &cfg).is_err());
        let one = PortraitConfig { resolution: 1, ..cfg };
        assert!(phase_portrait(&m, &[0.0, 0.0], [0, 1], ["a", "b"], box_data(), &one).is_err());
    }

    proptest! {
        #[test]
        fn alignment_ignores_uniform_rescaling(seed in 0u64..1000, k in 1e-3f64..1e3) {
            let mut p = portrait(&affine(0.5), Field::Update);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for g in &mut p.points {
                g.arrow = Some([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            }
            let a = alignment_metric(&p, [0.1, -0.3]).unwrap();
            for g in &mut p.points {
                g.arrow = g.arrow.map(|v| [k * v[0], k * v[1]]);
            }
            let b = alignment_metric(&p, [0.1, -0.3]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
