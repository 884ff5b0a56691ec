//! Steady-state datasets: generation, per-unit tables and CSV persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{residual_inf, response, simplex_violation, OracleConfig, Plant, PlantError, Result};
use crate::flowsheet::{Flowsheet, SweepState, VariedVariable};
use crate::nn::NormStats;

/// Smallest dataset accepted by [`generate_dataset`].
pub const MIN_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Sidecar metadata written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub plant: String,
    pub seed: u64,
    pub points_requested: usize,
    /// Indices of requested points whose ground-truth solve failed.
    pub skipped: Vec<usize>,
    pub vary: Vec<VariedVariable>,
    pub units: Vec<String>,
    pub tears: Vec<String>,
    pub oracle: OracleConfig,
    /// Per-column statistics over the training rows.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// One complete steady-state snapshot per row, all streams included.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub data: Array2<f64>,
    pub split: Vec<Split>,
    pub meta: DatasetMeta,
}

/// Row layout of `fs`: every variable of every stream in stream order.
pub fn snapshot_columns(fs: &Flowsheet) -> Vec<String> {
    fs.streams().iter().flat_map(|s| s.labels()).collect()
}

fn snapshot_row(fs: &Flowsheet, state: &SweepState<Array2<f64>>) -> Result<Vec<f64>> {
    let mut row = Vec::new();
    for s in 0..fs.streams().len() {
        row.extend(state.get(fs, s)?.row(0).iter().copied());
    }
    Ok(row)
}

/// Value drawn for point `i`: the varied variable cycles through `plan`.
pub fn point_override(plan: &[VariedVariable], seed: u64, i: usize) -> (String, f64) {
    let v = &plan[i % plan.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let u: f64 = rng.gen();
    (v.label.clone(), v.from + (v.to - v.from) * u)
}

/// Solves the plant at `n_points` one-at-a-time variations of `plan` and
/// splits the rows 90/10 into train and test.
pub fn generate_dataset(
    plant: &Plant,
    plan: &[VariedVariable],
    n_points: usize,
    seed: u64,
    oracle: &OracleConfig,
) -> Result<Dataset> {
    if n_points < MIN_POINTS {
        return Err(PlantError::Dataset(format!("need at least {MIN_POINTS} points, got {n_points}")));
    }
    if plan.is_empty() {
        return Err(PlantError::Dataset("variation plan is empty".into()));
    }
    for v in plan {
        if !(v.from.is_finite() && v.to.is_finite() && v.from <= v.to) {
            return Err(PlantError::Dataset(format!("bad range for `{}`", v.label)));
        }
        plant.sources(&BTreeMap::from([(v.label.clone(), v.from)]))?;
    }
    let fs = &plant.fs;
    let results: Vec<Result<Vec<f64>>> = (0..n_points)
        .into_par_iter()
        .map(|i| {
            let (label, value) = point_override(plan, seed, i);
            let sol = plant.oracle(&BTreeMap::from([(label, value)]), oracle)?;
            snapshot_row(fs, &sol.state)
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("point {i} skipped: {e}");
                skipped.push(i);
            }
        }
    }
    if skipped.len() * 10 > n_points {
        return Err(PlantError::TooManyFailures {
            skipped: skipped.len(),
            requested: n_points,
        });
    }
    let columns = snapshot_columns(fs);
    let n = rows.len();
    let data = Array2::from_shape_vec((n, columns.len()), rows.concat()).expect("rows share the layout");
    let split = split_rows(n, seed);
    let mut meta = DatasetMeta {
        plant: fs.def.name.clone(),
        seed,
        points_requested: n_points,
        skipped,
        vary: plan.to_vec(),
        units: fs.units().iter().map(|u| u.name.clone()).collect(),
        tears: fs.tear_names().into_iter().map(String::from).collect(),
        oracle: *oracle,
        norm_mean: vec![],
        norm_std: vec![],
    };
    let stats = train_stats(&data, &split);
    meta.norm_mean = stats.mean;
    meta.norm_std = stats.std;
    Ok(Dataset {
        columns,
        data,
        split,
        meta,
    })
}

/// Marks `round(n / 10)` rows as test, chosen by a seeded shuffle.
pub fn split_rows(n: usize, seed: u64) -> Vec<Split> {
    let n_test = (n as f64 * 0.1).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let mut split = vec![Split::Train; n];
    for &i in &idx[..n_test] {
        split[i] = Split::Test;
    }
    split
}

fn train_stats(data: &Array2<f64>, split: &[Split]) -> NormStats {
    let rows: Vec<usize> = (0..split.len()).filter(|&i| split[i] == Split::Train).collect();
    NormStats::from_data(data.select(Axis(0), &rows).view())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        self.rows(Split::Train)
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.rows(Split::Test)
    }

    pub fn column(&self, label: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| PlantError::Dataset(format!("no column `{label}`")))
    }

    fn columns_of(&self, labels: impl Iterator<Item = String>) -> Result<Vec<usize>> {
        labels.map(|l| self.column(&l)).collect()
    }

    /// Values of `stream` for the given rows.
    pub fn stream_block(&self, fs: &Flowsheet, stream: usize, rows: &[usize]) -> Result<Array2<f64>> {
        let cols = self.columns_of(fs.stream_spec(stream).labels())?;
        Ok(self.data.select(Axis(0), rows).select(Axis(1), &cols))
    }

    /// Concatenated values of several streams.
    pub fn streams_block(&self, fs: &Flowsheet, streams: &[usize], rows: &[usize]) -> Result<Array2<f64>> {
        let mut cols = Vec::new();
        for &s in streams {
            cols.extend(self.columns_of(fs.stream_spec(s).labels())?);
        }
        Ok(self.data.select(Axis(0), rows).select(Axis(1), &cols))
    }

    /// Input and output matrices of one unit, extras included.
    pub fn unit_table(&self, fs: &Flowsheet, unit: usize, rows: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((
            self.streams_block(fs, fs.unit_inputs(unit), rows)?,
            self.streams_block(fs, fs.unit_outputs(unit), rows)?,
        ))
    }

    /// Training statistics of the given labels.
    pub fn stats(&self, labels: impl Iterator<Item = String>) -> Result<NormStats> {
        let cols = self.columns_of(labels)?;
        Ok(NormStats {
            mean: cols.iter().map(|&c| self.meta.norm_mean[c]).collect(),
            std: cols.iter().map(|&c| self.meta.norm_std[c]).collect(),
        })
    }

    /// Training statistics of a set of streams, concatenated.
    pub fn stream_stats(&self, fs: &Flowsheet, streams: &[usize]) -> Result<NormStats> {
        self.stats(streams.iter().flat_map(|&s| fs.stream_spec(s).labels()))
    }

    /// Feed and setpoint values of the given rows, batched per source.
    pub fn sources(&self, fs: &Flowsheet, rows: &[usize]) -> Result<Vec<(usize, Array2<f64>)>> {
        fs.sources()
            .into_iter()
            .map(|s| Ok((s, self.stream_block(fs, s, rows)?)))
            .collect()
    }

    /// Training mean of the concatenated tear variables.
    pub fn tear_mean(&self, fs: &Flowsheet) -> Result<Vec<f64>> {
        Ok(self.stats(fs.tear_labels().into_iter())?.mean)
    }

    /// Every stream of one row as a sweep state.
    pub fn state(&self, fs: &Flowsheet, row: usize) -> Result<SweepState<Array2<f64>>> {
        let mut state = SweepState::new(fs);
        for s in 0..fs.streams().len() {
            state.set(s, self.stream_block(fs, s, &[row])?);
        }
        Ok(state)
    }

    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    /// Writes the CSV and its `.meta.json` sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = self.columns.clone();
        header.push("split".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.data.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.split[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| PlantError::Dataset(e.to_string()))?;
        std::fs::write(Self::meta_path(path), meta + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let meta_text = std::fs::read_to_string(Self::meta_path(path))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| PlantError::Dataset(e.to_string()))?;
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header.last().map(String::as_str) != Some("split") {
            return Err(PlantError::Dataset("last column must be `split`".into()));
        }
        let columns = header[..header.len() - 1].to_vec();
        let mut flat = Vec::new();
        let mut split = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != header.len() {
                return Err(PlantError::Dataset(format!("row {i} has {} fields", rec.len())));
            }
            for f in rec.iter().take(columns.len()) {
                flat.push(f.parse::<f64>().map_err(|e| PlantError::Dataset(format!("row {i}: {e}")))?);
            }
            split.push(match &rec[columns.len()] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(PlantError::Dataset(format!("row {i}: bad split `{other}`"))),
            });
        }
        if meta.norm_mean.len() != columns.len() || meta.norm_std.len() != columns.len() {
            return Err(PlantError::Dataset("metadata statistics do not match the columns".into()));
        }
        let data = Array2::from_shape_vec((split.len(), columns.len()), flat).expect("checked widths");
        Ok(Dataset {
            columns,
            data,
            split,
            meta,
        })
    }
}

fn csv_err(e: csv::Error) -> PlantError {
    PlantError::Dataset(e.to_string())
}

/// Worst violations found in one dataset row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowIntegrity {
    pub mass_imbalance: f64,
    pub simplex: f64,
    /// `max |f(x) − x|` at the stored tear values.
    pub residual: f64,
}

/// Re-checks one row against the plant it came from.
pub fn row_integrity(plant: &Plant, ds: &Dataset, row: usize) -> Result<RowIntegrity> {
    let fs = &plant.fs;
    let state = ds.state(fs, row)?;
    let x = ds.streams_block(fs, fs.tears(), &[row])?.row(0).to_vec();
    let (fx, _) = response(fs, &plant.models(), &ds.sources(fs, &[row])?, &x)?;
    Ok(RowIntegrity {
        mass_imbalance: plant.mass_imbalance(&state, 0),
        simplex: simplex_violation(fs, &state, 0),
        residual: residual_inf(&x, &fx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plantgen::units::{BENZENE, PROPYLENE};
    use sha2::{Digest, Sha256};

    fn plan(p: &Plant) -> Vec<VariedVariable> {
        p.fs.def.vary.clone()
    }

    fn file_hash(path: &Path) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(std::fs::read(path).unwrap());
        h.update(std::fs::read(Dataset::meta_path(path)).unwrap());
        h.finalize().to_vec()
    }

    #[test]
    fn fifty_points_split_45_5_and_rows_are_consistent() {
        let p = Plant::builtin();
        let ds = generate_dataset(&p, &plan(&p), 50, 7, &OracleConfig::default()).unwrap();
        assert_eq!(ds.len(), 50);
        assert_eq!((ds.train_rows().len(), ds.test_rows().len()), (45, 5));
        for r in 0..ds.len() {
            let q = row_integrity(&p, &ds, r).unwrap();
            assert!(q.mass_imbalance < 1e-9, "{q:?}");
            assert!(q.simplex < 1e-12, "{q:?}");
            assert!(q.residual < 1e-10, "{q:?}");
        }
        // reactor extras agree with the inlet and outlet compositions
        let c100 = p.fs.unit("C100").unwrap();
        let (x, y) = ds.unit_table(&p.fs, c100, &[0, 1, 2]).unwrap();
        assert_eq!(x.ncols(), 8);
        assert_eq!(y.ncols(), 10);
        for r in 0..3 {
            for (sp, col) in [(BENZENE, 8), (PROPYLENE, 9)] {
                let mass_in = x[[r, 0]] * x[[r, 3 + sp]];
                let mass_out = y[[r, 0]] * y[[r, 3 + sp]];
                let want = (mass_in - mass_out) / mass_in;
                assert!((y[[r, col]] - want).abs() < 1e-12, "{} vs {want}", y[[r, col]]);
            }
        }
    }

    #[test]
    fn generation_is_hash_stable_and_round_trips() {
        let p = Plant::builtin();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let ds = generate_dataset(&p, &plan(&p), 50, 11, &OracleConfig::default()).unwrap();
        ds.write(&a).unwrap();
        generate_dataset(&p, &plan(&p), 50, 11, &OracleConfig::default()).unwrap().write(&b).unwrap();
        assert_eq!(file_hash(&a), file_hash(&b));
        let back = Dataset::read(&a).unwrap();
        assert_eq!(back, ds);
        let other = generate_dataset(&p, &plan(&p), 50, 12, &OracleConfig::default()).unwrap();
        assert_ne!(other.data, ds.data);
    }

    #[test]
    fn collapsed_ranges_give_identical_rows() {
        let p = Plant::builtin();
        let nominal = plan(&p)
            .into_iter()
            .map(|v| {
                let x = p.fs.def.nominal[&v.label];
                VariedVariable { from: x, to: x, ..v }
            })
            .collect::<Vec<_>>();
        let ds = generate_dataset(&p, &nominal, 50, 3, &OracleConfig::default()).unwrap();
        for r in 1..ds.len() {
            assert_eq!(ds.data.row(r), ds.data.row(0));
        }
    }

    #[test]
    fn unit_table_widths_follow_the_streams() {
        let p = Plant::builtin();
        let ds = generate_dataset(&p, &plan(&p), 50, 1, &OracleConfig::default()).unwrap();
        let m01 = p.fs.unit("M01").unwrap();
        let (x, y) = ds.unit_table(&p.fs, m01, &[4]).unwrap();
        assert_eq!((x.ncols(), y.ncols()), (24, 8));
        let state = ds.state(&p.fs, 4).unwrap();
        let feed = state.get(&p.fs, p.fs.unit_inputs(m01)[0]).unwrap();
        assert_eq!(x.slice(ndarray::s![.., ..8]), feed.view());
        let tear = ds.tear_mean(&p.fs).unwrap();
        assert_eq!(tear.len(), 16);
    }

    #[test]
    fn bad_requests_are_rejected() {
        let p = Plant::builtin();
        let cfg = OracleConfig::default();
        assert!(generate_dataset(&p, &plan(&p), 49, 0, &cfg).is_err());
        let bad = vec![VariedVariable {
            label: "recycle.flow".into(),
            from: 1.0,
            to: 2.0,
        }];
        assert!(generate_dataset(&p, &bad, 50, 0, &cfg).is_err());
    }

    #[test]
    fn points_cycle_through_the_plan() {
        let p = Plant::builtin();
        let plan = plan(&p);
        for i in 0..12 {
            let (label, v) = point_override(&plan, 5, i);
            let var = &plan[i % plan.len()];
            assert_eq!(label, var.label);
            assert!(v >= var.from && v <= var.to);
        }
        assert_ne!(point_override(&plan, 5, 0), point_override(&plan, 5, 6));
    }
}
