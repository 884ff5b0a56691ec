//! Experiment configuration, output layout and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{phase_portrait, AnalysisError, PhasePortrait, PortraitConfig};
use crate::nn::{MlpSurrogate, NnError};
use crate::plantgen::{Dataset, OracleConfig, Plant, PlantError, PlantOptions};
use crate::solvers::{Method, SolveConfig, SolveError};
use crate::training::{tear_scale, FinetuneConfig, ModelSet, TrainError, UnitTrainConfig};

pub const SEED_ENV: &str = "FLOWTUNE_SEED";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact `{}`: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Missing { .. } => 3,
            ExperimentError::Numerical(_) => 4,
            ExperimentError::Io(_) => 1,
        }
    }
}

impl From<PlantError> for ExperimentError {
    fn from(e: PlantError) -> Self {
        match e {
            PlantError::NotConverged { .. } | PlantError::TooManyFailures { .. } => ExperimentError::Numerical(e.to_string()),
            PlantError::Io(e) => ExperimentError::Io(e.to_string()),
            PlantError::Dataset(_) => ExperimentError::Io(e.to_string()),
            _ => ExperimentError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => ExperimentError::Config(e.to_string()),
            TrainError::Solve(SolveError::Config(_)) => ExperimentError::Config(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::NonFiniteUnit { .. } => ExperimentError::Numerical(e.to_string()),
            TrainError::Data(p) => p.into(),
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

impl From<SolveError> for ExperimentError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Config(_) | SolveError::UnknownMethod(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

impl From<AnalysisError> for ExperimentError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Config(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Numerical(e.to_string()),
        }
    }
}

impl From<NnError> for ExperimentError {
    fn from(e: NnError) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    /// Plant definition file; the built-in synthetic plant when absent.
    pub path: Option<PathBuf>,
    pub recycle: bool,
    pub heat_integration: bool,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            path: None,
            recycle: true,
            heat_integration: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset CSV; generated into the output directory when absent.
    pub path: Option<PathBuf>,
    pub points: usize,
    pub oracle: OracleConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            points: 397,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Prediction solver settings; `method` and `max_iterations` are swept.
    pub solve: SolveConfig,
    pub k_max: usize,
    pub methods: Vec<Method>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            solve: SolveConfig {
                max_iterations: 10,
                ..SolveConfig::default()
            },
            k_max: 10,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortraitSection {
    /// Tear-variable labels on the horizontal and vertical axes.
    pub x: String,
    pub y: String,
    /// Dataset row whose feed and tear values fix the rest of the map; the
    /// first test row when absent.
    pub row: Option<usize>,
    #[serde(flatten)]
    pub grid: PortraitConfig,
}

impl Default for PortraitSection {
    fn default() -> Self {
        PortraitSection {
            x: "c100_out.T".into(),
            y: "c100_out.w_cumene".into(),
            row: None,
            grid: PortraitConfig::default(),
        }
    }
}

/// Everything one experiment run needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation and step-1 initialization.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub step1: UnitTrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub portrait: PortraitSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out: default_out(),
            plant: PlantSection::default(),
            data: DataSection::default(),
            step1: UnitTrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
            portrait: PortraitSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read `{}`: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out);
        if let Some(p) = cfg.plant.path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.data.path.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ExperimentError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn step1_config(&self) -> UnitTrainConfig {
        UnitTrainConfig {
            seed: self.seed,
            ..self.step1
        }
    }

    /// Loads the plant and checks every section against it.
    pub fn validate(&self) -> Result<Plant> {
        let plant = self.load_plant()?;
        if let Some(p) = &self.data.path {
            if !p.is_file() {
                return Err(ExperimentError::Config(format!("dataset `{}` does not exist", p.display())));
            }
        }
        if self.data.points < crate::plantgen::MIN_POINTS {
            return Err(ExperimentError::Config(format!(
                "data.points must be at least {}",
                crate::plantgen::MIN_POINTS
            )));
        }
        self.step1_config().validate()?;
        self.finetune.validate(&plant.fs)?;
        self.eval.solve.validate()?;
        if self.eval.methods.is_empty() {
            return Err(ExperimentError::Config("eval.methods is empty".into()));
        }
        self.portrait_pair(&plant)?;
        Ok(plant)
    }

    pub fn load_plant(&self) -> Result<Plant> {
        let options = PlantOptions {
            recycle: self.plant.recycle,
            heat_integration: self.plant.heat_integration,
        };
        let plant = match &self.plant.path {
            None => Plant::builtin_with(options),
            Some(p) => {
                if !p.is_file() {
                    return Err(ExperimentError::Config(format!("plant file `{}` does not exist", p.display())));
                }
                let text = fs::read_to_string(p)?;
                let def = crate::flowsheet::FlowsheetDef::from_toml(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
                options.apply(def).and_then(Plant::new)
            }
        };
        plant.map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Tear-vector positions of the portrait variables.
    pub fn portrait_pair(&self, plant: &Plant) -> Result<[usize; 2]> {
        let labels = plant.fs.tear_labels();
        let find = |l: &str| {
            labels
                .iter()
                .position(|t| t == l)
                .ok_or_else(|| ExperimentError::Config(format!("portrait variable `{l}` is not a tear variable")))
        };
        Ok([find(&self.portrait.x)?, find(&self.portrait.y)?])
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.csv")
    }

    pub fn models(&self, set: &str) -> PathBuf {
        self.root.join("models").join(set)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Path relative to the root, with forward slashes.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn require(&self, path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(ExperimentError::Missing {
                path: path.to_path_buf(),
                hint: hint.into(),
            })
        }
    }

    pub fn read_dataset(&self) -> Result<Dataset> {
        let p = self.dataset();
        self.require(&p, "run `gen-data` first")?;
        Ok(Dataset::read(&p)?)
    }

    pub fn save_models(&self, set: &str, plant: &Plant, models: &[MlpSurrogate]) -> Result<Vec<PathBuf>> {
        let dir = self.models(set);
        fs::create_dir_all(&dir)?;
        let mut out = Vec::new();
        for (u, m) in plant.fs.units().iter().zip(models) {
            let p = dir.join(format!("{}.bin", u.name));
            m.save(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn load_models(&self, set: &str, plant: &Plant) -> Result<Vec<MlpSurrogate>> {
        let dir = self.models(set);
        let hint = if set == "step1" { "run `train` first" } else { "run `finetune` first" };
        self.require(&dir, hint)?;
        let mut out = Vec::new();
        for (u, unit) in plant.fs.units().iter().enumerate() {
            let p = dir.join(format!("{}.bin", unit.name));
            self.require(&p, hint)?;
            let m = MlpSurrogate::load(&p)?;
            if m.d_in() != plant.fs.unit_in_dim(u) || m.d_out() != plant.fs.unit_out_dim(u) {
                return Err(ExperimentError::Config(format!(
                    "checkpoint `{}` does not match unit `{}`",
                    p.display(),
                    unit.name
                )));
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Writes `contents` to `path`, creating parent directories.
    pub fn write(&self, path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents)?;
        Ok(path.to_path_buf())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of every file written under the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub files: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load_or_default(layout: &Layout) -> Result<Manifest> {
        let p = layout.manifest();
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Io(format!("manifest `{}`: {e}", p.display())))
    }

    /// Hashes `paths` and records them under `command`.
    pub fn record(&mut self, layout: &Layout, command: &str, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            let bytes = fs::read(p)?;
            let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            self.files.insert(
                layout.relative(p),
                ManifestEntry {
                    command: command.into(),
                    sha256,
                    bytes: bytes.len() as u64,
                },
            );
        }
        Ok(())
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        layout.write(&layout.manifest(), text + "\n")?;
        Ok(())
    }
}

/// Portrait of `models` around the true tear values of dataset row `row`;
/// the training rows form the data overlay.
pub fn flowsheet_portrait(
    plant: &Plant,
    ds: &Dataset,
    models: &ModelSet,
    pair: [usize; 2],
    row: usize,
    cfg: &PortraitConfig,
) -> Result<PhasePortrait> {
    let fs = &plant.fs;
    let labels = fs.tear_labels();
    let cols: Vec<usize> = labels.iter().map(|l| ds.column(l)).collect::<std::result::Result<_, _>>()?;
    if row >= ds.len() {
        return Err(ExperimentError::Config(format!("portrait row {row} is outside the dataset ({} rows)", ds.len())));
    }
    let truth: Vec<f64> = cols.iter().map(|&c| ds.data[[row, c]]).collect();
    let data = ds
        .train_rows()
        .into_iter()
        .map(|r| [ds.data[[r, cols[pair[0]]]], ds.data[[r, cols[pair[1]]]]])
        .collect();
    let response = models.response(fs, ds.sources(fs, &[row])?, tear_scale(fs, ds)?);
    Ok(phase_portrait(
        &response,
        &truth,
        pair,
        [&labels[pair[0]], &labels[pair[1]]],
        data,
        cfg,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(ExperimentConfig::from_toml("out = \"x\""), Err(ExperimentError::Config(_))));
        let c = ExperimentConfig::from_toml("seed = 7").unwrap();
        assert_eq!(c, ExperimentConfig::with_seed(7));
        assert_eq!(c.step1_config().seed, 7);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let mut c = ExperimentConfig::with_seed(3);
        c.finetune.k_set = vec![2];
        c.finetune.frozen = vec!["S100".into()];
        c.eval.methods = vec![Method::Newton];
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[finetune]\nlr_typo = 2.0").is_err());
    }

    #[test]
    fn validation_catches_bad_references() {
        let mut c = ExperimentConfig::with_seed(1);
        assert!(c.validate().is_ok());
        c.portrait.x = "hx01_out.T".into();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::with_seed(1);
        c.finetune.frozen = vec!["NOPE".into()];
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::with_seed(1);
        c.plant.path = Some("/nonexistent/plant.toml".into());
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        fs::write(&p, "seed = 5\nout = \"run\"\n[plant]\npath = \"plant.toml\"\n").unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.out, dir.path().join("run"));
        assert_eq!(c.plant.path, Some(dir.path().join("plant.toml")));
    }

    #[test]
    fn missing_artifacts_map_to_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let e = layout.read_dataset().unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let e = layout.load_models("step1", &Plant::builtin()).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn manifest_hashes_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let p = layout.write(&layout.report("a.csv"), "x\n1\n").unwrap();
        let mut m = Manifest::default();
        m.record(&layout, "test", &[p]).unwrap();
        m.save(&layout).unwrap();
        let back = Manifest::load_or_default(&layout).unwrap();
        let e = &back.files["reports/a.csv"];
        assert_eq!(e.bytes, 4);
        assert_eq!(e.sha256, "daff832f802000e645771a60983c76c963f6ee602a6230e45237bd360e91cc1a");
    }
}
