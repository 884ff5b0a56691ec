use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use flowtune::analysis::{alignment_metric, Field};
use flowtune::experiment::{flowsheet_portrait, ExperimentConfig, ExperimentError, Layout, Manifest, Result};
use flowtune::nn::MlpSurrogate;
use flowtune::plantgen::{generate_dataset, Dataset, Plant};
use flowtune::solvers::{solve, Method, SolveConfig};
use flowtune::training::{
    convergence_csv, convergence_table, finetune, tear_scale, train_single_units, unit_report_csv, unit_reports,
    Metrics, ModelSet,
};

#[derive(Parser)]
#[command(name = "flowtune", version, about = "Neural surrogate flowsheet experiments")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; overrides the config and FLOWTUNE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the steady-state dataset with the ground-truth plant.
    GenData {
        /// Plant definition file.
        #[arg(long)]
        plant: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Fit every unit surrogate on its own (step 1).
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune the step-1 surrogates through the unrolled tear solve.
    Finetune {
        /// Model set to start from.
        #[arg(long, default_value = "step1")]
        from: String,
        /// Name of the written model set.
        #[arg(long, default_value = "finetuned")]
        name: String,
        /// Unit kept fixed; repeatable.
        #[arg(long = "freeze")]
        freeze: Vec<String>,
        /// Comma-separated iteration counts, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        k_set: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Solver generating the training iterates.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Convergence percentiles over K and methods, plus parity tables.
    Eval {
        /// Model set to evaluate.
        #[arg(long, default_value = "finetuned")]
        models: String,
        /// Evaluate the ground-truth unit models instead.
        #[arg(long, conflicts_with_all = ["models", "matrix"])]
        analytic: bool,
        /// Fine-tune once per training method and evaluate every pairing.
        #[arg(long)]
        matrix: bool,
    },
    /// Update-field portraits before and after fine-tuning.
    Portrait {
        #[arg(long, default_value = "step1")]
        before: String,
        #[arg(long, default_value = "finetuned")]
        after: String,
        /// Draw the negative residual gradient instead of the update step.
        #[arg(long)]
        gradient: bool,
    },
    /// Dump the iteration history of one solve.
    SolveTrace {
        #[arg(long, default_value = "finetuned")]
        models: String,
        /// Dataset row; the first test row when absent.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long, default_value = "direct")]
        method: Method,
        #[arg(long, default_value_t = 10)]
        max_iterations: usize,
    },
}

struct Run {
    cfg: ExperimentConfig,
    plant: Plant,
    layout: Layout,
    manifest: Manifest,
}

impl Run {
    fn dataset(&self) -> Result<Dataset> {
        match &self.cfg.data.path {
            Some(p) => Ok(Dataset::read(p)?),
            None => self.layout.read_dataset(),
        }
    }

    fn record(&mut self, command: &str, paths: &[PathBuf]) -> Result<()> {
        self.manifest.record(&self.layout, command, paths)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        self.layout.write(&self.layout.report(name), contents)
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn check_set_name(name: &str) -> Result<()> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(ExperimentError::Config(format!("model set name `{name}` must be alphanumeric")))
    }
}

fn first_test_row(ds: &Dataset) -> Result<usize> {
    ds.test_rows()
        .first()
        .copied()
        .ok_or_else(|| ExperimentError::Config("dataset has no test rows".into()))
}

#[derive(Serialize)]
struct EvalSummary {
    method: Method,
    k: usize,
    p25: f64,
    p50: f64,
    p75: f64,
    r2: Option<f64>,
    stream_r2: BTreeMap<String, Option<f64>>,
    failures: usize,
}

impl From<&Metrics> for EvalSummary {
    fn from(m: &Metrics) -> Self {
        EvalSummary {
            method: m.method,
            k: m.k,
            p25: m.percentiles[0],
            p50: m.percentiles[1],
            p75: m.percentiles[2],
            r2: m.end_to_end_r2,
            stream_r2: m.stream_r2.clone(),
            failures: m.failures,
        }
    }
}

fn gen_data(run: &mut Run) -> Result<()> {
    let vary = run.plant.fs.def.vary.clone();
    let ds = generate_dataset(&run.plant, &vary, run.cfg.data.points, run.cfg.seed, &run.cfg.data.oracle)?;
    info!(
        "dataset: {} rows, {} train / {} test, {} skipped",
        ds.len(),
        ds.train_rows().len(),
        ds.test_rows().len(),
        ds.meta.skipped.len()
    );
    let path = run.layout.dataset();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ds.write(&path)?;
    let meta = Dataset::meta_path(&path);
    run.record("gen-data", &[path, meta])
}

fn train(run: &mut Run) -> Result<()> {
    let ds = run.dataset()?;
    let (models, reports) = train_single_units(&run.plant.fs, &ds, &run.cfg.step1_config())?;
    let mut written = run.layout.save_models("step1", &run.plant, &models)?;
    written.push(run.write("unit_r2_step1.csv", unit_report_csv(&reports, None))?);
    run.record("train", &written)
}

fn finetune_set(run: &Run, ds: &Dataset, from: &str, name: &str, cfg: &flowtune::training::FinetuneConfig) -> Result<(Vec<MlpSurrogate>, Vec<PathBuf>)> {
    let fs = &run.plant.fs;
    let start = run.layout.load_models(from, &run.plant)?;
    let before = unit_reports(fs, ds, &start)?;
    let mut models = start;
    let log = finetune(fs, ds, &mut models, cfg)?;
    if log.lr_halved {
        info!("learning rate was halved after a non-finite loss");
    }
    let after = unit_reports(fs, ds, &models)?;
    let mut written = run.layout.save_models(name, &run.plant, &models)?;
    written.push(run.write(&format!("finetune_log_{name}.csv"), log.to_csv())?);
    written.push(run.write(&format!("unit_r2_{name}.csv"), unit_report_csv(&before, Some(&after)))?);
    Ok((models, written))
}

fn evaluate_set(run: &Run, ds: &Dataset, label: &str, set: &ModelSet) -> Result<(Vec<Metrics>, Vec<PathBuf>)> {
    let fs = &run.plant.fs;
    let e = &run.cfg.eval;
    let table = convergence_table(fs, ds, &ds.test_rows(), set, &e.solve, &e.methods, e.k_max)?;
    let mut written = vec![run.write(&format!("convergence_{label}.csv"), convergence_csv(&table))?];
    let last: Vec<&Metrics> = table.iter().filter(|m| m.k == e.k_max).collect();
    for m in &last {
        info!(
            "{label} {} K={}: median error {:.4}, r2 {:?}, failures {}",
            m.method, m.k, m.percentiles[1], m.end_to_end_r2, m.failures
        );
        written.push(run.write(&format!("parity_{label}_{}.csv", m.method), m.parity_csv(fs, ds)?)?);
    }
    let summary: Vec<EvalSummary> = last.iter().map(|m| EvalSummary::from(*m)).collect();
    written.push(run.write(&format!("eval_{label}.json"), json(&summary))?);
    Ok((table, written))
}

fn eval(run: &mut Run, models: &str, analytic: bool, matrix: bool) -> Result<()> {
    let ds = run.dataset()?;
    if analytic {
        let set = ModelSet::Analytic(run.plant.models());
        let (_, written) = evaluate_set(run, &ds, "analytic", &set)?;
        return run.record("eval", &written);
    }
    if !matrix {
        check_set_name(models)?;
        let loaded = run.layout.load_models(models, &run.plant)?;
        let (_, written) = evaluate_set(run, &ds, models, &ModelSet::surrogates(&loaded))?;
        return run.record("eval", &written);
    }
    run.layout.load_models("step1", &run.plant)?;
    let mut csv = String::from("train_method,");
    csv.push_str(&convergence_csv(&[]));
    let mut written = Vec::new();
    for &train_method in &run.cfg.eval.methods.clone() {
        let cfg = flowtune::training::FinetuneConfig {
            method: train_method,
            ..run.cfg.finetune.clone()
        };
        let name = format!("matrix_{train_method}");
        info!("matrix: fine-tuning with {train_method}");
        let (tuned, mut w) = finetune_set(run, &ds, "step1", &name, &cfg)?;
        let (table, w2) = evaluate_set(run, &ds, &name, &ModelSet::surrogates(&tuned))?;
        w.extend(w2);
        written.extend(w);
        for line in convergence_csv(&table).lines().skip(1) {
            csv.push_str(&format!("{train_method},{line}\n"));
        }
    }
    written.push(run.write("matrix.csv", csv)?);
    run.record("eval --matrix", &written)
}

#[derive(Serialize)]
struct Alignment {
    variables: [String; 2],
    row: usize,
    field: Field,
    before: Option<f64>,
    after: Option<f64>,
}

fn portrait(run: &mut Run, before: &str, after: &str, gradient: bool) -> Result<()> {
    check_set_name(before)?;
    check_set_name(after)?;
    let ds = run.dataset()?;
    let pair = run.cfg.portrait_pair(&run.plant)?;
    let row = match run.cfg.portrait.row {
        Some(r) => r,
        None => first_test_row(&ds)?,
    };
    let mut grid = run.cfg.portrait.grid;
    if gradient {
        grid.field = Field::Gradient;
    }
    let sets = [("before", before), ("after", after)];
    let loaded: Vec<Vec<MlpSurrogate>> = sets
        .iter()
        .map(|(_, s)| run.layout.load_models(s, &run.plant))
        .collect::<Result<_>>()?;
    let mut written = Vec::new();
    let mut scores = Vec::new();
    for ((tag, set), models) in sets.iter().zip(&loaded) {
        let p = flowsheet_portrait(&run.plant, &ds, &ModelSet::surrogates(models), pair, row, &grid)?;
        let score = alignment_metric(&p, p.fixed_point).ok();
        info!("portrait {tag} ({set}): alignment {score:?}");
        let title = format!("{tag} fine-tuning ({set}), row {row}");
        written.push(run.write(&format!("portrait_{tag}.csv"), p.to_csv())?);
        written.push(run.write(&format!("portrait_{tag}.svg"), p.to_svg(&title))?);
        scores.push(score);
    }
    let summary = Alignment {
        variables: [run.cfg.portrait.x.clone(), run.cfg.portrait.y.clone()],
        row,
        field: grid.field,
        before: scores[0],
        after: scores[1],
    };
    written.push(run.write("alignment.json", json(&summary))?);
    run.record("portrait", &written)
}

fn solve_trace(run: &mut Run, models: &str, row: Option<usize>, method: Method, max_iterations: usize) -> Result<()> {
    check_set_name(models)?;
    let cfg = SolveConfig {
        method,
        max_iterations,
        ..run.cfg.eval.solve.clone()
    };
    cfg.validate()?;
    let ds = run.dataset()?;
    let loaded = run.layout.load_models(models, &run.plant)?;
    let row = match row {
        Some(r) if r < ds.len() => r,
        Some(r) => return Err(ExperimentError::Config(format!("row {r} is outside the dataset ({} rows)", ds.len()))),
        None => first_test_row(&ds)?,
    };
    let fs = &run.plant.fs;
    let set = ModelSet::surrogates(&loaded);
    let response = set.response(fs, ds.sources(fs, &[row])?, tear_scale(fs, &ds)?);
    let trace = solve(&response, &ds.tear_mean(fs)?, &cfg)?;
    info!("{method} on row {row}: {:?} after {} iterations", trace.status, trace.iterations());
    #[derive(Serialize)]
    struct Dump<'a> {
        models: &'a str,
        row: usize,
        tear_labels: Vec<String>,
        trace: &'a flowtune::solvers::SolveTrace,
    }
    let dump = Dump {
        models,
        row,
        tear_labels: fs.tear_labels(),
        trace: &trace,
    };
    let path = run.write(&format!("solve_trace_{models}_{method}_row{row}.json"), json(&dump))?;
    run.record("solve-trace", &[path])
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::with_seed(42),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::GenData { plant, points } => {
            if let Some(p) = plant {
                cfg.plant.path = Some(p.clone());
            }
            if let Some(n) = points {
                cfg.data.points = *n;
            }
        }
        Command::Train { epochs, lr } => {
            if let Some(e) = epochs {
                cfg.step1.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.step1.lr = *l;
            }
        }
        Command::Finetune {
            freeze,
            k_set,
            epochs,
            lr,
            method,
            ..
        } => {
            let f = &mut cfg.finetune;
            if !freeze.is_empty() {
                f.frozen = freeze.clone();
            }
            if let Some(k) = k_set {
                f.k_set = k.clone();
            }
            if let Some(e) = epochs {
                f.epochs = *e;
            }
            if let Some(l) = lr {
                f.lr = *l;
            }
            if let Some(m) = method {
                f.method = *m;
            }
        }
        _ => {}
    }
    let plant = cfg.validate()?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ExperimentError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
    }
    let layout = Layout::new(&cfg.out);
    let mut manifest = Manifest::load_or_default(&layout)?;
    manifest.seed = Some(cfg.seed);
    let mut run = Run {
        cfg,
        plant,
        layout,
        manifest,
    };
    match cli.command {
        Command::GenData { .. } => gen_data(&mut run)?,
        Command::Train { .. } => train(&mut run)?,
        Command::Finetune { from, name, .. } => {
            check_set_name(&from)?;
            check_set_name(&name)?;
            let ds = run.dataset()?;
            let cfg = run.cfg.finetune.clone();
            let (_, written) = finetune_set(&run, &ds, &from, &name, &cfg)?;
            run.record("finetune", &written)?;
        }
        Command::Eval { models, analytic, matrix } => eval(&mut run, &models, analytic, matrix)?,
        Command::Portrait { before, after, gradient } => portrait(&mut run, &before, &after, gradient)?,
        Command::SolveTrace {
            models,
            row,
            method,
            max_iterations,
        } => solve_trace(&mut run, &models, row, method, max_iterations)?,
    }
    let config_path = run.layout.root.join("config.toml");
    run.layout.write(&config_path, run.cfg.to_toml())?;
    run.record("config", &[config_path])?;
    run.manifest.save(&run.layout)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
