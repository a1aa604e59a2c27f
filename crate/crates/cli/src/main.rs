//! `xmda`: generate scenarios, train, pseudo-label, evaluate and report.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use xmda::eval::{report_deltas, render_table, EvalError, FixtureTable, MetricsReport, ScoreRow};
use xmda::nets::checkpoint;
use xmda::nets::{HeadMode, ModelConfig};
use xmda::pseudolabel::{self, coverage_report};
use xmda::scenegen::presets::{make_scenario_with_seed, SplitName};
use xmda::scenegen::SceneError;
use xmda::trainer::{self, Regime, RunManifest, TrainConfig, TrainData, TrainError};

/// Errors that exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "xmda", version, about = "Cross-modal 2D/3D domain adaptation for point-cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize a preset scenario into a dataset directory.
    Generate {
        /// `<preset>/<uda|ssda>`, e.g. `synth-lighting/uda`.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train one run (two stages for pseudo-label regimes), then evaluate
    /// its best checkpoint on target_test.
    Train(TrainArgs),
    /// Extract pseudo-labels from the final checkpoint of a run.
    PseudoLabel {
        /// Checkpoint directory, e.g. `<run>/checkpoints/final`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target_train")]
        split: String,
        #[arg(long, default_value_t = pseudolabel::DEFAULT_P)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a run's best checkpoint, or any checkpoint, on a split.
    Evaluate {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "target_test")]
        split: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a comparison table of evaluated runs or of a shipped fixture.
    Report {
        /// `<name>=<run dir>` or `<run dir>` (named after its regime).
        #[arg(long = "run")]
        runs: Vec<String>,
        /// `<uda|ssda>:<scenario>`, e.g. `uda:usa_singapore`.
        #[arg(long)]
        fixture: Option<String>,
        /// Also write rows and deltas as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sweep the target cross-modal weight for single and dual heads.
    AblateHead {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1.0")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset directory written by `generate`.
    #[arg(long, conflicts_with = "preset")]
    data: Option<PathBuf>,
    /// Generate the scenario in memory instead.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Scenario config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    regime: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    force: bool,
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DatasetRef {
    Preset { preset: String, seed: u64 },
    Path { path: PathBuf },
}

/// Everything a training run depends on, with every default written out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScenarioConfig {
    dataset: DatasetRef,
    train: TrainConfig,
    out: PathBuf,
}

/// Partial scenario config as read from disk.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    dataset: Option<DatasetRef>,
    train: Option<serde_json::Value>,
    out: Option<PathBuf>,
}

impl DataArgs {
    fn resolve(&self) -> Option<DatasetRef> {
        match (&self.data, &self.preset) {
            (Some(p), _) => Some(DatasetRef::Path { path: p.clone() }),
            (None, Some(name)) => Some(DatasetRef::Preset { preset: name.clone(), seed: self.data_seed }),
            _ => None,
        }
    }
}

fn load_data(dataset: &DatasetRef, model: &ModelConfig) -> Result<TrainData> {
    match dataset {
        DatasetRef::Path { path } => {
            if !path.join("scenario.json").exists() {
                bail!(usage(format!("{} is not a dataset directory", path.display())));
            }
            Ok(TrainData::load(path, model)?)
        }
        DatasetRef::Preset { preset, seed } => {
            let set = make_scenario_with_seed(preset, *seed).map_err(scene_err)?;
            Ok(TrainData::generate(&set, model)?)
        }
    }
}

fn scene_err(e: SceneError) -> anyhow::Error {
    match e {
        SceneError::UnknownPreset(p) => usage(format!("unknown preset `{p}`")),
        other => other.into(),
    }
}

fn parse_split(s: &str) -> Result<SplitName> {
    s.parse::<SplitName>().map_err(usage)
}

/// Refuses to reuse a non-empty directory unless forced, in which case it is cleared.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!(usage(format!("{} exists; pass --force to overwrite", out.display())));
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

fn resolve_train(args: &TrainArgs) -> Result<ScenarioConfig> {
    let file: Option<ScenarioFile> = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            Some(serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let (f_data, f_train, f_out) = match file {
        Some(f) => (f.dataset, f.train, f.out),
        None => (None, None, None),
    };
    let mut train: TrainConfig = match (f_train, &args.regime) {
        (Some(mut v), regime) => {
            if let (Some(r), Some(obj)) = (regime, v.as_object_mut()) {
                obj.insert("regime".into(), serde_json::Value::String(r.clone()));
            }
            serde_json::from_value(v).map_err(|e| usage(format!("train config: {e}")))?
        }
        (None, Some(r)) => TrainConfig::new(r.parse::<Regime>().map_err(usage)?),
        (None, None) => bail!(usage("need --regime or a config with a train section")),
    };
    if let Some(s) = args.seed {
        train.seed = s;
    }
    if let Some(n) = args.iterations {
        train.iterations = n;
    }
    let train = train.resolved().map_err(|e| usage(e.to_string()))?;
    let dataset = args.data.resolve().or(f_data).ok_or_else(|| usage("need --data, --preset or a dataset in the config"))?;
    let out = args.out.clone().or(f_out).ok_or_else(|| usage("need --out"))?;
    Ok(ScenarioConfig { dataset, train, out })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let sc = resolve_train(&args)?;
    prepare_out(&sc.out, args.force)?;
    write_json(&sc.out.join("scenario.json"), &sc)?;
    let data = load_data(&sc.dataset, &sc.train.model)?;
    let manifest = match trainer::run(&sc.train, &data, &sc.out) {
        Ok(m) => m,
        Err(TrainError::NonFiniteLoss { iteration, dump }) => {
            bail!("non-finite loss at iteration {iteration}; diagnostics written to {}", dump.display())
        }
        Err(e) => return Err(e.into()),
    };
    let report = trainer::evaluate_run(&sc.out, &data, SplitName::TargetTest)?;
    write_json(&sc.out.join("test_metrics.json"), &report)?;
    println!("run: {}", sc.out.display());
    println!("best checkpoint: {} (final {})", manifest.best_checkpoint_id, manifest.final_checkpoint_id);
    println!("final hash: {}", manifest.final_hash);
    print_report(&report);
    Ok(())
}

fn print_report(r: &MetricsReport) {
    let cols = r.columns();
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
    println!("{} @ {}: 2D {}  3D {}  2D+3D {}", r.split, r.checkpoint, cell(cols[0]), cell(cols[1]), cell(cols[2]));
    if let Some(a) = r.agreement {
        println!("2D/3D agreement: {a:.4}");
    }
}

/// Reads a run's resolved scenario, if it was made by `train`.
fn run_dataset(run: &Path) -> Option<DatasetRef> {
    let text = fs::read_to_string(run.join("scenario.json")).ok()?;
    serde_json::from_str::<ScenarioConfig>(&text).ok().map(|s| s.dataset)
}

fn cmd_evaluate(run: Option<PathBuf>, ckpt: Option<PathBuf>, data: DataArgs, split: &str, out: Option<PathBuf>) -> Result<()> {
    let split = parse_split(split)?;
    let report = if let Some(run) = run {
        let m = RunManifest::read(&run)?;
        let model = checkpoint::read_manifest(&run.join(&m.best_checkpoint))?.model;
        let dataset = data.resolve().or_else(|| run_dataset(&run)).ok_or_else(|| usage("need --data or --preset"))?;
        let data = load_data(&dataset, &model)?;
        trainer::evaluate_run(&run, &data, split)?
    } else {
        let dir = ckpt.expect("clap requires one of --run/--checkpoint");
        let (model, manifest) = checkpoint::load(&dir)?;
        let dataset = data.resolve().ok_or_else(|| usage("need --data or --preset"))?;
        let data = load_data(&dataset, &model.cfg)?;
        data.evaluate(&model, split, &trainer::checkpoint_id(manifest.iteration))?
    };
    if let Some(p) = out {
        write_json(&p, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_pseudo_label(ckpt: &Path, data: &Path, split: &str, p: f64, out: &Path, force: bool) -> Result<()> {
    let split = parse_split(split)?;
    if !(0.0..=1.0).contains(&p) {
        bail!(usage("--p must lie in [0, 1]"));
    }
    let model_cfg = checkpoint::read_manifest(ckpt)?.model;
    let data = load_data(&DatasetRef::Path { path: data.to_path_buf() }, &model_cfg)?;
    let samples = data.split(split).ok_or_else(|| anyhow!("split {split} is empty"))?;
    prepare_out(out, force)?;
    let set = pseudolabel::extract_from_checkpoint(ckpt, &samples.inputs, p)?;
    set.write(out)?;
    let cov = coverage_report(&set);
    write_json(&out.join("coverage.json"), &cov)?;
    println!("{} samples, p = {p}", set.labels.len());
    for (c, (a, b)) in cov.classes_2d.iter().zip(&cov.classes_3d).enumerate() {
        println!("class {c}: 2D {}/{} ({:.3})  3D {}/{} ({:.3})", a.selected, a.candidates, a.fraction, b.selected, b.candidates, b.fraction);
    }
    Ok(())
}

/// Row name of a regime in the results table.
fn row_name(regime: Regime) -> String {
    match regime {
        Regime::SrcOnly => "baseline".into(),
        Regime::TrgOnly => "oracle".into(),
        Regime::SrcPlusTrg => "baseline_src_trg".into(),
        r => r.as_str().into(),
    }
}

#[derive(Serialize)]
struct ReportJson {
    rows: Vec<ScoreRow>,
    deltas: Option<xmda::eval::Deltas>,
}

fn cmd_report(runs: &[String], fixture: Option<&str>, json: Option<&Path>) -> Result<()> {
    let mut rows: Vec<ScoreRow> = Vec::new();
    let mut title = "method".to_string();
    if let Some(f) = fixture {
        let (table, id) = f.split_once(':').ok_or_else(|| usage("--fixture takes <uda|ssda>:<scenario>"))?;
        let t = FixtureTable::shipped(table).ok_or_else(|| usage(format!("unknown fixture table `{table}`")))?;
        let s = t.scenario(id).ok_or_else(|| usage(format!("unknown fixture scenario `{id}`")))?;
        title = s.title.clone();
        rows.extend(s.named_rows().into_iter().map(|(name, scores)| ScoreRow { name, scores }));
    }
    for spec in runs {
        let (name, dir) = match spec.split_once('=') {
            Some((n, d)) => (Some(n.to_string()), PathBuf::from(d)),
            None => (None, PathBuf::from(spec)),
        };
        let metrics = dir.join("test_metrics.json");
        if !metrics.exists() {
            bail!(EvalError::MissingReport(metrics.display().to_string()));
        }
        let report: MetricsReport = serde_json::from_str(&fs::read_to_string(&metrics)?)?;
        let name = match name {
            Some(n) => n,
            None => row_name(RunManifest::read(&dir)?.regime),
        };
        rows.push(ScoreRow { name, scores: report.columns() });
    }
    if rows.is_empty() {
        bail!(usage("nothing to report; pass --run or --fixture"));
    }
    let named: BTreeMap<String, [Option<f64>; 3]> = rows.iter().map(|r| (r.name.clone(), r.scores)).collect();
    let deltas = match report_deltas(&named) {
        Ok(d) => Some(d),
        Err(EvalError::MissingReport(_)) => None,
        Err(e) => return Err(e.into()),
    };
    print!("{}", render_table(&title, &rows, deltas.as_ref()));
    if let Some(p) = json {
        write_json(p, &ReportJson { rows, deltas })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    head: HeadMode,
    lambda_t: f64,
    seed: u64,
    val_agreement: Option<f64>,
    test_miou_2d: Option<f64>,
    test_miou_3d: Option<f64>,
}

fn cmd_ablate_head(data: &DataArgs, out: &Path, lambdas: &[f64], seeds: u64, iterations: Option<u64>, force: bool) -> Result<()> {
    let dataset = data.resolve().ok_or_else(|| usage("need --data or --preset"))?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        bail!(usage("--lambdas must be nonnegative numbers"));
    }
    prepare_out(out, force)?;
    let base = TrainConfig::new(Regime::Xmuda);
    let data = load_data(&dataset, &base.model)?;
    let mut rows = Vec::new();
    for (head, regime) in [(HeadMode::Single, Regime::SingleHeadAblation), (HeadMode::Dual, Regime::Xmuda)] {
        for &lt in lambdas {
            for seed in 0..seeds {
                let mut cfg = TrainConfig { regime, seed, ..base.clone() };
                cfg.weights.lambda_t = lt;
                if let Some(n) = iterations {
                    cfg.iterations = n;
                }
                let dir = out.join(format!("{}_lt{lt}_s{seed}", if head == HeadMode::Single { "single" } else { "dual" }));
                let m = trainer::train(&cfg, &data, &dir, None)?;
                let test = trainer::evaluate_run(&dir, &data, SplitName::TargetTest)?;
                write_json(&dir.join("test_metrics.json"), &test)?;
                let agreement = m.best_val().and_then(|v| v.report.agreement);
                let [a, b, _] = test.columns();
                println!("{head:?} lambda_t={lt} seed={seed}: agreement {:?}  2D {:?}  3D {:?}", agreement, a, b);
                rows.push(AblationRow { head, lambda_t: lt, seed, val_agreement: agreement, test_miou_2d: a, test_miou_3d: b });
            }
        }
    }
    write_json(&out.join("summary.json"), &rows)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { preset, out, seed, force } => {
            let set = make_scenario_with_seed(&preset, seed).map_err(scene_err)?;
            prepare_out(&out, force)?;
            set.write_dataset(&out)?;
            println!("wrote {} ({} splits)", out.display(), set.present().len());
            Ok(())
        }
        Cmd::Train(args) => cmd_train(args),
        Cmd::PseudoLabel { checkpoint, data, split, p, out, force } => cmd_pseudo_label(&checkpoint, &data, &split, p, &out, force),
        Cmd::Evaluate { run, checkpoint, data, split, out } => cmd_evaluate(run, checkpoint, data, &split, out),
        Cmd::Report { runs, fixture, json } => cmd_report(&runs, fixture.as_deref(), json.as_deref()),
        Cmd::AblateHead { data, out, lambdas, seeds, iterations, force } => cmd_ablate_head(&data, &out, &lambdas, seeds, iterations, force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<Usage>().is_some() { 2 } else { 1 })
        }
    }
}
