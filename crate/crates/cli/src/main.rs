//! Command-line front end: generate-data, train, infer, evaluate, sparsify
//! and report.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or validation
//! errors. Every command that writes a directory also leaves a
//! `run_record.json` there.

mod record;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use depthuq::datagen::{self, Dataset, SceneSpec};
use depthuq::eval;
use depthuq::geometry::DepthMap;
use depthuq::io;
use depthuq::trainer::{self, LoadedExperiment, Supervision, TrainConfig};
use depthuq::uncertainty::StrategyKind;
use serde::Serialize;

use record::RunRecord;

#[derive(Parser, Debug)]
#[command(name = "depthuq", version, about = "Self-supervised depth training with uncertainty estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic stereo/temporal dataset.
    GenerateData(GenerateArgs),
    /// Train a strategy on a dataset.
    Train(TrainArgs),
    /// Write per-image depth and uncertainty maps for a dataset split.
    Infer(InferArgs),
    /// Depth metrics of predicted maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Sparsification curves, AUSE and AURG.
    Sparsify(SparsifyArgs),
    /// Merge run results into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of samples; four in five go to the training split.
    #[arg(long, default_value_t = 50)]
    count: u64,
    /// Scene spec as TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    baseline: Option<f64>,
    #[arg(long)]
    num_primitives: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Training config as TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// M (temporal), S (stereo) or MS.
    #[arg(long)]
    supervision: Option<Supervision>,
    /// post, repr, log, self, drop, boot, snap, boot+log, boot+self,
    /// snap+log or snap+self.
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble members, dropout samples or snapshots.
    #[arg(long)]
    n: Option<usize>,
    /// Encoder widths of the depth and pose networks, comma separated.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Run directory written by train.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Receives depth/ and uncertainty/ maps and infer.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum, Serialize)]
enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predicted depth map, or a directory of maps.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth depth map, or a directory holding maps of the same names.
    #[arg(long)]
    gt: PathBuf,
    /// Rescale each prediction by the ratio of medians (monocular runs).
    #[arg(long)]
    median_scaling: bool,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SparsifyArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Uncertainty map, or a directory holding maps named like the predictions.
    #[arg(long)]
    uncertainty: PathBuf,
    #[arg(long)]
    median_scaling: bool,
    /// Output directory for metrics, areas, curve CSVs and plots.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directories holding `metrics.csv` and `sparsification.csv`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output CSV; printed to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenerateData(a) => generate(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Infer(a) => infer(a, argv),
        Command::Evaluate(a) => evaluate(a),
        Command::Sparsify(a) => sparsify(a, argv),
        Command::Report(a) => report::run(&a.inputs, a.out.as_deref()),
    }
}

fn generate(a: GenerateArgs, argv: &[String]) -> Result<()> {
    let mut spec: SceneSpec = match &a.config {
        Some(p) => io::read_toml(p)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.width {
        spec.width = v;
    }
    if let Some(v) = a.height {
        spec.height = v;
    }
    if let Some(v) = a.baseline {
        spec.baseline = v;
    }
    if let Some(v) = a.num_primitives {
        spec.num_primitives = v;
    }
    let mut rec = RunRecord::start(argv, &spec, vec![spec.seed]);
    let manifest = datagen::write_dataset(&spec, a.count, &a.out)?;
    rec.add_outputs(&a.out, manifest.files.iter().map(|f| f.path.as_str()).chain([datagen::MANIFEST_FILE]))?;
    rec.finish(&a.out)?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        a.count,
        manifest.train.len(),
        manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => io::read_toml(p)?,
        None => TrainConfig::new(
            a.supervision.unwrap_or(Supervision::S),
            a.strategy.unwrap_or(StrategyKind::Post),
        ),
    };
    if let Some(v) = a.supervision {
        cfg.supervision = v;
    }
    if let Some(v) = a.strategy {
        cfg.strategy.kind = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n {
        cfg.strategy.n = v;
    }
    if let Some(v) = a.widths {
        cfg.model.encoder_widths = v.clone();
        cfg.model.pose_widths = v;
    }
    let dataset = Dataset::open(&a.data)?;
    let mut rec = RunRecord::start(argv, &cfg, vec![cfg.seed]);
    let manifest = trainer::train(&cfg, &dataset, &a.out)?;
    let mut outputs: Vec<String> = trainer::referenced_files(&manifest, &a.out)
        .into_iter()
        .filter_map(|p| p.strip_prefix(&a.out).ok().map(|p| p.to_string_lossy().into_owned()))
        .collect();
    outputs.push(trainer::MANIFEST_FILE.into());
    outputs.push(trainer::AREAS_FILE.into());
    rec.add_outputs(&a.out, outputs.iter().map(String::as_str))?;
    rec.finish(&a.out)?;
    println!(
        "trained {} ({}) with {} checkpoint(s) into {}",
        cfg.strategy.kind,
        cfg.supervision,
        manifest.checkpoint_refs.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct InferSummary {
    strategy: String,
    split: Split,
    images: usize,
    forwards_per_image: Vec<usize>,
}

fn infer(a: InferArgs, argv: &[String]) -> Result<()> {
    let dataset = Dataset::open(&a.data)?;
    let run = LoadedExperiment::open(&a.run)?;
    let records = match a.split {
        Split::Train => &dataset.manifest.train,
        Split::Test => &dataset.manifest.test,
    };
    let mut rec = RunRecord::start(argv, &run.manifest.config, vec![run.manifest.config.seed]);
    let mut outputs = Vec::new();
    let mut forwards = Vec::new();
    for r in records {
        let sample = dataset.load(r)?;
        let out = run.infer(&sample.left)?;
        let depth = format!("depth/{:05}.uqdm", r.index);
        let unc = format!("uncertainty/{:05}.uqdm", r.index);
        io::write_depth(&a.out.join(&depth), &out.depth)?;
        io::write_uncertainty(&a.out.join(&unc), &out.uncertainty)?;
        outputs.push(depth);
        outputs.push(unc);
        forwards.push(out.forwards);
    }
    let summary = InferSummary {
        strategy: run.manifest.config.strategy.kind.to_string(),
        split: a.split,
        images: records.len(),
        forwards_per_image: forwards,
    };
    io::write_json(&a.out.join("infer.json"), &summary)?;
    outputs.push("infer.json".into());
    rec.add_outputs(&a.out, outputs.iter().map(String::as_str))?;
    rec.finish(&a.out)?;
    println!("wrote {} depth/uncertainty pairs to {}", records.len(), a.out.display());
    Ok(())
}

/// Map files of one image: name, prediction, ground truth, uncertainty.
type MapPaths = (String, PathBuf, PathBuf, Option<PathBuf>);

/// Directories pair files by name.
fn pair_maps(pred: &Path, gt: &Path, unc: Option<&Path>) -> Result<Vec<MapPaths>> {
    if pred.is_dir() {
        if !gt.is_dir() {
            bail!("--pred is a directory, so --gt must be one too");
        }
        let mut names: Vec<String> = std::fs::read_dir(pred)
            .with_context(|| format!("listing {}", pred.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".uqdm"))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no .uqdm maps in {}", pred.display());
        }
        Ok(names
            .into_iter()
            .map(|n| {
                let u = unc.map(|u| if u.is_dir() { u.join(&n) } else { u.to_path_buf() });
                (n.clone(), pred.join(&n), gt.join(&n), u)
            })
            .collect())
    } else {
        let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf(), unc.map(Path::to_path_buf))])
    }
}

fn scaled(pred: DepthMap, gt: &DepthMap, median_scaling: bool) -> Result<DepthMap> {
    if !median_scaling {
        return Ok(pred);
    }
    let mask = eval::eval_mask(gt, &vec![true; gt.values().len()], eval::MAX_EVAL_DEPTH);
    Ok(eval::median_scale(&pred, gt, &mask)?)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut all = Vec::new();
    for (_, p, g, _) in pair_maps(&a.pred, &a.gt, None)? {
        let gt = io::read_depth(&g)?;
        let pred = scaled(io::read_depth(&p)?, &gt, a.median_scaling)?;
        let valid = vec![true; gt.values().len()];
        let mask = eval::eval_mask(&gt, &valid, eval::MAX_EVAL_DEPTH);
        all.push(eval::depth_metrics(&pred, &gt, &mask, eval::MAX_EVAL_DEPTH)?);
    }
    let m = eval::DepthMetrics::mean(&all)?;
    eval::write_metrics_csv(&a.out, &m)?;
    println!("{}\n{}", eval::DepthMetrics::CSV_HEADER, m.csv_row());
    Ok(())
}

fn sparsify(a: SparsifyArgs, argv: &[String]) -> Result<()> {
    let mut per_image = Vec::new();
    for (name, p, g, u) in pair_maps(&a.pred, &a.gt, Some(&a.uncertainty))? {
        let gt = io::read_depth(&g)?;
        let pred = io::read_depth(&p)?;
        let unc = io::read_map(&u.expect("uncertainty path given"))?;
        if (unc.width, unc.height) != (gt.width(), gt.height()) {
            bail!("{name}: uncertainty size differs from ground truth");
        }
        let valid = vec![true; gt.values().len()];
        per_image.push(eval::evaluate_image(&pred, &unc.values, &gt, &valid, a.median_scaling)?);
    }
    let summary = eval::summarize(&per_image)?;
    let mut rec = RunRecord::start(argv, &serde_json::json!({ "median_scaling": a.median_scaling }), vec![]);
    let mut outputs = vec![trainer::AREAS_FILE.to_string(), trainer::METRICS_FILE.to_string()];
    eval::write_metrics_csv(&a.out.join(trainer::METRICS_FILE), &summary.metrics)?;
    eval::write_areas_csv(&a.out.join(trainer::AREAS_FILE), &summary.sparsification)?;
    for r in &summary.sparsification {
        let csv = format!("curve_{}.csv", r.metric);
        eval::write_curve_csv(&a.out.join(&csv), r)?;
        eval::plot_curves(&a.out.join(format!("curve_{}.png", r.metric)), r)?;
        outputs.push(csv);
    }
    rec.add_outputs(&a.out, outputs.iter().map(String::as_str))?;
    rec.finish(&a.out)?;
    println!("metric,ause,aurg");
    for r in &summary.sparsification {
        println!("{},{},{}", r.metric, r.ause, r.aurg);
    }
    Ok(())
}
