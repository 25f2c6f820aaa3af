mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use skiptune::bench::{class_tokens, cost_grid, fs_profile, gd_records, pretrain, probe_samples, tune, Split};
use skiptune::container::sha256_hex;
use skiptune::diagnostics::{write_cost_csv, write_fs_csv, write_gd_csv, CostRow, GdHistogram};
use skiptune::encoders::ModelState;
use skiptune::lskip::{build_cache, FeatureCache};

use config::{load, CacheSettings, DiagnoseSettings, PretrainSettings, TuneSettings};

const OUT_ENV: &str = "SKIPT_OUT_DIR";
const DEFAULT_OUT: &str = "skipt-out";

#[derive(Parser)]
#[command(
    name = "skipt",
    version,
    about = "Layer- and class-skipping fine-tuning on a synthetic dual-encoder benchmark"
)]
struct Cli {
    /// Output directory (overrides SKIPT_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastively pretrain a model and write `pretrain.ckpt`.
    Pretrain(PretrainArgs),
    /// Store depth-omega features of the base training split in `cache.fcache`.
    Cache(CacheArgs),
    /// Fine-tune a checkpoint; writes `run_report.json`, `metrics.csv`, `tuned.ckpt`.
    Tune(TuneArgs),
    /// Layer sensitivity, class gradient dependence and the cost grid.
    Diagnose(DiagnoseArgs),
    /// Ablation table over run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    test_shots: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    omega: Option<usize>,
    #[arg(long)]
    template: Option<String>,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lskip: bool,
    #[arg(long)]
    cskip: bool,
    #[arg(long)]
    topk: bool,
    #[arg(long)]
    freeze_shallow: bool,
    #[arg(long)]
    omega: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Base learning rate (multiplied by --lr-multiplier).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_multiplier: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    template: Option<String>,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

/// Written as `manifest.json` next to every command's outputs.
#[derive(Serialize)]
struct RunManifest<C: Serialize> {
    command: &'static str,
    config_file: Option<PathBuf>,
    config: C,
    output_dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

macro_rules! apply_task {
    ($s:expr, $t:expr) => {
        set(&mut $s.task_seed, $t.task_seed);
        set(&mut $s.classes, $t.classes);
        set(&mut $s.shots, $t.shots);
        set(&mut $s.test_shots, $t.test_shots);
    };
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn write_manifest<C: Serialize>(
    out: &Path,
    command: &'static str,
    config_file: Option<PathBuf>,
    config: C,
    artifacts: &[(&str, &Path)],
) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for (name, path) in artifacts {
        hashes.insert(name.to_string(), file_hash(path)?);
    }
    let m = RunManifest {
        command,
        config_file,
        config,
        output_dir: out.to_path_buf(),
        artifacts: hashes,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelState> {
    ModelState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_pretrain(out: &Path, a: PretrainArgs) -> Result<()> {
    let mut s: PretrainSettings = load(a.config.as_deref())?;
    set(&mut s.seed, a.seed);
    set(&mut s.steps, a.steps);
    set(&mut s.batch, a.batch);
    set(&mut s.lr, a.lr);
    set(&mut s.layers, a.layers);
    let init = ModelState::init(s.model(), s.init_seed)?;
    let (model, log) = pretrain(&init, &s.pretrain())?;
    let ckpt = out.join("pretrain.ckpt");
    model.save(&ckpt)?;
    if let Some(last) = log.losses.last() {
        eprintln!("pretrained {} steps, final loss {last:.4}", log.losses.len());
    }
    write_manifest(out, "pretrain", a.config, &s, &[("checkpoint", &ckpt)])?;
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_cache(out: &Path, a: CacheArgs) -> Result<()> {
    let mut s: CacheSettings = load(a.config.as_deref())?;
    set(&mut s.omega, a.omega);
    set(&mut s.template, a.template);
    apply_task!(s, a.task);
    let model = load_model(&a.checkpoint)?;
    let task = s.task().generate()?;
    let tokens = class_tokens(&task, &s.template, model.config.max_text_len)?;
    let samples: Vec<_> = task
        .train_split(Split::Base)
        .into_iter()
        .map(|x| (x.id, x.image.clone()))
        .collect();
    let classes: Vec<_> = task.classes(Split::Base).map(|c| (c, tokens[c].clone())).collect();
    let cache = build_cache(&model, &samples, &classes, s.omega, &s.template, &task.fingerprint())?;
    let path = out.join("cache.fcache");
    cache.save(&path)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        settings: &'a CacheSettings,
        provenance: &'a skiptune::lskip::CacheProvenance,
    }
    let resolved = Resolved {
        settings: &s,
        provenance: cache.provenance(),
    };
    write_manifest(
        out,
        "cache",
        a.config,
        &resolved,
        &[("checkpoint", &a.checkpoint), ("cache", &path)],
    )?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_tune(out: &Path, a: TuneArgs) -> Result<()> {
    let mut s: TuneSettings = load(a.config.as_deref())?;
    s.lskip |= a.lskip;
    s.cskip |= a.cskip;
    s.topk |= a.topk;
    s.freeze_shallow |= a.freeze_shallow;
    set(&mut s.omega, a.omega);
    set(&mut s.r, a.r);
    set(&mut s.lambda, a.lambda);
    set(&mut s.lr, a.lr);
    set(&mut s.lr_multiplier, a.lr_multiplier);
    set(&mut s.epochs, a.epochs);
    set(&mut s.batch_size, a.batch_size);
    set(&mut s.seed, a.seed);
    set(&mut s.template, a.template);
    apply_task!(s, a.task);
    if s.lskip && a.cache.is_none() {
        bail!("--lskip requires --cache");
    }
    let model = load_model(&a.checkpoint)?;
    let task = s.task().generate()?;
    let cache = match &a.cache {
        Some(p) if s.lskip => Some(FeatureCache::load(p).with_context(|| format!("loading cache {}", p.display()))?),
        _ => None,
    };
    let (tuned, report) = tune(&model, &task, cache.as_ref(), &s.train())?;
    report.write(out)?;
    let ckpt = out.join("tuned.ckpt");
    tuned.save(&ckpt)?;
    eprintln!(
        "base {:.2} new {:.2} H {:.2}, {:.3e} MACs/step",
        report.tuned.base, report.tuned.new, report.tuned.h, report.mean_step_macs
    );
    let report_path = out.join("run_report.json");
    let mut artifacts: Vec<(&str, &Path)> = vec![
        ("checkpoint", &a.checkpoint),
        ("run_report", &report_path),
        ("tuned", &ckpt),
    ];
    if let (Some(p), true) = (&a.cache, s.lskip) {
        artifacts.push(("cache", p));
    }
    write_manifest(out, "tune", a.config, &s, &artifacts)?;
    println!("{}", report_path.display());
    Ok(())
}

fn cmd_diagnose(out: &Path, a: DiagnoseArgs) -> Result<()> {
    let mut s: DiagnoseSettings = load(a.config.as_deref())?;
    set(&mut s.samples, a.samples);
    set(&mut s.bins, a.bins);
    set(&mut s.seed, a.seed);
    apply_task!(s, a.task);
    if s.bins == 0 {
        bail!("bins must be positive");
    }
    let before = load_model(&a.before)?;
    let after = load_model(&a.after)?;
    let task = s.task().generate()?;
    let samples = probe_samples(&task, s.samples, s.seed);

    let fs = fs_profile(&before, &after, &task, &samples, &s.template)?;
    let fs_path = out.join("fs_profile.csv");
    write_fs_csv(&fs_path, &fs)?;

    let records = gd_records(&after, &task, &samples, &s.template)?;
    let gd_path = out.join("gd_hist.csv");
    write_gd_csv(&gd_path, &records)?;
    let hist = GdHistogram::new(records, s.bins);
    eprintln!(
        "GD histogram {:?}, lowest bin holds {:.1}%",
        hist.counts,
        100.0 * hist.lowest_bin_fraction()
    );

    let tokens = class_tokens(&task, &s.template, before.config.max_text_len)?;
    let base: Vec<_> = task.classes(Split::Base).map(|c| tokens[c].clone()).collect();
    let omegas: Vec<usize> = s
        .cost_omegas
        .iter()
        .copied()
        .filter(|&w| w < before.config.layers)
        .collect();
    let image = &task.train[samples.first().copied().unwrap_or(0)].image;
    let rows: Vec<CostRow> = cost_grid(&before, image, &base, &omegas, &s.cost_fractions)?
        .iter()
        .map(|p| p.row())
        .collect();
    let cost_path = out.join("cost.csv");
    write_cost_csv(&cost_path, &rows)?;

    write_manifest(
        out,
        "diagnose",
        a.config,
        &s,
        &[
            ("before", &a.before),
            ("after", &a.after),
            ("fs_profile", &fs_path),
            ("gd_hist", &gd_path),
            ("cost", &cost_path),
        ],
    )?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = out_dir(cli.out);
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&out, a),
        Command::Cache(a) => cmd_cache(&out, a),
        Command::Tune(a) => cmd_tune(&out, a),
        Command::Diagnose(a) => cmd_diagnose(&out, a),
        Command::Report(a) => report::run(&out, &a.runs),
    }
}
