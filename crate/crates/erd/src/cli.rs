//! `erd` command-line interface.
//!
//! Configuration precedence is flags over `--config` file over built-in
//! defaults. Exit codes: 0 success, 2 usage error, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use erd_core::distill::TopK;
use erd_core::objective::Strategy;
use erd_core::scene::{filter_by_step, generate_dataset, Dataset, Protocol};

use crate::config::ExperimentConfig;
use crate::dataset_io::{load_dataset, save_dataset};
use crate::error::{io_err, ErdError, Result};
use crate::report::{self, AblationRow};
use crate::snapshot::DetectorSnapshot;
use crate::trainer::{run_protocol, step_dir, StepResult, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Fixed-count sweep of the `topk` ablation on the toy grid.
pub const TOPK_SWEEP: [TopK; 5] = [TopK::Count(5), TopK::Count(10), TopK::Count(20), TopK::Count(40), TopK::All];

#[derive(Debug, Parser)]
#[command(name = "erd", version, about = "Incremental detection with elastic response distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to disk.
    Generate(GenerateArgs),
    /// Train one strategy over one protocol.
    Run(ConfigArgs),
    /// Run a named sweep and write one CSV row per configuration.
    Ablate(AblateArgs),
    /// Turn run directories into plot-ready CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_test: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub protocol: Option<Protocol>,
    /// upper_bound, finetune, kd_all, topk, erd_cls_only or erd_full.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha1: Option<f64>,
    #[arg(long)]
    pub alpha2: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Response count of the topk strategy: a positive integer or `all`.
    #[arg(long)]
    pub k: Option<TopK>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// Dataset directory written by `generate`; generated in memory otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Components,
    Alpha,
    Topk,
    Ld,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Components => "components",
            Sweep::Alpha => "alpha",
            Sweep::Topk => "topk",
            Sweep::Ld => "ld",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub sweep: Sweep,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to summarize.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(ErdError),
}

impl From<ErdError> for Failure {
    fn from(e: ErdError) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Applies defaults, then the `--config` file, then explicit flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &args.name {
        cfg.name = Some(v.clone());
    }
    if let Some(v) = args.protocol {
        cfg.protocol = v;
    }
    if let Some(s) = &args.strategy {
        cfg.train.strategy = s.parse()?;
    }
    if let Some(k) = args.k {
        match cfg.train.strategy {
            Strategy::TopK(_) => cfg.train.strategy = Strategy::TopK(k),
            other => return Err(ErdError::Config(format!("--k applies to the topk strategy, not {other}"))),
        }
    }
    let d = &mut cfg.distill;
    for (flag, slot) in [
        (args.alpha1, &mut d.alpha_cls),
        (args.alpha2, &mut d.alpha_reg),
        (args.lambda1, &mut d.lambda_cls),
        (args.lambda2, &mut d.lambda_reg),
        (args.temperature, &mut d.temperature),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs_per_step = v;
    }
    if let Some(v) = args.deterministic {
        cfg.train.deterministic = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `data` when given (checking it matches the configuration), else
/// generates the configured dataset in memory.
pub fn obtain_dataset(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            if ds.spec != cfg.scene_spec() {
                return Err(ErdError::Config(format!(
                    "dataset at {} was generated with {:?}, configuration needs {:?}",
                    dir.display(),
                    ds.spec,
                    cfg.scene_spec()
                )));
            }
            Ok(ds)
        }
        None => Ok(generate_dataset(&cfg.scene_spec(), cfg.num_train, cfg.num_test)?),
    }
}

/// The configurations of one sweep with their row labels.
pub fn ablation_variants(sweep: Sweep, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |label: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.out_dir = base.out_dir.join(format!("ablate_{}", sweep.name()));
        c.name = Some(label.replace([':', '+'], "_"));
        (label.to_string(), c)
    };
    match sweep {
        Sweep::Components => vec![
            with("upper_bound", &|c| c.train.strategy = Strategy::UpperBound),
            with("finetune", &|c| c.train.strategy = Strategy::Finetune),
            with("all_cls+all_reg", &|c| c.train.strategy = Strategy::KdAll),
            with("all_cls", &|c| {
                c.train.strategy = Strategy::KdAll;
                c.distill.lambda_reg = 0.0;
            }),
            with("all_reg", &|c| {
                c.train.strategy = Strategy::KdAll;
                c.distill.lambda_cls = 0.0;
            }),
            with("cls+ers", &|c| c.train.strategy = Strategy::ErdClsOnly),
            with("cls+reg+ers", &|c| c.train.strategy = Strategy::ErdFull),
        ],
        Sweep::Alpha => [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (2.0, 2.0)]
            .into_iter()
            .map(|(a1, a2)| {
                with(&format!("alpha_{a1}_{a2}"), &|c| {
                    c.train.strategy = Strategy::ErdFull;
                    c.distill.alpha_cls = a1;
                    c.distill.alpha_reg = a2;
                })
            })
            .collect(),
        Sweep::Topk => TOPK_SWEEP
            .into_iter()
            .map(|k| with(&format!("topk:{k}"), &|c| c.train.strategy = Strategy::TopK(k)))
            .collect(),
        Sweep::Ld => vec![
            with("ld_kl", &|c| {
                c.train.strategy = Strategy::ErdFull;
                c.distill.use_kl_localization = true;
            }),
            with("ld_l2", &|c| {
                c.train.strategy = Strategy::ErdFull;
                c.distill.use_kl_localization = false;
            }),
        ],
    }
}

/// Trains the shared step-0 detector of `cfg`.
pub fn train_base_snapshot(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<DetectorSnapshot> {
    let split = cfg.task_split()?;
    let trainer = Trainer::new(dataset, cfg)?;
    let view = filter_by_step(&dataset.train, &split, 0)?;
    let trained = trainer.train_base(&view)?;
    Ok(DetectorSnapshot {
        head: cfg.head.clone(),
        image_size: cfg.scene.image_size,
        step: 0,
        categories_seen: split.step(0)?.to_vec(),
        params: trained.params,
    })
}

/// Runs every configuration of a sweep from one shared base detector.
pub fn run_ablation(
    dataset: &Dataset,
    base_cfg: &ExperimentConfig,
    sweep: Sweep,
    base: Option<&DetectorSnapshot>,
) -> Result<Vec<AblationRow>> {
    let split = base_cfg.task_split()?;
    let trained;
    let base = match base {
        Some(b) => b,
        None => {
            trained = train_base_snapshot(dataset, base_cfg)?;
            &trained
        }
    };
    let mut rows = Vec::new();
    for (label, cfg) in ablation_variants(sweep, base_cfg) {
        let results = run_protocol(dataset, &cfg, &split, Some(base))?;
        let metrics = results.last().expect("at least one step").metrics.clone();
        rows.push(AblationRow { label, config: cfg, metrics });
    }
    Ok(rows)
}

fn print_steps(results: &[StepResult]) {
    println!("step,strategy,map,ap50,ap75,base_map,new_map");
    for r in results {
        let m = &r.metrics.metrics;
        let o = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        println!(
            "{},{},{:.4},{:.4},{:.4},{},{}",
            r.metrics.step,
            r.metrics.strategy,
            m.map,
            m.ap50,
            m.ap75,
            o(m.base_map),
            o(m.new_map)
        );
    }
}

fn cmd_generate(args: &GenerateArgs) -> std::result::Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.num_train {
        cfg.num_train = n;
    }
    if let Some(n) = args.num_test {
        cfg.num_test = n;
    }
    let spec = cfg.scene_spec();
    spec.validate().map_err(usage)?;
    let ds = generate_dataset(&spec, cfg.num_train, cfg.num_test).map_err(ErdError::from)?;
    save_dataset(&ds, &args.out)?;
    println!("{}", serde_json::to_string(&spec).expect("spec serializes"));
    Ok(())
}

fn cmd_run(args: &ConfigArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(args).map_err(usage)?;
    let ds = obtain_dataset(&cfg, args.data.as_deref())?;
    let split = cfg.task_split()?;
    let results = run_protocol(&ds, &cfg, &split, None)?;
    print_steps(&results);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(&args.config).map_err(usage)?;
    let ds = obtain_dataset(&cfg, args.config.data.as_deref())?;
    let rows = run_ablation(&ds, &cfg, args.sweep, None)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join(format!("ablate_{}.csv", args.sweep.name()));
    report::write_ablation(&rows, cfg.scene.num_categories, &path)?;
    print!("{}", fs::read_to_string(&path).map_err(io_err(&path))?);
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> std::result::Result<(), Failure> {
    let runs = args.runs.iter().map(|d| report::load_run(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    report::write_per_class(&runs, &args.out.join("per_class_ap.csv"))?;
    report::write_aggregates(&runs, &args.out.join("aggregates.csv"))?;
    report::write_losses(&runs, &args.out.join("losses.csv"))?;
    let mut pairs = Vec::new();
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            let (ca, cb) = (&a.config, &b.config);
            if ca.scene_spec() != cb.scene_spec() || ca.head != cb.head {
                log::warn!("skipping distance {} vs {}: different benchmark or architecture", a.name, b.name);
                continue;
            }
            let ds = generate_dataset(&ca.scene_spec(), ca.num_train, ca.num_test).map_err(ErdError::from)?;
            let trainer = Trainer::new(&ds, ca)?;
            let snap = |r: &report::RunRecord| DetectorSnapshot::load(&step_dir(&r.dir, r.steps.len() - 1).join("snapshot.bin"));
            pairs.push((a.name.clone(), b.name.clone(), trainer.feature_distance(&snap(a)?, &snap(b)?)?));
        }
    }
    report::write_distances(&pairs, &args.out.join("distance.csv"))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Parses `args` and executes the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
