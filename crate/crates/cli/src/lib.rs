//! The `dvox` command line: gradient checks, synthetic data, training,
//! cross-validation, placement ablations and deformable-convolution benchmarks.

pub mod bench;
pub mod config;
pub mod learner;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dvox::data::{generate_dataset, read_dataset, write_dataset, VolumeSample};
use dvox::eval::{ablation_table, cross_validate, stratified_holdout, CvReport, BASELINE_LABEL, VALIDATION_FRACTION};
use dvox::gradcheck::{self, GradOp, GroupReport};
use dvox::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use dvox::train::{finetune, train};
use dvox::{Error, Real, Rng};

use crate::bench::BenchSize;
use crate::config::RunConfig;
use crate::learner::NetLearner;

pub const DEFAULT_ABLATION: [&str; 3] = [BASELINE_LABEL, "4 ; 2", "4, 5 ; 2, 3"];

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: a check ran and did not pass.
    Verification(String),
    /// Exit 2: bad flags, configuration or sizes.
    Usage(String),
    /// Exit 3: unreadable, unwritable or malformed files.
    Io(String),
    /// Exit 1: any other error while running.
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) | Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Usage(m) | Failure::Io(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let root = match &e {
            Error::Fold { source, .. } => source.as_ref(),
            other => other,
        };
        let msg = e.to_string();
        match root {
            Error::Config(_) | Error::Argument(_) | Error::Capacity(_) | Error::Stratification(_) => Failure::Usage(msg),
            Error::Io { .. } | Error::Format(_) => Failure::Io(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "dvox", version, about = "Deformable 3D convolution experiments on volumetric data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for cross-validation folds and data generation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every operator's backward pass.
    Gradcheck {
        /// Comma-separated operator names; all when absent.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Scales analytic gradients by 1 + F to exercise the failure path.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Writes the configured synthetic dataset as volume files plus a manifest.
    GenData,
    /// Trains one model with a stratified validation split.
    Train {
        /// Fine-tune from this checkpoint using transfer semantics.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Repeated stratified cross-validation of the configured model.
    Eval {
        /// Fine-tune from this checkpoint in every fold.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validates several deformable placements and compares them with "- ; -".
    Ablate {
        /// Placement labels such as "4, 5 ; 2, 3".
        labels: Vec<String>,
    },
    /// Times regular against deformable convolution and estimates memory.
    Bench {
        /// Sizes as EXTENTxCHANNELSxK, e.g. 16x8x3.
        sizes: Vec<String>,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Refuse sizes whose estimate exceeds this many MiB.
        #[arg(long, default_value_t = 4096)]
        max_memory_mib: u64,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Loads and resolves the configuration, then runs the command.
pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(g.threads).build_global();
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &g.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    match &cli.command {
        Command::Gradcheck { ops, inject_fault } => cmd_gradcheck(&cfg, ops, *inject_fault),
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { init } => match g.precision {
            Precision::F32 => cmd_train::<f32>(&cfg, init.as_deref()),
            Precision::F64 => cmd_train::<f64>(&cfg, init.as_deref()),
        },
        Command::Eval { checkpoint } => match g.precision {
            Precision::F32 => cmd_eval::<f32>(&cfg, checkpoint.as_deref(), g.threads),
            Precision::F64 => cmd_eval::<f64>(&cfg, checkpoint.as_deref(), g.threads),
        },
        Command::Ablate { labels } => match g.precision {
            Precision::F32 => cmd_ablate::<f32>(&cfg, labels, g.threads),
            Precision::F64 => cmd_ablate::<f64>(&cfg, labels, g.threads),
        },
        Command::Bench {
            sizes,
            reps,
            max_memory_mib,
        } => cmd_bench(&cfg, sizes, *reps, *max_memory_mib, g.precision),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_data(cfg: &RunConfig) -> Result<Vec<VolumeSample>, Failure> {
    Ok(match &cfg.data.manifest {
        Some(m) => read_dataset(m)?,
        None => generate_dataset(&cfg.data.synth)?,
    })
}

pub fn gradcheck_table(reports: &[GroupReport]) -> String {
    let mut s = format!("{:<18} {:<24} {:<14} {:>7} {:>12}  status\n", "op", "case", "group", "checked", "max_rel_err");
    for r in reports {
        writeln!(
            s,
            "{:<18} {:<24} {:<14} {:>7} {:>12.3e}  {}",
            r.op.name(),
            r.case,
            r.group,
            r.checked,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    s
}

fn cmd_gradcheck(cfg: &RunConfig, names: &[String], fault: Option<f64>) -> CmdResult {
    let ops: Vec<GradOp> = if names.is_empty() {
        GradOp::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| n.trim().parse::<GradOp>().map_err(|e| Failure::Usage(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let opts = gradcheck::Options {
        seed: cfg.model.seed,
        fault,
    };
    let reports = gradcheck::check_all(&ops, opts)?;
    let table = gradcheck_table(&reports);
    print!("{table}");
    let mut csv = String::from("op,case,group,checked,max_rel_err,passed\n");
    for r in &reports {
        writeln!(csv, "{},\"{}\",{},{},{:e},{}", r.op, r.case, r.group, r.checked, r.max_rel_err, r.passed()).unwrap();
    }
    write(&cfg.output.dir.join("gradcheck.csv"), &csv)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Verification(format!(
            "{failed} of {} gradient groups exceed relative error {:e}",
            reports.len(),
            gradcheck::TOLERANCE
        )));
    }
    println!("all {} gradient groups pass (max relative error < {:e})", reports.len(), gradcheck::TOLERANCE);
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> CmdResult {
    let samples = generate_dataset(&cfg.data.synth)?;
    let manifest = write_dataset(&cfg.output.dir.join("dataset"), &samples)?;
    println!("wrote {} volumes, manifest {}", samples.len(), manifest.display());
    Ok(())
}

fn cmd_train<T: Real>(cfg: &RunConfig, init: Option<&Path>) -> CmdResult {
    let data = load_data(cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rng = Rng::new(cfg.train.seed).split_by_name("holdout");
    let (tr, va) = stratified_holdout(&data, &all, VALIDATION_FRACTION, &mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&tr), pick(&va));
    let outcome = match init {
        Some(path) => {
            let source = load_checkpoint::<T>(path)?;
            let (outcome, report) = finetune(&source, cfg.model.clone(), &train_set, &val_set, &cfg.train)?;
            println!(
                "transfer: {} copied, {} initialized, {} ignored",
                report.copied.len(),
                report.initialized.len(),
                report.ignored.len()
            );
            outcome
        }
        None => train(Model::<T>::new(cfg.model.clone())?, &train_set, &val_set, &cfg.train)?,
    };
    let out = &cfg.output.dir;
    save_checkpoint(&outcome.checkpoint(cfg.train.seed), &out.join("model.ckpt"))?;
    write(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    write(&out.join("timing.csv"), &outcome.log.timing_csv())?;
    for r in &outcome.log.records {
        let auc = r.val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!("epoch {:>3}  loss {:.5}  val_auc {auc}  lr {:e}", r.epoch, r.train_loss, r.lr);
    }
    println!(
        "kept epoch {} of {}; checkpoint {}",
        outcome.epoch,
        outcome.log.records.len(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn print_report(r: &CvReport) {
    let folds: Vec<String> = r.flat().iter().map(|a| format!("{a:.3}")).collect();
    println!("{:<20} {:.3} ({:.3})  [{}]", r.label, r.mean, r.std, folds.join(" "));
}

fn cmd_eval<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>, threads: usize) -> CmdResult {
    let data = load_data(cfg)?;
    let source = checkpoint.map(load_checkpoint::<T>).transpose()?;
    let learner = NetLearner {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        source,
    };
    let report = cross_validate(&learner, &data, &cfg.eval, &cfg.model.placement_label(), threads)?;
    write(&cfg.output.dir.join("cv_report.csv"), &report.to_csv())?;
    print_report(&report);
    Ok(())
}

/// Baseline first, then the requested placements in order.
pub fn ablation_configs(base: &ModelConfig, labels: &[String]) -> Result<Vec<ModelConfig>, Failure> {
    let requested: Vec<&str> = if labels.is_empty() {
        DEFAULT_ABLATION.to_vec()
    } else {
        labels.iter().map(String::as_str).collect()
    };
    let mut configs = vec![base.clone().with_placement(BASELINE_LABEL)?];
    let mut seen = BTreeSet::from([BASELINE_LABEL.to_string()]);
    for label in requested {
        let cfg = base.clone().with_placement(label)?;
        cfg.validate()?;
        if seen.insert(cfg.placement_label()) {
            configs.push(cfg);
        }
    }
    Ok(configs)
}

fn cmd_ablate<T: Real>(cfg: &RunConfig, labels: &[String], threads: usize) -> CmdResult {
    let configs = ablation_configs(&cfg.model, labels)?;
    let data = load_data(cfg)?;
    let mut reports = Vec::with_capacity(configs.len());
    let mut csv = String::new();
    for model in configs {
        let label = model.placement_label();
        let learner = NetLearner::<T> {
            model,
            train: cfg.train.clone(),
            source: None,
        };
        let report = cross_validate(&learner, &data, &cfg.eval, &label, threads)?;
        print_report(&report);
        let body = report.to_csv();
        csv.push_str(if csv.is_empty() { &body } else { body.split_once('\n').map_or("", |(_, rest)| rest) });
        reports.push(report);
    }
    let table = ablation_table(&reports, BASELINE_LABEL)?;
    let out = &cfg.output.dir;
    write(&out.join("cv_reports.csv"), &csv)?;
    write(&out.join("ablation.csv"), &table.to_csv())?;
    write(&out.join("ablation.md"), &table.to_markdown())?;
    println!();
    print!("{}", table.to_markdown());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, sizes: &[String], reps: usize, max_mib: u64, precision: Precision) -> CmdResult {
    if sizes.is_empty() {
        return Err(Failure::Usage("bench needs at least one size, e.g. 16x8x3".into()));
    }
    if reps == 0 {
        return Err(Failure::Usage("--reps must be at least 1".into()));
    }
    let sizes: Vec<BenchSize> = sizes
        .iter()
        .map(|s| s.parse().map_err(Failure::Usage))
        .collect::<Result<_, _>>()?;
    let max_bytes = max_mib.saturating_mul(1 << 20);
    let seed = cfg.model.seed;
    let rows = match precision {
        Precision::F32 => bench::run::<f32>(&sizes, max_bytes, reps, seed)?,
        Precision::F64 => bench::run::<f64>(&sizes, max_bytes, reps, seed)?,
    };
    let out = &cfg.output.dir;
    write(&out.join("bench.csv"), &bench::to_csv(&rows))?;
    write(&out.join("bench_timing.csv"), &bench::timing_csv(&rows))?;
    print!("{}", bench::to_table(&rows));
    let problems = bench::verify(&rows);
    if !problems.is_empty() {
        return Err(Failure::Verification(problems.join("; ")));
    }
    Ok(())
}
