//! The `dkd` command line.
//!
//! Every subcommand resolves a [`RunConfig`] (flag > config file >
//! default), creates a run directory and writes the resolved config there
//! before doing anything else. Failures print one line,
//! `error[<class>]: <message>`, and exit non-zero.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::generate_corpus_dir;
use crate::engine::pipeline::{save_eval, write_config, CORPUS_DIR};
use crate::engine::{
    check_objective, compare, distill, evaluate, frozen_roles_from, load_snapshot, prepare_data, run_pipeline,
    train_student_raw, train_teacher_ft, train_teacher_raw, DistillMethod, ObjectiveCheck, RunConfig,
};
use crate::error::{Error, Result};
use crate::lm::{ModelSnapshot, Stage, Vocab};
use crate::wire::server::DEFAULT_MAX_BATCH;
use crate::wire::{spawn_server, Endpoint, ServedModels};

/// Environment variable naming the root under which run directories go.
pub const RUN_ROOT_ENV: &str = "DKD_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "dkd", version, about = "Shift-aware knowledge distillation on desk-scale language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pretraining and instruction corpora.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory (default: <run dir>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one base stage and write its snapshot.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        stage: BaseStage,
    },
    /// Distill student_raw with the configured method.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Serve frozen teacher logits until interrupted.
    ServeLogits {
        #[arg(long)]
        teacher_raw: Option<PathBuf>,
        #[arg(long)]
        teacher_ft: Option<PathBuf>,
        /// host:port or a Unix socket path.
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long, default_value_t = DEFAULT_MAX_BATCH)]
        max_batch: u16,
    },
    /// ROUGE and response cross-entropy of a snapshot on the test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Finite-difference check of an objective's gradient.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        model: GradModel,
        /// sft, fkl, rkl, seqkd, delta or v1..v8.
        #[arg(long, default_value = "delta")]
        loss: String,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fail when the largest relative error reaches this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// All four stages for one method, then evaluation.
    RunPipeline {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Every listed method from shared base snapshots; prints the tables.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "sft,fkl,rkl,seqkd,delta")]
        methods: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaseStage {
    TeacherRaw,
    TeacherFt,
    StudentRaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradModel {
    Tiny,
}

/// Config file and the flags that override it.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exact run directory (default: <DKD_RUN_DIR or runs>/<timestamp>-seed<seed>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_squared: bool,
    #[arg(long)]
    pub allow_nontunable: bool,
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    /// `local`, host:port or a socket path.
    #[arg(long)]
    pub teacher_raw: Option<String>,
    #[arg(long)]
    pub teacher_ft: Option<String>,
    #[arg(long)]
    pub teacher_raw_snapshot: Option<PathBuf>,
    #[arg(long)]
    pub teacher_ft_snapshot: Option<PathBuf>,
    #[arg(long)]
    pub student_raw_snapshot: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub distill_steps: Option<usize>,
    #[arg(long)]
    pub decode_limit: Option<usize>,
    /// Any config key, as KEY=VALUE. Repeatable; named flags win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// Flag overrides in application order.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut bad = Vec::new();
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
                None => bad.push(format!("--set {kv:?} is not KEY=VALUE")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("seed", self.seed.map(|x| x.to_string()));
        put("method", self.method.clone());
        put("alpha", self.alpha.map(|x| x.to_string()));
        put("lambda", self.lambda.map(|x| x.to_string()));
        put("tau", self.tau.map(|x| x.to_string()));
        put("tau_squared", self.tau_squared.then(|| "true".into()));
        put("allow_nontunable", self.allow_nontunable.then(|| "true".into()));
        put("corpus_dir", path(&self.corpus_dir));
        put("teacher_raw", self.teacher_raw.clone());
        put("teacher_ft", self.teacher_ft.clone());
        put("teacher_raw_snapshot", path(&self.teacher_raw_snapshot));
        put("teacher_ft_snapshot", path(&self.teacher_ft_snapshot));
        put("student_raw_snapshot", path(&self.student_raw_snapshot));
        put("batch_size", self.batch_size.map(|x| x.to_string()));
        put("lr", self.lr.map(|x| x.to_string()));
        put("distill_steps", self.distill_steps.map(|x| x.to_string()));
        put("decode_limit", self.decode_limit.map(|x| x.to_string()));
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let overrides = self.overrides()?;
        match &self.config {
            Some(p) => RunConfig::load(p, &overrides),
            None => RunConfig::resolve(None, &overrides),
        }
    }

    /// Creates the run directory and writes the resolved config into it.
    pub fn start(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = self.resolve()?;
        let dir = match &self.run_dir {
            Some(d) => d.clone(),
            None => fresh_run_dir(&run_root(), cfg.seed),
        };
        write_config(&dir, &cfg)?;
        Ok((cfg, dir))
    }
}

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_RUN_ROOT.into())
}

/// `<root>/<UTC timestamp>-seed<seed>`, suffixed if it already exists.
pub fn fresh_run_dir(root: &Path, seed: u64) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = root.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    dir
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(vec![format!("{key} must be set for this command")]))
}

fn println_flush(s: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", s.as_ref());
    let _ = out.flush();
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let (cfg, dir) = config.start()?;
            let out = out.unwrap_or_else(|| dir.join(CORPUS_DIR));
            let manifest = generate_corpus_dir(&cfg.corpus_spec(), &Vocab::default(), &out)?;
            print!("{}", manifest.to_text());
            println_flush(format!("corpus_dir={}", out.display()));
        }
        Command::Train { config, stage } => {
            let (cfg, dir) = config.start()?;
            let data = prepare_data(&cfg, &dir)?;
            let logs = dir.join("logs");
            std::fs::create_dir_all(&logs).map_err(|e| Error::io("creating logs", e))?;
            let (name, snap) = match stage {
                BaseStage::TeacherRaw => ("teacher_raw", train_teacher_raw(&cfg, &data, Some(&logs))?),
                BaseStage::TeacherFt => {
                    let raw = load_snapshot(&require(&cfg.teacher_raw_snapshot, "teacher_raw_snapshot")?, &data, Stage::Raw)?;
                    ("teacher_ft", train_teacher_ft(&cfg, &data, &raw, Some(&logs))?)
                }
                BaseStage::StudentRaw => ("student_raw", train_student_raw(&cfg, &data, Some(&logs))?),
            };
            let path = dir.join(format!("{name}.snap"));
            snap.save(&path)?;
            println_flush(format!("snapshot={}", path.display()));
        }
        Command::Distill { config } => {
            let (cfg, dir) = config.start()?;
            let data = prepare_data(&cfg, &dir)?;
            let student_raw = load_snapshot(&require(&cfg.student_raw_snapshot, "student_raw_snapshot")?, &data, Stage::Raw)?;
            let teacher_raw = cfg.teacher_raw_snapshot.as_ref().map(|p| load_snapshot(p, &data, Stage::Raw)).transpose()?;
            let teacher_ft = cfg.teacher_ft_snapshot.as_ref().map(|p| load_snapshot(p, &data, Stage::Ft)).transpose()?;
            let roles = frozen_roles_from(&cfg, &student_raw, teacher_raw.as_ref(), teacher_ft.as_ref())?;
            let outcome = distill(&cfg, cfg.method, &data, &student_raw, &roles, Some(&dir))?;
            let path = dir.join(format!("student_{}.snap", cfg.method));
            outcome.snapshot.save(&path)?;
            let eval = evaluate(&cfg.method.label(), &outcome.snapshot.model, &data, cfg.decode_limit)?;
            save_eval(&dir, &format!("student_{}", cfg.method), &eval)?;
            if let Some(last) = outcome.records.last() {
                println_flush(format!("final_total={:.6}", last.loss.total));
            }
            print_eval(&eval.label, &eval.report, eval.response_ce);
            println_flush(format!("snapshot={}", path.display()));
        }
        Command::ServeLogits { teacher_raw, teacher_ft, listen, max_batch } => {
            let load = |p: Option<PathBuf>| p.map(|p| ModelSnapshot::load(&p).map(|s| s.model)).transpose();
            let models = ServedModels::new(load(teacher_raw)?, load(teacher_ft)?, max_batch)?;
            let endpoint: Endpoint = listen.parse()?;
            let stop = Arc::new(AtomicBool::new(false));
            {
                let stop = stop.clone();
                ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
                    .map_err(|e| Error::Transport(format!("installing signal handler: {e}")))?;
            }
            let server = spawn_server(models, &endpoint, Some(stop.clone()))?;
            println_flush(format!("listening={}", server.endpoint()));
            while !stop.load(Ordering::SeqCst) && server.is_running() {
                std::thread::sleep(Duration::from_millis(50));
            }
            let (requests, errors) =
                (server.stats().requests.load(Ordering::Relaxed), server.stats().errors.load(Ordering::Relaxed));
            server.shutdown();
            println_flush(format!("stopped requests={requests} errors={errors}"));
        }
        Command::Evaluate { config, snapshot } => {
            let (cfg, dir) = config.start()?;
            let data = prepare_data(&cfg, &dir)?;
            let snap = ModelSnapshot::load_for_vocab(&snapshot, data.vocab.fingerprint())?;
            let label = snapshot.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
            let eval = evaluate(&label, &snap.model, &data, cfg.decode_limit)?;
            save_eval(&dir, &label, &eval)?;
            print_eval(&label, &eval.report, eval.response_ce);
        }
        Command::Gradcheck { model: GradModel::Tiny, loss, alpha, lambda, tau, samples, epsilon, seed, tolerance } => {
            let method: DistillMethod = loss.parse()?;
            let report = check_objective(&ObjectiveCheck { method, alpha, lambda, tau, samples, epsilon, seed })?;
            println_flush(format!("model=tiny loss={method}\n{report}"));
            if report.max_rel_error >= tolerance {
                return Err(Error::Domain(format!(
                    "max relative error {:.3e} is not below {tolerance:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::RunPipeline { config } => {
            let (cfg, dir) = config.start()?;
            let r = run_pipeline(&cfg, &dir)?;
            print_eval(&r.eval.label, &r.eval.report, r.eval.response_ce);
            println_flush(format!("student_raw_response_ce={:.6}", r.student_raw_ce));
            println_flush(format!("run_dir={}", dir.display()));
        }
        Command::Compare { config, methods } => {
            let (cfg, dir) = config.start()?;
            let methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<DistillMethod>>>()?;
            let report = compare(&cfg, &methods, &dir)?;
            print!("{}", report.to_text());
            println_flush(format!("run_dir={}", dir.display()));
        }
    }
    Ok(())
}

fn print_eval(label: &str, r: &crate::rouge::EvalReport, ce: f64) {
    println_flush(format!(
        "model={label} rouge1_f={:.4} rouge2_f={:.4} rougeL_f={:.4} response_ce={ce:.4} failures={}",
        r.rouge1,
        r.rouge2,
        r.rouge_l,
        r.failures()
    ));
}

/// One-line error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    let prefix = format!("{} error: ", e.class());
    format!("error[{}]: {}", e.class(), msg.strip_prefix(&prefix).unwrap_or(&msg))
}

/// Entry point of the `dkd` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayHelpOnMissingArgumentOrSubcommand, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
