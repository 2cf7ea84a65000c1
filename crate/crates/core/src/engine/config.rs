//! Run configuration: a flat `key = value` grammar with `#` comments.
//!
//! Values are resolved in order default < config file < command-line flag.
//! Every bad key or value is reported at once.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::corpus::{CorpusSpec, TaskMix};
use crate::delta_target::{classify_tunability, Alpha, VariantId};
use crate::error::{Error, Result};
use crate::lm::{AdamConfig, TransformerConfig};
use crate::losses::objective::{KdObjective, ObjectiveConfig};
use crate::losses::Lambda;
use crate::numerics::Temperature;
use crate::wire::Endpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistillMethod {
    Sft,
    Fkl,
    Rkl,
    SeqKd,
    Delta,
    Variant(VariantId),
}

impl DistillMethod {
    pub const BASELINES: [DistillMethod; 5] =
        [DistillMethod::Sft, DistillMethod::Fkl, DistillMethod::Rkl, DistillMethod::SeqKd, DistillMethod::Delta];

    /// Row label in result tables.
    pub fn label(&self) -> String {
        match self {
            DistillMethod::Sft => "SFT".into(),
            DistillMethod::Fkl => "FKL".into(),
            DistillMethod::Rkl => "RKL".into(),
            DistillMethod::SeqKd => "SeqKD".into(),
            DistillMethod::Delta => "Delta-KD".into(),
            DistillMethod::Variant(v) => format!("Delta-KD {v}"),
        }
    }

    pub fn objective(&self, alpha: Alpha) -> KdObjective {
        match self {
            DistillMethod::Sft | DistillMethod::SeqKd => KdObjective::None,
            DistillMethod::Fkl => KdObjective::Forward,
            DistillMethod::Rkl => KdObjective::Reverse,
            DistillMethod::Delta => KdObjective::Delta(alpha),
            DistillMethod::Variant(variant) => KdObjective::Parallel { variant: *variant, alpha },
        }
    }

    /// Methods trained on supervised targets only (λ forced to 1).
    pub fn is_pure_sft(&self) -> bool {
        matches!(self, DistillMethod::Sft | DistillMethod::SeqKd)
    }
}

impl fmt::Display for DistillMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistillMethod::Sft => f.write_str("sft"),
            DistillMethod::Fkl => f.write_str("fkl"),
            DistillMethod::Rkl => f.write_str("rkl"),
            DistillMethod::SeqKd => f.write_str("seqkd"),
            DistillMethod::Delta => f.write_str("delta"),
            DistillMethod::Variant(v) => write!(f, "{}", v.to_string().to_lowercase()),
        }
    }
}

impl FromStr for DistillMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sft" => DistillMethod::Sft,
            "fkl" => DistillMethod::Fkl,
            "rkl" => DistillMethod::Rkl,
            "seqkd" => DistillMethod::SeqKd,
            "delta" => DistillMethod::Delta,
            other => DistillMethod::Variant(other.parse().map_err(|_| {
                Error::input(format!("unknown method {s:?} (sft, fkl, rkl, seqkd, delta, v1..v8)"))
            })?),
        })
    }
}

/// Where a frozen teacher role comes from during distillation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherSourceSpec {
    Local,
    Remote(Endpoint),
}

impl fmt::Display for TeacherSourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherSourceSpec::Local => f.write_str("local"),
            TeacherSourceSpec::Remote(ep) => write!(f, "{ep}"),
        }
    }
}

impl FromStr for TeacherSourceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "local" {
            Ok(TeacherSourceSpec::Local)
        } else {
            s.parse().map(TeacherSourceSpec::Remote)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Existing corpus directory; generated into the run directory if unset.
    pub corpus_dir: Option<PathBuf>,
    pub pretrain_size: usize,
    pub sft_train_size: usize,
    pub sft_test_size: usize,
    pub task_mix: TaskMix,
    pub context_limit: usize,
    pub teacher: ModelShape,
    pub student: ModelShape,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip: Option<f64>,
    pub teacher_pretrain_steps: usize,
    pub teacher_sft_steps: usize,
    pub student_pretrain_steps: usize,
    pub distill_steps: usize,
    pub method: DistillMethod,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub tau_squared: bool,
    pub allow_nontunable: bool,
    pub teacher_raw: TeacherSourceSpec,
    pub teacher_ft: TeacherSourceSpec,
    pub teacher_raw_snapshot: Option<PathBuf>,
    pub teacher_ft_snapshot: Option<PathBuf>,
    pub student_raw_snapshot: Option<PathBuf>,
    pub decode_limit: usize,
    pub request_timeout_ms: u64,
    pub request_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus_dir: None,
            pretrain_size: 50_000,
            sft_train_size: 5_000,
            sft_test_size: 500,
            task_mix: TaskMix::default(),
            context_limit: 64,
            teacher: ModelShape { embed_dim: 64, num_layers: 2, num_heads: 4, ff_dim: 256 },
            student: ModelShape { embed_dim: 32, num_layers: 1, num_heads: 2, ff_dim: 128 },
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
            clip: Some(1.0),
            teacher_pretrain_steps: 3000,
            teacher_sft_steps: 1500,
            student_pretrain_steps: 3000,
            distill_steps: 1500,
            method: DistillMethod::Delta,
            alpha: 1.0,
            lambda: 0.5,
            tau: 1.0,
            tau_squared: false,
            allow_nontunable: false,
            teacher_raw: TeacherSourceSpec::Local,
            teacher_ft: TeacherSourceSpec::Local,
            teacher_raw_snapshot: None,
            teacher_ft_snapshot: None,
            student_raw_snapshot: None,
            decode_limit: 24,
            request_timeout_ms: 30_000,
            request_retries: 3,
        }
    }
}

/// Every accepted key, in the order the resolved config is written.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "corpus_dir",
    "pretrain_size",
    "sft_train_size",
    "sft_test_size",
    "task_mix",
    "context_limit",
    "teacher_embed_dim",
    "teacher_layers",
    "teacher_heads",
    "teacher_ff_dim",
    "student_embed_dim",
    "student_layers",
    "student_heads",
    "student_ff_dim",
    "batch_size",
    "lr",
    "warmup_steps",
    "clip",
    "teacher_pretrain_steps",
    "teacher_sft_steps",
    "student_pretrain_steps",
    "distill_steps",
    "method",
    "alpha",
    "lambda",
    "tau",
    "tau_squared",
    "allow_nontunable",
    "teacher_raw",
    "teacher_ft",
    "teacher_raw_snapshot",
    "teacher_ft_snapshot",
    "student_raw_snapshot",
    "decode_limit",
    "request_timeout_ms",
    "request_retries",
];

fn parse<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: {v:?} is not a boolean")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "corpus_dir" => self.corpus_dir = opt_path(v),
            "pretrain_size" => self.pretrain_size = parse(key, v)?,
            "sft_train_size" => self.sft_train_size = parse(key, v)?,
            "sft_test_size" => self.sft_test_size = parse(key, v)?,
            "task_mix" => self.task_mix = v.parse().map_err(|e: Error| format!("task_mix: {e}"))?,
            "context_limit" => self.context_limit = parse(key, v)?,
            "teacher_embed_dim" => self.teacher.embed_dim = parse(key, v)?,
            "teacher_layers" => self.teacher.num_layers = parse(key, v)?,
            "teacher_heads" => self.teacher.num_heads = parse(key, v)?,
            "teacher_ff_dim" => self.teacher.ff_dim = parse(key, v)?,
            "student_embed_dim" => self.student.embed_dim = parse(key, v)?,
            "student_layers" => self.student.num_layers = parse(key, v)?,
            "student_heads" => self.student.num_heads = parse(key, v)?,
            "student_ff_dim" => self.student.ff_dim = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "clip" => self.clip = if v == "none" { None } else { Some(parse(key, v)?) },
            "teacher_pretrain_steps" => self.teacher_pretrain_steps = parse(key, v)?,
            "teacher_sft_steps" => self.teacher_sft_steps = parse(key, v)?,
            "student_pretrain_steps" => self.student_pretrain_steps = parse(key, v)?,
            "distill_steps" => self.distill_steps = parse(key, v)?,
            "method" => self.method = v.parse().map_err(|e: Error| format!("method: {e}"))?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "tau_squared" => self.tau_squared = parse_bool(key, v)?,
            "allow_nontunable" => self.allow_nontunable = parse_bool(key, v)?,
            "teacher_raw" => self.teacher_raw = v.parse().map_err(|e: Error| format!("teacher_raw: {e}"))?,
            "teacher_ft" => self.teacher_ft = v.parse().map_err(|e: Error| format!("teacher_ft: {e}"))?,
            "teacher_raw_snapshot" => self.teacher_raw_snapshot = opt_path(v),
            "teacher_ft_snapshot" => self.teacher_ft_snapshot = opt_path(v),
            "student_raw_snapshot" => self.student_raw_snapshot = opt_path(v),
            "decode_limit" => self.decode_limit = parse(key, v)?,
            "request_timeout_ms" => self.request_timeout_ms = parse(key, v)?,
            "request_retries" => self.request_retries = parse(key, v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs in order, collecting every failure.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let bad: Vec<String> = pairs.into_iter().filter_map(|(k, v)| self.set(k, v).err()).collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Resolves defaults, then the config file text, then flag overrides,
    /// and validates the result.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut bad = Vec::new();
        if let Some(text) = file_text {
            let (pairs, malformed) = split_pairs(text);
            bad.extend(malformed);
            if let Err(Error::Config(b)) = cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))) {
                bad.extend(b);
            }
        }
        if let Err(Error::Config(b)) = cfg.apply(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str()))) {
            bad.extend(b);
        }
        if let Err(Error::Config(b)) = cfg.validate() {
            bad.extend(b);
        }
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format_args!("reading {}", path.display()), e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        };
        positive("pretrain_size", self.pretrain_size);
        positive("sft_train_size", self.sft_train_size);
        positive("sft_test_size", self.sft_test_size);
        positive("batch_size", self.batch_size);
        positive("decode_limit", self.decode_limit);
        for (role, shape) in [("teacher", self.teacher_config(0)), ("student", self.student_config(0))] {
            if let Err(Error::Config(b)) = shape.validate() {
                bad.extend(b.into_iter().map(|m| format!("{role}: {m}")));
            }
        }
        if let Err(Error::Config(b)) = self.adam().validate() {
            bad.extend(b);
        }
        if Alpha::new(self.alpha).is_err() {
            bad.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if Lambda::new(self.lambda).is_err() {
            bad.push(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if Temperature::new(self.tau).is_err() {
            bad.push(format!("tau must be positive, got {}", self.tau));
        }
        if self.request_timeout_ms == 0 {
            bad.push("request_timeout_ms must be positive".into());
        }
        let nontunable = match self.method {
            DistillMethod::Variant(v) if !self.allow_nontunable && !classify_tunability(&v.spec()) => Some(v),
            _ => None,
        };
        match (bad.is_empty(), nontunable) {
            (true, None) => Ok(()),
            // a lone non-tunable request keeps its own error class
            (true, Some(v)) => Err(Error::NonTunable(v.to_string())),
            (false, Some(v)) => {
                bad.push(format!("method {v} is non-tunable; set allow_nontunable = true to run it for diagnostics"));
                Err(Error::Config(bad))
            }
            (false, None) => Err(Error::Config(bad)),
        }
    }

    fn get(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
        match key {
            "seed" => self.seed.to_string(),
            "corpus_dir" => path(&self.corpus_dir),
            "pretrain_size" => self.pretrain_size.to_string(),
            "sft_train_size" => self.sft_train_size.to_string(),
            "sft_test_size" => self.sft_test_size.to_string(),
            "task_mix" => self.task_mix.to_string(),
            "context_limit" => self.context_limit.to_string(),
            "teacher_embed_dim" => self.teacher.embed_dim.to_string(),
            "teacher_layers" => self.teacher.num_layers.to_string(),
            "teacher_heads" => self.teacher.num_heads.to_string(),
            "teacher_ff_dim" => self.teacher.ff_dim.to_string(),
            "student_embed_dim" => self.student.embed_dim.to_string(),
            "student_layers" => self.student.num_layers.to_string(),
            "student_heads" => self.student.num_heads.to_string(),
            "student_ff_dim" => self.student.ff_dim.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "clip" => self.clip.map(|c| c.to_string()).unwrap_or_else(|| "none".into()),
            "teacher_pretrain_steps" => self.teacher_pretrain_steps.to_string(),
            "teacher_sft_steps" => self.teacher_sft_steps.to_string(),
            "student_pretrain_steps" => self.student_pretrain_steps.to_string(),
            "distill_steps" => self.distill_steps.to_string(),
            "method" => self.method.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "tau_squared" => self.tau_squared.to_string(),
            "allow_nontunable" => self.allow_nontunable.to_string(),
            "teacher_raw" => self.teacher_raw.to_string(),
            "teacher_ft" => self.teacher_ft.to_string(),
            "teacher_raw_snapshot" => path(&self.teacher_raw_snapshot),
            "teacher_ft_snapshot" => path(&self.teacher_ft_snapshot),
            "student_raw_snapshot" => path(&self.student_raw_snapshot),
            "decode_limit" => self.decode_limit.to_string(),
            "request_timeout_ms" => self.request_timeout_ms.to_string(),
            "request_retries" => self.request_retries.to_string(),
            other => unreachable!("key {other} missing from RunConfig::get"),
        }
    }

    /// The fully resolved configuration, loadable with [`RunConfig::resolve`].
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for k in CONFIG_KEYS {
            writeln!(s, "{k} = {}", self.get(k)).unwrap();
        }
        s
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            pretrain_size: self.pretrain_size,
            sft_train_size: self.sft_train_size,
            sft_test_size: self.sft_test_size,
            task_mix: self.task_mix,
            context_limit: self.context_limit,
        }
    }

    fn shape_config(&self, s: ModelShape, seed: u64) -> TransformerConfig {
        TransformerConfig {
            vocab_size: crate::lm::Vocab::default().size(),
            embed_dim: s.embed_dim,
            num_layers: s.num_layers,
            num_heads: s.num_heads,
            context_limit: self.context_limit,
            ff_dim: s.ff_dim,
            seed,
        }
    }

    pub fn teacher_config(&self, seed: u64) -> TransformerConfig {
        self.shape_config(self.teacher, seed)
    }

    pub fn student_config(&self, seed: u64) -> TransformerConfig {
        self.shape_config(self.student, seed)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, clip: self.clip, warmup_steps: self.warmup_steps, ..AdamConfig::default() }
    }

    /// The per-position objective for `method`. Pure-SFT methods force λ = 1.
    pub fn objective(&self, method: DistillMethod) -> Result<ObjectiveConfig> {
        let alpha = Alpha::new(self.alpha)?;
        let lambda = if method.is_pure_sft() { Lambda::new(1.0)? } else { Lambda::new(self.lambda)? };
        let cfg = ObjectiveConfig {
            kd: method.objective(alpha),
            lambda,
            tau: Temperature::new(self.tau)?,
            tau_squared: self.tau_squared,
            allow_nontunable: self.allow_nontunable,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

fn split_pairs(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => pairs.push((k.trim().to_string(), v.trim().to_string())),
            _ => bad.push(format!("line {}: expected key = value, got {raw:?}", i + 1)),
        }
    }
    (pairs, bad)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let (pairs, bad) = split_pairs(text);
    if bad.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Config(bad))
    }
}
