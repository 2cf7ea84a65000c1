//! The training loop shared by every stage.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{train_step, Adam, AdamConfig, BatchLogits, LanguageModel, LogitSource, TokenSeq};
use crate::losses::objective::{position_loss, PositionRows, Scratch};
use crate::losses::{total_loss, KdObjective, LossBreakdown, ObjectiveConfig};
use crate::numerics::{log_softmax_into, TokenId};
use crate::wire::{PendingBatch, RemoteTeacher};

/// Gradient norms above this count towards the divergence guard.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Consecutive over-threshold steps that abort a stage.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// A frozen model: in-process, or behind a logit server.
#[derive(Debug)]
pub enum TeacherHandle {
    Local(LanguageModel),
    Remote(RemoteTeacher),
}

/// Logits that are either computed already or still on the wire.
#[derive(Debug)]
pub enum Fetch {
    Ready(BatchLogits),
    Pending(PendingBatch),
}

impl Fetch {
    pub fn wait(self) -> Result<BatchLogits> {
        match self {
            Fetch::Ready(b) => Ok(b),
            Fetch::Pending(p) => p.wait(),
        }
    }
}

impl TeacherHandle {
    /// Sends remote requests without blocking; local models are deferred
    /// until [`TeacherHandle::resolve`] so remote round trips overlap them.
    fn submit(&self, seqs: &[&[TokenId]]) -> Result<Option<Fetch>> {
        match self {
            TeacherHandle::Local(_) => Ok(None),
            TeacherHandle::Remote(r) => r.submit(seqs).map(|p| Some(Fetch::Pending(p))),
        }
    }

    fn resolve(&self, fetch: Option<Fetch>, seqs: &[&[TokenId]]) -> Result<BatchLogits> {
        match (self, fetch) {
            (_, Some(f)) => f.wait(),
            (TeacherHandle::Local(m), None) => m.forward_batch(seqs),
            (TeacherHandle::Remote(r), None) => r.batch_logits(seqs),
        }
    }
}

impl LogitSource for TeacherHandle {
    fn vocab_size(&self) -> usize {
        match self {
            TeacherHandle::Local(m) => m.vocab_size(),
            TeacherHandle::Remote(r) => r.vocab_size(),
        }
    }

    fn context_limit(&self) -> usize {
        match self {
            TeacherHandle::Local(m) => m.context_limit(),
            TeacherHandle::Remote(r) => r.context_limit(),
        }
    }

    fn batch_logits(&self, seqs: &[&[TokenId]]) -> Result<BatchLogits> {
        match self {
            TeacherHandle::Local(m) => m.forward_batch(seqs),
            TeacherHandle::Remote(r) => r.batch_logits(seqs),
        }
    }
}

/// The frozen roles a distillation objective reads from.
#[derive(Debug, Default)]
pub struct FrozenRoles {
    pub student_raw: Option<LanguageModel>,
    pub teacher_raw: Option<TeacherHandle>,
    pub teacher_ft: Option<TeacherHandle>,
}

/// Log-probabilities at temperature τ of each frozen role, one row per
/// loss position of the batch in order.
#[derive(Debug, Default)]
pub struct FrozenRows {
    pub student_raw: Option<Vec<f64>>,
    pub teacher_raw: Option<Vec<f64>>,
    pub teacher_ft: Option<Vec<f64>>,
}

fn loss_rows(logits: &BatchLogits, seqs: &[&TokenSeq], tau: f64) -> Vec<f64> {
    let v = logits.vocab;
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        for t in s.loss_positions() {
            let start = out.len();
            out.resize(start + v, 0.0);
            log_softmax_into(logits.row(i, t), tau, &mut out[start..]);
        }
    }
    out
}

impl FrozenRoles {
    /// Fetches every role `kd` needs for this batch. Remote roles are
    /// requested together before any local forward runs.
    pub fn rows(&self, kd: &KdObjective, tau: f64, seqs: &[&TokenSeq]) -> Result<FrozenRows> {
        let need = kd.required_roles();
        let toks: Vec<&[TokenId]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        fn role<'a>(want: bool, h: &'a Option<TeacherHandle>, name: &str) -> Result<Option<&'a TeacherHandle>> {
            match (want, h) {
                (false, _) => Ok(None),
                (true, Some(h)) => Ok(Some(h)),
                (true, None) => Err(Error::input(format!("objective needs {name} but none is configured"))),
            }
        }
        let tr = role(need.teacher_raw, &self.teacher_raw, "teacher_raw")?;
        let tf = role(need.teacher_ft, &self.teacher_ft, "teacher_ft")?;
        let tr_fetch = tr.map(|h| h.submit(&toks)).transpose()?.flatten();
        let tf_fetch = tf.map(|h| h.submit(&toks)).transpose()?.flatten();
        let sr = match (need.student_raw, &self.student_raw) {
            (false, _) => None,
            (true, Some(m)) => Some(loss_rows(&m.forward_batch(&toks)?, seqs, tau)),
            (true, None) => return Err(Error::input("objective needs student_raw but none is configured")),
        };
        let resolve = |h: Option<&TeacherHandle>, f: Option<Fetch>| -> Result<Option<Vec<f64>>> {
            h.map(|h| h.resolve(f, &toks).map(|b| loss_rows(&b, seqs, tau))).transpose()
        };
        Ok(FrozenRows {
            student_raw: sr,
            teacher_raw: resolve(tr, tr_fetch)?,
            teacher_ft: resolve(tf, tf_fetch)?,
        })
    }
}

/// Mean objective over every loss position of the batch. Writes
/// `d total / d logits` into `dlogits` when given.
pub fn batch_objective(
    cfg: &ObjectiveConfig,
    seqs: &[&TokenSeq],
    logits: &BatchLogits,
    frozen: &FrozenRows,
    mut dlogits: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let v = logits.vocab;
    let n: usize = seqs.iter().map(|s| s.loss_positions().len()).sum();
    if n == 0 {
        return Err(Error::input("batch has no supervised positions"));
    }
    let scale = 1.0 / n as f64;
    let mut scratch = Scratch::default();
    let (mut sft, mut kd) = (0.0, 0.0);
    let mut k = 0;
    fn slice(rows: &Option<Vec<f64>>, k: usize, v: usize) -> Option<&[f64]> {
        rows.as_ref().map(|r| &r[k * v..(k + 1) * v])
    }
    for (i, s) in seqs.iter().enumerate() {
        for t in s.loss_positions() {
            let rows = PositionRows {
                target: s.tokens[t + 1],
                student_raw: slice(&frozen.student_raw, k, v),
                teacher_raw: slice(&frozen.teacher_raw, k, v),
                teacher_ft: slice(&frozen.teacher_ft, k, v),
            };
            let grad = dlogits.as_deref_mut().map(|g| {
                let at = (logits.offsets[i] + t) * v;
                (&mut g[at..at + v], scale)
            });
            let (a, b) = position_loss(cfg, logits.row(i, t), &rows, &mut scratch, grad)?;
            sft += a;
            kd += b;
            k += 1;
        }
    }
    Ok(total_loss(cfg.lambda, sft * scale, kd * scale, n))
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// What goes into every log line besides the numbers.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub name: String,
    pub method: String,
    pub steps: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub adam: AdamConfig,
    pub objective: ObjectiveConfig,
    /// Logged α; `None` for objectives without one.
    pub alpha: Option<f64>,
}

/// logfmt line for one step.
pub fn log_line(spec: &StageSpec, r: &StepRecord) -> String {
    let mut s = String::new();
    write!(
        s,
        "step={} method={} lambda={} alpha={} sft_term={:.8} kd_term={:.8} total={:.8} gradient_norm={:.6e} wall_ms={:.3}",
        r.step,
        spec.method,
        spec.objective.lambda.get(),
        spec.alpha.map(|a| a.to_string()).unwrap_or_else(|| "none".into()),
        r.loss.sft_term,
        r.loss.kd_term,
        r.loss.total,
        r.grad_norm,
        r.wall_ms
    )
    .unwrap();
    s
}

/// Parses a log line back into a record (used to compare runs).
pub fn parse_log_line(line: &str) -> Result<StepRecord> {
    let mut rec = StepRecord { step: 0, loss: LossBreakdown::default(), grad_norm: 0.0, wall_ms: 0.0 };
    let bad = || Error::input(format!("malformed log line {line:?}"));
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        let num = || v.parse::<f64>().map_err(|_| bad());
        match k {
            "step" => rec.step = v.parse().map_err(|_| bad())?,
            "sft_term" => rec.loss.sft_term = num()?,
            "kd_term" => rec.loss.kd_term = num()?,
            "total" => rec.loss.total = num()?,
            "gradient_norm" => rec.grad_norm = num()?,
            "wall_ms" => rec.wall_ms = num()?,
            _ => {}
        }
    }
    Ok(rec)
}

/// Endless stream of batches: a fresh seeded shuffle per epoch.
#[derive(Debug)]
pub struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Training { message, .. } => Error::Training { stage: stage.into(), message },
        other => other,
    }
}

/// Trains `model` for `spec.steps` steps on `data`, writing one log line
/// per step to `log` (if given). Aborts on a non-finite loss or on
/// [`DIVERGENCE_PATIENCE`] consecutive steps with gradient norm above
/// [`DIVERGENCE_NORM`].
pub fn run_stage(
    model: &mut LanguageModel,
    data: &[TokenSeq],
    spec: &StageSpec,
    frozen: &FrozenRoles,
    log: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::input(format!("stage {} has no training data", spec.name)));
    }
    spec.objective.validate()?;
    let mut writer = match log {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(format_args!("creating {}", p.display()), e))?,
        )),
        None => None,
    };
    let mut opt = Adam::new(spec.adam, model.param_count());
    let mut batches = Batches::new(data.len(), spec.shuffle_seed);
    let mut records = Vec::with_capacity(spec.steps);
    let mut over = 0;
    let tau = spec.objective.tau.get();
    for step in 1..=spec.steps {
        let started = Instant::now();
        let idx = batches.next_batch(spec.batch_size);
        let seqs: Vec<&TokenSeq> = idx.iter().map(|&i| &data[i]).collect();
        let toks: Vec<&[TokenId]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        let frozen_rows = frozen.rows(&spec.objective.kd, tau, &seqs).map_err(|e| stage_error(&spec.name, e))?;
        let mut breakdown = LossBreakdown::default();
        let stats = train_step(model, &mut opt, &toks, |logits, dlogits| {
            breakdown = batch_objective(&spec.objective, &seqs, logits, &frozen_rows, Some(dlogits))?;
            Ok(breakdown.total)
        })
        .map_err(|e| stage_error(&spec.name, e))?;
        let rec = StepRecord {
            step,
            loss: breakdown,
            grad_norm: stats.grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", log_line(spec, &rec)).map_err(|e| Error::io("writing training log", e))?;
        }
        records.push(rec);
        over = if rec.grad_norm > DIVERGENCE_NORM { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            if let Some(w) = writer.as_mut() {
                let _ = w.flush();
            }
            return Err(Error::Training {
                stage: spec.name.clone(),
                message: format!(
                    "diverged: gradient norm above {DIVERGENCE_NORM:e} for {DIVERGENCE_PATIENCE} consecutive steps (last {:.3e} at step {step})",
                    rec.grad_norm
                ),
            });
        }
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| Error::io("writing training log", e))?;
    }
    Ok(records)
}
