//! The staged pipeline: teacher pretrain, teacher SFT, student pretrain,
//! then distillation, plus evaluation and method comparison.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{DistillMethod, RunConfig, TeacherSourceSpec};
use super::eval::{mean_response_kl, response_cross_entropy};
use super::seqkd::generate_seqkd_corpus;
use super::train::{run_stage, FrozenRoles, StageSpec, StepRecord, TeacherHandle};
use crate::corpus::{format_examples, generate_corpus_dir, load_corpus_dir, Corpus, Example};
use crate::error::{Error, Result};
use crate::lm::{file_sha256, LanguageModel, LogitSource, ModelSnapshot, Stage, TokenSeq, Transformer, Vocab};
use crate::losses::{KdObjective, Lambda, ObjectiveConfig};
use crate::rouge::{evaluate_model, EvalReport};
use crate::wire::frame::{ROLE_TEACHER_FT, ROLE_TEACHER_RAW};
use crate::wire::{Endpoint, LogitClient, RemoteTeacher};

pub const CONFIG_FILE: &str = "config.txt";
pub const CORPUS_DIR: &str = "corpus";
pub const TEACHER_RAW_SNAP: &str = "teacher_raw.snap";
pub const TEACHER_FT_SNAP: &str = "teacher_ft.snap";
pub const STUDENT_RAW_SNAP: &str = "student_raw.snap";

/// Benchmark label of the synthetic instruction tasks in result tables.
pub const BENCHMARK: &str = "synthetic-tasks";

fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format_args!("writing {}", path.display()), e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format_args!("creating {}", path.display()), e))
}

/// Tokenized corpus ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub corpus: Corpus,
    pub pretrain: Vec<TokenSeq>,
    pub sft_train: Vec<TokenSeq>,
    pub sft_test: Vec<TokenSeq>,
}

impl Prepared {
    pub fn from_corpus(vocab: Vocab, corpus: Corpus) -> Result<Self> {
        let tok = |xs: &[Example]| xs.iter().map(|e| e.to_seq(&vocab)).collect::<Result<Vec<_>>>();
        Ok(Self {
            pretrain: tok(&corpus.pretrain)?,
            sft_train: tok(&corpus.sft_train)?,
            sft_test: tok(&corpus.sft_test)?,
            corpus,
            vocab,
        })
    }
}

/// Loads `cfg.corpus_dir`, or generates the corpus into `dir/corpus`.
pub fn prepare_data(cfg: &RunConfig, dir: &Path) -> Result<Prepared> {
    let vocab = Vocab::default();
    let corpus_dir = match &cfg.corpus_dir {
        Some(d) => d.clone(),
        None => {
            let d = dir.join(CORPUS_DIR);
            generate_corpus_dir(&cfg.corpus_spec(), &vocab, &d)?;
            d
        }
    };
    let corpus = load_corpus_dir(&corpus_dir, &vocab, cfg.context_limit)?;
    Prepared::from_corpus(vocab, corpus)
}

fn sft_objective() -> ObjectiveConfig {
    ObjectiveConfig::new(KdObjective::None, Lambda::new(1.0).expect("1 is a valid lambda"))
}

fn stage_spec(cfg: &RunConfig, name: &str, method: &str, steps: usize, stream: u64, objective: ObjectiveConfig) -> StageSpec {
    StageSpec {
        name: name.into(),
        method: method.into(),
        steps,
        batch_size: cfg.batch_size,
        shuffle_seed: sub_seed(cfg.seed, stream),
        adam: cfg.adam(),
        objective,
        alpha: None,
    }
}

fn log_path(dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    dir.map(|d| d.join(format!("{name}.log")))
}

/// Stage 1: teacher next-token pretraining from a seeded init.
pub fn train_teacher_raw(cfg: &RunConfig, data: &Prepared, log_dir: Option<&Path>) -> Result<ModelSnapshot> {
    let mut model = LanguageModel::Transformer(Transformer::new(cfg.teacher_config(sub_seed(cfg.seed, 1)))?);
    let spec = stage_spec(cfg, "teacher_pretrain", "pretrain", cfg.teacher_pretrain_steps, 11, sft_objective());
    run_stage(&mut model, &data.pretrain, &spec, &FrozenRoles::default(), log_path(log_dir, "teacher_pretrain").as_deref())?;
    Ok(ModelSnapshot::new(model, Stage::Raw, data.vocab.fingerprint()))
}

/// Stage 2: supervised finetuning of the raw teacher.
pub fn train_teacher_ft(
    cfg: &RunConfig,
    data: &Prepared,
    teacher_raw: &ModelSnapshot,
    log_dir: Option<&Path>,
) -> Result<ModelSnapshot> {
    let mut model = teacher_raw.model.clone();
    let spec = stage_spec(cfg, "teacher_sft", "sft", cfg.teacher_sft_steps, 12, sft_objective());
    run_stage(&mut model, &data.sft_train, &spec, &FrozenRoles::default(), log_path(log_dir, "teacher_sft").as_deref())?;
    Ok(ModelSnapshot::new(model, Stage::Ft, data.vocab.fingerprint()))
}

/// Stage 3: student next-token pretraining.
pub fn train_student_raw(cfg: &RunConfig, data: &Prepared, log_dir: Option<&Path>) -> Result<ModelSnapshot> {
    let mut model = LanguageModel::Transformer(Transformer::new(cfg.student_config(sub_seed(cfg.seed, 2)))?);
    let spec = stage_spec(cfg, "student_pretrain", "pretrain", cfg.student_pretrain_steps, 13, sft_objective());
    run_stage(&mut model, &data.pretrain, &spec, &FrozenRoles::default(), log_path(log_dir, "student_pretrain").as_deref())?;
    Ok(ModelSnapshot::new(model, Stage::Raw, data.vocab.fingerprint()))
}

/// The three frozen snapshots every distillation starts from.
#[derive(Debug, Clone)]
pub struct BaseModels {
    pub teacher_raw: ModelSnapshot,
    pub teacher_ft: ModelSnapshot,
    pub student_raw: ModelSnapshot,
}

pub fn load_snapshot(path: &Path, data: &Prepared, want: Stage) -> Result<ModelSnapshot> {
    let snap = ModelSnapshot::load_for_vocab(path, data.vocab.fingerprint())?;
    if snap.stage != want {
        return Err(Error::Snapshot(format!("{} holds a {} model, expected {want}", path.display(), snap.stage)));
    }
    Ok(snap)
}

/// Stages 1 to 3. Snapshots named in the config are loaded instead of
/// trained; everything is (re)written into `dir`.
pub fn prepare_base(cfg: &RunConfig, data: &Prepared, dir: &Path) -> Result<BaseModels> {
    let logs = dir.join("logs");
    mkdir(&logs)?;
    let teacher_raw = match &cfg.teacher_raw_snapshot {
        Some(p) => load_snapshot(p, data, Stage::Raw)?,
        None => train_teacher_raw(cfg, data, Some(&logs))?,
    };
    teacher_raw.save(&dir.join(TEACHER_RAW_SNAP))?;
    let teacher_ft = match &cfg.teacher_ft_snapshot {
        Some(p) => load_snapshot(p, data, Stage::Ft)?,
        None => train_teacher_ft(cfg, data, &teacher_raw, Some(&logs))?,
    };
    teacher_ft.save(&dir.join(TEACHER_FT_SNAP))?;
    let student_raw = match &cfg.student_raw_snapshot {
        Some(p) => load_snapshot(p, data, Stage::Raw)?,
        None => train_student_raw(cfg, data, Some(&logs))?,
    };
    student_raw.save(&dir.join(STUDENT_RAW_SNAP))?;
    Ok(BaseModels { teacher_raw, teacher_ft, student_raw })
}

/// Connections to remote teachers, one client per distinct endpoint.
#[derive(Debug, Default)]
pub struct Clients(HashMap<String, Arc<LogitClient>>);

impl Clients {
    fn get(&mut self, cfg: &RunConfig, ep: &Endpoint) -> Arc<LogitClient> {
        self.0
            .entry(ep.to_string())
            .or_insert_with(|| Arc::new(LogitClient::with_options(ep.clone(), cfg.request_timeout(), cfg.request_retries)))
            .clone()
    }
}

fn teacher_handle(
    cfg: &RunConfig,
    clients: &mut Clients,
    source: &TeacherSourceSpec,
    role: u8,
    local: Option<&ModelSnapshot>,
    vocab: usize,
) -> Result<Option<TeacherHandle>> {
    match source {
        TeacherSourceSpec::Local => Ok(local.map(|s| TeacherHandle::Local(s.model.clone()))),
        TeacherSourceSpec::Remote(ep) => {
            let remote = RemoteTeacher::connect(clients.get(cfg, ep), role)?;
            if remote.vocab_size() != vocab {
                return Err(Error::input(format!(
                    "teacher at {ep} has {} tokens, the student {vocab}",
                    remote.vocab_size()
                )));
            }
            Ok(Some(TeacherHandle::Remote(remote)))
        }
    }
}

/// Frozen roles for distillation. A teacher configured as `local` uses
/// the given snapshot (and is absent without one); a remote teacher is
/// reached through its endpoint.
pub fn frozen_roles_from(
    cfg: &RunConfig,
    student_raw: &ModelSnapshot,
    teacher_raw: Option<&ModelSnapshot>,
    teacher_ft: Option<&ModelSnapshot>,
) -> Result<FrozenRoles> {
    let mut clients = Clients::default();
    let v = student_raw.model.vocab_size();
    Ok(FrozenRoles {
        student_raw: Some(student_raw.model.clone()),
        teacher_raw: teacher_handle(cfg, &mut clients, &cfg.teacher_raw, ROLE_TEACHER_RAW, teacher_raw, v)?,
        teacher_ft: teacher_handle(cfg, &mut clients, &cfg.teacher_ft, ROLE_TEACHER_FT, teacher_ft, v)?,
    })
}

pub fn frozen_roles(cfg: &RunConfig, base: &BaseModels) -> Result<FrozenRoles> {
    frozen_roles_from(cfg, &base.student_raw, Some(&base.teacher_raw), Some(&base.teacher_ft))
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub method: DistillMethod,
    pub snapshot: ModelSnapshot,
    pub records: Vec<StepRecord>,
    /// SeqKD only: how many teacher responses were cut at the budget.
    pub seqkd_truncated: Option<usize>,
}

/// Stage 4: trains a copy of `student_raw` with `method`. For SeqKD the
/// training targets are first regenerated by the finetuned teacher.
pub fn distill(
    cfg: &RunConfig,
    method: DistillMethod,
    data: &Prepared,
    student_raw: &ModelSnapshot,
    roles: &FrozenRoles,
    dir: Option<&Path>,
) -> Result<DistillOutcome> {
    let objective = cfg.objective(method)?;
    let mut seqkd_truncated = None;
    let seqkd_data;
    let train: &[TokenSeq] = if method == DistillMethod::SeqKd {
        let teacher = roles
            .teacher_ft
            .as_ref()
            .ok_or_else(|| Error::input("seqkd needs teacher_ft"))?;
        let generated = generate_seqkd_corpus(teacher, &data.vocab, &data.corpus.sft_train, cfg.decode_limit)?;
        if let Some(d) = dir {
            write(&d.join("seqkd_train.tsv"), &format_examples(&generated.examples))?;
            if !generated.truncated.is_empty() {
                let ids: Vec<String> = generated.truncated.iter().map(|i| i.to_string()).collect();
                write(&d.join("seqkd_truncated.txt"), &(ids.join("\n") + "\n"))?;
            }
        }
        seqkd_truncated = Some(generated.truncated.len());
        seqkd_data = generated
            .examples
            .iter()
            .map(|e| e.to_seq(&data.vocab))
            .collect::<Result<Vec<_>>>()?;
        &seqkd_data
    } else {
        &data.sft_train
    };
    let name = format!("distill_{method}");
    let mut spec = stage_spec(cfg, &name, &method.to_string(), cfg.distill_steps, 14, objective);
    spec.alpha = matches!(method, DistillMethod::Delta | DistillMethod::Variant(_)).then_some(cfg.alpha);
    let frozen_before = student_raw.to_bytes();
    let mut model = student_raw.model.clone();
    let log = dir.map(|d| d.join("logs").join(format!("{name}.log")));
    if let Some(l) = &log {
        mkdir(l.parent().unwrap())?;
    }
    let records = run_stage(&mut model, train, &spec, roles, log.as_deref())?;
    if student_raw.to_bytes() != frozen_before {
        return Err(Error::Training { stage: name, message: "student_raw changed during distillation".into() });
    }
    Ok(DistillOutcome {
        method,
        snapshot: ModelSnapshot::new(model, Stage::Distilled, data.vocab.fingerprint()),
        records,
        seqkd_truncated,
    })
}

/// Scores of one model on the held-out split.
#[derive(Debug, Clone)]
pub struct ModelEval {
    pub label: String,
    pub report: EvalReport,
    /// Mean per-token response cross-entropy, nats.
    pub response_ce: f64,
}

pub fn evaluate(label: &str, model: &dyn LogitSource, data: &Prepared, decode_limit: usize) -> Result<ModelEval> {
    Ok(ModelEval {
        label: label.into(),
        report: evaluate_model(model, &data.vocab, &data.corpus.sft_test, decode_limit)?,
        response_ce: response_cross_entropy(model, &data.sft_test)?,
    })
}

/// Writes `dir/eval/<name>.txt`.
pub fn save_eval(dir: &Path, name: &str, e: &ModelEval) -> Result<()> {
    let evals = dir.join("eval");
    mkdir(&evals)?;
    let mut text = format!("model={}\nresponse_ce={:.6}\n", e.label, e.response_ce);
    text.push_str(&e.report.to_text());
    write(&evals.join(format!("{name}.txt")), &text)
}

fn frozen_hashes(dir: &Path) -> Result<Vec<String>> {
    [TEACHER_RAW_SNAP, TEACHER_FT_SNAP, STUDENT_RAW_SNAP].iter().map(|f| file_sha256(&dir.join(f))).collect()
}

/// Everything a comparison run produced.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub dir: PathBuf,
    pub teacher_ft: ModelEval,
    pub student_raw: ModelEval,
    pub methods: Vec<(DistillMethod, ModelEval)>,
    /// Mean per-token `KL(teacher_ft ‖ teacher_raw)` on test responses.
    pub teacher_shift_kl: f64,
}

fn fmt_row(cells: &[String], widths: &[usize]) -> String {
    let padded: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
    format!("| {} |", padded.join(" | "))
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    writeln!(s, "{}", fmt_row(&head, &widths)).unwrap();
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    writeln!(s, "|-{}-|", rule.join("-|-")).unwrap();
    for r in rows {
        writeln!(s, "{}", fmt_row(r, &widths)).unwrap();
    }
    s
}

impl CompareReport {
    /// Benchmark | Method | ROUGE_1 | ROUGE_2 | ROUGE_L, one row per method.
    pub fn rouge_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|(m, e)| {
                vec![
                    BENCHMARK.to_string(),
                    m.label(),
                    format!("{:.4}", e.report.rouge1),
                    format!("{:.4}", e.report.rouge2),
                    format!("{:.4}", e.report.rouge_l),
                ]
            })
            .collect();
        table(&["Benchmark", "Method", "ROUGE_1", "ROUGE_2", "ROUGE_L"], &rows)
    }

    /// The reference models in the same layout.
    pub fn reference_table(&self) -> String {
        let rows: Vec<Vec<String>> = [&self.teacher_ft, &self.student_raw]
            .iter()
            .map(|e| {
                vec![
                    BENCHMARK.to_string(),
                    e.label.clone(),
                    format!("{:.4}", e.report.rouge1),
                    format!("{:.4}", e.report.rouge2),
                    format!("{:.4}", e.report.rouge_l),
                ]
            })
            .collect();
        table(&["Benchmark", "Model", "ROUGE_1", "ROUGE_2", "ROUGE_L"], &rows)
    }

    pub fn cross_entropy_table(&self) -> String {
        let base = self.student_raw.response_ce;
        let mut rows = vec![vec![self.student_raw.label.clone(), format!("{base:.4}"), "-".into()]];
        for (m, e) in &self.methods {
            let verdict = if e.response_ce < base { "yes" } else { "NO" };
            rows.push(vec![m.label(), format!("{:.4}", e.response_ce), verdict.into()]);
        }
        rows.push(vec![self.teacher_ft.label.clone(), format!("{:.4}", self.teacher_ft.response_ce), "-".into()]);
        table(&["Model", "Response CE (nats)", "Beats student_raw"], &rows)
    }

    /// True iff every distilled student has lower held-out response
    /// cross-entropy than the raw student.
    pub fn all_beat_student_raw(&self) -> bool {
        self.methods.iter().all(|(_, e)| e.response_ce < self.student_raw.response_ce)
    }

    pub fn ranking(&self) -> Vec<DistillMethod> {
        let mut order: Vec<&(DistillMethod, ModelEval)> = self.methods.iter().collect();
        order.sort_by(|a, b| b.1.report.rouge_l.total_cmp(&a.1.report.rouge_l));
        order.into_iter().map(|(m, _)| *m).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "Main results\n").unwrap();
        s.push_str(&self.rouge_table());
        writeln!(s, "\nReference models\n").unwrap();
        s.push_str(&self.reference_table());
        writeln!(s, "\nHeld-out response cross-entropy\n").unwrap();
        s.push_str(&self.cross_entropy_table());
        let ranking: Vec<String> = self.ranking().iter().map(|m| m.label()).collect();
        writeln!(s, "\nranking_by_rouge_l={}", ranking.join(",")).unwrap();
        writeln!(s, "teacher_shift_kl={:.6}", self.teacher_shift_kl).unwrap();
        writeln!(s, "all_beat_student_raw={}", self.all_beat_student_raw()).unwrap();
        s
    }
}

/// Validates `cfg`, creates `dir` and writes the resolved config there.
pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    mkdir(dir)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())
}

/// Writes the resolved config and prepares data and base models.
fn setup(cfg: &RunConfig, dir: &Path) -> Result<(Prepared, BaseModels)> {
    write_config(dir, cfg)?;
    let data = prepare_data(cfg, dir)?;
    let base = prepare_base(cfg, &data, dir)?;
    Ok((data, base))
}

fn distill_and_evaluate(
    cfg: &RunConfig,
    method: DistillMethod,
    data: &Prepared,
    base: &BaseModels,
    roles: &FrozenRoles,
    dir: &Path,
) -> Result<(DistillOutcome, ModelEval)> {
    let before = frozen_hashes(dir)?;
    let outcome = distill(cfg, method, data, &base.student_raw, roles, Some(dir))?;
    if frozen_hashes(dir)? != before {
        return Err(Error::Training {
            stage: format!("distill_{method}"),
            message: "a frozen snapshot file changed during distillation".into(),
        });
    }
    outcome.snapshot.save(&dir.join(format!("student_{method}.snap")))?;
    let eval = evaluate(&method.label(), &outcome.snapshot.model, data, cfg.decode_limit)?;
    save_eval(dir, &format!("student_{method}"), &eval)?;
    Ok((outcome, eval))
}

/// Paths of one pipeline run.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub dir: PathBuf,
    pub teacher_raw: PathBuf,
    pub teacher_ft: PathBuf,
    pub student_raw: PathBuf,
    pub student_distilled: PathBuf,
    pub logs: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub artifacts: StageArtifacts,
    pub outcome: DistillOutcome,
    pub eval: ModelEval,
    pub student_raw_ce: f64,
}

/// All four stages for `cfg.method`, with an evaluation report.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<PipelineReport> {
    let (data, base) = setup(cfg, dir)?;
    let roles = frozen_roles(cfg, &base)?;
    let (outcome, eval) = distill_and_evaluate(cfg, cfg.method, &data, &base, &roles, dir)?;
    let student_raw_ce = response_cross_entropy(&base.student_raw.model, &data.sft_test)?;
    let mut logs: Vec<PathBuf> = fs::read_dir(dir.join("logs"))
        .map_err(|e| Error::io("listing logs", e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    logs.sort();
    Ok(PipelineReport {
        artifacts: StageArtifacts {
            dir: dir.to_path_buf(),
            teacher_raw: dir.join(TEACHER_RAW_SNAP),
            teacher_ft: dir.join(TEACHER_FT_SNAP),
            student_raw: dir.join(STUDENT_RAW_SNAP),
            student_distilled: dir.join(format!("student_{}.snap", cfg.method)),
            logs,
        },
        outcome,
        eval,
        student_raw_ce,
    })
}

/// Runs every method from one shared set of base snapshots so that the
/// methods differ only in the distillation objective.
pub fn compare(cfg: &RunConfig, methods: &[DistillMethod], dir: &Path) -> Result<CompareReport> {
    if methods.is_empty() {
        return Err(Error::input("compare needs at least one method"));
    }
    for m in methods {
        cfg.objective(*m)?;
    }
    let (data, base) = setup(cfg, dir)?;
    let roles = frozen_roles(cfg, &base)?;
    let teacher_ft = evaluate("teacher_ft", &base.teacher_ft.model, &data, cfg.decode_limit)?;
    save_eval(dir, "teacher_ft", &teacher_ft)?;
    let student_raw = evaluate("student_raw", &base.student_raw.model, &data, cfg.decode_limit)?;
    save_eval(dir, "student_raw", &student_raw)?;
    let teacher_shift_kl = mean_response_kl(&base.teacher_ft.model, &base.teacher_raw.model, &data.sft_test)?;
    let mut results = Vec::with_capacity(methods.len());
    for &m in methods {
        let (_, eval) = distill_and_evaluate(cfg, m, &data, &base, &roles, dir)?;
        results.push((m, eval));
    }
    let report = CompareReport { dir: dir.to_path_buf(), teacher_ft, student_raw, methods: results, teacher_shift_kl };
    write(&dir.join("compare.txt"), &report.to_text())?;
    Ok(report)
}
