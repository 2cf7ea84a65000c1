//! Staged training, distillation, evaluation and comparison runs.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod pipeline;
pub mod seqkd;
pub mod train;

pub use config::{DistillMethod, ModelShape, RunConfig, TeacherSourceSpec, CONFIG_KEYS};
pub use eval::{mean_response_kl, response_cross_entropy};
pub use gradcheck::{check_objective, grad_check, tiny_config, GradCheckReport, ObjectiveCheck, MAX_GRADCHECK_PARAMS};
pub use pipeline::{
    compare, distill, evaluate, frozen_roles, frozen_roles_from, load_snapshot, prepare_base, train_student_raw, train_teacher_ft, train_teacher_raw, prepare_data, run_pipeline, BaseModels, CompareReport,
    DistillOutcome, ModelEval, PipelineReport, Prepared, StageArtifacts,
};
pub use seqkd::{generate_seqkd_corpus, SeqKdCorpus};
pub use train::{batch_objective, run_stage, FrozenRoles, FrozenRows, StageSpec, StepRecord, TeacherHandle};
