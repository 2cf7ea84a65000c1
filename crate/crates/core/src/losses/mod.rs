//! The loss family over per-position distributions.
//!
//! These functions take already-normalized rows and a position mask and
//! return the mean over masked positions. They are the reference values;
//! the training loop goes through [`objective`], which computes the same
//! quantities together with gradients w.r.t. the student logits.

pub mod objective;

use crate::delta_target::{parallel_target, synth_target, Alpha, RoleQuad, VariantSpec};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, kl_divergence, LogProbRow, TokenId};

pub use objective::{KdObjective, ObjectiveConfig, PositionRows};

/// Mixing weight between the supervised term and the distillation term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambda(f64);

impl Lambda {
    pub fn new(lam: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lam) {
            Ok(Self(lam))
        } else {
            Err(Error::domain(format!("lambda must lie in [0, 1], got {lam}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Per-step loss record, in nats per response token.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub sft_term: f64,
    pub kd_term: f64,
    pub total: f64,
    pub token_count: usize,
}

pub fn total_loss(lam: Lambda, sft_term: f64, kd_term: f64, token_count: usize) -> LossBreakdown {
    let l = lam.get();
    LossBreakdown {
        sft_term,
        kd_term,
        total: l * sft_term + (1.0 - l) * kd_term,
        token_count,
    }
}

fn check_mask(len: usize, mask: &[bool]) -> Result<usize> {
    if mask.len() != len {
        return Err(Error::input(format!(
            "mask has {} entries for {len} positions",
            mask.len()
        )));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::input("mask selects no positions"));
    }
    Ok(n)
}

fn masked_mean(
    len: usize,
    mask: &[bool],
    mut term: impl FnMut(usize) -> Result<f64>,
) -> Result<f64> {
    let n = check_mask(len, mask)?;
    let mut acc = 0.0;
    for i in (0..len).filter(|&i| mask[i]) {
        acc += term(i)?;
    }
    Ok(acc / n as f64)
}

/// Mean cross-entropy of `targets` under the student rows over masked positions.
pub fn sft_loss(targets: &[TokenId], student: &[LogProbRow], mask: &[bool]) -> Result<f64> {
    if targets.len() != student.len() {
        return Err(Error::input("targets and student rows differ in length"));
    }
    masked_mean(student.len(), mask, |i| cross_entropy(targets[i], &student[i]))
}

/// Mean `KL(teacher ‖ student)`.
pub fn fkl_loss(teacher: &[LogProbRow], student: &[LogProbRow], mask: &[bool]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::input("teacher and student rows differ in length"));
    }
    masked_mean(student.len(), mask, |i| kl_divergence(&teacher[i], &student[i]))
}

/// Mean `KL(student ‖ teacher)`.
pub fn rkl_loss(teacher: &[LogProbRow], student: &[LogProbRow], mask: &[bool]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::input("teacher and student rows differ in length"));
    }
    masked_mean(student.len(), mask, |i| kl_divergence(&student[i], &teacher[i]))
}

/// Mean `KL(synthetic target ‖ student)`, the student being each quad's
/// trainable row.
pub fn delta_kd_loss(quads: &[RoleQuad], alpha: Alpha, mask: &[bool]) -> Result<f64> {
    masked_mean(quads.len(), mask, |i| {
        let target = synth_target(&quads[i], alpha);
        kl_divergence(&target, &quads[i].student_trainable)
    })
}

/// Mean `KL(parallel target ‖ variant's KL student)`.
pub fn parallel_loss(
    spec: &VariantSpec,
    quads: &[RoleQuad],
    alpha: Alpha,
    mask: &[bool],
    allow_nontunable: bool,
) -> Result<f64> {
    masked_mean(quads.len(), mask, |i| {
        let pt = parallel_target(spec, &quads[i], alpha, allow_nontunable)?;
        kl_divergence(&pt.target, &pt.kl_student)
    })
}
