//! Per-position training objective with gradients w.r.t. student logits.
//!
//! Every distillation term is a KL divergence `KL(P ‖ Q)` in which the
//! trainable student's log-probabilities enter `P`'s unnormalized logits
//! and/or `Q` directly. With `L = Σ P (log P − log Q)`:
//!
//! ```text
//! dL/du_P = P (log P − log Q − L)      (u_P: logits of P)
//! dL/dlog Q = −P
//! ```
//!
//! Contributions are summed into `g = dL/dlog θ` and pushed through the
//! student's temperature log-softmax.

use crate::delta_target::{
    classify_tunability, synth_target_into, validate_spec, Alpha, Role, VariantId,
};
use crate::error::{Error, Result};
use crate::numerics::{
    kl_log_slices, log_softmax_backward, log_softmax_into, normalize_log_in_place, Temperature,
    TokenId,
};

use super::Lambda;

/// Which distillation term is mixed with the supervised loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KdObjective {
    /// Supervised loss only.
    None,
    /// `KL(t_ft ‖ θ)`.
    Forward,
    /// `KL(θ ‖ t_ft)`.
    Reverse,
    /// `KL(synthetic target ‖ θ)` with the target detached.
    Delta(Alpha),
    /// A parallel variant; gradient flows through every appearance of θ.
    Parallel { variant: VariantId, alpha: Alpha },
}

/// Frozen roles an objective needs, as (student_raw, teacher_raw, teacher_ft).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RequiredRoles {
    pub student_raw: bool,
    pub teacher_raw: bool,
    pub teacher_ft: bool,
}

impl KdObjective {
    pub fn required_roles(&self) -> RequiredRoles {
        match self {
            KdObjective::None => RequiredRoles::default(),
            KdObjective::Forward | KdObjective::Reverse => RequiredRoles {
                teacher_ft: true,
                ..Default::default()
            },
            KdObjective::Delta(_) | KdObjective::Parallel { .. } => RequiredRoles {
                student_raw: true,
                teacher_raw: true,
                teacher_ft: true,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub kd: KdObjective,
    pub lambda: Lambda,
    pub tau: Temperature,
    /// Multiply the distillation term (and its gradient) by τ².
    pub tau_squared: bool,
    pub allow_nontunable: bool,
}

impl ObjectiveConfig {
    pub fn new(kd: KdObjective, lambda: Lambda) -> Self {
        Self {
            kd,
            lambda,
            tau: Temperature::ONE,
            tau_squared: false,
            allow_nontunable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KdObjective::Parallel { variant, .. } = self.kd {
            let spec = variant.spec();
            validate_spec(&spec)?;
            if !self.allow_nontunable && !classify_tunability(&spec) {
                return Err(Error::NonTunable(variant.to_string()));
            }
        }
        Ok(())
    }

    fn kd_scale(&self) -> f64 {
        if self.tau_squared {
            self.tau.get() * self.tau.get()
        } else {
            1.0
        }
    }
}

/// Frozen-role log-probabilities (already at temperature τ) and the
/// ground-truth next token for one position.
#[derive(Debug, Clone, Copy)]
pub struct PositionRows<'a> {
    pub target: TokenId,
    pub student_raw: Option<&'a [f64]>,
    pub teacher_raw: Option<&'a [f64]>,
    pub teacher_ft: Option<&'a [f64]>,
}

/// Reusable buffers for [`position_loss`].
#[derive(Debug, Default)]
pub struct Scratch {
    log_theta: Vec<f64>,
    log_theta_sft: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, v: usize) {
        for b in [&mut self.log_theta, &mut self.log_theta_sft, &mut self.u, &mut self.g] {
            b.clear();
            b.resize(v, 0.0);
        }
    }
}

fn need<'a>(row: Option<&'a [f64]>, name: &str) -> Result<&'a [f64]> {
    row.ok_or_else(|| Error::input(format!("objective needs {name} log-probabilities")))
}

/// Evaluates the objective at one position. Returns `(sft, kd)` where `kd`
/// already includes the optional τ² factor. When `grad` is given, adds
/// `scale · dL/dz` to it, with `L = λ sft + (1 − λ) kd`.
pub fn position_loss(
    cfg: &ObjectiveConfig,
    logits: &[f64],
    rows: &PositionRows<'_>,
    scratch: &mut Scratch,
    grad: Option<(&mut [f64], f64)>,
) -> Result<(f64, f64)> {
    let v = logits.len();
    let target = rows.target as usize;
    if target >= v {
        return Err(Error::domain(format!("target token {target} out of range")));
    }
    scratch.resize(v);
    let lam = cfg.lambda.get();
    let tau = cfg.tau.get();

    log_softmax_into(logits, 1.0, &mut scratch.log_theta_sft);
    let sft = -scratch.log_theta_sft[target];

    let kd = if cfg.kd == KdObjective::None {
        0.0
    } else {
        log_softmax_into(logits, tau, &mut scratch.log_theta);
        kd_term(cfg, rows, scratch)? * cfg.kd_scale()
    };

    if let Some((grad, scale)) = grad {
        let w_sft = scale * lam;
        for i in 0..v {
            grad[i] += w_sft * scratch.log_theta_sft[i].exp();
        }
        grad[target] -= w_sft;
        if cfg.kd != KdObjective::None && lam < 1.0 {
            log_softmax_backward(&scratch.log_theta, tau, &mut scratch.g);
            let w_kd = scale * (1.0 - lam) * cfg.kd_scale();
            for i in 0..v {
                grad[i] += w_kd * scratch.g[i];
            }
        }
    }
    Ok((sft, kd))
}

/// Computes the unscaled distillation value and leaves `dL/dlog θ` in
/// `scratch.g`.
fn kd_term(cfg: &ObjectiveConfig, rows: &PositionRows<'_>, s: &mut Scratch) -> Result<f64> {
    let Scratch { log_theta, u, g, .. } = s;
    match cfg.kd {
        KdObjective::None => Ok(0.0),
        KdObjective::Forward => {
            let p = need(rows.teacher_ft, "teacher_ft")?;
            for (gi, &lp) in g.iter_mut().zip(p) {
                *gi = -lp.exp();
            }
            Ok(kl_log_slices(p, log_theta))
        }
        KdObjective::Reverse => {
            let q = need(rows.teacher_ft, "teacher_ft")?;
            let value = kl_log_slices(log_theta, q);
            for i in 0..g.len() {
                g[i] = log_theta[i].exp() * (log_theta[i] - q[i] - value);
            }
            Ok(value)
        }
        KdObjective::Delta(alpha) => {
            synth_target_into(
                need(rows.student_raw, "student_raw")?,
                need(rows.teacher_raw, "teacher_raw")?,
                need(rows.teacher_ft, "teacher_ft")?,
                alpha.get(),
                u,
            );
            for (gi, &lp) in g.iter_mut().zip(u.iter()) {
                *gi = -lp.exp();
            }
            Ok(kl_log_slices(u, log_theta))
        }
        KdObjective::Parallel { variant, alpha } => {
            let spec = variant.spec();
            if !cfg.allow_nontunable && !classify_tunability(&spec) {
                return Err(Error::NonTunable(variant.to_string()));
            }
            let theta: &[f64] = log_theta;
            let row = |role: Role| -> Result<&[f64]> {
                match role {
                    Role::SmallTrainable => Ok(theta),
                    Role::SmallRaw => need(rows.student_raw, "student_raw"),
                    Role::LargeRaw => need(rows.teacher_raw, "teacher_raw"),
                    Role::LargeFt => need(rows.teacher_ft, "teacher_ft"),
                }
            };
            let a = alpha.get();
            let base = row(spec.target_base)?;
            let minuend = row(spec.shift_minuend)?;
            let subtrahend = row(spec.shift_subtrahend)?;
            let q = row(spec.kl_student)?;
            for i in 0..u.len() {
                u[i] = base[i] + a * (minuend[i] - subtrahend[i]);
            }
            normalize_log_in_place(u);
            let value = kl_log_slices(u, q);

            // coefficient of log θ inside the target logits
            let mut c = 0.0;
            if spec.target_base.is_trainable() {
                c += 1.0;
            }
            if spec.shift_minuend.is_trainable() {
                c += a;
            }
            if spec.shift_subtrahend.is_trainable() {
                c -= a;
            }
            let q_is_theta = spec.kl_student.is_trainable();
            for i in 0..g.len() {
                let p = u[i].exp();
                let mut gi = c * p * (u[i] - q[i] - value);
                if q_is_theta {
                    gi -= p;
                }
                g[i] = gi;
            }
            Ok(value)
        }
    }
}
