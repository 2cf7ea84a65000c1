//! Finite-difference check of analytic parameter gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand::Rng;

use super::config::DistillMethod;
use super::train::{batch_objective, FrozenRoles, TeacherHandle};
use crate::delta_target::Alpha;
use crate::error::{Error, Result};
use crate::lm::{loss_and_grad, BatchLogits, LanguageModel, TokenSeq, Transformer, TransformerConfig, Vocab};
use crate::losses::{Lambda, ObjectiveConfig};
use crate::numerics::{Temperature, TokenId};

/// Largest model the check accepts; each sample costs two forwards.
pub const MAX_GRADCHECK_PARAMS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "param\tanalytic\tnumeric\trel_error")?;
        for s in &self.samples {
            writeln!(f, "{}\t{:.10e}\t{:.10e}\t{:.3e}", s.index, s.analytic, s.numeric, s.rel_error)?;
        }
        writeln!(f, "samples={}", self.samples.len())?;
        writeln!(f, "max_rel_error={:.3e}", self.max_rel_error)?;
        write!(f, "mean_rel_error={:.3e}", self.mean_rel_error)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `loss_fn` with central differences
/// on `sample_count` parameters drawn without replacement (seeded).
pub fn grad_check<F>(
    model: &LanguageModel,
    seqs: &[&[TokenId]],
    loss_fn: F,
    sample_count: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&BatchLogits, &mut [f64]) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::input(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    let n = model.param_count();
    if n > MAX_GRADCHECK_PARAMS {
        return Err(Error::input(format!(
            "model has {n} parameters; the gradient check accepts at most {MAX_GRADCHECK_PARAMS}"
        )));
    }
    if sample_count == 0 {
        return Err(Error::input("sample_count must be positive"));
    }
    let (_, grad) = loss_and_grad(model, seqs, &loss_fn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, n, sample_count.min(n)).into_vec();
    picks.sort_unstable();
    let mut probe = model.clone();
    let eval = |m: &LanguageModel| -> Result<f64> {
        let (logits, _) = m.forward_train(seqs)?;
        let mut scratch = vec![0.0; logits.data.len()];
        loss_fn(&logits, &mut scratch)
    };
    let mut samples = Vec::with_capacity(picks.len());
    for index in picks {
        let x = probe.params()[index];
        probe.params_mut()[index] = x + epsilon;
        let up = eval(&probe)?;
        probe.params_mut()[index] = x - epsilon;
        let down = eval(&probe)?;
        probe.params_mut()[index] = x;
        let numeric = (up - down) / (2.0 * epsilon);
        samples.push(GradSample { index, analytic: grad[index], numeric, rel_error: relative_error(grad[index], numeric) });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    let mean_rel_error = samples.iter().map(|s| s.rel_error).sum::<f64>() / samples.len() as f64;
    Ok(GradCheckReport { samples, max_rel_error, mean_rel_error })
}

/// A transformer over the full vocabulary small enough for the check:
/// 1,832 parameters.
pub fn tiny_config(seed: u64) -> TransformerConfig {
    TransformerConfig {
        vocab_size: Vocab::default().size(),
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        context_limit: 16,
        ff_dim: 16,
        seed,
    }
}

/// Settings of [`check_objective`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveCheck {
    pub method: DistillMethod,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl ObjectiveCheck {
    pub fn new(method: DistillMethod) -> Self {
        Self { method, alpha: 0.5, lambda: 0.5, tau: 1.0, samples: 20, epsilon: 1e-5, seed: 0 }
    }
}

/// Gradient check of a training objective on a tiny transformer student
/// with three independently initialised frozen roles and random
/// prompt/response sequences.
pub fn check_objective(c: &ObjectiveCheck) -> Result<GradCheckReport> {
    let lambda = if c.method.is_pure_sft() { 1.0 } else { c.lambda };
    let cfg = ObjectiveConfig {
        kd: c.method.objective(Alpha::new(c.alpha)?),
        lambda: Lambda::new(lambda)?,
        tau: Temperature::new(c.tau)?,
        tau_squared: false,
        allow_nontunable: true,
    };
    let model = |k: u64| Transformer::new(tiny_config(c.seed.wrapping_mul(31).wrapping_add(k))).map(LanguageModel::Transformer);
    let student = model(0)?;
    let roles = FrozenRoles {
        student_raw: Some(model(1)?),
        teacher_raw: Some(TeacherHandle::Local(model(2)?)),
        teacher_ft: Some(TeacherHandle::Local(model(3)?)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed);
    let v = student.vocab_size() as TokenId;
    let seqs: Vec<TokenSeq> = (0..4)
        .map(|_| {
            let len = rng.random_range(6..=16);
            let tokens = (0..len).map(|_| rng.random_range(0..v)).collect();
            TokenSeq::new(tokens, rng.random_range(1..4)).expect("prompt fits")
        })
        .collect();
    let refs: Vec<&TokenSeq> = seqs.iter().collect();
    let rows = roles.rows(&cfg.kd, c.tau, &refs)?;
    let toks: Vec<&[TokenId]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    grad_check(
        &student,
        &toks,
        |logits, dlogits| Ok(batch_objective(&cfg, &refs, logits, &rows, Some(dlogits))?.total),
        c.samples,
        c.epsilon,
        c.seed,
    )
}
