//! One optimisation step with a caller-supplied loss over the batch logits.

use super::model::{BatchLogits, LanguageModel};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::numerics::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient L2 norm before clipping.
    pub grad_norm: f64,
}

/// Runs forward, asks `loss_fn` for the loss and `dL/dlogits` (written into
/// the zeroed buffer it receives), backpropagates and applies `opt`.
///
/// A non-finite loss or gradient aborts before any parameter changes.
pub fn train_step<F>(
    model: &mut LanguageModel,
    opt: &mut Adam,
    seqs: &[&[TokenId]],
    loss_fn: F,
) -> Result<StepStats>
where
    F: FnOnce(&BatchLogits, &mut [f64]) -> Result<f64>,
{
    let (loss, mut grad) = loss_and_grad(model, seqs, loss_fn)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Training {
            stage: "train_step".into(),
            message: format!(
                "non-finite gradient (loss {loss}, step {}, {} sequences, first bad parameter {:?})",
                opt.steps_taken() + 1,
                seqs.len(),
                grad.iter().position(|g| !g.is_finite())
            ),
        });
    }
    opt.step(model.params_mut(), &mut grad);
    Ok(StepStats { loss, grad_norm })
}

/// Loss and full parameter gradient without updating anything.
pub fn loss_and_grad<F>(model: &LanguageModel, seqs: &[&[TokenId]], loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&BatchLogits, &mut [f64]) -> Result<f64>,
{
    if seqs.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let (logits, cache) = model.forward_train(seqs)?;
    let mut dlogits = vec![0.0; logits.data.len()];
    let loss = loss_fn(&logits, &mut dlogits)?;
    if !loss.is_finite() {
        let max_logit = logits.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        return Err(Error::Training {
            stage: "train_step".into(),
            message: format!(
                "non-finite loss {loss} ({} sequences, {} positions, max |logit| {max_logit:.3e})",
                seqs.len(),
                logits.total_positions()
            ),
        });
    }
    let mut grad = vec![0.0; model.param_count()];
    model.backward(&cache, &dlogits, &mut grad);
    Ok((loss, grad))
}
