//! Teacher-forced measurements on held-out responses.

use crate::error::{Error, Result};
use crate::lm::{LogitSource, TokenSeq};
use crate::numerics::{kl_log_slices, log_softmax_into, TokenId};

const CHUNK: usize = 64;

fn for_each_loss_row(
    srcs: &[&dyn LogitSource],
    seqs: &[TokenSeq],
    mut f: impl FnMut(&TokenSeq, usize, &[&[f64]]),
) -> Result<usize> {
    let mut n = 0;
    for chunk in seqs.chunks(CHUNK) {
        let toks: Vec<&[TokenId]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let logits = srcs.iter().map(|s| s.batch_logits(&toks)).collect::<Result<Vec<_>>>()?;
        for (i, s) in chunk.iter().enumerate() {
            for t in s.loss_positions() {
                let rows: Vec<&[f64]> = logits.iter().map(|l| l.row(i, t)).collect();
                f(s, t, &rows);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::input("no response positions to evaluate"));
    }
    Ok(n)
}

/// Mean per-token cross-entropy (nats) of the response tokens, EOS
/// included, under teacher forcing.
pub fn response_cross_entropy(src: &dyn LogitSource, seqs: &[TokenSeq]) -> Result<f64> {
    let mut lp = vec![0.0; src.vocab_size()];
    let mut total = 0.0;
    let n = for_each_loss_row(&[src], seqs, |s, t, rows| {
        log_softmax_into(rows[0], 1.0, &mut lp);
        total -= lp[s.tokens[t + 1] as usize];
    })?;
    Ok(total / n as f64)
}

/// Mean per-token `KL(p ‖ q)` over the response positions.
pub fn mean_response_kl(p: &dyn LogitSource, q: &dyn LogitSource, seqs: &[TokenSeq]) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::input("models have different vocabularies"));
    }
    let v = p.vocab_size();
    let (mut lp, mut lq) = (vec![0.0; v], vec![0.0; v]);
    let mut total = 0.0;
    let n = for_each_loss_row(&[p, q], seqs, |_, _, rows| {
        log_softmax_into(rows[0], 1.0, &mut lp);
        log_softmax_into(rows[1], 1.0, &mut lq);
        total += kl_log_slices(&lp, &lq);
    })?;
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{BigramModel, LanguageModel};

    #[test]
    fn uniform_model_costs_log_v() {
        let m = LanguageModel::Bigram(BigramModel::uniform(8).unwrap());
        let seqs = vec![TokenSeq::new(vec![1, 4, 3, 5, 6, 2], 3).unwrap()];
        let ce = response_cross_entropy(&m, &seqs).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-12);
        assert!(mean_response_kl(&m, &m, &seqs).unwrap().abs() < 1e-15);
        assert!(response_cross_entropy(&m, &[]).is_err());
    }
}
