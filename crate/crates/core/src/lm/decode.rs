//! Greedy decoding.

use super::model::LogitSource;
use super::vocab::{TokenSeq, EOS};
use crate::error::{Error, Result};
use crate::numerics::TokenId;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Appends argmax tokens until EOS, `max_new` new tokens, or the context
/// limit. The returned sequence keeps the prompt's `prompt_len`.
pub fn greedy_decode(src: &dyn LogitSource, prompt: &TokenSeq, max_new: usize) -> Result<TokenSeq> {
    Ok(greedy_decode_batch(src, std::slice::from_ref(prompt), max_new)?.remove(0))
}

/// Batched [`greedy_decode`]: all unfinished sequences advance together,
/// one source call per step. Results match decoding each prompt alone.
pub fn greedy_decode_batch(
    src: &dyn LogitSource,
    prompts: &[TokenSeq],
    max_new: usize,
) -> Result<Vec<TokenSeq>> {
    let limit = src.context_limit();
    for (i, p) in prompts.iter().enumerate() {
        if p.is_empty() || p.len() > limit {
            return Err(Error::input(format!(
                "prompt {i} has length {} (context limit {limit})",
                p.len()
            )));
        }
    }
    let mut out: Vec<TokenSeq> = prompts.to_vec();
    let mut active: Vec<usize> = (0..out.len()).collect();
    for _ in 0..max_new {
        active.retain(|&i| out[i].len() < limit);
        if active.is_empty() {
            break;
        }
        let refs: Vec<&[TokenId]> = active.iter().map(|&i| out[i].tokens.as_slice()).collect();
        let logits = src.batch_logits(&refs)?;
        let next: Vec<TokenId> = (0..active.len()).map(|k| argmax(logits.last_row(k))).collect();
        for (&i, &t) in active.iter().zip(&next) {
            out[i].tokens.push(t);
        }
        active.retain(|&i| *out[i].tokens.last().unwrap() != EOS);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::bigram::{fit_tabular, BigramModel};
    use crate::lm::model::LanguageModel;
    use crate::lm::transformer::{Transformer, TransformerConfig};
    use crate::lm::vocab::BOS;

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn stops_at_eos() {
        let mut b = BigramModel::uniform(5).unwrap();
        b.params_mut()[BOS as usize * 5 + EOS as usize] = 10.0;
        let m = LanguageModel::Bigram(b);
        let out = greedy_decode(&m, &TokenSeq::new(vec![BOS], 1).unwrap(), 10).unwrap();
        assert_eq!(out.tokens, vec![BOS, EOS]);
        assert_eq!(out.prompt_len, 1);
    }

    #[test]
    fn tabular_decode_follows_count_argmax_chain() {
        let corpus = vec![vec![1, 4, 5, 6, 4, 5, 7], vec![1, 4, 6, 2]];
        let b = fit_tabular(8, &corpus).unwrap();
        let m = LanguageModel::Bigram(b.clone());
        let out = greedy_decode(&m, &TokenSeq::new(vec![1], 1).unwrap(), 6).unwrap();
        let mut chain = vec![1];
        for _ in 0..6 {
            let t = argmax(b.row(*chain.last().unwrap()));
            chain.push(t);
            if t == EOS {
                break;
            }
        }
        assert_eq!(out.tokens, chain);
    }

    #[test]
    fn batch_matches_single_and_respects_context() {
        let cfg = TransformerConfig {
            vocab_size: 8,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            context_limit: 7,
            ff_dim: 8,
            seed: 4,
        };
        let m = LanguageModel::Transformer(Transformer::new(cfg).unwrap());
        let prompts = vec![
            TokenSeq::new(vec![1, 4], 2).unwrap(),
            TokenSeq::new(vec![1, 5, 6, 3], 4).unwrap(),
        ];
        let batch = greedy_decode_batch(&m, &prompts, 10).unwrap();
        for (p, b) in prompts.iter().zip(&batch) {
            let single = greedy_decode(&m, p, 10).unwrap();
            assert_eq!(&single, b);
            assert!(b.len() <= 7);
            assert_eq!(greedy_decode(&m, p, 10).unwrap(), single);
        }
        assert!(greedy_decode(&m, &TokenSeq::new(vec![1; 8], 1).unwrap(), 1).is_err());
    }
}
