//! A single interface over the tabular and neural models.

use super::bigram::BigramModel;
use super::transformer::{Transformer, TransformerCache, TransformerConfig};
use crate::error::{Error, Result};
use crate::numerics::TokenId;

/// Logits for a batch of packed sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLogits {
    pub vocab: usize,
    /// `offsets[i]..offsets[i + 1]` are the positions of sequence `i`.
    pub offsets: Vec<usize>,
    /// `positions × vocab`, row-major.
    pub data: Vec<f64>,
}

impl BatchLogits {
    pub fn num_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn seq_len(&self, seq: usize) -> usize {
        self.offsets[seq + 1] - self.offsets[seq]
    }

    pub fn row(&self, seq: usize, t: usize) -> &[f64] {
        let i = self.offsets[seq] + t;
        debug_assert!(i < self.offsets[seq + 1]);
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn last_row(&self, seq: usize) -> &[f64] {
        self.row(seq, self.seq_len(seq) - 1)
    }

    pub fn total_positions(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

fn offsets_of(seqs: &[&[TokenId]]) -> Vec<usize> {
    std::iter::once(0)
        .chain(seqs.iter().scan(0, |acc, s| {
            *acc += s.len();
            Some(*acc)
        }))
        .collect()
}

#[derive(Debug, Clone)]
pub enum LanguageModel {
    Bigram(BigramModel),
    Transformer(Transformer),
}

/// Forward state needed for [`LanguageModel::backward`].
#[derive(Debug)]
pub enum ForwardCache {
    Bigram(Vec<TokenId>),
    Transformer(TransformerCache),
}

/// Architecture summary stored in snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Bigram,
    Transformer,
}

impl LanguageModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            LanguageModel::Bigram(_) => ModelKind::Bigram,
            LanguageModel::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            LanguageModel::Bigram(m) => m.vocab_size(),
            LanguageModel::Transformer(m) => m.config().vocab_size,
        }
    }

    /// Longest accepted sequence; unbounded for the bigram model.
    pub fn context_limit(&self) -> usize {
        match self {
            LanguageModel::Bigram(_) => usize::MAX,
            LanguageModel::Transformer(m) => m.config().context_limit,
        }
    }

    pub fn transformer_config(&self) -> Option<&TransformerConfig> {
        match self {
            LanguageModel::Bigram(_) => None,
            LanguageModel::Transformer(m) => Some(m.config()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            LanguageModel::Bigram(m) => m.params(),
            LanguageModel::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            LanguageModel::Bigram(m) => m.params_mut(),
            LanguageModel::Transformer(m) => m.params_mut(),
        }
    }

    /// Rounds every parameter to the nearest `f32`, the precision snapshots
    /// store. Afterwards a save/load round trip is lossless.
    pub fn quantize(&mut self) {
        for p in self.params_mut() {
            *p = *p as f32 as f64;
        }
    }

    pub fn forward_train(&self, seqs: &[&[TokenId]]) -> Result<(BatchLogits, ForwardCache)> {
        let vocab = self.vocab_size();
        match self {
            LanguageModel::Bigram(m) => {
                if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
                    return Err(Error::input(format!("sequence {i} is empty")));
                }
                let tokens: Vec<TokenId> = seqs.concat();
                let data = m.forward(&tokens)?;
                let offsets = offsets_of(seqs);
                Ok((BatchLogits { vocab, offsets, data }, ForwardCache::Bigram(tokens)))
            }
            LanguageModel::Transformer(m) => {
                let (data, cache) = m.forward_train(seqs)?;
                let offsets = cache.offsets().to_vec();
                Ok((BatchLogits { vocab, offsets, data }, ForwardCache::Transformer(cache)))
            }
        }
    }

    pub fn forward_batch(&self, seqs: &[&[TokenId]]) -> Result<BatchLogits> {
        self.forward_train(seqs).map(|(l, _)| l)
    }

    /// Logits for every position of one sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<BatchLogits> {
        self.forward_batch(&[tokens])
    }

    /// Accumulates parameter gradients into `grad` given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        match (self, cache) {
            (LanguageModel::Bigram(m), ForwardCache::Bigram(tokens)) => m.backward(tokens, dlogits, grad),
            (LanguageModel::Transformer(m), ForwardCache::Transformer(c)) => m.backward(c, dlogits, grad),
            _ => panic!("forward cache does not belong to this model kind"),
        }
    }
}

/// Anything that can produce next-token logits: a local model or a remote
/// logit service.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;
    fn context_limit(&self) -> usize;
    fn batch_logits(&self, seqs: &[&[TokenId]]) -> Result<BatchLogits>;
}

impl LogitSource for LanguageModel {
    fn vocab_size(&self) -> usize {
        LanguageModel::vocab_size(self)
    }

    fn context_limit(&self) -> usize {
        LanguageModel::context_limit(self)
    }

    fn batch_logits(&self, seqs: &[&[TokenId]]) -> Result<BatchLogits> {
        self.forward_batch(seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::bigram::fit_tabular;

    #[test]
    fn bigram_batch_layout() {
        let m = LanguageModel::Bigram(fit_tabular(4, &[vec![1, 2, 3]]).unwrap());
        let out = m.forward_batch(&[&[1, 2], &[3]]).unwrap();
        assert_eq!(out.offsets, vec![0, 2, 3]);
        assert_eq!(out.row(1, 0), out.last_row(1));
        assert_eq!(out.total_positions(), 3);
        assert!(m.forward_batch(&[&[]]).is_err());
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let cfg = TransformerConfig {
            vocab_size: 8,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_limit: 8,
            ff_dim: 8,
            seed: 1,
        };
        let m = LanguageModel::Transformer(Transformer::new(cfg).unwrap());
        let a = m.forward(&[1, 2, 3]).unwrap();
        let b = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }
}
