//! Tabular bigram model: one free logit per (context, next) pair.

use crate::error::{Error, Result};
use crate::numerics::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    vocab_size: usize,
    /// `V × V`, row = previous token.
    table: Vec<f64>,
}

impl BigramModel {
    /// All-zero logits, i.e. uniform conditionals.
    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::input("bigram vocabulary needs at least 2 tokens"));
        }
        Ok(Self { vocab_size, table: vec![0.0; vocab_size * vocab_size] })
    }

    pub fn from_params(vocab_size: usize, table: Vec<f64>) -> Result<Self> {
        if vocab_size < 2 || table.len() != vocab_size * vocab_size {
            return Err(Error::Snapshot(format!(
                "bigram table has {} entries, vocabulary {vocab_size}",
                table.len()
            )));
        }
        Ok(Self { vocab_size, table })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &[f64] {
        &self.table
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn row(&self, context: TokenId) -> &[f64] {
        let v = self.vocab_size;
        &self.table[context as usize * v..(context as usize + 1) * v]
    }

    /// `N × V` logits, row `i` conditioned on `tokens[i]`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tokens.len() * self.vocab_size);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.vocab_size {
                return Err(Error::input(format!("token {t} at position {i} is outside the vocabulary")));
            }
            out.extend_from_slice(self.row(t));
        }
        Ok(out)
    }

    pub fn backward(&self, tokens: &[TokenId], dlogits: &[f64], grad: &mut [f64]) {
        let v = self.vocab_size;
        for (&t, d) in tokens.iter().zip(dlogits.chunks_exact(v)) {
            for (g, x) in grad[t as usize * v..(t as usize + 1) * v].iter_mut().zip(d) {
                *g += x;
            }
        }
    }
}

/// Fits add-one-smoothed bigram conditionals to the given sequences:
/// `log P(b | a) = ln((count(a, b) + 1) / (count(a) + V))`.
pub fn fit_tabular(vocab_size: usize, corpus: &[Vec<TokenId>]) -> Result<BigramModel> {
    if corpus.iter().all(|s| s.len() < 2) {
        return Err(Error::input("corpus has no bigrams"));
    }
    let v = vocab_size;
    let mut counts = vec![0u64; v * v];
    for (si, s) in corpus.iter().enumerate() {
        if let Some(&t) = s.iter().find(|&&t| t as usize >= v) {
            return Err(Error::input(format!("token {t} in sequence {si} is outside the vocabulary")));
        }
        for w in s.windows(2) {
            counts[w[0] as usize * v + w[1] as usize] += 1;
        }
    }
    let mut table = vec![0.0; v * v];
    for a in 0..v {
        let row = &counts[a * v..(a + 1) * v];
        let n: u64 = row.iter().sum();
        let denom = (n + v as u64) as f64;
        for (b, &c) in row.iter().enumerate() {
            table[a * v + b] = ((c + 1) as f64 / denom).ln();
        }
    }
    BigramModel::from_params(v, table)
}
