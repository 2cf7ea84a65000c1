//! ROUGE-1/2/L with a pinned preprocessing, and the held-out evaluation loop.
//!
//! Tokens are whitespace-separated words, lowercased, with leading and
//! trailing ASCII punctuation stripped (words that become empty are
//! dropped). No stemming, no stopwords, F at β = 1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::lm::vocab::NUM_RESERVED;
use crate::lm::{greedy_decode_batch, LogitSource, TokenSeq, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        if cand == 0 || reference == 0 || overlap == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / cand as f64;
        let recall = overlap as f64 / reference as f64;
        Self { precision, recall, f: 2.0 * precision * recall / (precision + recall) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// ROUGE-N over pre-tokenized input, with clipped overlap counts.
pub fn rouge_n_tokens(candidate: &[String], reference: &[String], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be positive");
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(overlap, candidate.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    rouge_n_tokens(&rouge_tokens(candidate), &rouge_tokens(reference), n)
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&rouge_tokens(candidate), &rouge_tokens(reference))
}

pub fn score(candidate: &str, reference: &str) -> RougeScores {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    RougeScores {
        rouge1: rouge_n_tokens(&c, &r, 1),
        rouge2: rouge_n_tokens(&c, &r, 2),
        rouge_l: rouge_l_tokens(&c, &r),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: usize,
    pub prompt: String,
    pub candidate: String,
    pub reference: String,
    pub scores: RougeScores,
    /// Set when decoding failed; the example is scored 0.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::input("empty test set"));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&RougeScores) -> f64| records.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
        Ok(Self {
            rouge1: mean(|s| s.rouge1.f),
            rouge2: mean(|s| s.rouge2.f),
            rouge_l: mean(|s| s.rouge_l.f),
            records,
        })
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    /// Structured text: `key=value` summary lines, then one tab-separated
    /// row per example.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "examples={}", self.records.len()).unwrap();
        writeln!(s, "failures={}", self.failures()).unwrap();
        writeln!(s, "rouge1_f={:.6}", self.rouge1).unwrap();
        writeln!(s, "rouge2_f={:.6}", self.rouge2).unwrap();
        writeln!(s, "rougeL_f={:.6}", self.rouge_l).unwrap();
        writeln!(s, "id\tcandidate\treference\trouge1_f\trouge2_f\trougeL_f\terror").unwrap();
        for r in &self.records {
            let clean = |t: &str| t.replace(['\t', '\n'], " ");
            writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.id,
                clean(&r.candidate),
                clean(&r.reference),
                r.scores.rouge1.f,
                r.scores.rouge2.f,
                r.scores.rouge_l.f,
                r.error.as_deref().map(clean).unwrap_or_default()
            )
            .unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format_args!("writing {}", path.display()), e))
    }
}

/// Renders generated response tokens as text, dropping control tokens.
pub fn response_text(vocab: &Vocab, seq: &TokenSeq) -> String {
    let kept: Vec<_> = seq.response_tokens().iter().copied().filter(|&t| t as usize >= NUM_RESERVED).collect();
    vocab.detokenize(&kept)
}

const DECODE_CHUNK: usize = 64;

/// Greedy-decodes every test prompt and scores it against its reference.
/// Decoding failures are recorded per example and scored 0.
pub fn evaluate_model(
    src: &dyn LogitSource,
    vocab: &Vocab,
    test: &[Example],
    decode_limit: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    let mut records = Vec::with_capacity(test.len());
    for (chunk_no, chunk) in test.chunks(DECODE_CHUNK).enumerate() {
        let base = chunk_no * DECODE_CHUNK;
        let prompts: Vec<Result<TokenSeq>> = chunk.iter().map(|e| TokenSeq::prompt_only(vocab, &e.prompt)).collect();
        let decoded: Vec<Result<TokenSeq>> = if prompts.iter().all(|p| p.is_ok()) {
            let ok: Vec<TokenSeq> = prompts.iter().map(|p| p.as_ref().unwrap().clone()).collect();
            match greedy_decode_batch(src, &ok, decode_limit) {
                Ok(out) => out.into_iter().map(Ok).collect(),
                Err(_) => decode_one_by_one(src, prompts, decode_limit),
            }
        } else {
            decode_one_by_one(src, prompts, decode_limit)
        };
        for (k, (ex, out)) in chunk.iter().zip(decoded).enumerate() {
            let (candidate, error) = match out {
                Ok(seq) => (response_text(vocab, &seq), None),
                Err(e) => (String::new(), Some(e.to_string())),
            };
            let scores = if error.is_some() { RougeScores::default() } else { score(&candidate, &ex.response) };
            records.push(EvalRecord {
                id: base + k,
                prompt: ex.prompt.clone(),
                candidate,
                reference: ex.response.clone(),
                scores,
                error,
            });
        }
    }
    EvalReport::from_records(records)
}

fn decode_one_by_one(src: &dyn LogitSource, prompts: Vec<Result<TokenSeq>>, limit: usize) -> Vec<Result<TokenSeq>> {
    prompts
        .into_iter()
        .map(|p| p.and_then(|p| greedy_decode_batch(src, std::slice::from_ref(&p), limit).map(|mut v| v.remove(0))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::lm::{BatchLogits, EOS};
    use crate::numerics::TokenId;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        rouge_tokens(s)
    }

    #[test]
    fn cat_example() {
        let r1 = rouge_n("the cat sat", "the cat ran", 1);
        let r2 = rouge_n("the cat sat", "the cat ran", 2);
        let rl = rouge_l("the cat sat", "the cat ran");
        assert!((r1.f - 2.0 / 3.0).abs() < 1e-12);
        assert!((r2.f - 0.5).abs() < 1e-12);
        assert!((rl.f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn edge_cases() {
        assert_eq!(rouge_n("", "a b", 1), Prf::default());
        assert_eq!(rouge_n("a", "a", 2), Prf::default());
        assert_eq!(rouge_n("x y", "a b", 1).f, 0.0);
        assert_eq!(rouge_n("a b c", "a b c", 2).f, 1.0);
        // clipping: candidate repeats a word more often than the reference
        let p = rouge_n("the the the", "the cat", 1);
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-12 && (p.recall - 0.5).abs() < 1e-12);
        assert_eq!(rouge_l("a c", "a b c").precision, 1.0);
        assert_eq!(toks("  Hello, World!  (x) -- "), vec!["hello", "world", "x"]);
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        // longest subsequence of `a` (by subset enumeration) that is also a
        // subsequence of `b`
        let is_sub = |s: &[u8], t: &[u8]| {
            let mut it = t.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_sub(&s, b).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn lcs_matches_exhaustive_search(
            a in proptest::collection::vec(0u8..4, 0..=8),
            b in proptest::collection::vec(0u8..4, 0..=8),
        ) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn scores_are_bounded_and_consistent(
            a in proptest::collection::vec(0u8..5, 0..10),
            b in proptest::collection::vec(0u8..5, 0..10),
        ) {
            let ca: Vec<String> = a.iter().map(|x| format!("w{x}")).collect();
            let cb: Vec<String> = b.iter().map(|x| format!("w{x}")).collect();
            for p in [rouge_n_tokens(&ca, &cb, 1), rouge_n_tokens(&ca, &cb, 2), rouge_l_tokens(&ca, &cb)] {
                prop_assert!((0.0..=1.0).contains(&p.f));
                if p.precision + p.recall > 0.0 {
                    let h = 2.0 * p.precision * p.recall / (p.precision + p.recall);
                    prop_assert!((p.f - h).abs() < 1e-12);
                }
            }
            let l = rouge_l_tokens(&ca, &cb);
            prop_assert_eq!(l.f == 1.0, !ca.is_empty() && ca == cb);
            let mut sa = ca.clone();
            sa.sort();
            let mut sb = cb.clone();
            sb.sort();
            prop_assert_eq!(rouge_n_tokens(&ca, &cb, 1).f == 1.0, !ca.is_empty() && sa == sb);
        }
    }

    /// Replays fixed responses regardless of input: the "memorised" model.
    struct Oracle {
        vocab: Vocab,
        table: HashMap<Vec<TokenId>, Vec<TokenId>>,
    }

    impl LogitSource for Oracle {
        fn vocab_size(&self) -> usize {
            self.vocab.size()
        }
        fn context_limit(&self) -> usize {
            64
        }
        fn batch_logits(&self, seqs: &[&[TokenId]]) -> Result<BatchLogits> {
            let v = self.vocab.size();
            let mut data = Vec::new();
            let mut offsets = vec![0];
            for s in seqs {
                let (prompt, answer) = self
                    .table
                    .iter()
                    .find(|(p, _)| s.starts_with(p))
                    .ok_or_else(|| Error::input("unknown prompt"))?;
                for t in 0..s.len() {
                    let mut row = vec![0.0; v];
                    let k = t + 1 - prompt.len().min(t + 1);
                    let next = if t + 1 >= prompt.len() { answer.get(k).copied().unwrap_or(EOS) } else { 0 };
                    row[next as usize] = 1.0;
                    data.extend(row);
                }
                offsets.push(offsets.last().unwrap() + s.len());
            }
            Ok(BatchLogits { vocab: v, offsets, data })
        }
    }

    #[test]
    fn memorising_model_scores_one_and_failures_score_zero() {
        let vocab = Vocab::default();
        let test = vec![
            Example { prompt: "rev: a b".into(), response: "b a".into(), split: Split::Test },
            Example { prompt: "sort: c a".into(), response: "a c".into(), split: Split::Test },
        ];
        let table = test
            .iter()
            .map(|e| {
                (TokenSeq::prompt_only(&vocab, &e.prompt).unwrap().tokens, vocab.tokenize(&e.response).unwrap())
            })
            .collect();
        let oracle = Oracle { vocab: vocab.clone(), table };
        let rep = evaluate_model(&oracle, &vocab, &test, 20).unwrap();
        assert_eq!((rep.rouge1, rep.rouge2, rep.rouge_l), (1.0, 1.0, 1.0));
        assert_eq!(rep.failures(), 0);

        let mut with_bad = test.clone();
        with_bad.push(Example { prompt: "cont: a b a b".into(), response: "a b".into(), split: Split::Test });
        let rep = evaluate_model(&oracle, &vocab, &with_bad, 20).unwrap();
        assert_eq!(rep.failures(), 1);
        assert_eq!(rep.records[2].scores, RougeScores::default());
        assert!((rep.rouge1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(rep.to_text().contains("failures=1"));

        assert!(evaluate_model(&oracle, &vocab, &[], 20).is_err());
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let recs: Vec<EvalRecord> = ["a b", "a c", "x"]
            .iter()
            .enumerate()
            .map(|(i, c)| EvalRecord {
                id: i,
                prompt: String::new(),
                candidate: c.to_string(),
                reference: "a b".into(),
                scores: score(c, "a b"),
                error: None,
            })
            .collect();
        let a = EvalReport::from_records(recs.clone()).unwrap();
        let mut rev = recs;
        rev.reverse();
        let b = EvalReport::from_records(rev).unwrap();
        assert!((a.rouge1 - b.rouge1).abs() < 1e-15 && (a.rouge_l - b.rouge_l).abs() < 1e-15);
    }
}
