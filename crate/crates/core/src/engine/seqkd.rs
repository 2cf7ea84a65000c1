//! Sequence-level distillation data: teacher greedy responses as targets.

use crate::corpus::{Example, Split};
use crate::error::Result;
use crate::lm::{greedy_decode_batch, LogitSource, TokenSeq, Vocab, EOS};
use crate::rouge::response_text;

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SeqKdCorpus {
    pub examples: Vec<Example>,
    /// Indices of responses that hit the length budget before EOS.
    pub truncated: Vec<usize>,
}

/// Greedy-decodes `teacher` on each prompt. A response that runs out of
/// budget (`max_new`, or the room left in the context for a closing EOS)
/// is cut there and recorded in `truncated`; the EOS is added when the
/// example is tokenized.
pub fn generate_seqkd_corpus(
    teacher: &dyn LogitSource,
    vocab: &Vocab,
    prompts: &[Example],
    max_new: usize,
) -> Result<SeqKdCorpus> {
    let mut out = SeqKdCorpus { examples: Vec::with_capacity(prompts.len()), truncated: Vec::new() };
    let ctx = teacher.context_limit();
    for (chunk_no, chunk) in prompts.chunks(CHUNK).enumerate() {
        let seqs = chunk.iter().map(|e| TokenSeq::prompt_only(vocab, &e.prompt)).collect::<Result<Vec<_>>>()?;
        // leave room for the EOS appended on tokenization
        let budget = seqs.iter().map(|s| ctx.saturating_sub(s.len() + 1)).min().unwrap_or(0).min(max_new);
        let decoded = greedy_decode_batch(teacher, &seqs, budget)?;
        for (k, (ex, seq)) in chunk.iter().zip(&decoded).enumerate() {
            if seq.tokens.last() != Some(&EOS) {
                out.truncated.push(chunk_no * CHUNK + k);
            }
            out.examples.push(Example {
                prompt: ex.prompt.clone(),
                response: response_text(vocab, seq),
                split: Split::Train,
            });
        }
    }
    Ok(out)
}
