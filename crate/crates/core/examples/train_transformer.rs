//! Pretrains a small transformer on synthetic text, finetunes it on the
//! instruction tasks and decodes a few held-out prompts.
//!
//! cargo run --release --example train_transformer

use deltakd::corpus::{generate_corpus, CorpusSpec};
use deltakd::lm::{greedy_decode, Adam, AdamConfig, LanguageModel, TokenSeq, Transformer, TransformerConfig, Vocab};
use deltakd::numerics::{log_softmax_into, TokenId};
use deltakd::rouge::response_text;

fn sft_loss(batch: &[TokenSeq], logits: &deltakd::lm::BatchLogits, grad: &mut [f64]) -> f64 {
    let v = logits.vocab;
    let n: usize = batch.iter().map(|s| s.loss_positions().len()).sum();
    let mut lp = vec![0.0; v];
    let mut loss = 0.0;
    for (i, s) in batch.iter().enumerate() {
        for t in s.loss_positions() {
            log_softmax_into(logits.row(i, t), 1.0, &mut lp);
            let target = s.tokens[t + 1] as usize;
            loss -= lp[target];
            let g = &mut grad[(logits.offsets[i] + t) * v..][..v];
            for (gj, l) in g.iter_mut().zip(&lp) {
                *gj = l.exp() / n as f64;
            }
            g[target] -= 1.0 / n as f64;
        }
    }
    loss / n as f64
}

fn train(model: &mut LanguageModel, data: &[TokenSeq], steps: usize) -> deltakd::error::Result<()> {
    let mut opt = Adam::new(AdamConfig { lr: 3e-3, warmup_steps: 50, ..AdamConfig::default() }, model.param_count());
    for step in 0..steps {
        let batch: Vec<TokenSeq> = (0..16).map(|k| data[(step * 16 + k) % data.len()].clone()).collect();
        let toks: Vec<&[TokenId]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
        let stats = deltakd::lm::train_step(model, &mut opt, &toks, |l, g| Ok(sft_loss(&batch, l, g)))?;
        if step % 100 == 0 {
            println!("step {step:>4} loss {:.4} grad_norm {:.3}", stats.loss, stats.grad_norm);
        }
    }
    Ok(())
}

fn main() -> deltakd::error::Result<()> {
    let vocab = Vocab::default();
    let corpus = generate_corpus(&CorpusSpec { seed: 1, pretrain_size: 4000, sft_train_size: 1000, sft_test_size: 5, ..CorpusSpec::default() })?;
    let tok = |xs: &[deltakd::corpus::Example]| xs.iter().map(|e| e.to_seq(&vocab)).collect::<Result<Vec<_>, _>>();
    let cfg = TransformerConfig { vocab_size: vocab.size(), embed_dim: 32, num_layers: 1, num_heads: 2, context_limit: 64, ff_dim: 64, seed: 1 };
    let mut model = LanguageModel::Transformer(Transformer::new(cfg)?);
    println!("{} parameters", model.param_count());

    train(&mut model, &tok(&corpus.pretrain)?, 400)?;
    train(&mut model, &tok(&corpus.sft_train)?, 400)?;

    for e in &corpus.sft_test {
        let out = greedy_decode(&model, &TokenSeq::prompt_only(&vocab, &e.prompt)?, 16)?;
        println!("{:?} -> {:?} (reference {:?})", e.prompt, response_text(&vocab, &out), e.response);
    }
    Ok(())
}
