//! Generates a small corpus directory and prints a few examples per split.
//!
//! cargo run --example corpus -- /tmp/dkd-corpus

use deltakd::corpus::{generate_corpus_dir, load_corpus_dir, CorpusSpec};
use deltakd::lm::Vocab;

fn main() -> deltakd::error::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("dkd-corpus").display().to_string());
    let spec = CorpusSpec { seed: 7, pretrain_size: 2000, sft_train_size: 200, sft_test_size: 20, ..CorpusSpec::default() };
    let vocab = Vocab::default();
    let manifest = generate_corpus_dir(&spec, &vocab, dir.as_ref())?;
    print!("{}", manifest.to_text());
    manifest.verify_regeneration()?;

    let corpus = load_corpus_dir(dir.as_ref(), &vocab, spec.context_limit)?;
    println!("vocab ({} tokens): {:?}", vocab.size(), vocab.inventory());
    for e in corpus.pretrain.iter().take(3) {
        println!("pretrain  {:?}", e.response);
    }
    for e in corpus.sft_train.iter().take(5) {
        println!("sft       {:?} -> {:?}", e.prompt, e.response);
    }
    Ok(())
}
