//! ROUGE-1/2/L between candidate and reference strings.
//!
//! cargo run --example rouge -- "the cat sat" "the cat ran"

use deltakd::rouge::score;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cand, reference) = match args.as_slice() {
        [c, r] => (c.as_str(), r.as_str()),
        _ => ("the cat sat", "the cat ran"),
    };
    let s = score(cand, reference);
    for (name, prf) in [("rouge1", s.rouge1), ("rouge2", s.rouge2), ("rougeL", s.rouge_l)] {
        println!("{name}: p={:.4} r={:.4} f={:.4}", prf.precision, prf.recall, prf.f);
    }
}
