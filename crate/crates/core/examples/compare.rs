//! A scaled-down method comparison: shared base models, five students,
//! the ROUGE and cross-entropy tables.
//!
//! cargo run --release --example compare -- /tmp/dkd-compare

use deltakd::engine::{compare, DistillMethod, ModelShape, RunConfig};

fn main() -> deltakd::error::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("dkd-compare").display().to_string());
    let mut cfg = RunConfig::default();
    cfg.pretrain_size = 3000;
    cfg.sft_train_size = 600;
    cfg.sft_test_size = 60;
    cfg.teacher = ModelShape { embed_dim: 32, num_layers: 1, num_heads: 2, ff_dim: 64 };
    cfg.student = ModelShape { embed_dim: 16, num_layers: 1, num_heads: 2, ff_dim: 32 };
    cfg.teacher_pretrain_steps = 300;
    cfg.teacher_sft_steps = 200;
    cfg.student_pretrain_steps = 300;
    cfg.distill_steps = 150;
    cfg.warmup_steps = 20;

    let report = compare(&cfg, &DistillMethod::BASELINES, dir.as_ref())?;
    print!("{}", report.to_text());
    println!("artifacts in {dir}");
    Ok(())
}
