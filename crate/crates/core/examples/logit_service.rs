//! Serves two teachers over a Unix socket and compares the remote logits
//! with a local forward pass.
//!
//! cargo run --example logit_service

use std::sync::Arc;

use deltakd::lm::{LanguageModel, LogitSource, Transformer, TransformerConfig};
use deltakd::wire::frame::{ROLE_TEACHER_FT, ROLE_TEACHER_RAW};
use deltakd::wire::{spawn_server, Endpoint, LogitClient, RemoteTeacher, ServedModels};

fn model(seed: u64) -> deltakd::error::Result<LanguageModel> {
    let cfg = TransformerConfig { vocab_size: 64, embed_dim: 16, num_layers: 1, num_heads: 2, context_limit: 32, ff_dim: 32, seed };
    Ok(LanguageModel::Transformer(Transformer::new(cfg)?))
}

fn main() -> deltakd::error::Result<()> {
    let (raw, ft) = (model(1)?, model(2)?);
    let sock = std::env::temp_dir().join(format!("dkd-example-{}.sock", std::process::id()));
    let server = spawn_server(ServedModels::new(Some(raw), Some(ft.clone()), 64)?, &Endpoint::Unix(sock), None)?;
    println!("serving on {}", server.endpoint());

    let client = Arc::new(LogitClient::new(server.endpoint().clone()));
    println!("{:?}", client.model_info()?);
    let teacher_ft = RemoteTeacher::connect(client.clone(), ROLE_TEACHER_FT)?;
    let teacher_raw = RemoteTeacher::connect(client, ROLE_TEACHER_RAW)?;

    let seqs: [&[u32]; 2] = [&[1, 10, 11, 12, 3], &[1, 20, 21]];
    // both requests are in flight before either answer is read
    let pending_ft = teacher_ft.submit(&seqs)?;
    let pending_raw = teacher_raw.submit(&seqs)?;
    let (remote, _) = (pending_ft.wait()?, pending_raw.wait()?);
    let local = ft.batch_logits(&seqs)?;
    let worst = remote.data.iter().zip(&local.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{} rows, max |remote - local| = {worst:.2e} (fp16 on the wire)", local.total_positions());

    let stats = server.stats().requests.load(std::sync::atomic::Ordering::Relaxed);
    server.shutdown();
    println!("server answered {stats} requests");
    Ok(())
}
