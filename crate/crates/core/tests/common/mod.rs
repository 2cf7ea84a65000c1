#![allow(dead_code)]

use std::path::PathBuf;

use deltakd::lm::{LanguageModel, Transformer, TransformerConfig};
use deltakd::wire::frame::{Frame, LogitRequest, LogitResponse, Message, ModelInfo, ROLE_TEACHER_FT};

pub fn small_transformer(vocab: usize, seed: u64) -> LanguageModel {
    let cfg = TransformerConfig {
        vocab_size: vocab,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        context_limit: 16,
        ff_dim: 32,
        seed,
    };
    LanguageModel::Transformer(Transformer::new(cfg).unwrap())
}

/// Nearest binary16 value to `x` by searching the sorted table of every
/// finite half, ties to the even bit pattern. Independent of the codec.
pub struct HalfOracle {
    values: Vec<(f64, u16)>,
}

impl HalfOracle {
    pub fn new() -> Self {
        let mut values = Vec::new();
        for bits in 0u16..0x7C00 {
            let e = (bits >> 10) as i32;
            let m = (bits & 0x3FF) as f64;
            let v = if e == 0 { m / 16_777_216.0 } else { (1.0 + m / 1024.0) * 2f64.powi(e - 15) };
            values.push((v, bits));
        }
        Self { values }
    }

    pub fn round(&self, x: f64) -> f64 {
        let a = x.abs();
        let i = self.values.partition_point(|&(v, _)| v < a);
        let best = if i == 0 {
            self.values[0]
        } else if i == self.values.len() {
            *self.values.last().unwrap()
        } else {
            let (lo, hi) = (self.values[i - 1], self.values[i]);
            let (dl, dh) = (a - lo.0, hi.0 - a);
            if dl < dh || (dl == dh && lo.1 % 2 == 0) {
                lo
            } else {
                hi
            }
        };
        best.0.copysign(x)
    }
}

pub fn fixture(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(p).unwrap()
}

pub fn golden() -> Vec<(&'static str, Frame)> {
    vec![
        (
            "logit_request.bin",
            Frame::new(
                7,
                Message::LogitRequest(LogitRequest {
                    role: ROLE_TEACHER_FT,
                    batch: 2,
                    seq_len: 2,
                    tokens: vec![1, 5, 9, 300],
                }),
            ),
        ),
        (
            "logit_response.bin",
            Frame::new(
                7,
                Message::LogitResponse(LogitResponse { batch: 1, seq_len: 1, vocab: 3, logits: vec![0x3C00, 0xC000, 0x3800] }),
            ),
        ),
        ("error.bin", Frame::new(9, Message::Error("unknown role 7".into()))),
        ("model_info_request.bin", Frame::new(1, Message::ModelInfoRequest)),
        (
            "model_info_response.bin",
            Frame::new(1, Message::ModelInfoResponse(ModelInfo { vocab: 64, context_limit: 64, max_batch: 64, role_mask: 3 })),
        ),
    ]
}
