//! Tiny autoregressive language models, snapshots, training and decoding.

pub mod bigram;
pub mod decode;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod snapshot;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use bigram::{fit_tabular, BigramModel};
pub use decode::{argmax, greedy_decode, greedy_decode_batch};
pub use model::{BatchLogits, ForwardCache, LanguageModel, LogitSource, ModelKind};
pub use optim::{Adam, AdamConfig};
pub use snapshot::{file_sha256, ModelSnapshot, Stage};
pub use train::{loss_and_grad, train_step, StepStats};
pub use transformer::{Transformer, TransformerConfig};
pub use vocab::{TokenSeq, Vocab, BOS, EOS, PAD, SEP};
