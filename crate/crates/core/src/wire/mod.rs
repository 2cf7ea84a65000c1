//! Teacher-logit serving protocol: codec, transport, server and client.

pub mod client;
pub mod fp16;
pub mod frame;
pub mod server;
pub mod transport;

pub use client::{LogitClient, PendingBatch, RemoteTeacher};
pub use server::{spawn_server, RunningServer, ServedModels};
pub use transport::Endpoint;
