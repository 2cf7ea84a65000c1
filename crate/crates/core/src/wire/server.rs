//! Logit server: answers requests for teacher logits over any stream.
//!
//! Each connection gets a reader thread; each logit request is computed on
//! its own thread and answered as soon as it is ready, so responses can
//! overtake each other.

use std::io::{self, ErrorKind};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::fp16::encode_slice;
use super::frame::{
    read_frame, write_frame, Frame, LogitRequest, LogitResponse, Message, ModelInfo, ReadError,
    ROLE_TEACHER_FT, ROLE_TEACHER_RAW,
};
use super::transport::{Endpoint, Listener, Stream};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::numerics::TokenId;

pub const DEFAULT_MAX_BATCH: u16 = 64;

/// The frozen models a server can answer for.
#[derive(Debug)]
pub struct ServedModels {
    teacher_raw: Option<LanguageModel>,
    teacher_ft: Option<LanguageModel>,
    vocab: usize,
    context_limit: usize,
    max_batch: u16,
}

impl ServedModels {
    pub fn new(teacher_raw: Option<LanguageModel>, teacher_ft: Option<LanguageModel>, max_batch: u16) -> Result<Self> {
        let models: Vec<&LanguageModel> = teacher_raw.iter().chain(teacher_ft.iter()).collect();
        let Some(first) = models.first() else {
            return Err(Error::input("a logit server needs at least one model"));
        };
        if models.iter().any(|m| m.vocab_size() != first.vocab_size()) {
            return Err(Error::input("served models have different vocabulary sizes"));
        }
        if max_batch == 0 {
            return Err(Error::Config(vec!["max_batch must be positive".into()]));
        }
        let vocab = first.vocab_size();
        let context_limit = models.iter().map(|m| m.context_limit()).min().unwrap().min(u16::MAX as usize);
        Ok(Self { teacher_raw, teacher_ft, vocab, context_limit, max_batch })
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            vocab: self.vocab as u32,
            context_limit: self.context_limit as u32,
            max_batch: self.max_batch,
            role_mask: self.teacher_raw.is_some() as u8 | (self.teacher_ft.is_some() as u8) << 1,
        }
    }

    fn model(&self, role: u8) -> std::result::Result<&LanguageModel, String> {
        match role {
            ROLE_TEACHER_RAW => self.teacher_raw.as_ref().ok_or_else(|| "teacher_raw is not served".into()),
            ROLE_TEACHER_FT => self.teacher_ft.as_ref().ok_or_else(|| "teacher_ft is not served".into()),
            other => Err(format!("unknown role {other}")),
        }
    }

    /// Computes the response for one request, or the error-frame message.
    pub fn answer(&self, req: &LogitRequest) -> std::result::Result<LogitResponse, String> {
        let model = self.model(req.role)?;
        if req.batch > self.max_batch {
            return Err(format!("batch {} exceeds max_batch {}", req.batch, self.max_batch));
        }
        let len = req.seq_len as usize;
        if len > self.context_limit {
            return Err(format!("seq_len {len} exceeds the context limit {}", self.context_limit));
        }
        if let Some(t) = req.tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(format!("token {t} is outside the vocabulary of {}", self.vocab));
        }
        let seqs: Vec<&[TokenId]> = req.tokens.chunks_exact(len).collect();
        let logits = model.forward_batch(&seqs).map_err(|e| e.to_string())?;
        Ok(LogitResponse {
            batch: req.batch,
            seq_len: req.seq_len,
            vocab: self.vocab as u32,
            logits: encode_slice(&logits.data),
        })
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub requests: AtomicU64,
    pub errors: AtomicU64,
}

/// A server running on a background thread.
#[derive(Debug)]
pub struct RunningServer {
    endpoint: Endpoint,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
    handle: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn is_running(&self) -> bool {
        self.handle.as_ref().is_some_and(|h| !h.is_finished())
    }

    /// Stops accepting, closes open connections and waits for the accept
    /// loop to exit.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Binds `endpoint` and serves `models` until the returned handle is shut
/// down or `stop` is set.
pub fn spawn_server(models: ServedModels, endpoint: &Endpoint, stop: Option<Arc<AtomicBool>>) -> Result<RunningServer> {
    let listener = Listener::bind(endpoint)?;
    let local = listener.local_endpoint()?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Transport(format!("configuring listener: {e}")))?;
    let stop = stop.unwrap_or_default();
    let stats = Arc::new(ServerStats::default());
    let models = Arc::new(models);
    let handle = {
        let stop = stop.clone();
        let stats = stats.clone();
        thread::Builder::new()
            .name("dkd-accept".into())
            .spawn(move || accept_loop(listener, models, stop, stats))
            .map_err(|e| Error::Transport(format!("spawning server thread: {e}")))?
    };
    Ok(RunningServer { endpoint: local, stop, stats, handle: Some(handle) })
}

fn accept_loop(listener: Listener, models: Arc<ServedModels>, stop: Arc<AtomicBool>, stats: Arc<ServerStats>) {
    let mut conns: Vec<(Stream, JoinHandle<()>)> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok(stream) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let Ok(handle_copy) = stream.try_clone() else { continue };
                let models = models.clone();
                let stats = stats.clone();
                if let Ok(h) = thread::Builder::new()
                    .name("dkd-conn".into())
                    .spawn(move || serve_connection(stream, models, stats))
                {
                    conns.push((handle_copy, h));
                }
                conns.retain(|(_, h)| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(_) => thread::sleep(Duration::from_millis(10)),
        }
    }
    for (s, _) in &conns {
        s.shutdown();
    }
    for (_, h) in conns {
        let _ = h.join();
    }
}

fn send(writer: &Mutex<Stream>, frame: &Frame) -> io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
    write_frame(&mut *w, frame)
}

fn serve_connection(stream: Stream, models: Arc<ServedModels>, stats: Arc<ServerStats>) {
    let Ok(write_half) = stream.try_clone() else { return };
    let writer = Arc::new(Mutex::new(write_half));
    let mut reader = stream;
    let mut workers = Vec::new();
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(ReadError::Payload { request_id, error }) => {
                stats.errors.fetch_add(1, Ordering::Relaxed);
                let reply = Frame::new(request_id, Message::Error(error.to_string()));
                if send(&writer, &reply).is_err() {
                    break;
                }
                continue;
            }
            Err(ReadError::Header(e)) => {
                // framing is lost; report and hang up
                stats.errors.fetch_add(1, Ordering::Relaxed);
                let _ = send(&writer, &Frame::new(0, Message::Error(e.to_string())));
                break;
            }
            Err(ReadError::Io(_)) => break,
        };
        let id = frame.request_id;
        match frame.message {
            Message::LogitRequest(req) => {
                let models = models.clone();
                let writer = writer.clone();
                let stats = stats.clone();
                workers.push(thread::spawn(move || {
                    stats.requests.fetch_add(1, Ordering::Relaxed);
                    let reply = match models.answer(&req) {
                        Ok(resp) => Message::LogitResponse(resp),
                        Err(msg) => {
                            stats.errors.fetch_add(1, Ordering::Relaxed);
                            Message::Error(msg)
                        }
                    };
                    let _ = send(&writer, &Frame::new(id, reply));
                }));
                workers.retain(|h| !h.is_finished());
            }
            Message::ModelInfoRequest => {
                if send(&writer, &Frame::new(id, Message::ModelInfoResponse(models.info()))).is_err() {
                    break;
                }
            }
            other => {
                stats.errors.fetch_add(1, Ordering::Relaxed);
                let msg = format!("unexpected {:?} frame from a client", other.msg_type());
                if send(&writer, &Frame::new(id, Message::Error(msg))).is_err() {
                    break;
                }
            }
        }
    }
    for h in workers {
        let _ = h.join();
    }
    reader.shutdown();
}
