//! Logit client with pipelined requests.
//!
//! Requests are written as soon as they are submitted; a reader thread
//! routes each response to the waiter registered under its request id.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::frame::{
    read_frame, write_frame, Frame, LogitRequest, LogitResponse, Message, ModelInfo, ReadError,
};
use super::transport::{Endpoint, Stream};
use crate::error::{Error, Result};
use crate::lm::{BatchLogits, LogitSource, PAD};
use crate::numerics::TokenId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_RETRIES: u32 = 3;

type Waiters = Arc<Mutex<HashMap<u64, Sender<Result<Message>>>>>;

#[derive(Debug)]
struct Connection {
    writer: Mutex<Stream>,
    waiters: Waiters,
    /// Cleared by the reader thread when the stream dies.
    alive: Arc<std::sync::atomic::AtomicBool>,
}

impl Connection {
    fn open(ep: &Endpoint, timeout: Duration) -> Result<Arc<Self>> {
        let stream = Stream::connect(ep, timeout)?;
        let mut reader = stream
            .try_clone()
            .map_err(|e| Error::Transport(format!("cloning stream to {ep}: {e}")))?;
        let waiters: Waiters = Arc::default();
        let alive = Arc::new(std::sync::atomic::AtomicBool::new(true));
        let conn = Arc::new(Self { writer: Mutex::new(stream), waiters: waiters.clone(), alive: alive.clone() });
        let ep = ep.clone();
        thread::Builder::new()
            .name("dkd-client-reader".into())
            .spawn(move || {
                let reason = loop {
                    match read_frame(&mut reader) {
                        Ok(frame) => {
                            let id = frame.request_id;
                            let msg = match frame.message {
                                Message::Error(m) => Err(Error::Remote { request_id: id, message: m }),
                                other => Ok(other),
                            };
                            if let Some(tx) = waiters.lock().unwrap().remove(&id) {
                                let _ = tx.send(msg);
                            }
                        }
                        Err(ReadError::Payload { request_id, error }) => {
                            if let Some(tx) = waiters.lock().unwrap().remove(&request_id) {
                                let _ = tx.send(Err(Error::Protocol(error)));
                            }
                        }
                        Err(ReadError::Header(e)) => break format!("protocol error from {ep}: {e}"),
                        Err(ReadError::Io(e)) => break format!("connection to {ep} lost: {e}"),
                    }
                };
                alive.store(false, Ordering::SeqCst);
                for (_, tx) in waiters.lock().unwrap().drain() {
                    let _ = tx.send(Err(Error::Transport(reason.clone())));
                }
                reader.shutdown();
            })
            .map_err(|e| Error::Transport(format!("spawning reader thread: {e}")))?;
        Ok(conn)
    }

    fn send(&self, frame: &Frame) -> Result<Receiver<Result<Message>>> {
        let (tx, rx) = mpsc::channel();
        self.waiters.lock().unwrap().insert(frame.request_id, tx);
        let mut w = self.writer.lock().unwrap();
        if let Err(e) = write_frame(&mut *w, frame) {
            self.waiters.lock().unwrap().remove(&frame.request_id);
            return Err(Error::Transport(format!("sending request {}: {e}", frame.request_id)));
        }
        Ok(rx)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Ok(w) = self.writer.lock() {
            w.shutdown();
        }
    }
}

/// A response that has been requested but not yet received.
#[derive(Debug)]
pub struct Pending {
    id: u64,
    rx: Receiver<Result<Message>>,
    timeout: Duration,
    waiters: Waiters,
}

impl Pending {
    pub fn request_id(&self) -> u64 {
        self.id
    }

    /// Blocks until the matching response arrives or the timeout passes.
    pub fn wait(self) -> Result<Message> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.waiters.lock().unwrap().remove(&self.id);
                Err(Error::Timeout(format!(
                    "request {} timed out after {:.1} s",
                    self.id,
                    self.timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport(format!("connection closed before request {} was answered", self.id)))
            }
        }
    }
}

/// One logical connection to a logit server, reopened on failure.
#[derive(Debug)]
pub struct LogitClient {
    endpoint: Endpoint,
    timeout: Duration,
    retries: u32,
    next_id: AtomicU64,
    conn: Mutex<Option<Arc<Connection>>>,
}

impl LogitClient {
    pub fn new(endpoint: Endpoint) -> Self {
        Self::with_options(endpoint, DEFAULT_TIMEOUT, DEFAULT_RETRIES)
    }

    pub fn with_options(endpoint: Endpoint, timeout: Duration, retries: u32) -> Self {
        Self { endpoint, timeout, retries, next_id: AtomicU64::new(1), conn: Mutex::new(None) }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn connection(&self) -> Result<Arc<Connection>> {
        let mut slot = self.conn.lock().unwrap();
        if let Some(c) = slot.as_ref() {
            if c.alive.load(Ordering::SeqCst) {
                return Ok(c.clone());
            }
        }
        let c = Connection::open(&self.endpoint, self.timeout)?;
        *slot = Some(c.clone());
        Ok(c)
    }

    /// Sends a message without waiting; reconnects (within the retry
    /// budget) if the connection is down.
    pub fn submit(&self, message: Message) -> Result<Pending> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let frame = Frame::new(id, message);
        let mut attempt = 0;
        loop {
            let res = self.connection().and_then(|c| {
                let rx = c.send(&frame)?;
                Ok(Pending { id, rx, timeout: self.timeout, waiters: c.waiters.clone() })
            });
            match res {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    *self.conn.lock().unwrap() = None;
                    thread::sleep(Duration::from_millis(50 << attempt.min(4)));
                }
                other => return other,
            }
        }
    }

    /// Sends and waits, resending on connection loss within the retry
    /// budget. Timeouts are returned as retryable transport errors.
    pub fn call(&self, message: Message) -> Result<Message> {
        let mut attempt = 0;
        loop {
            let res = self.submit(message.clone())?.wait();
            match res {
                Err(Error::Transport(_)) if attempt < self.retries => {
                    attempt += 1;
                    *self.conn.lock().unwrap() = None;
                }
                other => return other,
            }
        }
    }

    pub fn model_info(&self) -> Result<ModelInfo> {
        match self.call(Message::ModelInfoRequest)? {
            Message::ModelInfoResponse(info) => Ok(info),
            other => Err(unexpected(&other)),
        }
    }

    pub fn logits(&self, request: LogitRequest) -> Result<LogitResponse> {
        match self.call(Message::LogitRequest(request))? {
            Message::LogitResponse(r) => Ok(r),
            other => Err(unexpected(&other)),
        }
    }
}

fn unexpected(m: &Message) -> Error {
    Error::Transport(format!("unexpected {:?} reply", m.msg_type()))
}

/// A remote teacher role usable wherever a local model is.
#[derive(Debug, Clone)]
pub struct RemoteTeacher {
    client: Arc<LogitClient>,
    role: u8,
    info: ModelInfo,
}

/// Chunks of one logical batch in flight.
#[derive(Debug)]
pub struct PendingBatch {
    lens: Vec<usize>,
    chunks: Vec<(Pending, usize)>,
    vocab: usize,
}

impl RemoteTeacher {
    /// Fetches the server's model info and checks the role is served.
    pub fn connect(client: Arc<LogitClient>, role: u8) -> Result<Self> {
        let info = client.model_info()?;
        if role == 0 || role > 2 || info.role_mask & (1 << (role - 1)) == 0 {
            return Err(Error::input(format!("server at {} does not serve role {role}", client.endpoint())));
        }
        Ok(Self { client, role, info })
    }

    pub fn info(&self) -> ModelInfo {
        self.info
    }

    /// Sends a batch (split by the server's max_batch, right-padded with
    /// PAD to a common length) without waiting for the answers.
    pub fn submit(&self, seqs: &[&[TokenId]]) -> Result<PendingBatch> {
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        if let Some(i) = lens.iter().position(|&l| l == 0 || l > self.info.context_limit as usize) {
            return Err(Error::input(format!(
                "sequence {i} has length {} (context limit {})",
                lens[i], self.info.context_limit
            )));
        }
        let mut chunks = Vec::new();
        for chunk in seqs.chunks(self.info.max_batch.max(1) as usize) {
            let seq_len = chunk.iter().map(|s| s.len()).max().unwrap();
            let mut tokens = Vec::with_capacity(chunk.len() * seq_len);
            for s in chunk {
                tokens.extend_from_slice(s);
                tokens.resize(tokens.len() + seq_len - s.len(), PAD);
            }
            let req = LogitRequest { role: self.role, batch: chunk.len() as u16, seq_len: seq_len as u16, tokens };
            chunks.push((self.client.submit(Message::LogitRequest(req))?, chunk.len()));
        }
        Ok(PendingBatch { lens, chunks, vocab: self.info.vocab as usize })
    }
}

impl PendingBatch {
    /// Waits for every chunk and unpacks the rows of the real (unpadded)
    /// positions. Padding sits after each sequence, so causality keeps it
    /// from influencing those rows.
    pub fn wait(self) -> Result<BatchLogits> {
        let v = self.vocab;
        let mut data = Vec::with_capacity(self.lens.iter().sum::<usize>() * v);
        let mut seq = 0;
        for (pending, n) in self.chunks {
            let resp = match pending.wait()? {
                Message::LogitResponse(r) => r,
                other => return Err(unexpected(&other)),
            };
            if resp.batch as usize != n || resp.vocab as usize != v {
                return Err(Error::Transport(format!(
                    "response shape {}x{}x{} does not match the request",
                    resp.batch, resp.seq_len, resp.vocab
                )));
            }
            for b in 0..n {
                if self.lens[seq] > resp.seq_len as usize {
                    return Err(Error::Transport(format!("response seq_len {} is too short", resp.seq_len)));
                }
                for t in 0..self.lens[seq] {
                    data.extend(resp.row(b, t));
                }
                seq += 1;
            }
        }
        let offsets = std::iter::once(0)
            .chain(self.lens.iter().scan(0, |a, &l| {
                *a += l;
                Some(*a)
            }))
            .collect();
        Ok(BatchLogits { vocab: v, offsets, data })
    }
}

impl LogitSource for RemoteTeacher {
    fn vocab_size(&self) -> usize {
        self.info.vocab as usize
    }

    fn context_limit(&self) -> usize {
        self.info.context_limit as usize
    }

    fn batch_logits(&self, seqs: &[&[TokenId]]) -> Result<BatchLogits> {
        self.submit(seqs)?.wait()
    }
}
