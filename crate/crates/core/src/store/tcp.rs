use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use crate::sampler::{StalenessFilter, WeightEntry};

use super::wire::{self, ErrorCode, Message, ReadError};
use super::{MemoryStore, ParamsSnapshot, StoreError, WeightStore, WorkerStatus};

fn error_reply(err: &StoreError) -> Message {
    Message::Error { code: err.code().unwrap_or(ErrorCode::Other(99)).to_u32(), text: err.to_string() }
}

fn empty_params() -> ParamsSnapshot {
    ParamsSnapshot { version: 0, shapes: Vec::new(), params: Vec::new() }
}

fn handle(store: &mut MemoryStore, msg: Message) -> Message {
    let result = match msg {
        Message::PutParams(s) => store.put_params(s).map(|_| Message::Ok),
        Message::GetParams => store
            .get_params()
            .map(|p| Message::Params(p.map_or_else(empty_params, |s| (*s).clone()))),
        Message::PutWeights { param_version, entries } => {
            let entries: Vec<_> = entries.into_iter().map(|(i, w)| (i as usize, w)).collect();
            store.put_weights(param_version, &entries).map(|_| Message::Ok)
        }
        Message::GetWeights(filter) => store.get_weights(filter).map(Message::Weights),
        Message::PutWorkerStatus(s) => store.put_worker_status(s.worker_id, s.scored_version).map(|_| Message::Ok),
        Message::GetWorkerStatus => store.get_worker_status().map(Message::WorkerStatuses),
        other => {
            return Message::Error {
                code: ErrorCode::Protocol.to_u32(),
                text: format!("message kind 0x{:02x} is not a request", other.kind()),
            }
        }
    };
    result.unwrap_or_else(|e| error_reply(&e))
}

fn serve_connection(stream: TcpStream, mut store: MemoryStore) {
    let peer = stream.peer_addr().ok();
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        match wire::read_message(&mut reader) {
            Ok(Some(msg)) => {
                let reply = handle(&mut store, msg);
                if wire::write_message(&mut writer, &reply).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(ReadError::Protocol(e)) => {
                warn!("closing connection from {peer:?}: {e}");
                let _ = wire::write_message(
                    &mut writer,
                    &Message::Error { code: ErrorCode::Protocol.to_u32(), text: e.to_string() },
                );
                break;
            }
            Err(ReadError::Io(e)) => {
                debug!("connection from {peer:?} dropped: {e}");
                break;
            }
        }
    }
}

/// TCP front end for a [`MemoryStore`]; one thread per connection.
pub struct StoreServer {
    listener: TcpListener,
    store: MemoryStore,
}

impl StoreServer {
    pub fn bind(addr: impl ToSocketAddrs, store: MemoryStore) -> io::Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr)?, store })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the process exits.
    pub fn serve(self) -> io::Result<()> {
        let stop = AtomicBool::new(false);
        self.accept_loop(&stop);
        Ok(())
    }

    fn accept_loop(&self, stop: &AtomicBool) {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let store = self.store.clone();
                    thread::spawn(move || serve_connection(stream, store));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    }

    /// Serves on a background thread until the handle is shut down or dropped.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || self.accept_loop(&flag));
        Ok(ServerHandle { addr, stop, thread: Some(thread) })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Blocking client; one request in flight per connection.
pub struct TcpStoreClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpStoreClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, StoreError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self { reader, writer: BufWriter::new(stream) })
    }

    fn request(&mut self, msg: &Message) -> Result<Message, StoreError> {
        wire::write_message(&mut self.writer, msg)?;
        match wire::read_message(&mut self.reader) {
            Ok(Some(Message::Error { code, text })) => {
                Err(StoreError::Remote { code: ErrorCode::from_u32(code), message: text })
            }
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => Err(io::Error::new(io::ErrorKind::UnexpectedEof, "store closed the connection").into()),
            Err(ReadError::Io(e)) => Err(e.into()),
            Err(ReadError::Protocol(e)) => Err(e.into()),
        }
    }

    fn expect_ok(&mut self, msg: &Message) -> Result<(), StoreError> {
        match self.request(msg)? {
            Message::Ok => Ok(()),
            other => Err(StoreError::UnexpectedReply(other.kind())),
        }
    }
}

impl Drop for TcpStoreClient {
    fn drop(&mut self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

/// Connects, retrying with doubling backoff while the store is unreachable.
pub fn connect_with_retry(
    addr: &str,
    attempts: usize,
    initial_backoff: Duration,
) -> Result<TcpStoreClient, StoreError> {
    let mut backoff = initial_backoff;
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match TcpStoreClient::connect(addr) {
            Ok(c) => return Ok(c),
            Err(e) => {
                debug!("connect to {addr} failed (attempt {}): {e}", attempt + 1);
                last = Some(e);
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(5));
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

impl WeightStore for TcpStoreClient {
    fn put_params(&mut self, snapshot: ParamsSnapshot) -> Result<(), StoreError> {
        self.expect_ok(&Message::PutParams(snapshot))
    }

    fn get_params(&mut self) -> Result<Option<Arc<ParamsSnapshot>>, StoreError> {
        match self.request(&Message::GetParams)? {
            Message::Params(s) if s.version == 0 => Ok(None),
            Message::Params(s) => Ok(Some(Arc::new(s))),
            other => Err(StoreError::UnexpectedReply(other.kind())),
        }
    }

    fn put_weights(&mut self, param_version: u64, entries: &[(usize, f64)]) -> Result<(), StoreError> {
        let mut wire_entries = Vec::with_capacity(entries.len());
        for &(i, w) in entries {
            let i = u32::try_from(i).map_err(|_| StoreError::IndexOutOfRange { index: i, population: u32::MAX as usize + 1 })?;
            wire_entries.push((i, w));
        }
        self.expect_ok(&Message::PutWeights { param_version, entries: wire_entries })
    }

    fn get_weights(&mut self, filter: StalenessFilter) -> Result<Vec<WeightEntry<f64>>, StoreError> {
        match self.request(&Message::GetWeights(filter))? {
            Message::Weights(w) => Ok(w),
            other => Err(StoreError::UnexpectedReply(other.kind())),
        }
    }

    fn put_worker_status(&mut self, worker_id: u32, scored_version: u64) -> Result<(), StoreError> {
        self.expect_ok(&Message::PutWorkerStatus(WorkerStatus { worker_id, scored_version }))
    }

    fn get_worker_status(&mut self) -> Result<Vec<WorkerStatus>, StoreError> {
        match self.request(&Message::GetWorkerStatus)? {
            Message::WorkerStatuses(s) => Ok(s),
            other => Err(StoreError::UnexpectedReply(other.kind())),
        }
    }
}
