//! Request/reply transports between the driver and its worker tasks.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::marker::PhantomData;
use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;

use crate::data::WorkerId;
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::wire;
use super::worker::{Reply, Request, Worker};

pub trait Transport<F: Real>: Send {
    /// Starts a new, empty worker task.
    fn spawn(&mut self, id: WorkerId) -> Result<()>;

    /// Stops a worker task. Its chunks must have been evacuated first.
    fn shutdown(&mut self, id: WorkerId) -> Result<()>;

    fn dispatch(&mut self, id: WorkerId, request: Request<F>) -> Result<Reply<F>>;

    /// Sends one request to each listed worker and gathers the replies in
    /// the same order. Workers may process their requests concurrently.
    fn dispatch_all(&mut self, requests: Vec<(WorkerId, Request<F>)>) -> Result<Vec<Reply<F>>> {
        requests
            .into_iter()
            .map(|(id, r)| self.dispatch(id, r))
            .collect()
    }

    fn workers(&self) -> Vec<WorkerId>;
}

/// Workers live in the driver's address space and run one after another,
/// which makes every run bit-reproducible.
pub struct InProcessTransport<F> {
    workers: BTreeMap<WorkerId, Worker<F>>,
}

impl<F> Default for InProcessTransport<F> {
    fn default() -> Self {
        InProcessTransport {
            workers: BTreeMap::new(),
        }
    }
}

impl<F: Real> InProcessTransport<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops a worker without any handshake, simulating a crash.
    pub fn kill(&mut self, id: WorkerId) {
        self.workers.remove(&id);
    }
}

impl<F: Real> Transport<F> for InProcessTransport<F> {
    fn spawn(&mut self, id: WorkerId) -> Result<()> {
        if self.workers.contains_key(&id) {
            return Err(Error::Protocol(format!("worker {id} already running")));
        }
        self.workers.insert(id, Worker::new(id));
        Ok(())
    }

    fn shutdown(&mut self, id: WorkerId) -> Result<()> {
        let worker = self.workers.get(&id).ok_or(Error::WorkerUnavailable(id))?;
        if worker.sample_count() > 0 {
            return Err(Error::Protocol(format!("worker {id} still holds data")));
        }
        self.workers.remove(&id);
        Ok(())
    }

    fn dispatch(&mut self, id: WorkerId, request: Request<F>) -> Result<Reply<F>> {
        let worker = self
            .workers
            .get_mut(&id)
            .ok_or(Error::WorkerUnavailable(id))?;
        worker.handle(request).into_result()
    }

    fn workers(&self) -> Vec<WorkerId> {
        self.workers.keys().copied().collect()
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    thread: Option<JoinHandle<()>>,
}

/// Each worker runs on its own thread behind a loopback TCP socket and
/// speaks the framed protocol of [`wire`].
pub struct SocketTransport<F> {
    conns: BTreeMap<WorkerId, Connection>,
    _scalar: PhantomData<fn() -> F>,
}

impl<F> Default for SocketTransport<F> {
    fn default() -> Self {
        SocketTransport {
            conns: BTreeMap::new(),
            _scalar: PhantomData,
        }
    }
}

impl<F: Real> SocketTransport<F> {
    pub fn new() -> Self {
        Self::default()
    }

    fn send(&mut self, id: WorkerId, request: &Request<F>) -> Result<()> {
        let conn = self
            .conns
            .get_mut(&id)
            .ok_or(Error::WorkerUnavailable(id))?;
        let (t, payload) = wire::encode_request(request);
        wire::write_frame(&mut conn.writer, t, &payload).map_err(|_| Error::WorkerUnavailable(id))
    }

    fn receive(&mut self, id: WorkerId) -> Result<Reply<F>> {
        let conn = self
            .conns
            .get_mut(&id)
            .ok_or(Error::WorkerUnavailable(id))?;
        let (t, payload) =
            wire::read_frame(&mut conn.reader).map_err(|_| Error::WorkerUnavailable(id))?;
        wire::decode_reply(t, &payload)?.into_result()
    }
}

fn serve<F: Real>(id: WorkerId, listener: TcpListener) {
    let Ok((stream, _)) = listener.accept() else {
        return;
    };
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    let mut worker = Worker::<F>::new(id);
    loop {
        let Ok((t, payload)) = wire::read_frame(&mut reader) else {
            return;
        };
        let (reply, stop) = match wire::decode_request::<F>(t, &payload) {
            Ok(Request::Shutdown) => (Reply::Ack, true),
            Ok(req) => (worker.handle(req), false),
            Err(e) => (
                Reply::Failed {
                    kind: super::worker::FailureKind::Protocol,
                    message: e.to_string(),
                },
                false,
            ),
        };
        let (rt, rp) = wire::encode_reply(&reply);
        if wire::write_frame(&mut writer, rt, &rp).is_err() || stop {
            return;
        }
    }
}

impl<F: Real> Transport<F> for SocketTransport<F> {
    fn spawn(&mut self, id: WorkerId) -> Result<()> {
        if self.conns.contains_key(&id) {
            return Err(Error::Protocol(format!("worker {id} already running")));
        }
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let thread = std::thread::Builder::new()
            .name(format!("worker-{}", id.0))
            .spawn(move || serve::<F>(id, listener))?;
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        self.conns.insert(
            id,
            Connection {
                reader,
                writer: BufWriter::new(stream),
                thread: Some(thread),
            },
        );
        Ok(())
    }

    fn shutdown(&mut self, id: WorkerId) -> Result<()> {
        match self.dispatch(id, Request::Inventory)? {
            Reply::Inventory(items) if items.iter().all(|&(_, n)| n == 0) => {}
            Reply::Inventory(_) => {
                return Err(Error::Protocol(format!("worker {id} still holds data")))
            }
            other => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
        self.dispatch(id, Request::Shutdown)?;
        if let Some(mut conn) = self.conns.remove(&id) {
            if let Some(t) = conn.thread.take() {
                let _ = t.join();
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, id: WorkerId, request: Request<F>) -> Result<Reply<F>> {
        self.send(id, &request)?;
        self.receive(id)
    }

    fn dispatch_all(&mut self, requests: Vec<(WorkerId, Request<F>)>) -> Result<Vec<Reply<F>>> {
        for (id, r) in &requests {
            self.send(*id, r)?;
        }
        requests.iter().map(|(id, _)| self.receive(*id)).collect()
    }

    fn workers(&self) -> Vec<WorkerId> {
        self.conns.keys().copied().collect()
    }
}

impl<F> Drop for SocketTransport<F> {
    fn drop(&mut self) {
        for (_, mut conn) in std::mem::take(&mut self.conns) {
            let _ = wire::write_frame(&mut conn.writer, wire::tag::SHUTDOWN, &[]);
            if let Some(t) = conn.thread.take() {
                let _ = t.join();
            }
        }
    }
}
