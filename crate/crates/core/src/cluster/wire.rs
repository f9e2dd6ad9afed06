//! Binary framing for the socket transport.
//!
//! A frame is a 4-byte big-endian length, a 2-byte big-endian message tag and
//! the payload; the length counts the tag and payload bytes. All integers are
//! big-endian. Reals travel as IEEE-754 `f64` whatever the in-memory scalar.
//!
//! Payload building blocks:
//!
//! - sample: `u64 id, f64 label, u32 nnz, nnz x (u32 index, f64 value)`
//! - chunk: `u32 id, u32 n, n x sample, u32 m, m x f64 dual` (`m` is 0 or `n`)
//! - model: `u64 iteration, u32 dim, dim x f64`
//! - vector: `u32 len, len x f64`
//! - string: `u32 len, len x utf-8 byte`

use std::io::{Read, Write};

use crate::data::{ChunkId, DataChunk, Model, OwnershipPhase, Sample, WorkerId};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::solvers::{GapPartial, HyperParams, LocalUpdate, Loss};

use super::worker::{FailureKind, IterationSpec, Reply, Request, StepBudget};

pub mod tag {
    pub const ADD_CHUNKS: u16 = 0x0001;
    pub const TAKE_CHUNKS: u16 = 0x0002;
    pub const SET_MODEL: u16 = 0x0003;
    pub const FETCH_MODEL: u16 = 0x0004;
    pub const START_ITERATION: u16 = 0x0005;
    pub const COMMIT: u16 = 0x0006;
    pub const GAP_PARTIALS: u16 = 0x0007;
    pub const INVENTORY: u16 = 0x0008;
    pub const SHUTDOWN: u16 = 0x0009;

    pub const ACK: u16 = 0x0081;
    pub const CHUNKS: u16 = 0x0082;
    pub const MODEL: u16 = 0x0083;
    pub const ITERATION_FINISHED: u16 = 0x0084;
    pub const PARTIALS: u16 = 0x0085;
    pub const INVENTORY_REPLY: u16 = 0x0086;
    pub const FAILED: u16 = 0x008F;
}

/// Upper bound on a single frame, guarding against corrupt length prefixes.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn real<F: Real>(&mut self, v: F) {
        self.0.extend_from_slice(&v.to_f64_lossy().to_be_bytes());
    }
    fn reals<F: Real>(&mut self, v: &[F]) {
        self.len(v.len());
        for &x in v {
            self.real(x);
        }
    }
    fn string(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn sample<F: Real>(&mut self, s: &Sample<F>) {
        self.u64(s.id);
        self.real(s.label);
        self.len(s.features.len());
        for &(i, v) in &s.features {
            self.u32(i);
            self.real(v);
        }
    }
    fn chunk<F: Real>(&mut self, c: &DataChunk<F>) {
        self.u32(c.id.0);
        self.len(c.len());
        for s in c.samples() {
            self.sample(s);
        }
        self.reals(c.dual_state());
    }
    fn chunks<F: Real>(&mut self, cs: &[DataChunk<F>]) {
        self.len(cs.len());
        for c in cs {
            self.chunk(c);
        }
    }
    fn model<F: Real>(&mut self, m: &Model<F>) {
        self.u64(m.iteration);
        self.reals(&m.weights);
    }
    fn hp<F: Real>(&mut self, hp: &HyperParams<F>) {
        self.len(hp.batch_size);
        self.len(hp.local_steps);
        self.real(hp.learning_rate);
        self.real(hp.momentum);
        self.real(hp.sigma_prime);
        self.real(hp.lambda);
        self.u8(match hp.loss {
            Loss::Hinge => 0,
            Loss::Logistic => 1,
        });
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Protocol("truncated payload".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn real<F: Real>(&mut self) -> Result<F> {
        let v = f64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes"));
        Ok(F::from_f64_lossy(v))
    }
    fn reals<F: Real>(&mut self) -> Result<Vec<F>> {
        let n = self.len()?;
        (0..n).map(|_| self.real()).collect()
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Protocol(e.to_string()))
    }
    fn sample<F: Real>(&mut self) -> Result<Sample<F>> {
        let id = self.u64()?;
        let label = self.real()?;
        let nnz = self.len()?;
        let features = (0..nnz)
            .map(|_| Ok((self.u32()?, self.real()?)))
            .collect::<Result<Vec<_>>>()?;
        Sample::new(id, features, label)
    }
    fn chunk<F: Real>(&mut self) -> Result<DataChunk<F>> {
        let id = ChunkId(self.u32()?);
        let n = self.len()?;
        let samples = (0..n).map(|_| self.sample()).collect::<Result<Vec<_>>>()?;
        let duals = self.reals()?;
        DataChunk::from_parts(id, samples, duals)
    }
    fn chunks<F: Real>(&mut self) -> Result<Vec<DataChunk<F>>> {
        let n = self.len()?;
        (0..n).map(|_| self.chunk()).collect()
    }
    fn model<F: Real>(&mut self) -> Result<Model<F>> {
        let iteration = self.u64()?;
        let weights = self.reals()?;
        Ok(Model { weights, iteration })
    }
    fn hp<F: Real>(&mut self) -> Result<HyperParams<F>> {
        Ok(HyperParams {
            batch_size: self.len()?,
            local_steps: self.len()?,
            learning_rate: self.real()?,
            momentum: self.real()?,
            sigma_prime: self.real()?,
            lambda: self.real()?,
            loss: match self.u8()? {
                0 => Loss::Hinge,
                1 => Loss::Logistic,
                other => return Err(Error::Protocol(format!("unknown loss tag {other}"))),
            },
        })
    }
    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "{} trailing bytes",
                self.buf.len()
            )))
        }
    }
}

fn phase_code(p: OwnershipPhase) -> u8 {
    match p {
        OwnershipPhase::TaskOwned => 0,
        OwnershipPhase::SchedulerOwned => 1,
    }
}

pub fn encode_request<F: Real>(req: &Request<F>) -> (u16, Vec<u8>) {
    let mut e = Encoder::default();
    let t = match req {
        Request::AddChunks(cs) => {
            e.chunks(cs);
            tag::ADD_CHUNKS
        }
        Request::TakeChunks(ids) => {
            e.len(ids.len());
            ids.iter().for_each(|c| e.u32(c.0));
            tag::TAKE_CHUNKS
        }
        Request::SetModel(m) => {
            e.model(m);
            tag::SET_MODEL
        }
        Request::FetchModel => tag::FETCH_MODEL,
        Request::StartIteration(spec) => {
            e.u64(spec.iteration);
            e.u64(spec.seed);
            e.u64(spec.n_total as u64);
            e.hp(&spec.hp);
            match spec.steps {
                StepBudget::LocalSamples => {
                    e.u8(0);
                    e.u64(0);
                }
                StepBudget::Fixed(n) => {
                    e.u8(1);
                    e.u64(n as u64);
                }
            }
            tag::START_ITERATION
        }
        Request::Commit { weight } => {
            e.real(*weight);
            tag::COMMIT
        }
        Request::GapPartials { weights } => {
            e.reals(weights);
            tag::GAP_PARTIALS
        }
        Request::Inventory => tag::INVENTORY,
        Request::Shutdown => tag::SHUTDOWN,
    };
    (t, e.0)
}

pub fn decode_request<F: Real>(t: u16, payload: &[u8]) -> Result<Request<F>> {
    let mut d = Decoder { buf: payload };
    let req = match t {
        tag::ADD_CHUNKS => Request::AddChunks(d.chunks()?),
        tag::TAKE_CHUNKS => {
            let n = d.len()?;
            Request::TakeChunks(
                (0..n)
                    .map(|_| d.u32().map(ChunkId))
                    .collect::<Result<_>>()?,
            )
        }
        tag::SET_MODEL => Request::SetModel(d.model()?),
        tag::FETCH_MODEL => Request::FetchModel,
        tag::START_ITERATION => {
            let iteration = d.u64()?;
            let seed = d.u64()?;
            let n_total = d.u64()? as usize;
            let hp = d.hp()?;
            let kind = d.u8()?;
            let n = d.u64()? as usize;
            let steps = match kind {
                0 => StepBudget::LocalSamples,
                1 => StepBudget::Fixed(n),
                other => return Err(Error::Protocol(format!("unknown step budget {other}"))),
            };
            Request::StartIteration(IterationSpec {
                iteration,
                seed,
                n_total,
                hp,
                steps,
            })
        }
        tag::COMMIT => Request::Commit { weight: d.real()? },
        tag::GAP_PARTIALS => Request::GapPartials {
            weights: d.reals()?,
        },
        tag::INVENTORY => Request::Inventory,
        tag::SHUTDOWN => Request::Shutdown,
        other => return Err(Error::Protocol(format!("unknown request tag {other:#06x}"))),
    };
    d.finish()?;
    Ok(req)
}

pub fn encode_reply<F: Real>(reply: &Reply<F>) -> (u16, Vec<u8>) {
    let mut e = Encoder::default();
    let t = match reply {
        Reply::Ack => tag::ACK,
        Reply::Chunks(cs) => {
            e.chunks(cs);
            tag::CHUNKS
        }
        Reply::Model(m) => {
            e.model(m);
            tag::MODEL
        }
        Reply::IterationFinished(u) => {
            e.u32(u.worker.0);
            e.u64(u.iteration);
            e.u64(u.samples_processed as u64);
            e.u64(u.skipped as u64);
            e.reals(&u.delta_weights);
            tag::ITERATION_FINISHED
        }
        Reply::Partials(ps) => {
            e.len(ps.len());
            for p in ps {
                e.u32(p.chunk.0);
                e.real(p.hinge_sum);
                e.real(p.alpha_sum);
                e.reals(&p.weighted_sum);
            }
            tag::PARTIALS
        }
        Reply::Inventory(items) => {
            e.len(items.len());
            for &(c, n) in items {
                e.u32(c.0);
                e.u64(n as u64);
            }
            tag::INVENTORY_REPLY
        }
        Reply::Failed { kind, message } => {
            match kind {
                FailureKind::Contract(p) => {
                    e.u8(0);
                    e.u8(phase_code(*p));
                }
                FailureKind::Solver => {
                    e.u8(1);
                    e.u8(0);
                }
                FailureKind::Protocol => {
                    e.u8(2);
                    e.u8(0);
                }
            }
            e.string(message);
            tag::FAILED
        }
    };
    (t, e.0)
}

pub fn decode_reply<F: Real>(t: u16, payload: &[u8]) -> Result<Reply<F>> {
    let mut d = Decoder { buf: payload };
    let reply = match t {
        tag::ACK => Reply::Ack,
        tag::CHUNKS => Reply::Chunks(d.chunks()?),
        tag::MODEL => Reply::Model(d.model()?),
        tag::ITERATION_FINISHED => Reply::IterationFinished(LocalUpdate {
            worker: WorkerId(d.u32()?),
            iteration: d.u64()?,
            samples_processed: d.u64()? as usize,
            skipped: d.u64()? as usize,
            delta_weights: d.reals()?,
        }),
        tag::PARTIALS => {
            let n = d.len()?;
            Reply::Partials(
                (0..n)
                    .map(|_| {
                        Ok(GapPartial {
                            chunk: ChunkId(d.u32()?),
                            hinge_sum: d.real()?,
                            alpha_sum: d.real()?,
                            weighted_sum: d.reals()?,
                        })
                    })
                    .collect::<Result<_>>()?,
            )
        }
        tag::INVENTORY_REPLY => {
            let n = d.len()?;
            Reply::Inventory(
                (0..n)
                    .map(|_| Ok((ChunkId(d.u32()?), d.u64()? as usize)))
                    .collect::<Result<_>>()?,
            )
        }
        tag::FAILED => {
            let kind = match (d.u8()?, d.u8()?) {
                (0, 0) => FailureKind::Contract(OwnershipPhase::TaskOwned),
                (0, _) => FailureKind::Contract(OwnershipPhase::SchedulerOwned),
                (1, _) => FailureKind::Solver,
                _ => FailureKind::Protocol,
            };
            Reply::Failed {
                kind,
                message: d.string()?,
            }
        }
        other => return Err(Error::Protocol(format!("unknown reply tag {other:#06x}"))),
    };
    d.finish()?;
    Ok(reply)
}

pub fn write_frame(w: &mut impl Write, t: u16, payload: &[u8]) -> Result<()> {
    let len =
        u32::try_from(payload.len() + 2).map_err(|_| Error::Protocol("frame too large".into()))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&t.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<(u16, Vec<u8>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if !(2..=MAX_FRAME).contains(&len) {
        return Err(Error::Protocol(format!("bad frame length {len}")));
    }
    let mut t = [0u8; 2];
    r.read_exact(&mut t)?;
    let mut payload = vec![0u8; len - 2];
    r.read_exact(&mut payload)?;
    Ok((u16::from_be_bytes(t), payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_chunk() -> impl Strategy<Value = DataChunk<f64>> {
        let sample = (
            any::<u64>(),
            prop::bool::ANY,
            prop::collection::btree_map(0u32..1000, -1e6f64..1e6, 0..8),
        )
            .prop_map(|(id, pos, f)| {
                Sample::new(id, f.into_iter().collect(), if pos { 1.0 } else { -1.0 }).unwrap()
            });
        (
            any::<u32>(),
            prop::collection::vec(sample, 0..6),
            prop::bool::ANY,
        )
            .prop_map(|(id, samples, dual)| {
                let mut c = DataChunk::new(ChunkId(id), samples);
                if dual {
                    c.init_dual_state();
                }
                c
            })
    }

    proptest! {
        #[test]
        fn chunks_survive_the_wire(chunks in prop::collection::vec(arb_chunk(), 0..4)) {
            let req = Request::AddChunks(chunks);
            let (t, bytes) = encode_request(&req);
            let mut framed = Vec::new();
            write_frame(&mut framed, t, &bytes).unwrap();
            prop_assert_eq!(&framed[..4], &((bytes.len() + 2) as u32).to_be_bytes());
            let (t2, payload) = read_frame(&mut framed.as_slice()).unwrap();
            prop_assert_eq!(decode_request::<f64>(t2, &payload).unwrap(), req);
        }
    }

    #[test]
    fn frame_layout() {
        let (t, payload) = encode_request::<f64>(&Request::Commit { weight: 0.5 });
        let mut out = Vec::new();
        write_frame(&mut out, t, &payload).unwrap();
        assert_eq!(&out[..6], &[0, 0, 0, 10, 0, 6]);
        assert_eq!(&out[6..], &0.5f64.to_be_bytes());
    }

    #[test]
    fn rejects_trailing_bytes_and_unknown_tags() {
        assert!(decode_request::<f64>(tag::FETCH_MODEL, &[1]).is_err());
        assert!(decode_request::<f64>(0x7777, &[]).is_err());
        assert!(decode_reply::<f64>(tag::MODEL, &[0, 1]).is_err());
    }

    #[test]
    fn failure_reply_roundtrip() {
        let r: Reply<f64> = Reply::Failed {
            kind: FailureKind::Contract(OwnershipPhase::TaskOwned),
            message: "nope".into(),
        };
        let (t, p) = encode_reply(&r);
        assert_eq!(decode_reply::<f64>(t, &p).unwrap(), r);
    }
}
