//! A worker task: holds its chunks and a copy of the model, runs local solves
//! and answers scheduler requests.

use std::collections::BTreeMap;

use crate::data::{ChunkId, DataChunk, Model, OwnershipPhase, WorkerId};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::solvers::{
    scd_local_solve, sgd_local_solve, GapPartial, HyperParams, LocalUpdate, Loss,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepBudget {
    /// One local step per locally held sample (a local epoch).
    LocalSamples,
    Fixed(usize),
}

/// Everything a worker needs to run one local solve.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationSpec<F> {
    pub iteration: u64,
    pub seed: u64,
    pub n_total: usize,
    pub hp: HyperParams<F>,
    pub steps: StepBudget,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Request<F> {
    AddChunks(Vec<DataChunk<F>>),
    TakeChunks(Vec<ChunkId>),
    SetModel(Model<F>),
    FetchModel,
    StartIteration(IterationSpec<F>),
    /// Ends the iteration. Dual changes made by the last solve are scaled by
    /// `weight`, the worker's merge weight.
    Commit {
        weight: F,
    },
    GapPartials {
        weights: Vec<F>,
    },
    Inventory,
    Shutdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Contract(OwnershipPhase),
    Solver,
    Protocol,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reply<F> {
    Ack,
    Chunks(Vec<DataChunk<F>>),
    Model(Model<F>),
    IterationFinished(LocalUpdate<F>),
    Partials(Vec<GapPartial<F>>),
    /// `(chunk, sample count)` in chunk order.
    Inventory(Vec<(ChunkId, usize)>),
    Failed {
        kind: FailureKind,
        message: String,
    },
}

impl<F> Reply<F> {
    fn failed(err: Error) -> Self {
        let kind = match &err {
            Error::ContractViolation { phase, .. } => FailureKind::Contract(*phase),
            Error::Protocol(_) | Error::UnknownChunk(_) => FailureKind::Protocol,
            _ => FailureKind::Solver,
        };
        Reply::Failed {
            kind,
            message: err.to_string(),
        }
    }

    /// Converts a failure reply back into an error on the driver side.
    pub fn into_result(self) -> Result<Self> {
        match self {
            Reply::Failed {
                kind: FailureKind::Contract(phase),
                ..
            } => Err(Error::ContractViolation {
                operation: "worker request",
                phase,
            }),
            Reply::Failed { message, .. } => Err(Error::Protocol(message)),
            other => Ok(other),
        }
    }
}

pub struct Worker<F> {
    id: WorkerId,
    chunks: BTreeMap<ChunkId, DataChunk<F>>,
    model: Option<Model<F>>,
    phase: OwnershipPhase,
    dual_snapshot: BTreeMap<ChunkId, Vec<F>>,
}

impl<F: Real> Worker<F> {
    pub fn new(id: WorkerId) -> Self {
        Worker {
            id,
            chunks: BTreeMap::new(),
            model: None,
            phase: OwnershipPhase::SchedulerOwned,
            dual_snapshot: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn phase(&self) -> OwnershipPhase {
        self.phase
    }

    pub fn sample_count(&self) -> usize {
        self.chunks.values().map(DataChunk::len).sum()
    }

    pub fn handle(&mut self, request: Request<F>) -> Reply<F> {
        self.try_handle(request).unwrap_or_else(Reply::failed)
    }

    fn try_handle(&mut self, request: Request<F>) -> Result<Reply<F>> {
        match request {
            Request::AddChunks(chunks) => {
                self.phase
                    .require(OwnershipPhase::SchedulerOwned, "adding chunks")?;
                for c in chunks {
                    if self.chunks.contains_key(&c.id) {
                        return Err(Error::Protocol(format!(
                            "{} already holds {}",
                            self.id, c.id
                        )));
                    }
                    self.chunks.insert(c.id, c);
                }
                Ok(Reply::Ack)
            }
            Request::TakeChunks(ids) => {
                self.phase
                    .require(OwnershipPhase::SchedulerOwned, "removing chunks")?;
                if let Some(missing) = ids.iter().find(|c| !self.chunks.contains_key(c)) {
                    return Err(Error::UnknownChunk(*missing));
                }
                let taken = ids.iter().filter_map(|c| self.chunks.remove(c)).collect();
                Ok(Reply::Chunks(taken))
            }
            Request::SetModel(model) => {
                self.model = Some(model);
                Ok(Reply::Ack)
            }
            Request::FetchModel => self
                .model
                .clone()
                .map(Reply::Model)
                .ok_or_else(|| Error::Protocol("no model broadcast yet".into())),
            Request::StartIteration(spec) => {
                self.phase
                    .require(OwnershipPhase::SchedulerOwned, "starting an iteration")?;
                self.phase = OwnershipPhase::TaskOwned;
                self.solve(spec).map(Reply::IterationFinished)
            }
            Request::Commit { weight } => {
                self.phase
                    .require(OwnershipPhase::TaskOwned, "committing an iteration")?;
                self.commit(weight);
                self.phase = OwnershipPhase::SchedulerOwned;
                Ok(Reply::Ack)
            }
            Request::GapPartials { weights } => self
                .chunks
                .values()
                .map(|c| GapPartial::of_chunk(c, &weights))
                .collect::<Result<Vec<_>>>()
                .map(Reply::Partials),
            Request::Inventory => Ok(Reply::Inventory(
                self.chunks.iter().map(|(&id, c)| (id, c.len())).collect(),
            )),
            Request::Shutdown => Ok(Reply::Ack),
        }
    }

    fn solve(&mut self, spec: IterationSpec<F>) -> Result<LocalUpdate<F>> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Protocol("no model broadcast yet".into()))?;
        let local = self.sample_count();
        let steps = match spec.steps {
            StepBudget::LocalSamples => local,
            StepBudget::Fixed(n) => n,
        };
        let mut chunks: Vec<DataChunk<F>> =
            std::mem::take(&mut self.chunks).into_values().collect();
        let result = match spec.hp.loss {
            Loss::Hinge => {
                self.dual_snapshot = chunks
                    .iter()
                    .map(|c| (c.id, c.dual_state().to_vec()))
                    .collect();
                scd_local_solve(
                    &mut chunks,
                    model,
                    &spec.hp,
                    spec.n_total,
                    steps,
                    self.id,
                    spec.seed,
                )
            }
            Loss::Logistic => {
                let mut hp = spec.hp.clone();
                hp.local_steps = steps;
                sgd_local_solve(&chunks, model, &hp, self.id, spec.seed)
            }
        };
        self.chunks = chunks.into_iter().map(|c| (c.id, c)).collect();
        let mut update = result?;
        update.iteration = spec.iteration;
        Ok(update)
    }

    fn commit(&mut self, weight: F) {
        let snapshot = std::mem::take(&mut self.dual_snapshot);
        if weight == F::one() {
            return;
        }
        for (id, old) in snapshot {
            if let Some(chunk) = self.chunks.get_mut(&id) {
                let (_, duals) = chunk.parts_mut();
                for (a, a0) in duals.iter_mut().zip(old) {
                    *a = (a0 + weight * (*a - a0)).max(F::zero()).min(F::one());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn chunk(id: u32, n: usize) -> DataChunk<f64> {
        let samples = (0..n)
            .map(|i| {
                Sample::new(
                    (id as u64) * 1000 + i as u64,
                    vec![(0, 1.0 + i as f64)],
                    1.0,
                )
                .unwrap()
            })
            .collect();
        let mut c = DataChunk::new(ChunkId(id), samples);
        c.init_dual_state();
        c
    }

    fn spec(iteration: u64) -> IterationSpec<f64> {
        IterationSpec {
            iteration,
            seed: 1,
            n_total: 4,
            hp: HyperParams::cocoa(0.5),
            steps: StepBudget::LocalSamples,
        }
    }

    #[test]
    fn chunk_membership_is_frozen_during_iterations() {
        let mut w = Worker::new(WorkerId(0));
        assert_eq!(w.handle(Request::AddChunks(vec![chunk(0, 2)])), Reply::Ack);
        w.handle(Request::SetModel(Model::zeros(1)));
        assert!(matches!(
            w.handle(Request::StartIteration(spec(0))),
            Reply::IterationFinished(_)
        ));
        assert_eq!(w.phase(), OwnershipPhase::TaskOwned);
        let reply = w.handle(Request::AddChunks(vec![chunk(1, 1)]));
        assert!(matches!(
            reply.into_result(),
            Err(Error::ContractViolation {
                phase: OwnershipPhase::TaskOwned,
                ..
            })
        ));
        assert!(matches!(
            w.handle(Request::TakeChunks(vec![ChunkId(0)])),
            Reply::Failed {
                kind: FailureKind::Contract(_),
                ..
            }
        ));
        assert_eq!(w.handle(Request::Commit { weight: 1.0 }), Reply::Ack);
        assert!(
            matches!(w.handle(Request::TakeChunks(vec![ChunkId(0)])), Reply::Chunks(c) if c.len() == 1)
        );
    }

    #[test]
    fn commit_outside_iteration_is_rejected() {
        let mut w: Worker<f64> = Worker::new(WorkerId(0));
        assert!(matches!(
            w.handle(Request::Commit { weight: 1.0 }),
            Reply::Failed {
                kind: FailureKind::Contract(OwnershipPhase::SchedulerOwned),
                ..
            }
        ));
    }

    #[test]
    fn commit_scales_dual_changes() {
        let mut w = Worker::new(WorkerId(0));
        w.handle(Request::AddChunks(vec![chunk(0, 2)]));
        w.handle(Request::SetModel(Model::zeros(1)));
        w.handle(Request::StartIteration(spec(0)));
        let full: Vec<f64> = w.chunks[&ChunkId(0)].dual_state().to_vec();
        w.handle(Request::Commit { weight: 0.25 });
        let scaled = w.chunks[&ChunkId(0)].dual_state();
        for (a, b) in full.iter().zip(scaled) {
            assert_eq!(*b, 0.25 * a);
        }
    }

    #[test]
    fn fetch_returns_latest_model() {
        let mut w: Worker<f64> = Worker::new(WorkerId(3));
        let m = Model {
            weights: vec![1.0, 2.0],
            iteration: 7,
        };
        w.handle(Request::SetModel(Model::zeros(2)));
        w.handle(Request::SetModel(m.clone()));
        assert_eq!(w.handle(Request::FetchModel), Reply::Model(m));
    }

    #[test]
    fn taking_unknown_chunk_fails() {
        let mut w: Worker<f64> = Worker::new(WorkerId(0));
        assert!(w
            .handle(Request::TakeChunks(vec![ChunkId(5)]))
            .into_result()
            .is_err());
    }
}
