//! Samples, data chunks, chunk ownership and the model.
//!
//! Training data lives in fixed-capacity [`DataChunk`]s which carry their own
//! per-sample solver state, so a chunk can move between workers without any
//! side tables. Ownership alternates between workers (during an iteration)
//! and the scheduler (between iterations); see [`OwnershipPhase`].
//!
//! Serialized size accounting, used for chunk capacity:
//!
//! | item                 | bytes |
//! |----------------------|-------|
//! | sparse feature index | 4     |
//! | feature value        | 8     |
//! | label                | 8     |
//! | dual-state entry     | 8     |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const INDEX_BYTES: usize = 4;
pub const VALUE_BYTES: usize = 8;
pub const LABEL_BYTES: usize = 8;
pub const DUAL_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub u32);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Identifies a worker task. With one task per node this is also the node id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// A training sample with a sparse feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample<F> {
    pub id: u64,
    /// `(index, value)` pairs with strictly increasing indices.
    pub features: Vec<(u32, F)>,
    pub label: F,
}

impl<F: Real> Sample<F> {
    pub fn new(id: u64, features: Vec<(u32, F)>, label: F) -> Result<Self> {
        let sample = Sample {
            id,
            features,
            label,
        };
        sample.check_indices()?;
        Ok(sample)
    }

    fn check_indices(&self) -> Result<()> {
        for pair in self.features.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidSample {
                    id: self.id,
                    reason: format!(
                        "feature indices not strictly increasing ({} then {})",
                        pair[0].0, pair[1].0
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn dot(&self, weights: &[F]) -> F {
        self.features
            .iter()
            .fold(F::zero(), |acc, &(i, v)| acc + v * weights[i as usize])
    }

    pub fn norm_sq(&self) -> F {
        self.features
            .iter()
            .fold(F::zero(), |acc, &(_, v)| acc + v * v)
    }

    /// `target += scale * x`
    pub fn axpy_into(&self, scale: F, target: &mut [F]) {
        for &(i, v) in &self.features {
            target[i as usize] += scale * v;
        }
    }

    /// Serialized size without solver state.
    pub fn byte_size(&self) -> usize {
        self.features.len() * (INDEX_BYTES + VALUE_BYTES) + LABEL_BYTES
    }
}

/// A set of samples over a fixed feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    samples: Vec<Sample<F>>,
    dim: usize,
}

impl<F: Real> Dataset<F> {
    /// Validates index ordering, index bounds and id uniqueness.
    pub fn new(samples: Vec<Sample<F>>, dim: usize) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &samples {
            s.check_indices()?;
            if let Some(&(last, _)) = s.features.last() {
                if last as usize >= dim {
                    return Err(Error::InvalidSample {
                        id: s.id,
                        reason: format!("feature index {last} out of range for dimension {dim}"),
                    });
                }
            }
            if !ids.insert(s.id) {
                return Err(Error::InvalidSample {
                    id: s.id,
                    reason: "duplicate sample id".into(),
                });
            }
        }
        Ok(Dataset { samples, dim })
    }

    /// Infers the dimension from the largest feature index.
    pub fn infer_dim(samples: Vec<Sample<F>>) -> Result<Self> {
        let dim = samples
            .iter()
            .filter_map(|s| s.features.last().map(|&(i, _)| i as usize + 1))
            .max()
            .unwrap_or(0);
        Self::new(samples, dim)
    }

    pub fn samples(&self) -> &[Sample<F>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample<F>> {
        self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seeded split into `(train, test)`; `test_fraction` of the samples go to
    /// the test set (rounded down).
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset<F>, Dataset<F>) {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.samples.len() as f64) * test_fraction).floor() as usize;
        let (test_idx, train_idx) = order.split_at(n_test);
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Dataset {
                samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
                dim: self.dim,
            }
        };
        (pick(train_idx), pick(test_idx))
    }
}

/// Whether chunks carry per-sample dual variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateLayout {
    Stateless,
    Dual,
}

impl StateLayout {
    fn bytes_per_sample(self) -> usize {
        match self {
            StateLayout::Stateless => 0,
            StateLayout::Dual => DUAL_BYTES,
        }
    }
}

/// Fixed-capacity container of samples plus per-sample solver state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataChunk<F> {
    pub id: ChunkId,
    samples: Vec<Sample<F>>,
    /// Empty, or one dual variable per sample in `[0, 1]`.
    dual_state: Vec<F>,
}

impl<F: Real> DataChunk<F> {
    pub fn new(id: ChunkId, samples: Vec<Sample<F>>) -> Self {
        DataChunk {
            id,
            samples,
            dual_state: Vec::new(),
        }
    }

    /// Rebuilds a chunk from its parts, checking the state invariants.
    pub fn from_parts(id: ChunkId, samples: Vec<Sample<F>>, dual_state: Vec<F>) -> Result<Self> {
        if !dual_state.is_empty() && dual_state.len() != samples.len() {
            return Err(Error::Protocol(format!(
                "chunk {id}: {} dual entries for {} samples",
                dual_state.len(),
                samples.len()
            )));
        }
        if let Some(bad) = dual_state
            .iter()
            .find(|a| !(**a >= F::zero() && **a <= F::one()))
        {
            return Err(Error::Protocol(format!(
                "chunk {id}: dual entry {bad} outside [0, 1]"
            )));
        }
        Ok(DataChunk {
            id,
            samples,
            dual_state,
        })
    }

    pub fn samples(&self) -> &[Sample<F>] {
        &self.samples
    }

    pub fn dual_state(&self) -> &[F] {
        &self.dual_state
    }

    pub fn has_dual_state(&self) -> bool {
        !self.samples.is_empty() && self.dual_state.len() == self.samples.len()
    }

    /// Zero-initializes the dual variables (feasible starting point).
    pub fn init_dual_state(&mut self) {
        self.dual_state = vec![F::zero(); self.samples.len()];
    }

    pub(crate) fn parts_mut(&mut self) -> (&[Sample<F>], &mut [F]) {
        (&self.samples, &mut self.dual_state)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn byte_size(&self) -> usize {
        self.samples.iter().map(Sample::byte_size).sum::<usize>()
            + self.dual_state.len() * DUAL_BYTES
    }
}

/// Greedy sequential packing: items are appended to the current bin until the
/// next one would overflow `capacity`. An item larger than `capacity` gets a
/// bin of its own. Returns item indices per bin.
pub fn greedy_pack(sizes: &[usize], capacity: usize) -> Vec<Vec<usize>> {
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for (i, &size) in sizes.iter().enumerate() {
        if !current.is_empty() && used + size > capacity {
            bins.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += size;
        if used > capacity {
            // oversized singleton
            bins.push(std::mem::take(&mut current));
            used = 0;
        }
    }
    if !current.is_empty() {
        bins.push(current);
    }
    bins
}

/// Shuffles the dataset with `seed` and packs it into chunks of at most
/// `capacity_bytes` (excluding solver state). Chunk ids are dense from 0.
pub fn partition_into_chunks<F: Real>(
    dataset: &[Sample<F>],
    capacity_bytes: usize,
    seed: u64,
) -> Result<Vec<DataChunk<F>>> {
    partition_into_chunks_with(dataset, capacity_bytes, seed, StateLayout::Stateless)
}

/// Like [`partition_into_chunks`], but the capacity also budgets for the
/// per-sample state of `layout`, which is initialized on every chunk.
pub fn partition_into_chunks_with<F: Real>(
    dataset: &[Sample<F>],
    capacity_bytes: usize,
    seed: u64,
    layout: StateLayout,
) -> Result<Vec<DataChunk<F>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    assert!(capacity_bytes > 0, "chunk capacity must be positive");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes: Vec<usize> = order
        .iter()
        .map(|&i| dataset[i].byte_size() + layout.bytes_per_sample())
        .collect();
    let chunks = greedy_pack(&sizes, capacity_bytes)
        .into_iter()
        .enumerate()
        .map(|(cid, bin)| {
            let samples = bin.iter().map(|&k| dataset[order[k]].clone()).collect();
            let mut chunk = DataChunk::new(ChunkId(cid as u32), samples);
            if layout == StateLayout::Dual {
                chunk.init_dual_state();
            }
            chunk
        })
        .collect();
    Ok(chunks)
}

/// Who may touch chunks right now.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OwnershipPhase {
    /// During an iteration: tasks may mutate their chunks; membership is frozen.
    TaskOwned,
    /// Between iterations: the scheduler may add, remove and move chunks;
    /// chunk contents are frozen.
    SchedulerOwned,
}

impl OwnershipPhase {
    pub fn require(self, expected: OwnershipPhase, operation: &'static str) -> Result<()> {
        if self == expected {
            Ok(())
        } else {
            Err(Error::ContractViolation {
                operation,
                phase: self,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub chunk: ChunkId,
    pub from: WorkerId,
    pub to: WorkerId,
}

impl Move {
    pub fn new(chunk: ChunkId, from: WorkerId, to: WorkerId) -> Self {
        Move { chunk, from, to }
    }
}

/// Number of samples per chunk, as seen by the scheduler.
pub type ChunkTable = BTreeMap<ChunkId, usize>;

/// Total mapping from chunks to their owning worker, plus the set of live
/// workers (some of which may own nothing).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAssignment {
    owner: BTreeMap<ChunkId, WorkerId>,
    workers: BTreeSet<WorkerId>,
}

impl ChunkAssignment {
    pub fn new(workers: impl IntoIterator<Item = WorkerId>) -> Self {
        ChunkAssignment {
            owner: BTreeMap::new(),
            workers: workers.into_iter().collect(),
        }
    }

    /// Deals `chunks` to `workers` round-robin in the given order.
    pub fn round_robin(chunks: impl IntoIterator<Item = ChunkId>, workers: &[WorkerId]) -> Self {
        assert!(!workers.is_empty(), "need at least one worker");
        let mut a = ChunkAssignment::new(workers.iter().copied());
        for (i, c) in chunks.into_iter().enumerate() {
            a.owner.insert(c, workers[i % workers.len()]);
        }
        a
    }

    /// Places a new chunk (initial distribution only).
    pub fn insert(&mut self, chunk: ChunkId, worker: WorkerId) -> Result<()> {
        if !self.workers.contains(&worker) {
            return Err(Error::UnknownWorker(worker));
        }
        if self.owner.contains_key(&chunk) {
            return Err(Error::InvalidMove {
                chunk,
                reason: "chunk already placed".into(),
            });
        }
        self.owner.insert(chunk, worker);
        Ok(())
    }

    pub fn add_worker(&mut self, worker: WorkerId) {
        self.workers.insert(worker);
    }

    /// Drops a worker that no longer owns any chunk.
    pub fn remove_worker(&mut self, worker: WorkerId) -> Result<()> {
        if !self.workers.contains(&worker) {
            return Err(Error::UnknownWorker(worker));
        }
        if let Some((&chunk, _)) = self.owner.iter().find(|(_, &w)| w == worker) {
            return Err(Error::InvalidMove {
                chunk,
                reason: format!("worker {worker} still owns chunks"),
            });
        }
        self.workers.remove(&worker);
        Ok(())
    }

    pub fn owner_of(&self, chunk: ChunkId) -> Option<WorkerId> {
        self.owner.get(&chunk).copied()
    }

    pub fn workers(&self) -> impl Iterator<Item = WorkerId> + '_ {
        self.workers.iter().copied()
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn contains_worker(&self, worker: WorkerId) -> bool {
        self.workers.contains(&worker)
    }

    pub fn chunk_count(&self) -> usize {
        self.owner.len()
    }

    /// All `(chunk, owner)` pairs in chunk-id order.
    pub fn iter(&self) -> impl Iterator<Item = (ChunkId, WorkerId)> + '_ {
        self.owner.iter().map(|(&c, &w)| (c, w))
    }

    /// Chunks owned by `worker`, ascending.
    pub fn chunks_of(&self, worker: WorkerId) -> Vec<ChunkId> {
        self.owner
            .iter()
            .filter(|(_, &w)| w == worker)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Chunks grouped by owner; every live worker has an entry.
    pub fn by_worker(&self) -> BTreeMap<WorkerId, Vec<ChunkId>> {
        let mut out: BTreeMap<WorkerId, Vec<ChunkId>> =
            self.workers.iter().map(|&w| (w, Vec::new())).collect();
        for (&c, &w) in &self.owner {
            out.entry(w).or_default().push(c);
        }
        out
    }
}

/// Applies chunk moves. Only legal while the scheduler owns the chunks.
pub fn apply_moves(
    assignment: &ChunkAssignment,
    moves: &[Move],
    phase: OwnershipPhase,
) -> Result<ChunkAssignment> {
    phase.require(OwnershipPhase::SchedulerOwned, "moving chunks")?;
    let mut next = assignment.clone();
    for mv in moves {
        match next.owner.get(&mv.chunk) {
            None => return Err(Error::UnknownChunk(mv.chunk)),
            Some(&owner) if owner != mv.from => {
                return Err(Error::InvalidMove {
                    chunk: mv.chunk,
                    reason: format!("owned by {owner}, not {}", mv.from),
                })
            }
            Some(_) => {}
        }
        if !next.workers.contains(&mv.to) {
            return Err(Error::UnknownWorker(mv.to));
        }
        next.owner.insert(mv.chunk, mv.to);
    }
    Ok(next)
}

/// Number of samples held by `worker` (the `D_k` of the update weighting).
pub fn worker_sample_count(
    assignment: &ChunkAssignment,
    chunks: &ChunkTable,
    worker: WorkerId,
) -> Result<usize> {
    if !assignment.contains_worker(worker) {
        return Err(Error::UnknownWorker(worker));
    }
    assignment
        .owner
        .iter()
        .filter(|(_, &w)| w == worker)
        .map(|(c, _)| chunks.get(c).copied().ok_or(Error::UnknownChunk(*c)))
        .sum()
}

/// Dense model weights and the number of completed iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model<F> {
    pub weights: Vec<F>,
    pub iteration: u64,
}

impl<F: Real> Model<F> {
    pub fn zeros(dim: usize) -> Self {
        Model {
            weights: vec![F::zero(); dim],
            iteration: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `m <- m + delta`, advancing the iteration counter.
    pub fn apply_delta(&mut self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.weights.len());
        for (w, d) in self.weights.iter_mut().zip(delta) {
            *w += *d;
        }
        self.iteration += 1;
    }
}
