//! Scheduling policies consulted between iterations.
//!
//! Elastic scaling moves chunks onto newly added workers or off workers that
//! are about to be released. Rebalancing learns each worker's per-sample
//! processing time and gradually shifts chunks from slow to fast workers.
//! When both run in the same round, scaling goes first.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ChunkAssignment, ChunkId, ChunkTable, Move, WorkerId};
use crate::error::{Error, Result};

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Recent runtimes of one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerProfile {
    pub worker: WorkerId,
    window: usize,
    runtimes: VecDeque<f64>,
    per_sample: VecDeque<f64>,
}

impl WorkerProfile {
    pub fn new(worker: WorkerId, window: usize) -> Self {
        assert!(window >= 1, "history window must be at least 1");
        WorkerProfile {
            worker,
            window,
            runtimes: VecDeque::with_capacity(window),
            per_sample: VecDeque::with_capacity(window),
        }
    }

    /// Records one iteration that processed `samples` samples in `runtime`.
    pub fn observe(&mut self, runtime: f64, samples: usize) {
        if self.runtimes.len() == self.window {
            self.runtimes.pop_front();
            self.per_sample.pop_front();
        }
        self.runtimes.push_back(runtime);
        if samples > 0 {
            self.per_sample.push_back(runtime / samples as f64);
        } else {
            self.per_sample.push_back(f64::NAN);
        }
    }

    pub fn runtime_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.runtimes.iter().copied()
    }

    pub fn history_len(&self) -> usize {
        self.runtimes.len()
    }

    /// Median of the per-sample times observed in the window. Normalizing
    /// each iteration by its own sample count keeps the estimate valid while
    /// chunks are moving.
    pub fn per_sample_time(&self) -> Option<f64> {
        median(self.per_sample.iter().copied().filter(|t| t.is_finite())).filter(|t| *t > 0.0)
    }
}

/// `median(runtime history) / samples_per_iteration`.
pub fn estimate_per_sample_time(
    profile: &WorkerProfile,
    samples_per_iteration: usize,
) -> Result<f64> {
    assert!(
        samples_per_iteration > 0,
        "samples per iteration must be positive"
    );
    median(profile.runtime_history())
        .map(|m| m / samples_per_iteration as f64)
        .ok_or(Error::NoHistory(profile.worker))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebalanceConfig {
    /// Runtime history window (`I`).
    pub window: usize,
    /// Chunk moves per round; `None` uses
    /// `ceil(total_chunks / (10 * workers))`.
    pub max_moves_per_round: Option<usize>,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        RebalanceConfig {
            window: 5,
            max_moves_per_round: None,
        }
    }
}

impl RebalanceConfig {
    pub fn moves_per_round(&self, total_chunks: usize, workers: usize) -> usize {
        self.max_moves_per_round
            .unwrap_or_else(|| total_chunks.div_ceil(10 * workers.max(1)))
            .max(1)
    }
}

fn owned_samples(
    assignment: &ChunkAssignment,
    table: &ChunkTable,
) -> BTreeMap<WorkerId, Vec<(ChunkId, usize)>> {
    assignment
        .by_worker()
        .into_iter()
        .map(|(w, cs)| {
            let sized = cs
                .into_iter()
                .map(|c| (c, table.get(&c).copied().unwrap_or(0)))
                .collect();
            (w, sized)
        })
        .collect()
}

/// Predicted runtime spread `max - min` over workers, and the stopping
/// threshold (one average chunk on the fastest worker).
pub fn predicted_spread(
    profiles: &[WorkerProfile],
    assignment: &ChunkAssignment,
    table: &ChunkTable,
) -> Option<(f64, f64)> {
    let pst: BTreeMap<WorkerId, f64> = profiles
        .iter()
        .filter_map(|p| p.per_sample_time().map(|t| (p.worker, t)))
        .collect();
    let owned = owned_samples(assignment, table);
    let runtimes: Vec<f64> = owned
        .iter()
        .map(|(w, cs)| {
            pst.get(w)
                .map(|t| t * cs.iter().map(|c| c.1).sum::<usize>() as f64)
        })
        .collect::<Option<_>>()?;
    let max = runtimes.iter().copied().fold(f64::MIN, f64::max);
    let min = runtimes.iter().copied().fold(f64::MAX, f64::min);
    let fastest = owned
        .keys()
        .filter_map(|w| pst.get(w))
        .copied()
        .fold(f64::MAX, f64::min);
    let chunks = assignment.chunk_count().max(1);
    let avg_chunk = table.values().sum::<usize>() as f64 / chunks as f64;
    Some((max - min, fastest * avg_chunk))
}

/// Ranks workers by predicted runtime (per-sample time x owned samples) and
/// moves chunks from the slowest to the fastest, at most
/// `max_moves_per_round` per call. Returns an empty plan once the predicted
/// spread is below the processing time of one average chunk on the fastest
/// worker, or when any worker is still unprofiled.
pub fn plan_rebalance(
    profiles: &[WorkerProfile],
    assignment: &ChunkAssignment,
    table: &ChunkTable,
    config: &RebalanceConfig,
) -> Vec<Move> {
    let pst: BTreeMap<WorkerId, f64> = profiles
        .iter()
        .filter_map(|p| p.per_sample_time().map(|t| (p.worker, t)))
        .collect();
    let mut owned = owned_samples(assignment, table);
    if owned.is_empty() || owned.keys().any(|w| !pst.contains_key(w)) {
        return Vec::new();
    }
    let Some((_, threshold)) = predicted_spread(profiles, assignment, table) else {
        return Vec::new();
    };
    let budget = config.moves_per_round(assignment.chunk_count(), owned.len());
    let mut runtime: BTreeMap<WorkerId, f64> = owned
        .iter()
        .map(|(w, cs)| (*w, pst[w] * cs.iter().map(|c| c.1).sum::<usize>() as f64))
        .collect();

    let mut moves = Vec::new();
    while moves.len() < budget {
        // BTreeMap iteration is by id, so ties resolve to the lowest id.
        let (&src, &r_src) = runtime
            .iter()
            .fold(None, |best: Option<(&WorkerId, &f64)>, cand| match best {
                Some(b) if *b.1 >= *cand.1 => Some(b),
                _ => Some(cand),
            })
            .expect("non-empty");
        let (&dst, &r_dst) = runtime
            .iter()
            .fold(None, |best: Option<(&WorkerId, &f64)>, cand| match best {
                Some(b) if *b.1 <= *cand.1 => Some(b),
                _ => Some(cand),
            })
            .expect("non-empty");
        if src == dst || r_src - r_dst < threshold {
            break;
        }
        let (t_src, t_dst) = (pst[&src], pst[&dst]);
        let best = owned[&src]
            .iter()
            .enumerate()
            .filter_map(|(pos, &(c, n))| {
                let new_src = r_src - t_src * n as f64;
                let new_dst = r_dst + t_dst * n as f64;
                (new_src.max(new_dst) < r_src).then_some((pos, c, n, (new_src - new_dst).abs()))
            })
            .fold(
                None,
                |best: Option<(usize, ChunkId, usize, f64)>, cand| match best {
                    Some(b) if b.3 <= cand.3 => Some(b),
                    _ => Some(cand),
                },
            );
        let Some((pos, chunk, n, _)) = best else {
            break;
        };
        owned.get_mut(&src).expect("src").remove(pos);
        owned.get_mut(&dst).expect("dst").push((chunk, n));
        *runtime.get_mut(&src).expect("src") -= t_src * n as f64;
        *runtime.get_mut(&dst).expect("dst") += t_dst * n as f64;
        moves.push(Move::new(chunk, src, dst));
    }
    moves
}

/// Moves randomly picked chunks from existing workers onto `new_workers`
/// until every worker holds roughly the same number of samples. The new
/// workers must already be registered in `assignment` and own nothing.
pub fn plan_scale_out(
    new_workers: &[WorkerId],
    assignment: &ChunkAssignment,
    table: &ChunkTable,
    seed: u64,
) -> Result<Vec<Move>> {
    if new_workers.is_empty() {
        return Ok(Vec::new());
    }
    for w in new_workers {
        if !assignment.contains_worker(*w) {
            return Err(Error::UnknownWorker(*w));
        }
        if let Some(&c) = assignment.chunks_of(*w).first() {
            return Err(Error::InvalidMove {
                chunk: c,
                reason: format!("new worker {w} already owns chunks"),
            });
        }
    }
    let mut owned = owned_samples(assignment, table);
    let total: usize = owned.values().flatten().map(|c| c.1).sum();
    let target = total as f64 / owned.len() as f64;
    let count = |cs: &Vec<(ChunkId, usize)>| cs.iter().map(|c| c.1).sum::<usize>() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moves = Vec::new();
    loop {
        let dst = *new_workers
            .iter()
            .min_by(|a, b| count(&owned[a]).total_cmp(&count(&owned[b])).then(a.cmp(b)))
            .expect("non-empty");
        let Some(src) = owned
            .iter()
            .filter(|(w, _)| !new_workers.contains(w))
            .max_by(|a, b| count(a.1).total_cmp(&count(b.1)).then(b.0.cmp(a.0)))
            .map(|(w, _)| *w)
        else {
            break;
        };
        let room = (target - count(&owned[&dst])).min(count(&owned[&src]) - target);
        let candidates: Vec<usize> = owned[&src]
            .iter()
            .enumerate()
            .filter(|(_, c)| c.1 as f64 <= 2.0 * room)
            .map(|(i, _)| i)
            .collect();
        let Some(&pick) = candidates.choose(&mut rng) else {
            break;
        };
        let (chunk, n) = owned.get_mut(&src).expect("src").remove(pick);
        owned.get_mut(&dst).expect("dst").push((chunk, n));
        moves.push(Move::new(chunk, src, dst));
    }
    Ok(moves)
}

/// Hands the chunks of `removed` workers, in ascending chunk order, to the
/// remaining workers in ascending id order, round robin.
pub fn plan_scale_in(removed: &[WorkerId], assignment: &ChunkAssignment) -> Result<Vec<Move>> {
    if removed.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(w) = removed.iter().find(|w| !assignment.contains_worker(**w)) {
        return Err(Error::UnknownWorker(*w));
    }
    let remaining: Vec<WorkerId> = assignment
        .workers()
        .filter(|w| !removed.contains(w))
        .collect();
    if remaining.is_empty() {
        return Err(Error::NoWorkersLeft);
    }
    Ok(assignment
        .iter()
        .filter(|(_, owner)| removed.contains(owner))
        .enumerate()
        .map(|(i, (chunk, owner))| Move::new(chunk, owner, remaining[i % remaining.len()]))
        .collect())
}

/// Per-worker profiles plus rebalancing configuration, as kept by the driver.
#[derive(Clone, Debug, Default)]
pub struct Rebalancer {
    pub config: RebalanceConfig,
    profiles: BTreeMap<WorkerId, WorkerProfile>,
}

impl Rebalancer {
    pub fn new(config: RebalanceConfig) -> Self {
        Rebalancer {
            config,
            profiles: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, worker: WorkerId, runtime: f64, samples: usize) {
        let window = self.config.window;
        self.profiles
            .entry(worker)
            .or_insert_with(|| WorkerProfile::new(worker, window))
            .observe(runtime, samples);
    }

    pub fn forget(&mut self, worker: WorkerId) {
        self.profiles.remove(&worker);
    }

    pub fn profiles(&self) -> Vec<WorkerProfile> {
        self.profiles.values().cloned().collect()
    }

    pub fn plan(&self, assignment: &ChunkAssignment, table: &ChunkTable) -> Vec<Move> {
        plan_rebalance(&self.profiles(), assignment, table, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_moves, worker_sample_count, OwnershipPhase};

    fn profile(worker: u32, per_sample: f64, samples: usize) -> WorkerProfile {
        let mut p = WorkerProfile::new(WorkerId(worker), 5);
        p.observe(per_sample * samples as f64, samples);
        p
    }

    fn uniform_table(chunks: u32, samples: usize) -> ChunkTable {
        (0..chunks).map(|c| (ChunkId(c), samples)).collect()
    }

    fn contiguous(chunks: u32, split: &[u32]) -> ChunkAssignment {
        let workers: Vec<WorkerId> = (0..split.len() as u32).map(WorkerId).collect();
        let mut a = ChunkAssignment::new(workers.iter().copied());
        let mut next = 0;
        for (w, &n) in split.iter().enumerate() {
            for _ in 0..n {
                a.insert(ChunkId(next), WorkerId(w as u32)).unwrap();
                next += 1;
            }
        }
        assert_eq!(next, chunks);
        a
    }

    #[test]
    fn per_sample_estimates() {
        let mut p = WorkerProfile::new(WorkerId(0), 5);
        assert!(matches!(
            estimate_per_sample_time(&p, 1000),
            Err(Error::NoHistory(_))
        ));
        p.observe(2.0, 1000);
        assert_eq!(estimate_per_sample_time(&p, 1000).unwrap(), 0.002);
        p.observe(2.0, 1000);
        p.observe(9.0, 1000);
        assert_eq!(estimate_per_sample_time(&p, 1000).unwrap(), 0.002);
        assert_eq!(p.per_sample_time(), Some(0.002));
    }

    #[test]
    fn window_is_bounded() {
        let mut p = WorkerProfile::new(WorkerId(0), 3);
        for i in 0..10 {
            p.observe(1.0 + i as f64, 10);
        }
        assert_eq!(
            p.runtime_history().collect::<Vec<_>>(),
            vec![8.0, 9.0, 10.0]
        );
        let mut q = WorkerProfile::new(WorkerId(0), 4);
        for _ in 0..9 {
            q.observe(3.0, 100);
            assert_eq!(estimate_per_sample_time(&q, 100).unwrap(), 0.03);
        }
    }

    #[test]
    fn homogeneous_cluster_needs_no_moves() {
        let a = contiguous(40, &[10, 10, 10, 10]);
        let table = uniform_table(40, 7);
        let profiles: Vec<_> = (0..4).map(|w| profile(w, 1.0, 70)).collect();
        assert!(plan_rebalance(&profiles, &a, &table, &RebalanceConfig::default()).is_empty());
    }

    #[test]
    fn two_speed_cluster_settles_at_balance_point() {
        let table = uniform_table(300, 10);
        let mut a = contiguous(300, &[150, 150]);
        let config = RebalanceConfig::default();
        let speeds = [1.0, 2.0];
        let mut rounds = 0;
        loop {
            let profiles: Vec<_> = (0..2)
                .map(|w| {
                    let n = worker_sample_count(&a, &table, WorkerId(w)).unwrap();
                    profile(w, speeds[w as usize], n)
                })
                .collect();
            let plan = plan_rebalance(&profiles, &a, &table, &config);
            if plan.is_empty() {
                break;
            }
            a = apply_moves(&a, &plan, OwnershipPhase::SchedulerOwned).unwrap();
            rounds += 1;
        }
        assert_eq!(a.chunks_of(WorkerId(0)).len(), 200);
        assert_eq!(a.chunks_of(WorkerId(1)).len(), 100);
        assert!(rounds <= 300 / config.moves_per_round(300, 2) + config.window);
    }

    #[test]
    fn scale_out_worked_example() {
        let mut a = contiguous(8, &[4, 4]);
        let table = uniform_table(8, 5);
        a.add_worker(WorkerId(2));
        a.add_worker(WorkerId(3));
        let plan = plan_scale_out(&[WorkerId(2), WorkerId(3)], &a, &table, 11).unwrap();
        let b = apply_moves(&a, &plan, OwnershipPhase::SchedulerOwned).unwrap();
        for w in 0..4 {
            assert_eq!(b.chunks_of(WorkerId(w)).len(), 2);
        }
        assert_eq!(
            plan,
            plan_scale_out(&[WorkerId(2), WorkerId(3)], &a, &table, 11).unwrap()
        );
        assert!(plan_scale_out(&[], &a, &table, 0).unwrap().is_empty());
    }

    #[test]
    fn scale_in_worked_example() {
        let (w1, w2, w3) = (WorkerId(1), WorkerId(2), WorkerId(3));
        let mut a = ChunkAssignment::new([w1, w2, w3]);
        for c in 0..3 {
            a.insert(ChunkId(c), w1).unwrap();
        }
        for c in 7..10 {
            a.insert(ChunkId(c), w3).unwrap();
        }
        let plan = plan_scale_in(&[w3], &a).unwrap();
        assert_eq!(
            plan,
            vec![
                Move::new(ChunkId(7), w3, w1),
                Move::new(ChunkId(8), w3, w2),
                Move::new(ChunkId(9), w3, w1)
            ]
        );
        assert!(plan_scale_in(&[], &a).unwrap().is_empty());
        assert!(matches!(
            plan_scale_in(&[w1, w2, w3], &a),
            Err(Error::NoWorkersLeft)
        ));
        let b = apply_moves(&a, &plan, OwnershipPhase::SchedulerOwned).unwrap();
        assert!(b.chunks_of(w3).is_empty());
    }
}
