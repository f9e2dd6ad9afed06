//! The driver loop.
//!
//! Every iteration broadcasts the model, lets each worker solve on its own
//! chunks, merges the returned updates weighted by processed samples, and
//! applies the result. Between iterations the scheduler owns all chunks and
//! runs the scaling and rebalancing policies.
//!
//! In micro-task mode the number of tasks `K` is fixed; the node roster only
//! affects projected iteration time, never the numerical trajectory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{
    advance_scenario, microtask_time_for_speeds, InProcessTransport, IterationSpec, Reply, Request,
    Roster, Scenario, ScenarioCursor, ScenarioEvent, StepBudget, Transport, VirtualClock,
};
use crate::data::{
    apply_moves, partition_into_chunks_with, ChunkAssignment, ChunkTable, Dataset, Model, Move,
    OwnershipPhase, Sample, StateLayout, WorkerId,
};
use crate::error::{Error, Result};
use crate::policies::{plan_scale_in, plan_scale_out, RebalanceConfig, Rebalancer};
use crate::scalar::Real;
use crate::solvers::{
    effective_lr, evaluate, solve_seed, GapReport, HyperParams, LocalUpdate, Loss,
};

/// Reference task count of the time normalization: one such task processes
/// `1/16` of an iteration's work in one time unit on a speed-1 node.
pub const REFERENCE_TASKS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutionMode {
    /// One task per node; data parallelism follows the live node count.
    UniTasks,
    /// A fixed number of tasks scheduled in waves over the nodes.
    MicroTasks { tasks: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ConvergenceTarget {
    /// Stop once the duality gap is at or below the value.
    DualityGap(f64),
    /// Stop once test accuracy reaches the value.
    Accuracy(f64),
    /// Stop when accuracy has not improved for this many iterations.
    Plateau(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig<F> {
    pub mode: ExecutionMode,
    /// For local SGD, `learning_rate` is the base rate before square-root
    /// scaling with the data parallelism.
    pub hp: HyperParams<F>,
    pub convergence: ConvergenceTarget,
    pub max_epochs: f64,
    pub seed: u64,
    pub chunk_capacity: usize,
    /// Enables the rebalancing policy (uni-tasks only).
    pub rebalance: Option<RebalanceConfig>,
    /// Held-out fraction used for accuracy (local SGD only). With zero,
    /// accuracy is measured on the training set.
    pub test_fraction: f64,
}

impl<F: Real> TrainerConfig<F> {
    pub fn cocoa(lambda: F, mode: ExecutionMode) -> Self {
        TrainerConfig {
            mode,
            hp: HyperParams::cocoa(lambda),
            convergence: ConvergenceTarget::DualityGap(1e-3),
            max_epochs: 100.0,
            seed: 0,
            chunk_capacity: 1 << 20,
            rebalance: None,
            test_fraction: 0.0,
        }
    }

    pub fn local_sgd(hp: HyperParams<F>, mode: ExecutionMode) -> Self {
        TrainerConfig {
            mode,
            hp,
            convergence: ConvergenceTarget::Plateau(10),
            max_epochs: 20.0,
            seed: 0,
            chunk_capacity: 200 << 10,
            rebalance: None,
            test_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if let ExecutionMode::MicroTasks { tasks: 0 } = self.mode {
            return Err(Error::Config("micro-task count must be positive".into()));
        }
        if self.chunk_capacity == 0 {
            return Err(Error::Config("chunk capacity must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test fraction must lie in [0, 1)".into()));
        }
        if !(self.max_epochs >= 0.0) {
            return Err(Error::Config("max epochs must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerStat {
    pub worker: WorkerId,
    /// Virtual time this worker (or task) spent in the iteration.
    pub runtime: f64,
    pub chunks: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Cumulative samples processed divided by the training set size.
    pub epoch_progress: f64,
    /// Duality gap (CoCoA) or test accuracy (local SGD).
    pub metric: f64,
    /// Virtual clock at the end of the iteration.
    pub virtual_time: f64,
    pub iteration_time: f64,
    /// Data parallelism used for this iteration.
    pub parallelism: usize,
    /// Live nodes during the iteration.
    pub nodes: usize,
    pub workers: Vec<WorkerStat>,
}

/// Weighted sum of local updates, each scaled by its share of the processed
/// samples. The weights sum to one.
pub fn merge_updates<F: Real>(
    updates: &[LocalUpdate<F>],
    total_processed: usize,
) -> Result<Vec<F>> {
    if total_processed == 0 || updates.is_empty() {
        return Err(Error::NoWork);
    }
    let dim = updates[0].delta_weights.len();
    let total = F::from_usize_lossy(total_processed);
    let mut merged = vec![F::zero(); dim];
    for u in updates {
        let weight = F::from_usize_lossy(u.samples_processed) / total;
        for (m, d) in merged.iter_mut().zip(&u.delta_weights) {
            *m += weight * *d;
        }
    }
    Ok(merged)
}

pub struct Trainer<F: Real> {
    config: TrainerConfig<F>,
    transport: Box<dyn Transport<F>>,
    assignment: ChunkAssignment,
    table: ChunkTable,
    phase: OwnershipPhase,
    phase_log: Vec<OwnershipPhase>,
    model: Model<F>,
    n_total: usize,
    units_per_sample: f64,
    scenario: Scenario,
    cursor: ScenarioCursor,
    roster: Roster,
    clock: VirtualClock,
    rebalancer: Rebalancer,
    samples_seen: usize,
    eval_set: Vec<Sample<F>>,
    best_accuracy: f64,
    since_improvement: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(
        config: TrainerConfig<F>,
        scenario: Scenario,
        dataset: &Dataset<F>,
        transport: Box<dyn Transport<F>>,
    ) -> Result<Self> {
        config.validate()?;
        scenario.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (train, test) = match config.hp.loss {
            Loss::Logistic if config.test_fraction > 0.0 => {
                dataset.split(config.test_fraction, config.seed ^ 0x7e57)
            }
            _ => (dataset.clone(), Dataset::new(Vec::new(), dataset.dim())?),
        };
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let layout = match config.hp.loss {
            Loss::Hinge => StateLayout::Dual,
            Loss::Logistic => StateLayout::Stateless,
        };
        let chunks = partition_into_chunks_with(
            train.samples(),
            config.chunk_capacity,
            config.seed,
            layout,
        )?;
        let roster = scenario.initial_roster();
        let workers: Vec<WorkerId> = match config.mode {
            ExecutionMode::UniTasks => roster.ids(),
            ExecutionMode::MicroTasks { tasks } => (0..tasks as u32).map(WorkerId).collect(),
        };
        let assignment = ChunkAssignment::round_robin(chunks.iter().map(|c| c.id), &workers);
        let table: ChunkTable = chunks.iter().map(|c| (c.id, c.len())).collect();
        let n_total = train.len();
        let units_per_sample = match config.hp.loss {
            Loss::Hinge => scenario.total_work / n_total as f64,
            Loss::Logistic => {
                scenario.total_work
                    / (REFERENCE_TASKS * config.hp.batch_size * config.hp.local_steps) as f64
            }
        };

        let mut transport = transport;
        let mut by_worker: BTreeMap<WorkerId, Vec<_>> =
            workers.iter().map(|&w| (w, Vec::new())).collect();
        for c in chunks {
            let owner = assignment.owner_of(c.id).expect("all chunks placed");
            by_worker.get_mut(&owner).expect("known worker").push(c);
        }
        for (&w, cs) in &mut by_worker {
            transport.spawn(w)?;
            transport.dispatch(w, Request::AddChunks(std::mem::take(cs)))?;
        }

        Ok(Trainer {
            rebalancer: Rebalancer::new(config.rebalance.clone().unwrap_or_default()),
            model: Model::zeros(dataset.dim()),
            config,
            transport,
            assignment,
            table,
            phase: OwnershipPhase::SchedulerOwned,
            phase_log: vec![OwnershipPhase::SchedulerOwned],
            n_total,
            units_per_sample,
            scenario,
            cursor: ScenarioCursor::default(),
            roster,
            clock: VirtualClock::default(),
            samples_seen: 0,
            eval_set: match layout {
                StateLayout::Dual => Vec::new(),
                StateLayout::Stateless if test.is_empty() => train.into_samples(),
                StateLayout::Stateless => test.into_samples(),
            },
            best_accuracy: f64::NEG_INFINITY,
            since_improvement: 0,
        })
    }

    pub fn in_process(
        config: TrainerConfig<F>,
        scenario: Scenario,
        dataset: &Dataset<F>,
    ) -> Result<Self> {
        Self::new(
            config,
            scenario,
            dataset,
            Box::new(InProcessTransport::new()),
        )
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn assignment(&self) -> &ChunkAssignment {
        &self.assignment
    }

    pub fn chunk_table(&self) -> &ChunkTable {
        &self.table
    }

    pub fn phase(&self) -> OwnershipPhase {
        self.phase
    }

    /// Every phase the scheduler has been in, in order.
    pub fn phase_log(&self) -> &[OwnershipPhase] {
        &self.phase_log
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock
    }

    pub fn training_size(&self) -> usize {
        self.n_total
    }

    pub fn epoch_progress(&self) -> f64 {
        self.samples_seen as f64 / self.n_total as f64
    }

    pub fn transport_mut(&mut self) -> &mut dyn Transport<F> {
        self.transport.as_mut()
    }

    fn set_phase(&mut self, phase: OwnershipPhase) {
        self.phase = phase;
        self.phase_log.push(phase);
    }

    /// Moves chunks (with their state) between workers.
    pub fn execute_moves(&mut self, moves: &[Move]) -> Result<()> {
        if moves.is_empty() {
            return Ok(());
        }
        let next = apply_moves(&self.assignment, moves, self.phase)?;
        let mut take: BTreeMap<WorkerId, Vec<_>> = BTreeMap::new();
        for m in moves {
            take.entry(m.from).or_default().push(m.chunk);
        }
        let mut give: BTreeMap<WorkerId, Vec<_>> = BTreeMap::new();
        for (from, ids) in take {
            let Reply::Chunks(chunks) = self.transport.dispatch(from, Request::TakeChunks(ids))?
            else {
                return Err(Error::Protocol("expected chunks".into()));
            };
            for c in chunks {
                let to = next.owner_of(c.id).expect("moved chunk has an owner");
                give.entry(to).or_default().push(c);
            }
        }
        for (to, chunks) in give {
            self.transport.dispatch(to, Request::AddChunks(chunks))?;
        }
        self.assignment = next;
        Ok(())
    }

    /// Fires due scenario events and runs the scaling policy, then the
    /// rebalancing policy.
    pub fn between_iterations(&mut self) -> Result<()> {
        self.phase
            .require(OwnershipPhase::SchedulerOwned, "running policies")?;
        let (roster, fired) =
            advance_scenario(&self.scenario, &mut self.cursor, &self.clock, &self.roster)?;
        if self.config.mode == ExecutionMode::UniTasks {
            for event in fired {
                match event {
                    ScenarioEvent::AddNodes(nodes) => {
                        let ids: Vec<WorkerId> = nodes.iter().map(|n| n.id).collect();
                        for &id in &ids {
                            self.transport.spawn(id)?;
                            self.assignment.add_worker(id);
                        }
                        let seed = solve_seed(
                            self.config.seed ^ 0x5ca1e,
                            self.model.iteration,
                            WorkerId(u32::MAX),
                        );
                        let plan = plan_scale_out(&ids, &self.assignment, &self.table, seed)?;
                        self.execute_moves(&plan)?;
                    }
                    ScenarioEvent::RemoveNodes(ids) => {
                        let plan = plan_scale_in(&ids, &self.assignment)?;
                        self.execute_moves(&plan)?;
                        for &id in &ids {
                            self.assignment.remove_worker(id)?;
                            self.transport.shutdown(id)?;
                            self.rebalancer.forget(id);
                        }
                    }
                }
            }
            if self.config.rebalance.is_some() {
                let plan = self.rebalancer.plan(&self.assignment, &self.table);
                self.execute_moves(&plan)?;
            }
        }
        self.roster = roster;
        Ok(())
    }

    fn worker_samples(&self) -> BTreeMap<WorkerId, (usize, usize)> {
        let mut out: BTreeMap<WorkerId, (usize, usize)> =
            self.assignment.workers().map(|w| (w, (0, 0))).collect();
        for (c, w) in self.assignment.iter() {
            let e = out.entry(w).or_default();
            e.0 += 1;
            e.1 += self.table[&c];
        }
        out
    }

    /// One synchronous iteration: broadcast, local solves, merge, apply.
    pub fn run_iteration(&mut self) -> Result<IterationRecord> {
        self.phase
            .require(OwnershipPhase::SchedulerOwned, "starting an iteration")?;
        let iteration = self.model.iteration;
        let holdings = self.worker_samples();
        let active: Vec<WorkerId> = holdings
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(w, _)| *w)
            .collect();
        let parallelism = active.len();
        if parallelism == 0 {
            return Err(Error::NoWork);
        }
        let fail = |e: Error| Error::IterationFailed {
            iteration,
            reason: e.to_string(),
        };

        self.transport
            .dispatch_all(
                active
                    .iter()
                    .map(|&w| (w, Request::SetModel(self.model.clone())))
                    .collect(),
            )
            .map_err(fail)?;

        let mut hp = self.config.hp.clone();
        let specs: Vec<(WorkerId, Request<F>)> = active
            .iter()
            .map(|&w| {
                let steps = match hp.loss {
                    Loss::Hinge => StepBudget::LocalSamples,
                    Loss::Logistic => {
                        StepBudget::Fixed(self.sgd_local_steps(holdings[&w].1, parallelism))
                    }
                };
                (w, steps)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|(w, steps)| {
                if hp.loss == Loss::Logistic {
                    hp.learning_rate = effective_lr(self.config.hp.learning_rate, parallelism);
                }
                let spec = IterationSpec {
                    iteration,
                    seed: solve_seed(self.config.seed, iteration, w),
                    n_total: self.n_total,
                    hp: hp.clone(),
                    steps,
                };
                (w, Request::StartIteration(spec))
            })
            .collect();

        self.set_phase(OwnershipPhase::TaskOwned);
        let replies = self.transport.dispatch_all(specs).map_err(fail)?;
        let updates: Vec<LocalUpdate<F>> = replies
            .into_iter()
            .map(|r| match r {
                Reply::IterationFinished(u) => Ok(u),
                other => Err(fail(Error::Protocol(format!("unexpected reply {other:?}")))),
            })
            .collect::<Result<_>>()?;
        let total: usize = updates.iter().map(|u| u.samples_processed).sum();
        let merged = merge_updates(&updates, total).map_err(fail)?;

        let commits = updates
            .iter()
            .map(|u| {
                let weight = match self.config.hp.loss {
                    Loss::Hinge => {
                        F::from_usize_lossy(u.samples_processed) / F::from_usize_lossy(total)
                    }
                    Loss::Logistic => F::one(),
                };
                (u.worker, Request::Commit { weight })
            })
            .collect();
        self.transport.dispatch_all(commits).map_err(fail)?;
        self.set_phase(OwnershipPhase::SchedulerOwned);

        self.model.apply_delta(&merged);
        self.samples_seen += total;

        let processed: BTreeMap<WorkerId, usize> = updates
            .iter()
            .map(|u| (u.worker, u.samples_processed))
            .collect();
        let mut workers = Vec::with_capacity(holdings.len());
        for (&w, &(chunks, samples)) in &holdings {
            let work = processed.get(&w).copied().unwrap_or(0) as f64 * self.units_per_sample;
            let runtime = match self.config.mode {
                ExecutionMode::UniTasks => {
                    let speed = self.roster.speed(w).ok_or(Error::UnknownNode(w))?;
                    work / speed
                }
                ExecutionMode::MicroTasks { .. } => work,
            };
            workers.push(WorkerStat {
                worker: w,
                runtime,
                chunks,
                samples,
            });
        }
        let iteration_time = match self.config.mode {
            ExecutionMode::UniTasks => workers.iter().map(|s| s.runtime).fold(0.0, f64::max),
            ExecutionMode::MicroTasks { .. } => {
                let work = total as f64 * self.units_per_sample;
                microtask_time_for_speeds(parallelism, &self.roster.speeds(), work)
            }
        };
        if self.config.mode == ExecutionMode::UniTasks {
            for s in &workers {
                if let Some(&n) = processed.get(&s.worker) {
                    self.rebalancer.observe(s.worker, s.runtime, n);
                }
            }
        }
        self.clock.advance(iteration_time);

        let metric = self.metric()?;
        Ok(IterationRecord {
            iteration,
            epoch_progress: self.epoch_progress(),
            metric,
            virtual_time: self.clock.now(),
            iteration_time,
            parallelism,
            nodes: self.roster.len(),
            workers,
        })
    }

    /// Local steps for one worker under local SGD. Uni-tasks scale each
    /// worker's quota with its share of the data so the global batch stays
    /// `K * L * H`; micro-tasks all run `H` steps.
    fn sgd_local_steps(&self, local_samples: usize, parallelism: usize) -> usize {
        let h = self.config.hp.local_steps;
        match self.config.mode {
            ExecutionMode::MicroTasks { .. } => h,
            ExecutionMode::UniTasks => {
                let share = local_samples as f64 / self.n_total as f64;
                ((h * parallelism) as f64 * share).round().max(1.0) as usize
            }
        }
    }

    /// Duality gap for CoCoA, held-out accuracy for local SGD.
    pub fn metric(&mut self) -> Result<f64> {
        match self.config.hp.loss {
            Loss::Hinge => Ok(self.gap_report()?.gap.to_f64_lossy()),
            Loss::Logistic => Ok(evaluate(&self.model, &self.eval_set, Loss::Logistic)?
                .1
                .to_f64_lossy()),
        }
    }

    pub fn gap_report(&mut self) -> Result<GapReport<F>> {
        let requests = self
            .assignment
            .workers()
            .map(|w| {
                (
                    w,
                    Request::GapPartials {
                        weights: self.model.weights.clone(),
                    },
                )
            })
            .collect();
        let mut partials = Vec::new();
        for reply in self.transport.dispatch_all(requests)? {
            match reply {
                Reply::Partials(p) => partials.extend(p),
                other => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
            }
        }
        Ok(GapReport::combine(
            partials,
            &self.model.weights,
            self.config.hp.lambda,
            self.n_total,
        ))
    }

    /// Collects every chunk back from the workers (scheduler phase only).
    pub fn gather_chunks(&mut self) -> Result<Vec<crate::data::DataChunk<F>>> {
        self.phase
            .require(OwnershipPhase::SchedulerOwned, "gathering chunks")?;
        let mut out = Vec::new();
        for (w, ids) in self.assignment.by_worker() {
            let Reply::Chunks(chunks) = self.transport.dispatch(w, Request::TakeChunks(ids))?
            else {
                return Err(Error::Protocol("expected chunks".into()));
            };
            self.transport
                .dispatch(w, Request::AddChunks(chunks.clone()))?;
            out.extend(chunks);
        }
        out.sort_by_key(|c| c.id);
        Ok(out)
    }

    fn converged(&mut self, record: &IterationRecord) -> bool {
        match self.config.convergence {
            ConvergenceTarget::DualityGap(t) => record.metric <= t,
            ConvergenceTarget::Accuracy(t) => record.metric >= t,
            ConvergenceTarget::Plateau(window) => {
                if record.metric > self.best_accuracy {
                    self.best_accuracy = record.metric;
                    self.since_improvement = 0;
                } else {
                    self.since_improvement += 1;
                }
                self.since_improvement >= window
            }
        }
    }

    /// Iterates until the convergence target is met or the epoch budget is
    /// spent.
    pub fn run(&mut self) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::new();
        while self.epoch_progress() < self.config.max_epochs {
            self.between_iterations()?;
            let record = self.run_iteration()?;
            let done = self.converged(&record);
            log::debug!(
                "iteration {} epoch {:.3} metric {:.3e} time {:.3}",
                record.iteration,
                record.epoch_progress,
                record.metric,
                record.virtual_time
            );
            records.push(record);
            if done {
                break;
            }
        }
        Ok(records)
    }
}

/// Runs a full training job on the in-process transport.
pub fn run_training<F: Real>(
    config: TrainerConfig<F>,
    scenario: Scenario,
    dataset: &Dataset<F>,
) -> Result<Vec<IterationRecord>> {
    Trainer::in_process(config, scenario, dataset)?.run()
}

/// Micro-task emulation on `nodes` reference nodes: `K` fixed partitions,
/// iteration time from the wave projection.
pub fn emulate_microtasks<F: Real>(
    config: TrainerConfig<F>,
    dataset: &Dataset<F>,
    nodes: u32,
) -> Result<Vec<IterationRecord>> {
    if !matches!(config.mode, ExecutionMode::MicroTasks { .. }) {
        return Err(Error::Config(
            "micro-task emulation needs a micro-task mode".into(),
        ));
    }
    run_training(config, Scenario::homogeneous(nodes), dataset)
}

/// First epoch at which the metric reached the target, if it did.
pub fn epochs_to_target(records: &[IterationRecord], target: ConvergenceTarget) -> Option<f64> {
    records
        .iter()
        .find(|r| match target {
            ConvergenceTarget::DualityGap(t) => r.metric <= t,
            ConvergenceTarget::Accuracy(t) => r.metric >= t,
            ConvergenceTarget::Plateau(_) => false,
        })
        .map(|r| r.epoch_progress)
}

/// Virtual time at which the metric first reached the target.
pub fn time_to_target(records: &[IterationRecord], target: ConvergenceTarget) -> Option<f64> {
    records
        .iter()
        .find(|r| match target {
            ConvergenceTarget::DualityGap(t) => r.metric <= t,
            ConvergenceTarget::Accuracy(t) => r.metric >= t,
            ConvergenceTarget::Plateau(_) => false,
        })
        .map(|r| r.virtual_time)
}
