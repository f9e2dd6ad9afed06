use std::collections::BTreeMap;

use proptest::prelude::*;

use unitasks::cluster::{InProcessTransport, Reply, Request, Scenario, SocketTransport, Transport};
use unitasks::data::{DataChunk, Dataset, OwnershipPhase, WorkerId};
use unitasks::ingest::{generate_synthetic, SyntheticSpec};
use unitasks::solvers::{
    duality_gap, primal_from_dual, scd_local_solve, sgd_local_solve, solve_seed, HyperParams,
    LocalUpdate,
};
use unitasks::trainer::{
    emulate_microtasks, merge_updates, run_training, ConvergenceTarget, ExecutionMode,
    IterationRecord, Trainer, TrainerConfig,
};
use unitasks::{Error, Result};

fn dataset(n: usize, d: usize, noise: f64, seed: u64) -> Dataset<f64> {
    let mut spec = SyntheticSpec::new(n, d);
    spec.noise = noise;
    spec.seed = seed;
    generate_synthetic(&spec).unwrap()
}

fn cocoa(epochs: f64) -> TrainerConfig<f64> {
    let mut c = TrainerConfig::cocoa(0.01, ExecutionMode::UniTasks);
    c.chunk_capacity = 2048;
    c.max_epochs = epochs;
    c.convergence = ConvergenceTarget::DualityGap(1e-6);
    c.seed = 11;
    c
}

fn sgd(epochs: f64) -> TrainerConfig<f64> {
    let mut c = TrainerConfig::local_sgd(
        HyperParams::local_sgd(8, 2, 0.05, 0.9),
        ExecutionMode::UniTasks,
    );
    c.chunk_capacity = 2048;
    c.max_epochs = epochs;
    c.convergence = ConvergenceTarget::Accuracy(1.1);
    c
}

fn sample_ids(chunks: &[DataChunk<f64>]) -> Vec<u64> {
    let mut ids: Vec<u64> = chunks
        .iter()
        .flat_map(|c| c.samples().iter().map(|s| s.id))
        .collect();
    ids.sort_unstable();
    ids
}

#[test]
fn two_worker_merge_is_the_sample_weighted_average() {
    let ds = dataset(300, 6, 0.1, 3);
    let config = cocoa(1.0);
    let mut trainer = Trainer::in_process(config.clone(), Scenario::homogeneous(2), &ds).unwrap();
    let before = trainer.gather_chunks().unwrap();
    let owners = trainer.assignment().clone();
    let w0 = trainer.model().clone();

    let mut deltas = Vec::new();
    for w in [WorkerId(0), WorkerId(1)] {
        let mut mine: Vec<DataChunk<f64>> = before
            .iter()
            .filter(|c| owners.owner_of(c.id) == Some(w))
            .cloned()
            .collect();
        let local: usize = mine.iter().map(DataChunk::len).sum();
        let u = scd_local_solve(
            &mut mine,
            &w0,
            &config.hp,
            300,
            local,
            w,
            solve_seed(config.seed, 0, w),
        )
        .unwrap();
        deltas.push((local as f64, u.delta_weights));
    }
    let total = deltas[0].0 + deltas[1].0;
    assert_eq!(total, 300.0);

    trainer.run_iteration().unwrap();
    for i in 0..6 {
        let expected = deltas[0].0 / total * deltas[0].1[i] + deltas[1].0 / total * deltas[1].1[i];
        assert!((trainer.model().weights[i] - expected).abs() < 1e-15);
    }
}

#[test]
fn single_worker_sgd_step_applies_its_delta() {
    let ds = dataset(200, 5, 0.0, 1);
    let mut config = sgd(1.0);
    config.hp.local_steps = 1;
    config.test_fraction = 0.0;
    config.convergence = ConvergenceTarget::Plateau(100);
    let mut trainer = Trainer::in_process(config.clone(), Scenario::homogeneous(1), &ds).unwrap();
    let chunks = trainer.gather_chunks().unwrap();
    let w0 = trainer.model().clone();
    let u = sgd_local_solve(
        &chunks,
        &w0,
        &config.hp,
        WorkerId(0),
        solve_seed(config.seed, 0, WorkerId(0)),
    )
    .unwrap();
    let record = trainer.run_iteration().unwrap();
    assert_eq!(trainer.model().weights, u.delta_weights);
    assert!((0.0..=1.0).contains(&record.metric));
}

#[test]
fn runs_are_deterministic_per_seed() {
    let ds = dataset(400, 8, 0.05, 2);
    let a = run_training(cocoa(4.0), Scenario::homogeneous(4), &ds).unwrap();
    let b = run_training(cocoa(4.0), Scenario::homogeneous(4), &ds).unwrap();
    assert_eq!(a, b);
    let mut other = cocoa(4.0);
    other.seed = 12;
    let c = run_training(other, Scenario::homogeneous(4), &ds).unwrap();
    assert_ne!(a, c);
}

fn records_with(
    transport: Box<dyn Transport<f64>>,
    config: TrainerConfig<f64>,
    scenario: Scenario,
) -> (Vec<IterationRecord>, Vec<f64>) {
    let ds = dataset(500, 6, 0.05, 9);
    let mut t = Trainer::new(config, scenario, &ds, transport).unwrap();
    let records = t.run().unwrap();
    (records, t.model().weights.clone())
}

#[test]
fn socket_and_in_process_transports_agree() {
    let scenario = Scenario::scale_in(4, 2, 1, 2.0);
    let a = records_with(
        Box::new(InProcessTransport::new()),
        cocoa(8.0),
        scenario.clone(),
    );
    let b = records_with(Box::new(SocketTransport::new()), cocoa(8.0), scenario);
    assert_eq!(a, b);

    let scenario = Scenario::scale_out(1, 3, 1, 1.0);
    let a = records_with(
        Box::new(InProcessTransport::new()),
        sgd(3.0),
        scenario.clone(),
    );
    let b = records_with(Box::new(SocketTransport::new()), sgd(3.0), scenario);
    assert_eq!(a, b);
}

#[test]
fn microtask_trajectory_ignores_node_count() {
    let ds = dataset(600, 6, 0.05, 4);
    let mut config = cocoa(6.0);
    config.mode = ExecutionMode::MicroTasks { tasks: 8 };
    let runs: Vec<Vec<IterationRecord>> = [2, 4, 8]
        .into_iter()
        .map(|n| run_training(config.clone(), Scenario::homogeneous(n), &ds).unwrap())
        .collect();
    let metrics = |r: &[IterationRecord]| r.iter().map(|x| x.metric.to_bits()).collect::<Vec<_>>();
    assert_eq!(metrics(&runs[0]), metrics(&runs[1]));
    assert_eq!(metrics(&runs[1]), metrics(&runs[2]));
    // 8 tasks on 2, 4, 8 nodes need 4, 2, 1 waves of 2 units each.
    let times: Vec<f64> = runs.iter().map(|r| r[0].iteration_time).collect();
    assert_eq!(times, vec![8.0, 4.0, 2.0]);
}

#[test]
fn elastic_runs_conserve_samples_and_keep_duals_consistent() {
    let ds = dataset(800, 5, 0.05, 5);
    let mut all_ids: Vec<u64> = ds.samples().iter().map(|s| s.id).collect();
    all_ids.sort_unstable();
    for scenario in [
        Scenario::scale_in(6, 2, 2, 1.5),
        Scenario::scale_out(2, 6, 2, 1.5),
    ] {
        let last_count = scenario
            .node_count_sequence()
            .unwrap()
            .last()
            .copied()
            .unwrap();
        let mut config = cocoa(12.0);
        config.rebalance = Some(Default::default());
        let mut t = Trainer::in_process(config, scenario, &ds).unwrap();
        let records = t.run().unwrap();
        assert_eq!(records.last().unwrap().workers.len(), last_count);
        let chunks = t.gather_chunks().unwrap();
        assert_eq!(sample_ids(&chunks), all_ids);
        let w = primal_from_dual(&chunks, 5, 0.01, 800);
        for (a, b) in w.iter().zip(&t.model().weights) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn dual_objective_never_decreases() {
    let ds = dataset(400, 6, 0.1, 6);
    let mut t = Trainer::in_process(cocoa(10.0), Scenario::homogeneous(4), &ds).unwrap();
    let mut last = t.gap_report().unwrap();
    for _ in 0..10 {
        t.run_iteration().unwrap();
        let now = t.gap_report().unwrap();
        assert!(now.dual >= last.dual - 1e-12);
        assert!(now.gap >= -1e-12);
        last = now;
    }
}

#[test]
fn phases_alternate() {
    let ds = dataset(100, 3, 0.0, 7);
    let mut t = Trainer::in_process(cocoa(3.0), Scenario::homogeneous(2), &ds).unwrap();
    t.run().unwrap();
    let log = t.phase_log();
    assert_eq!(log[0], OwnershipPhase::SchedulerOwned);
    for pair in log.windows(2) {
        assert_ne!(pair[0], pair[1]);
    }
    assert_eq!(*log.last().unwrap(), OwnershipPhase::SchedulerOwned);
}

#[test]
fn zero_epoch_budget_runs_nothing() {
    let ds = dataset(50, 3, 0.0, 8);
    assert!(run_training(cocoa(0.0), Scenario::homogeneous(2), &ds)
        .unwrap()
        .is_empty());
}

#[test]
fn local_sgd_learns_separable_data() {
    let ds = dataset(2000, 10, 0.0, 10);
    let records = run_training(sgd(5.0), Scenario::homogeneous(4), &ds).unwrap();
    let last = records.last().unwrap();
    assert!(last.metric > 0.95, "accuracy {}", last.metric);
    assert!(records.iter().all(|r| r.parallelism == 4));
}

/// Forwards to an in-process transport but fails one worker's solve.
struct Faulty {
    inner: InProcessTransport<f64>,
    victim: WorkerId,
}

impl Transport<f64> for Faulty {
    fn spawn(&mut self, id: WorkerId) -> Result<()> {
        self.inner.spawn(id)
    }

    fn shutdown(&mut self, id: WorkerId) -> Result<()> {
        self.inner.shutdown(id)
    }

    fn dispatch(&mut self, id: WorkerId, request: Request<f64>) -> Result<Reply<f64>> {
        if id == self.victim && matches!(request, Request::StartIteration(_)) {
            self.inner.kill(id);
        }
        self.inner.dispatch(id, request)
    }

    fn workers(&self) -> Vec<WorkerId> {
        self.inner.workers()
    }
}

#[test]
fn worker_failure_aborts_the_iteration() {
    let ds = dataset(100, 3, 0.0, 1);
    let transport = Faulty {
        inner: InProcessTransport::new(),
        victim: WorkerId(1),
    };
    let mut t = Trainer::new(
        cocoa(2.0),
        Scenario::homogeneous(2),
        &ds,
        Box::new(transport),
    )
    .unwrap();
    let w0 = t.model().clone();
    assert!(matches!(
        t.run_iteration(),
        Err(Error::IterationFailed { iteration: 0, .. })
    ));
    assert_eq!(*t.model(), w0);
}

#[test]
fn scenario_node_counts_show_up_in_records() {
    let ds = dataset(600, 4, 0.05, 3);
    let scenario = Scenario::scale_in(8, 2, 2, 10.0);
    let expected = scenario.node_count_sequence().unwrap();
    let mut config = cocoa(60.0);
    config.convergence = ConvergenceTarget::DualityGap(0.0);
    let records = run_training(config, scenario, &ds).unwrap();
    let mut seen: Vec<usize> = records.iter().map(|r| r.workers.len()).collect();
    seen.dedup();
    assert_eq!(seen, expected);
    let by_nodes: BTreeMap<usize, usize> =
        records.iter().map(|r| (r.nodes, r.workers.len())).collect();
    assert!(by_nodes.iter().all(|(n, w)| n == w));
}

#[test]
fn recorded_gap_matches_the_post_iteration_state() {
    let ds = dataset(300, 4, 0.1, 2);
    let mut t = Trainer::in_process(cocoa(5.0), Scenario::homogeneous(3), &ds).unwrap();
    for _ in 0..3 {
        let record = t.run_iteration().unwrap();
        let chunks = t.gather_chunks().unwrap();
        let gap = duality_gap(t.model(), &chunks, 0.01, 300).unwrap();
        assert_eq!(record.metric, gap);
    }
}

#[test]
fn separable_two_dimensional_data_converges() {
    let ds = dataset(2000, 2, 0.0, 12);
    let mut config = cocoa(50.0);
    config.convergence = ConvergenceTarget::DualityGap(1e-3);
    let records = run_training(config, Scenario::homogeneous(4), &ds).unwrap();
    assert!(records.last().unwrap().metric <= 1e-3);
    assert!(records.last().unwrap().epoch_progress <= 50.0);
    for pair in records.windows(2) {
        assert!(pair[1].epoch_progress >= pair[0].epoch_progress);
    }
}

#[test]
fn emulated_microtasks_run_in_waves() {
    let ds = dataset(3000, 4, 0.05, 13);
    let mut config = cocoa(1.0);
    config.chunk_capacity = 1024;
    config.mode = ExecutionMode::MicroTasks { tasks: 16 };
    assert_eq!(
        emulate_microtasks(config.clone(), &ds, 16).unwrap()[0].iteration_time,
        1.0
    );
    config.mode = ExecutionMode::MicroTasks { tasks: 32 };
    let records = emulate_microtasks(config.clone(), &ds, 14).unwrap();
    assert_eq!(records[0].parallelism, 32);
    assert_eq!(records[0].iteration_time, 1.5);
    config.mode = ExecutionMode::UniTasks;
    assert!(emulate_microtasks(config, &ds, 4).is_err());
}

proptest! {
    #[test]
    fn merge_weights_sum_to_one(counts in prop::collection::vec(0usize..1000, 1..12), v in -1e3f64..1e3) {
        let total: usize = counts.iter().sum();
        prop_assume!(total > 0);
        let updates: Vec<LocalUpdate<f64>> = counts
            .iter()
            .enumerate()
            .map(|(k, &n)| LocalUpdate {
                worker: WorkerId(k as u32),
                iteration: 0,
                delta_weights: vec![v, 1.0],
                samples_processed: n,
                skipped: 0,
            })
            .collect();
        let merged = merge_updates(&updates, total).unwrap();
        prop_assert!((merged[1] - 1.0).abs() <= 1e-12);
        prop_assert!((merged[0] - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}
