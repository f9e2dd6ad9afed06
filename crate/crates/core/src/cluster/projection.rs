//! Iteration-time projections for micro-tasks and uni-tasks, plus an
//! exhaustive makespan oracle.
//!
//! Work is normalized so that processing the whole dataset once on a
//! reference node (speed 1) takes `total_work` time units.

use crate::error::{Error, Result};
use crate::scalar::Exact;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// `K` equal tasks on `N` equal nodes run in `ceil(K/N)` waves of
/// `total_work / K` each.
pub fn microtask_iteration_time<T: Exact>(tasks: usize, nodes: usize, total_work: T) -> T {
    assert!(
        tasks >= 1 && nodes >= 1,
        "need at least one task and one node"
    );
    total_work / T::from_count(tasks) * T::from_count(ceil_div(tasks, nodes))
}

/// Optimal per-node task counts on a two-speed cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroSchedule<T> {
    pub time: T,
    /// Tasks on each slow node.
    pub slow_tasks: usize,
    /// Tasks on each fast node.
    pub fast_tasks: usize,
}

/// Minimizes `max(i * slow_factor, j) * total_work / K` over task counts `i`
/// per slow node and `j` per fast node with `n_slow * i + n_fast * j >= K`.
/// Ties go to the smaller `i`.
pub fn microtask_hetero_schedule<T: Exact>(
    tasks: usize,
    n_fast: usize,
    n_slow: usize,
    slow_factor: T,
    total_work: T,
) -> HeteroSchedule<T> {
    assert!(tasks >= 1 && n_fast + n_slow >= 1, "need tasks and nodes");
    let unit = total_work / T::from_count(tasks);
    let max_i = if n_slow == 0 {
        0
    } else {
        ceil_div(tasks, n_slow)
    };
    let mut best: Option<HeteroSchedule<T>> = None;
    for i in 0..=max_i {
        let covered = n_slow * i;
        let j = if covered >= tasks {
            0
        } else if n_fast == 0 {
            continue;
        } else {
            ceil_div(tasks - covered, n_fast)
        };
        let load = T::max_of(T::from_count(i) * slow_factor.clone(), T::from_count(j));
        let time = load * unit.clone();
        if best.as_ref().is_none_or(|b| time < b.time) {
            best = Some(HeteroSchedule {
                time,
                slow_tasks: i,
                fast_tasks: j,
            });
        }
    }
    best.expect("some schedule is always feasible")
}

pub fn microtask_hetero_time<T: Exact>(
    tasks: usize,
    n_fast: usize,
    n_slow: usize,
    slow_factor: T,
    total_work: T,
) -> T {
    microtask_hetero_schedule(tasks, n_fast, n_slow, slow_factor, total_work).time
}

/// `K` equal tasks on nodes of arbitrary speed. Each task goes to the node
/// where it would finish first, which is optimal for identical tasks on
/// uniformly related machines.
pub fn microtask_time_for_speeds<T: Exact>(tasks: usize, speeds: &[T], total_work: T) -> T {
    assert!(tasks >= 1 && !speeds.is_empty(), "need tasks and nodes");
    let unit = total_work / T::from_count(tasks);
    let mut counts = vec![0usize; speeds.len()];
    let mut makespan = T::zero();
    for _ in 0..tasks {
        let (node, finish) = speeds
            .iter()
            .enumerate()
            .map(|(n, s)| (n, T::from_count(counts[n] + 1) * unit.clone() / s.clone()))
            .fold(None::<(usize, T)>, |best, cand| match best {
                Some(b) if b.1 <= cand.1 => Some(b),
                _ => Some(cand),
            })
            .expect("non-empty speeds");
        counts[node] += 1;
        makespan = T::max_of(makespan, finish);
    }
    makespan
}

/// Perfect proportional balancing: `total_work / sum(speeds)`.
pub fn unitask_balanced_time<T: Exact>(speeds: &[T], total_work: T) -> T {
    assert!(!speeds.is_empty(), "need at least one node");
    let total_speed = speeds.iter().cloned().fold(T::zero(), |a, b| a + b);
    total_work / total_speed
}

pub const ORACLE_MAX_TASKS: usize = 12;
pub const ORACLE_MAX_NODES: usize = 8;

/// Exact minimum over all task-to-node assignments of the largest per-node
/// finishing time `sum(work) / speed`.
///
/// Depth-first search over tasks in decreasing size. Nodes with equal speed
/// and equal current load are interchangeable, so only the first of them is
/// tried; branches that cannot beat the incumbent are cut.
pub fn brute_force_min_makespan<T: Exact>(task_works: &[T], speeds: &[T]) -> Result<T> {
    assert!(!speeds.is_empty(), "need at least one node");
    if task_works.len() > ORACLE_MAX_TASKS && speeds.len() > ORACLE_MAX_NODES {
        return Err(Error::TooLarge {
            tasks: task_works.len(),
            nodes: speeds.len(),
        });
    }
    if task_works.is_empty() {
        return Ok(T::zero());
    }
    let mut tasks = task_works.to_vec();
    tasks.sort_by(|a, b| b.partial_cmp(a).expect("comparable task works"));

    // Incumbent: the greedy earliest-finish schedule.
    let mut loads = vec![T::zero(); speeds.len()];
    for t in &tasks {
        let node = (0..speeds.len())
            .min_by(|&a, &b| {
                let fa = (loads[a].clone() + t.clone()) / speeds[a].clone();
                let fb = (loads[b].clone() + t.clone()) / speeds[b].clone();
                fa.partial_cmp(&fb).expect("comparable")
            })
            .expect("non-empty");
        loads[node] = loads[node].clone() + t.clone();
    }
    let mut best = makespan_of(&loads, speeds);

    let mut loads = vec![T::zero(); speeds.len()];
    search(&tasks, speeds, &mut loads, T::zero(), &mut best);
    Ok(best)
}

fn makespan_of<T: Exact>(loads: &[T], speeds: &[T]) -> T {
    loads
        .iter()
        .zip(speeds)
        .map(|(l, s)| l.clone() / s.clone())
        .fold(T::zero(), T::max_of)
}

fn search<T: Exact>(tasks: &[T], speeds: &[T], loads: &mut [T], current: T, best: &mut T) {
    let Some((task, rest)) = tasks.split_first() else {
        if current < *best {
            *best = current;
        }
        return;
    };
    for node in 0..speeds.len() {
        let symmetric = (0..node).any(|m| speeds[m] == speeds[node] && loads[m] == loads[node]);
        if symmetric {
            continue;
        }
        let finish = (loads[node].clone() + task.clone()) / speeds[node].clone();
        let next = T::max_of(current.clone(), finish);
        if next >= *best {
            continue;
        }
        let saved = loads[node].clone();
        loads[node] = saved.clone() + task.clone();
        search(rest, speeds, loads, next, best);
        loads[node] = saved;
    }
}
