//! Virtual cluster: nodes with speed factors, scripted elasticity events, a
//! virtual clock, worker tasks behind a message transport, and iteration-time
//! projections.

pub mod projection;
pub mod transport;
pub mod wire;
pub mod worker;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::WorkerId;
use crate::error::{Error, Result};

pub use projection::{
    brute_force_min_makespan, microtask_hetero_schedule, microtask_hetero_time,
    microtask_iteration_time, microtask_time_for_speeds, unitask_balanced_time, HeteroSchedule,
};
pub use transport::{InProcessTransport, SocketTransport, Transport};
pub use worker::{IterationSpec, Reply, Request, StepBudget, Worker};

/// Default total work: one full pass over the data on a reference node.
pub const DEFAULT_TOTAL_WORK: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: WorkerId,
    /// Work units per time unit; 1.0 is the reference node.
    pub speed: f64,
}

impl NodeSpec {
    pub fn new(id: u32, speed: f64) -> Self {
        NodeSpec {
            id: WorkerId(id),
            speed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "nodes", rename_all = "snake_case")]
pub enum ScenarioEvent {
    AddNodes(Vec<NodeSpec>),
    RemoveNodes(Vec<WorkerId>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub time: f64,
    #[serde(flatten)]
    pub event: ScenarioEvent,
}

/// Live nodes keyed by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Roster(BTreeMap<WorkerId, NodeSpec>);

impl Roster {
    pub fn new(nodes: impl IntoIterator<Item = NodeSpec>) -> Self {
        Roster(nodes.into_iter().map(|n| (n.id, n)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: WorkerId) -> bool {
        self.0.contains_key(&id)
    }

    pub fn speed(&self, id: WorkerId) -> Option<f64> {
        self.0.get(&id).map(|n| n.speed)
    }

    pub fn ids(&self) -> Vec<WorkerId> {
        self.0.keys().copied().collect()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.0.values().map(|n| n.speed).collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.0.values()
    }

    fn apply(&mut self, event: &ScenarioEvent) -> Result<()> {
        match event {
            ScenarioEvent::AddNodes(nodes) => {
                for n in nodes {
                    if self.0.insert(n.id, *n).is_some() {
                        return Err(Error::InvalidScenario(format!("node {} added twice", n.id)));
                    }
                }
            }
            ScenarioEvent::RemoveNodes(ids) => {
                for id in ids {
                    if self.0.remove(id).is_none() {
                        return Err(Error::UnknownNode(*id));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Initial nodes plus a time-ordered script of elasticity events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub initial_nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    #[serde(default = "default_total_work")]
    pub total_work: f64,
}

fn default_total_work() -> f64 {
    DEFAULT_TOTAL_WORK
}

impl Scenario {
    pub fn fixed(nodes: Vec<NodeSpec>) -> Self {
        Scenario {
            initial_nodes: nodes,
            events: Vec::new(),
            total_work: DEFAULT_TOTAL_WORK,
        }
    }

    /// `count` reference nodes, no events.
    pub fn homogeneous(count: u32) -> Self {
        Self::fixed((0..count).map(|i| NodeSpec::new(i, 1.0)).collect())
    }

    /// `n_fast` nodes of speed 1 followed by `n_slow` of `slow_speed`.
    pub fn two_speed(n_fast: u32, n_slow: u32, slow_speed: f64) -> Self {
        let nodes = (0..n_fast)
            .map(|i| NodeSpec::new(i, 1.0))
            .chain((n_fast..n_fast + n_slow).map(|i| NodeSpec::new(i, slow_speed)))
            .collect();
        Self::fixed(nodes)
    }

    /// Starts with `from` nodes and adds `step` every `interval` until `to`.
    pub fn scale_out(from: u32, to: u32, step: u32, interval: f64) -> Self {
        let mut s = Self::homogeneous(from);
        let mut next = from;
        let mut t = interval;
        while next < to {
            let upto = (next + step).min(to);
            s.events.push(TimedEvent {
                time: t,
                event: ScenarioEvent::AddNodes(
                    (next..upto).map(|i| NodeSpec::new(i, 1.0)).collect(),
                ),
            });
            next = upto;
            t += interval;
        }
        s
    }

    /// Starts with `from` nodes and removes `step` (highest ids first) every
    /// `interval` until `to` remain.
    pub fn scale_in(from: u32, to: u32, step: u32, interval: f64) -> Self {
        let mut s = Self::homogeneous(from);
        let mut live = from;
        let mut t = interval;
        while live > to {
            let down = live.saturating_sub(step).max(to);
            s.events.push(TimedEvent {
                time: t,
                event: ScenarioEvent::RemoveNodes((down..live).rev().map(WorkerId).collect()),
            });
            live = down;
            t += interval;
        }
        s
    }

    /// Checks ordering, liveness of removals, and that at least one node is
    /// always present.
    pub fn validate(&self) -> Result<()> {
        if !(self.total_work > 0.0) {
            return Err(Error::InvalidScenario("total work must be positive".into()));
        }
        let mut roster = Roster::default();
        roster.apply(&ScenarioEvent::AddNodes(self.initial_nodes.clone()))?;
        if roster.is_empty() {
            return Err(Error::InvalidScenario("no initial nodes".into()));
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.time > last) {
                return Err(Error::InvalidScenario(format!(
                    "event times must be strictly increasing (at {})",
                    e.time
                )));
            }
            last = e.time;
            roster.apply(&e.event)?;
            if roster.is_empty() {
                return Err(Error::InvalidScenario(format!(
                    "no nodes left at {}",
                    e.time
                )));
            }
        }
        if let Some(n) = self
            .initial_nodes
            .iter()
            .chain(self.events.iter().flat_map(|e| match &e.event {
                ScenarioEvent::AddNodes(n) => n.as_slice(),
                ScenarioEvent::RemoveNodes(_) => &[],
            }))
            .find(|n| !(n.speed > 0.0))
        {
            return Err(Error::InvalidScenario(format!(
                "node {} has non-positive speed",
                n.id
            )));
        }
        Ok(())
    }

    pub fn initial_roster(&self) -> Roster {
        Roster::new(self.initial_nodes.iter().copied())
    }

    /// Node counts after the start and after each event.
    pub fn node_count_sequence(&self) -> Result<Vec<usize>> {
        let mut roster = self.initial_roster();
        let mut out = vec![roster.len()];
        for e in &self.events {
            roster.apply(&e.event)?;
            out.push(roster.len());
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VirtualClock {
    now: f64,
}

impl VirtualClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn advance(&mut self, dt: f64) {
        assert!(dt >= 0.0, "virtual time cannot go backwards");
        self.now += dt;
    }
}

/// Position in a scenario's event list; each event fires once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScenarioCursor {
    next: usize,
}

impl ScenarioCursor {
    pub fn fired(&self) -> usize {
        self.next
    }
}

/// Fires every pending event with `time <= clock.now()`, in order, and
/// returns the updated roster along with the fired events. Removed nodes
/// still hold their chunks at this point; the caller evacuates them before
/// shutting the tasks down.
pub fn advance_scenario(
    scenario: &Scenario,
    cursor: &mut ScenarioCursor,
    clock: &VirtualClock,
    live: &Roster,
) -> Result<(Roster, Vec<ScenarioEvent>)> {
    let mut roster = live.clone();
    let mut fired = Vec::new();
    while let Some(e) = scenario.events.get(cursor.next) {
        if e.time > clock.now() {
            break;
        }
        roster.apply(&e.event)?;
        fired.push(e.event.clone());
        cursor.next += 1;
    }
    Ok((roster, fired))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_out_counts() {
        let s = Scenario::scale_out(2, 16, 2, 20.0);
        s.validate().unwrap();
        assert_eq!(
            s.node_count_sequence().unwrap(),
            vec![2, 4, 6, 8, 10, 12, 14, 16]
        );
        assert_eq!(s.events.last().unwrap().time, 140.0);
    }

    #[test]
    fn scale_in_mirrors_scale_out() {
        let s = Scenario::scale_in(16, 2, 2, 20.0);
        s.validate().unwrap();
        let mut down = s.node_count_sequence().unwrap();
        down.reverse();
        assert_eq!(
            down,
            Scenario::scale_out(2, 16, 2, 20.0)
                .node_count_sequence()
                .unwrap()
        );
    }

    #[test]
    fn events_fire_once_in_order() {
        let s = Scenario::scale_out(2, 8, 2, 20.0);
        let mut cursor = ScenarioCursor::default();
        let mut clock = VirtualClock::default();
        let mut roster = s.initial_roster();
        let mut counts = vec![roster.len()];
        for _ in 0..20 {
            clock.advance(7.5);
            let (next, fired) = advance_scenario(&s, &mut cursor, &clock, &roster).unwrap();
            if !fired.is_empty() {
                counts.push(next.len());
            }
            roster = next;
        }
        assert_eq!(counts, vec![2, 4, 6, 8]);
        assert_eq!(cursor.fired(), 3);
    }

    #[test]
    fn empty_script_is_a_no_op() {
        let s = Scenario::homogeneous(3);
        let mut cursor = ScenarioCursor::default();
        let mut clock = VirtualClock::default();
        clock.advance(1e9);
        let (r, fired) = advance_scenario(&s, &mut cursor, &clock, &s.initial_roster()).unwrap();
        assert!(fired.is_empty());
        assert_eq!(r, s.initial_roster());
    }

    #[test]
    fn unknown_removal() {
        let mut s = Scenario::homogeneous(2);
        s.events.push(TimedEvent {
            time: 1.0,
            event: ScenarioEvent::RemoveNodes(vec![WorkerId(9)]),
        });
        assert!(matches!(s.validate(), Err(Error::UnknownNode(WorkerId(9)))));
        let mut clock = VirtualClock::default();
        clock.advance(2.0);
        let res = advance_scenario(
            &s,
            &mut ScenarioCursor::default(),
            &clock,
            &s.initial_roster(),
        );
        assert!(matches!(res, Err(Error::UnknownNode(_))));
    }

    #[test]
    fn removing_everything_is_invalid() {
        let mut s = Scenario::homogeneous(1);
        s.events.push(TimedEvent {
            time: 1.0,
            event: ScenarioEvent::RemoveNodes(vec![WorkerId(0)]),
        });
        assert!(s.validate().is_err());
    }
}
