use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::NetworkSpec;
use crate::error::{Error, Result};
use crate::plan::SignalPlan;

/// Indices derived once from a [`NetworkSpec`].
#[derive(Debug)]
pub(crate) struct Topology {
    /// Outgoing movements per link, in movement id order.
    pub link_movements: Vec<Vec<usize>>,
    /// Turn shares aligned with `link_movements`.
    pub link_shares: Vec<Vec<f64>>,
    /// Slot of each movement inside its link's sub-queues.
    pub movement_slot: Vec<usize>,
    /// Owning intersection of each link's stop line.
    pub link_owner: Vec<usize>,
    /// Movements granted green, per intersection per phase.
    pub green: Vec<Vec<Vec<usize>>>,
    pub incoming: Vec<Vec<usize>>,
}

impl Topology {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let n_links = spec.links.len();
        let mut link_movements = vec![Vec::new(); n_links];
        let mut movement_slot = vec![0; spec.movements.len()];
        for m in &spec.movements {
            movement_slot[m.id] = link_movements[m.from_link].len();
            link_movements[m.from_link].push(m.id);
        }
        let link_shares = link_movements
            .iter()
            .enumerate()
            .map(|(l, ms)| {
                let tr = spec.turn_ratios.iter().find(|t| t.link == l).expect("validated");
                ms.iter()
                    .map(|m| tr.shares.iter().filter(|s| s.movement == *m).map(|s| s.share).sum())
                    .collect()
            })
            .collect();
        let link_owner = (0..n_links)
            .map(|l| spec.link_owner(l).expect("validated"))
            .collect();
        let green = spec
            .intersections
            .iter()
            .map(|s| s.phases.iter().map(|p| p.movements.clone()).collect())
            .collect();
        let incoming = (0..spec.num_intersections()).map(|j| spec.incoming_links(j)).collect();
        Ok(Topology { link_movements, link_shares, movement_slot, link_owner, green, incoming })
    }
}

/// Cumulative vehicle counters used by the conservation check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Vehicles produced by the demand process.
    pub generated: u64,
    /// Vehicles admitted onto an entry link.
    pub entered: u64,
    /// Vehicles that left through an exit movement.
    pub exited: u64,
}

/// Evolving simulator state.
#[derive(Clone, Debug)]
pub struct SimState {
    /// Stop-line queues per link, split by outgoing movement.
    pub(crate) queues: Vec<Vec<u64>>,
    /// Vehicles travelling on each link; slot 0 reaches the stop line at the
    /// end of the current step.
    pub(crate) in_transit: Vec<VecDeque<u64>>,
    /// Demand that could not enter a full entry link yet.
    pub(crate) backlog: Vec<u64>,
    pub(crate) arrival_acc: Vec<f64>,
    pub(crate) route_acc: Vec<Vec<f64>>,
    pub(crate) clock: u64,
    pub(crate) cycle: u64,
    pub(crate) current_plan: Option<SignalPlan>,
    pub(crate) counters: Counters,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) topo: Arc<Topology>,
}

impl SimState {
    /// Empty network at clock zero, generator seeded from the spec.
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        Self::with_seed(spec, spec.seed)
    }

    pub fn with_seed(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let topo = Topology::build(spec)?;
        Ok(SimState {
            queues: topo.link_movements.iter().map(|ms| vec![0; ms.len()]).collect(),
            in_transit: spec
                .links
                .iter()
                .map(|l| std::iter::repeat_n(0, l.travel_steps + 1).collect())
                .collect(),
            backlog: vec![0; spec.links.len()],
            arrival_acc: vec![0.0; spec.demand.len()],
            route_acc: topo.link_movements.iter().map(|ms| vec![0.0; ms.len()]).collect(),
            clock: 0,
            cycle: 0,
            current_plan: spec.initial_plan.clone(),
            counters: Counters::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            topo: Arc::new(topo),
        })
    }

    /// Same as [`new`](Self::new) but observations report `plan` until the
    /// first cycle runs.
    pub fn with_plan(spec: &NetworkSpec, plan: &SignalPlan) -> Result<Self> {
        let mut s = Self::new(spec)?;
        if plan.shape() != spec.shape() {
            return Err(Error::shape("plan does not match the network"));
        }
        s.current_plan = Some(plan.clone());
        Ok(s)
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Completed control cycles.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn current_plan(&self) -> Option<&SignalPlan> {
        self.current_plan.as_ref()
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Vehicles waiting at the stop line of `link`.
    pub fn queue(&self, link: usize) -> u64 {
        self.queues[link].iter().sum()
    }

    /// Stop-line queue plus vehicles held outside an entry link.
    pub fn waiting_load(&self, link: usize) -> u64 {
        self.queue(link) + self.backlog[link]
    }

    pub fn transit(&self, link: usize) -> u64 {
        self.in_transit[link].iter().sum()
    }

    pub fn occupancy(&self, link: usize) -> u64 {
        self.queue(link) + self.transit(link)
    }

    pub fn backlog(&self, link: usize) -> u64 {
        self.backlog[link]
    }

    pub fn num_links(&self) -> usize {
        self.queues.len()
    }

    /// Waiting load of every link.
    pub fn loads(&self) -> Vec<u64> {
        (0..self.num_links()).map(|l| self.waiting_load(l)).collect()
    }

    pub fn total_queued(&self) -> u64 {
        (0..self.num_links()).map(|l| self.queue(l)).sum()
    }

    pub fn total_transit(&self) -> u64 {
        (0..self.num_links()).map(|l| self.transit(l)).sum()
    }

    pub fn total_backlog(&self) -> u64 {
        self.backlog.iter().sum()
    }

    /// `entered = queued + in transit + exited` and
    /// `generated = entered + backlog`.
    pub fn is_conserved(&self) -> bool {
        let c = self.counters;
        c.entered == self.total_queued() + self.total_transit() + c.exited
            && c.generated == c.entered + self.total_backlog()
    }

    /// No link holds more vehicles than its capacity.
    pub fn within_capacity(&self, spec: &NetworkSpec) -> bool {
        spec.links.iter().all(|l| self.occupancy(l.id) <= l.capacity)
    }
}
