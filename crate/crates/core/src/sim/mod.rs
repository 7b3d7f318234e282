//! Deterministic store-and-forward queue simulator.
//!
//! Each step lasts `sampling_len` seconds. Vehicles wait in per-movement
//! stop-line queues, discharge at the movement's saturation flow while its
//! phase is green (limited by free space downstream), travel for a fixed
//! number of steps, then join the next stop line. Waiting time is counted per
//! step as `vehicles queued at step start × sampling_len`, attributed to the
//! intersection owning the queue.

mod network;
mod state;

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

pub use network::{ArrivalMode, Demand, Link, Movement, NetworkSpec, Share, TurnRatios};
pub use state::{Counters, SimState};

use crate::error::{Error, Result};
use crate::plan::{validate_plan, SignalPlan};

/// Waiting accrued in one step, in vehicle-seconds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepWaiting {
    pub global: u64,
    pub per_intersection: Vec<u64>,
}

/// Advances the simulation by one sampling step with the given active phase
/// at every intersection.
pub fn step(state: &mut SimState, active: &[usize], spec: &NetworkSpec) -> Result<StepWaiting> {
    let topo = state.topo.clone();
    let n_int = topo.green.len();
    if active.len() != n_int {
        return Err(Error::shape(format!(
            "{} active phases for {n_int} intersections",
            active.len()
        )));
    }
    for (j, &p) in active.iter().enumerate() {
        if p >= topo.green[j].len() {
            return Err(Error::UnknownPhase { intersection: j, phase: p });
        }
    }
    let n_links = spec.links.len();
    let dt = spec.sampling_len as u64;

    let mut per_intersection = vec![0u64; n_int];
    for l in 0..n_links {
        per_intersection[topo.link_owner[l]] += state.waiting_load(l) * dt;
    }
    let global = per_intersection.iter().sum();

    // Space freed by departures only becomes available next step.
    let mut space: Vec<u64> = spec
        .links
        .iter()
        .map(|l| l.capacity.saturating_sub(state.occupancy(l.id)))
        .collect();

    let mut green = vec![false; spec.movements.len()];
    for (j, &p) in active.iter().enumerate() {
        for &m in &topo.green[j][p] {
            green[m] = true;
        }
    }
    for m in spec.movements.iter().filter(|m| green[m.id]) {
        let slot = topo.movement_slot[m.id];
        let queued = state.queues[m.from_link][slot];
        let mut n = queued.min(m.saturation_flow);
        match m.to_link {
            Some(to) => {
                n = n.min(space[to]);
                space[to] -= n;
                let d = spec.links[to].travel_steps;
                state.in_transit[to][d] += n;
            }
            None => state.counters.exited += n,
        }
        state.queues[m.from_link][slot] -= n;
    }

    for (k, d) in spec.demand.iter().enumerate() {
        let rate = d.rate_at(state.clock);
        let n = match spec.arrivals {
            ArrivalMode::Deterministic => {
                state.arrival_acc[k] += rate;
                let n = state.arrival_acc[k].floor();
                state.arrival_acc[k] -= n;
                n as u64
            }
            ArrivalMode::Poisson if rate > 0.0 => {
                Poisson::new(rate)
                    .map_err(|e| Error::InvalidNetwork(e.to_string()))?
                    .sample(&mut state.rng) as u64
            }
            ArrivalMode::Poisson => 0,
        };
        state.counters.generated += n;
        state.backlog[d.link] += n;
    }
    for l in 0..n_links {
        let admit = state.backlog[l].min(space[l]);
        if admit > 0 {
            space[l] -= admit;
            state.backlog[l] -= admit;
            let d = spec.links[l].travel_steps;
            state.in_transit[l][d] += admit;
            state.counters.entered += admit;
        }
    }

    for l in 0..n_links {
        let arriving = state.in_transit[l].pop_front().unwrap_or(0);
        state.in_transit[l].push_back(0);
        if arriving > 0 {
            route(state, &topo.link_shares[l], l, arriving, spec.arrivals);
        }
    }

    state.clock += 1;
    Ok(StepWaiting { global, per_intersection })
}

/// Splits arriving vehicles over the link's movements: smooth weighted
/// round-robin in deterministic mode, independent draws in Poisson mode.
fn route(state: &mut SimState, shares: &[f64], link: usize, arriving: u64, mode: ArrivalMode) {
    if shares.len() == 1 {
        state.queues[link][0] += arriving;
        return;
    }
    for _ in 0..arriving {
        let pick = match mode {
            ArrivalMode::Deterministic => {
                let acc = &mut state.route_acc[link];
                let mut best = 0;
                for k in 0..shares.len() {
                    acc[k] += shares[k];
                    if acc[k] > acc[best] {
                        best = k;
                    }
                }
                acc[best] -= 1.0;
                best
            }
            ArrivalMode::Poisson => {
                let u: f64 = state.rng.random();
                let mut cum = 0.0;
                let mut pick = shares.len() - 1;
                for (k, s) in shares.iter().enumerate() {
                    cum += s;
                    if u < cum {
                        pick = k;
                        break;
                    }
                }
                pick
            }
        };
        state.queues[link][pick] += 1;
    }
}

/// One sampling step inside a cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Waiting load (stop-line queue plus entry backlog) of every link at
    /// step start.
    pub loads: Vec<u64>,
    /// Active phase per intersection.
    pub active: Vec<usize>,
    /// Waiting per intersection, vehicle-seconds.
    pub waiting: Vec<u64>,
    pub global_waiting: u64,
}

/// Step-by-step record of one control cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub cycle: u64,
    pub plan: SignalPlan,
    pub sampling_len: u32,
    pub steps: Vec<TraceStep>,
    /// Link loads after the last step.
    pub end_loads: Vec<u64>,
}

impl CycleTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of per-step global waiting.
    pub fn total_waiting(&self) -> u64 {
        self.steps.iter().map(|s| s.global_waiting).sum()
    }

    pub fn waiting_of(&self, intersection: usize) -> u64 {
        self.steps.iter().map(|s| s.waiting[intersection]).sum()
    }

    /// Length of every phase of `intersection`, in steps.
    pub fn phase_steps(&self, intersection: usize) -> Vec<usize> {
        let m = self.sampling_len.max(1);
        self.plan.intersection(intersection).iter().map(|&t| (t / m) as usize).collect()
    }

    /// First step of every phase of `intersection`.
    pub fn phase_starts(&self, intersection: usize) -> Vec<usize> {
        let mut at = 0;
        self.phase_steps(intersection)
            .into_iter()
            .map(|n| {
                let s = at;
                at += n;
                s
            })
            .collect()
    }

    /// Loads at step `k`, where `k == len()` means the end of the cycle.
    pub fn loads_at(&self, k: usize) -> &[u64] {
        if k < self.steps.len() {
            &self.steps[k].loads
        } else {
            &self.end_loads
        }
    }
}

/// Runs one full cycle of `plan`, activating each phase for its length.
pub fn run_cycle(state: &mut SimState, plan: &SignalPlan, spec: &NetworkSpec) -> Result<CycleTrace> {
    let report = validate_plan(plan, &spec.intersections, spec.sampling_len)?;
    if !report.is_ok() {
        return Err(Error::Config(format!("invalid plan: {report}")));
    }
    let m = spec.sampling_len;
    let n_steps = (plan.cycle_length() / m) as usize;
    let bounds: Vec<Vec<usize>> = (0..plan.num_intersections())
        .map(|j| {
            let mut acc = 0;
            plan.intersection(j)
                .iter()
                .map(|&t| {
                    acc += (t / m) as usize;
                    acc
                })
                .collect()
        })
        .collect();
    let mut steps = Vec::with_capacity(n_steps);
    let mut active = vec![0usize; plan.num_intersections()];
    for s in 0..n_steps {
        for (j, ends) in bounds.iter().enumerate() {
            while s >= ends[active[j]] {
                active[j] += 1;
            }
        }
        let loads = state.loads();
        let w = step(state, &active, spec)?;
        steps.push(TraceStep {
            loads,
            active: active.clone(),
            waiting: w.per_intersection,
            global_waiting: w.global,
        });
    }
    let trace = CycleTrace {
        cycle: state.cycle,
        plan: plan.clone(),
        sampling_len: m,
        steps,
        end_loads: state.loads(),
    };
    state.cycle += 1;
    state.current_plan = Some(plan.clone());
    Ok(trace)
}

/// Negative average per-step waiting over a cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReward {
    pub global: f64,
    pub local: Vec<f64>,
}

pub fn cycle_reward(trace: &CycleTrace) -> Result<CycleReward> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let len = trace.len() as f64;
    let n_int = trace.steps[0].waiting.len();
    Ok(CycleReward {
        global: -(trace.total_waiting() as f64) / len,
        local: (0..n_int).map(|j| -(trace.waiting_of(j) as f64) / len).collect(),
    })
}

/// Fitness of a fixed-time plan: mean global cycle reward over `measured`
/// cycles after `warmup` cycles, starting from an empty network.
pub fn evaluate_plan(
    plan: &SignalPlan,
    spec: &NetworkSpec,
    warmup: usize,
    measured: usize,
) -> Result<f64> {
    if measured == 0 {
        return Err(Error::Config("at least one measured cycle is required".into()));
    }
    let mut state = SimState::with_plan(spec, plan)?;
    for _ in 0..warmup {
        run_cycle(&mut state, plan, spec)?;
    }
    let mut total = 0.0;
    for _ in 0..measured {
        let trace = run_cycle(&mut state, plan, spec)?;
        total += cycle_reward(&trace)?.global;
    }
    Ok(total / measured as f64)
}

/// What one intersection's controller can see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub intersection: usize,
    /// Incoming links, ascending.
    pub links: Vec<usize>,
    /// Waiting load per incoming link.
    pub queues: Vec<u64>,
    pub capacities: Vec<u64>,
    /// Phase lengths in force during the last cycle, seconds.
    pub phase_lengths: Vec<u32>,
    pub cycle: u64,
}

/// Seconds used to scale phase lengths into features.
const PHASE_SCALE: f64 = 60.0;

impl Observation {
    /// Builds the observation of `intersection` from raw link loads.
    pub fn from_loads(
        spec: &NetworkSpec,
        intersection: usize,
        loads: &[u64],
        plan: Option<&SignalPlan>,
        cycle: u64,
    ) -> Result<Self> {
        let spec_i = spec
            .intersections
            .get(intersection)
            .ok_or(Error::UnknownIntersection(intersection))?;
        let links = spec.incoming_links(intersection);
        Ok(Observation {
            intersection,
            queues: links.iter().map(|&l| loads[l]).collect(),
            capacities: links.iter().map(|&l| spec.links[l].capacity).collect(),
            links,
            phase_lengths: match plan {
                Some(p) => p.intersection(intersection).to_vec(),
                None => vec![0; spec_i.phases.len()],
            },
            cycle,
        })
    }

    /// Loads relative to capacity followed by scaled phase lengths. The
    /// length is fixed per intersection.
    pub fn features(&self) -> Vec<f64> {
        self.queues
            .iter()
            .zip(&self.capacities)
            .map(|(&q, &c)| q as f64 / c as f64)
            .chain(self.phase_lengths.iter().map(|&t| t as f64 / PHASE_SCALE))
            .collect()
    }

    pub fn feature_len(&self) -> usize {
        self.queues.len() + self.phase_lengths.len()
    }

    /// Same intersection and phase lengths, queues read from `loads` (one
    /// entry per network link, e.g. a trace step).
    pub fn with_loads(&self, loads: &[u64]) -> Result<Observation> {
        let queues = self
            .links
            .iter()
            .map(|&l| loads.get(l).copied().ok_or_else(|| Error::shape(format!("no load for link {l}"))))
            .collect::<Result<_>>()?;
        Ok(Observation { queues, ..self.clone() })
    }
}

/// Local observation of `intersection` in the current state.
pub fn observe(state: &SimState, spec: &NetworkSpec, intersection: usize) -> Result<Observation> {
    let links = state
        .topo
        .incoming
        .get(intersection)
        .ok_or(Error::UnknownIntersection(intersection))?;
    let n_phases = spec.intersections[intersection].phases.len();
    Ok(Observation {
        intersection,
        queues: links.iter().map(|&l| state.waiting_load(l)).collect(),
        capacities: links.iter().map(|&l| spec.links[l].capacity).collect(),
        links: links.clone(),
        phase_lengths: state
            .current_plan
            .as_ref()
            .map(|p| p.intersection(intersection).to_vec())
            .unwrap_or_else(|| vec![0; n_phases]),
        cycle: state.cycle,
    })
}

#[derive(Serialize)]
struct TraceRow {
    cycle: u64,
    step: usize,
    intersection: usize,
    active_phase: usize,
    queued: u64,
    waiting: u64,
}

/// Writes traces as CSV with one row per step per intersection.
pub fn write_trace_csv<W: Write>(traces: &[CycleTrace], spec: &NetworkSpec, out: W) -> Result<()> {
    let incoming: Vec<Vec<usize>> = (0..spec.num_intersections()).map(|j| spec.incoming_links(j)).collect();
    let mut w = csv::Writer::from_writer(out);
    for t in traces {
        for (k, s) in t.steps.iter().enumerate() {
            for (j, links) in incoming.iter().enumerate() {
                w.serialize(TraceRow {
                    cycle: t.cycle,
                    step: k,
                    intersection: j,
                    active_phase: s.active[j],
                    queued: links.iter().map(|&l| s.loads[l]).sum(),
                    waiting: s.waiting[j],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
