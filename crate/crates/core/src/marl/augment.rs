//! Extra training signal mined from within-cycle traces.

use serde::{Deserialize, Serialize};

use super::TransitionRecord;
use crate::error::{Error, Result};
use crate::sim::CycleTrace;

/// A transition inferred for a two-phase intersection by starting part-way
/// through its first phase: from the loads at `offset_steps`, running the
/// rest of the cycle (first phase shortened by the offset) ends in the
/// recorded end-of-cycle loads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedPair {
    pub intersection: usize,
    pub offset_steps: usize,
    pub start_loads: Vec<u64>,
    /// Shortened phase lengths of `intersection`, seconds.
    pub phase_lengths: Vec<u32>,
    /// Mean per-step global reward over the remaining steps.
    pub global_reward: f64,
    /// Mean per-step reward of `intersection` over the remaining steps.
    pub local_reward: f64,
    pub end_loads: Vec<u64>,
}

fn check_complete(trace: &CycleTrace) -> Result<()> {
    let expected = (trace.plan.cycle_length() / trace.sampling_len.max(1)) as usize;
    if trace.is_empty() || trace.len() < expected {
        return Err(Error::EmptyTrace);
    }
    Ok(())
}

/// Derived pairs of one cycle: for every two-phase intersection, one pair
/// per offset strictly inside its first phase.
pub fn augment_trace(trace: &CycleTrace) -> Result<Vec<DerivedPair>> {
    check_complete(trace)?;
    let len = trace.len();
    let m = trace.sampling_len.max(1);
    let mut out = vec![];
    for j in 0..trace.plan.num_intersections() {
        let lengths = trace.plan.intersection(j);
        if lengths.len() != 2 {
            continue;
        }
        let first = trace.phase_steps(j)[0];
        for k in 1..first {
            let rest = &trace.steps[k..];
            let steps = (len - k) as f64;
            out.push(DerivedPair {
                intersection: j,
                offset_steps: k,
                start_loads: trace.steps[k].loads.clone(),
                phase_lengths: vec![lengths[0] - k as u32 * m, lengths[1]],
                global_reward: -(rest.iter().map(|s| s.global_waiting).sum::<u64>() as f64) / steps,
                local_reward: -(rest.iter().map(|s| s.waiting[j]).sum::<u64>() as f64) / steps,
                end_loads: trace.end_loads.clone(),
            });
        }
    }
    Ok(out)
}

/// [`augment_trace`] on a record's cycle.
pub fn augment_two_phase(record: &TransitionRecord) -> Result<Vec<DerivedPair>> {
    augment_trace(&record.trace)
}

/// Per-phase training example for the truncated value function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedSample {
    /// Index of the source record.
    pub record: usize,
    pub intersection: usize,
    pub phase: usize,
    pub start_step: usize,
    /// Link loads when the phase starts.
    pub start_loads: Vec<u64>,
    /// Phase length in steps.
    pub steps: usize,
    /// Mean per-step global reward while the phase is active.
    pub target: f64,
}

/// One sample per phase of every intersection per record.
pub fn build_truncated_samples(records: &[TransitionRecord]) -> Result<Vec<TruncatedSample>> {
    let mut out = vec![];
    for (r, rec) in records.iter().enumerate() {
        let trace = &rec.trace;
        check_complete(trace)?;
        for j in 0..trace.plan.num_intersections() {
            let starts = trace.phase_starts(j);
            for (phase, (&start, steps)) in starts.iter().zip(trace.phase_steps(j)).enumerate() {
                let waiting: u64 = trace.steps[start..start + steps].iter().map(|s| s.global_waiting).sum();
                out.push(TruncatedSample {
                    record: r,
                    intersection: j,
                    phase,
                    start_step: start,
                    start_loads: trace.loads_at(start).to_vec(),
                    steps,
                    target: -(waiting as f64) / steps as f64,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::SignalPlan;
    use crate::sim::TraceStep;

    /// Two-phase single intersection, four steps per cycle.
    fn trace(first_steps: u32, waiting: &[u64]) -> CycleTrace {
        let plan = SignalPlan::new(vec![vec![first_steps, 4 - first_steps]]).unwrap();
        CycleTrace {
            cycle: 0,
            plan,
            sampling_len: 1,
            steps: waiting
                .iter()
                .enumerate()
                .map(|(k, &w)| TraceStep {
                    loads: vec![k as u64],
                    active: vec![usize::from(k as u32 >= first_steps)],
                    waiting: vec![w],
                    global_waiting: w,
                })
                .collect(),
            end_loads: vec![9],
        }
    }

    #[test]
    fn offsets_stay_inside_the_first_phase() {
        let pairs = augment_trace(&trace(3, &[1, 2, 3, 4])).unwrap();
        assert_eq!(pairs.iter().map(|p| p.offset_steps).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(pairs[0].phase_lengths, vec![2, 1]);
        assert_eq!(pairs[0].global_reward, -3.0);
        assert_eq!(pairs[1].start_loads, vec![2]);
        assert_eq!(pairs[1].end_loads, vec![9]);
        assert!(augment_trace(&trace(1, &[0; 4])).unwrap().is_empty());
    }

    #[test]
    fn truncated_targets_decompose_the_cycle() {
        let t = trace(3, &[5, 0, 7, 2]);
        let rec = TransitionRecord {
            episode: 0,
            step: 0,
            observations: vec![],
            delta: crate::plan::PlanDelta::zeros(&[2]),
            plan: t.plan.clone(),
            global_reward: -3.5,
            local_rewards: vec![-3.5],
            next_observations: vec![],
            trace: t,
        };
        let samples = build_truncated_samples(std::slice::from_ref(&rec)).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].target, -4.0);
        assert_eq!(samples[1].target, -2.0);
        let total: f64 = samples.iter().map(|s| s.target * s.steps as f64).sum();
        assert_eq!(total, -14.0);
    }

    #[test]
    fn incomplete_trace_is_rejected() {
        let mut t = trace(2, &[0, 0, 0, 0]);
        t.steps.pop();
        assert!(matches!(augment_trace(&t), Err(Error::EmptyTrace)));
    }
}
