use serde::{Deserialize, Serialize};

use super::{decode_bounded_action, decode_unbounded_action};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::plan::{PhaseBoxes, SignalPlan};
use crate::sim::{cycle_reward, observe, run_cycle, NetworkSpec, Observation, SimState};
use crate::Scalar;

/// One actor per intersection plus the decoding rule that turns their
/// outputs into a joint plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DecentralizedPolicy<T> {
    pub actors: Vec<Mlp<T>>,
    pub base_plan: SignalPlan,
    /// Outputs are differences within `±delta` of the base plan; otherwise
    /// they span each phase's full range.
    pub bounded: bool,
    pub delta: u32,
    pub sampling_len: u32,
    pub boxes: PhaseBoxes,
}

impl<T: Scalar> DecentralizedPolicy<T> {
    pub fn check(&self) -> Result<()> {
        if self.actors.len() != self.base_plan.num_intersections() || self.boxes.len() != self.actors.len() {
            return Err(Error::shape("one actor per intersection is required"));
        }
        for (j, a) in self.actors.iter().enumerate() {
            if a.output_len() != self.base_plan.intersection(j).len() {
                return Err(Error::shape(format!("actor {j} must emit one value per phase")));
            }
            a.check()?;
        }
        Ok(())
    }

    /// Output of the actor owning `obs`, computed from that observation
    /// alone.
    pub fn act_local(&self, obs: &Observation) -> Result<Vec<T>> {
        let actor = self
            .actors
            .get(obs.intersection)
            .ok_or(Error::UnknownIntersection(obs.intersection))?;
        let x: Vec<T> = obs.features().into_iter().map(T::of).collect();
        actor.forward(&x)
    }

    /// Joint plan from per-intersection decisions. Entry `j` of
    /// `observations` must belong to intersection `j` and is passed only to
    /// actor `j`.
    pub fn decide(&self, observations: &[Observation]) -> Result<SignalPlan> {
        if observations.len() != self.actors.len() {
            return Err(Error::shape("one observation per intersection is required"));
        }
        let mut outputs = Vec::with_capacity(observations.len());
        for (j, obs) in observations.iter().enumerate() {
            if obs.intersection != j {
                return Err(Error::shape(format!("observation {j} belongs to intersection {}", obs.intersection)));
            }
            outputs.push(self.act_local(obs)?);
        }
        let (_, plan) = if self.bounded {
            decode_bounded_action(&outputs, &self.base_plan, self.delta, &self.boxes, self.sampling_len)?
        } else {
            decode_unbounded_action(&outputs, &self.base_plan, &self.boxes, self.sampling_len)?
        };
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.check()?;
        Ok(p)
    }
}

/// Mean global cycle reward of the policy: `warmup` cycles of the base plan
/// from an empty network, then `measured` cycles in which every actor sees
/// only its own observation. `seed` drives the arrival process; with
/// `spec.seed` the result is directly comparable to
/// [`evaluate_plan`](crate::sim::evaluate_plan).
pub fn evaluate_policies<T: Scalar>(
    policy: &DecentralizedPolicy<T>,
    spec: &NetworkSpec,
    warmup: usize,
    measured: usize,
    seed: u64,
) -> Result<f64> {
    policy.check()?;
    if measured == 0 {
        return Err(Error::Config("at least one measured cycle is required".into()));
    }
    let base = &policy.base_plan;
    if base.shape() != spec.shape() {
        return Err(Error::shape("policy does not match the network"));
    }
    let mut state = SimState::with_seed(spec, seed)?;
    state.current_plan = Some(base.clone());
    for _ in 0..warmup {
        run_cycle(&mut state, base, spec)?;
    }
    let mut total = 0.0;
    for _ in 0..measured {
        let obs: Vec<Observation> = (0..spec.num_intersections())
            .map(|j| observe(&state, spec, j))
            .collect::<Result<_>>()?;
        let plan = policy.decide(&obs)?;
        total += cycle_reward(&run_cycle(&mut state, &plan, spec)?)?.global;
    }
    Ok(total / measured as f64)
}
