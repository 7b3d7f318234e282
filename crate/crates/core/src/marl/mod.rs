//! Offline multi-agent actor-critic training from a batch of cycles.
//!
//! Every intersection has a deterministic actor that sees only its own
//! [`Observation`](crate::sim::Observation) and a critic that sees the joint
//! observation and joint action. Three optional components sit on top of the
//! plain algorithm:
//!
//! * bounded actions — actors emit a phase-length difference within `±δ` of
//!   a base plan instead of an absolute plan;
//! * batch augmentation — extra critic samples from two-phase intersections
//!   and a learned per-phase average reward that replaces the sampled
//!   immediate reward in the critic target;
//! * surrogate reward clipping — each agent optimizes a mix of the global
//!   reward and its own local reward clipped at a batch quantile.

mod augment;
mod batch;
mod policy;
mod trainer;

pub use augment::{augment_trace, augment_two_phase, build_truncated_samples, DerivedPair, TruncatedSample};
pub use batch::{collect_batch, BatchDataset, CollectConfig, Provenance, TransitionRecord};
pub use policy::{evaluate_policies, DecentralizedPolicy};
pub use trainer::{train_offline, HistoryRow, Trainer, TrainingHistory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{boxes_around, repair_plan, round_to_multiple, PhaseBoxes, PlanDelta, SignalPlan};
use crate::Scalar;

/// Which order statistic sets the clipping level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Quartile {
    Q2,
    #[default]
    Q3,
}

impl Quartile {
    pub fn fraction(self) -> f64 {
        match self {
            Quartile::Q2 => 0.5,
            Quartile::Q3 => 0.75,
        }
    }
}

/// Independent switches for the three components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub bounded_action: bool,
    pub batch_augmentation: bool,
    pub src: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation { bounded_action: true, batch_augmentation: true, src: true };
    pub const BASELINE: Ablation = Ablation { bounded_action: false, batch_augmentation: false, src: false };

    /// The six variants of an ablation study: the baseline, each component
    /// alone, augmentation with clipping, and the full method.
    pub fn variants() -> Vec<(&'static str, Ablation)> {
        let f = |b, a, s| Ablation { bounded_action: b, batch_augmentation: a, src: s };
        vec![
            ("baseline", f(false, false, false)),
            ("bounded", f(true, false, false)),
            ("ba", f(false, true, false)),
            ("src", f(false, false, true)),
            ("ba_src", f(false, true, true)),
            ("full", f(true, true, true)),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = vec![];
        if self.bounded_action {
            parts.push("bounded");
        }
        if self.batch_augmentation {
            parts.push("ba");
        }
        if self.src {
            parts.push("src");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaddpgConfig {
    /// Discount per cycle.
    pub gamma: f64,
    /// Target-network mixing rate.
    pub tau: f64,
    /// Action bound δ, seconds.
    pub delta: u32,
    /// Weight of the global reward in the shaped reward.
    pub alpha_src: f64,
    pub c_quartile: Quartile,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub truncated_lr: f64,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    /// Multiplier on the actors' initial output-layer weights. Small values
    /// start every actor close to zero output, i.e. close to the base plan
    /// under bounded actions.
    pub actor_output_scale: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Use two-phase derived pairs as extra critic samples when batch
    /// augmentation is on.
    pub derived_pairs: bool,
    /// Evaluate every this many iterations if an evaluator is supplied;
    /// 0 disables.
    pub eval_every: usize,
}

impl Default for MaddpgConfig {
    fn default() -> Self {
        MaddpgConfig {
            gamma: 0.95,
            tau: 0.01,
            delta: 2,
            alpha_src: 0.5,
            c_quartile: Quartile::Q3,
            batch_size: 64,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            truncated_lr: 1e-3,
            iterations: 2000,
            hidden: vec![64, 64],
            actor_output_scale: 1e-2,
            seed: 0,
            ablation: Ablation::FULL,
            derived_pairs: true,
            eval_every: 0,
        }
    }
}

impl MaddpgConfig {
    pub fn validate(&self, sampling_len: u32) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.alpha_src > 0.0 && self.alpha_src < 1.0) {
            return bad(format!("alpha_src {} outside (0, 1)", self.alpha_src));
        }
        if self.delta < sampling_len {
            return bad(format!("delta {}s is below the sampling length {sampling_len}s", self.delta));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch_size and iterations must be positive".into());
        }
        for lr in [self.actor_lr, self.critic_lr, self.truncated_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        if !(self.actor_output_scale >= 0.0 && self.actor_output_scale <= 1.0) {
            return bad(format!("actor_output_scale {} outside [0, 1]", self.actor_output_scale));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Mixes the global reward with the local reward clipped at `c`.
pub fn src_reward(global: f64, local: f64, alpha: f64, c: f64) -> f64 {
    alpha * global + (1.0 - alpha) * local.min(c)
}

/// Linear-interpolation quantile of unsorted data (`p` in `[0, 1]`).
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Per-intersection clipping levels: the chosen quartile of each
/// intersection's local reward over the batch.
pub fn estimate_clip_levels(records: &[TransitionRecord], q: Quartile) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if records.len() < 4 {
        return Err(Error::Config(format!("quartiles need at least 4 records, got {}", records.len())));
    }
    let n = records[0].local_rewards.len();
    (0..n)
        .map(|j| {
            let xs: Vec<f64> = records.iter().map(|r| r.local_rewards[j]).collect();
            quantile(&xs, q.fraction())
        })
        .collect()
}

/// Pre-repair phase differences: `round(output · δ)` to sampling-length
/// multiples, capped at the largest multiple not above `δ`.
pub fn bounded_proposal<T: Scalar>(outputs: &[Vec<T>], delta: u32, sampling_len: u32) -> PlanDelta {
    let m = sampling_len.max(1) as i64;
    let cap = delta as i64 / m * m;
    PlanDelta {
        deltas: outputs
            .iter()
            .map(|o| {
                o.iter()
                    .map(|&x| round_to_multiple(x.as_f64() * delta as f64, sampling_len).clamp(-cap, cap))
                    .collect()
            })
            .collect(),
    }
}

fn check_outputs<T>(outputs: &[Vec<T>], base: &SignalPlan) -> Result<()> {
    if outputs.len() != base.num_intersections()
        || outputs.iter().zip(base.lengths()).any(|(o, b)| o.len() != b.len())
    {
        return Err(Error::shape("one actor output per phase is required"));
    }
    Ok(())
}

/// Removes each intersection's net change from a proposal: subtracts the
/// mean and rounds back to sampling-length multiples so that every
/// intersection's differences sum to zero again. Rounding keeps the
/// entries closest to their centred values.
pub fn balance_proposal(proposal: &PlanDelta, sampling_len: u32) -> PlanDelta {
    let m = sampling_len.max(1) as f64;
    let deltas = proposal
        .deltas
        .iter()
        .map(|d| {
            let mean = d.iter().sum::<i64>() as f64 / d.len().max(1) as f64;
            let v: Vec<f64> = d.iter().map(|&x| (x as f64 - mean) / m).collect();
            let mut q: Vec<i64> = v.iter().map(|x| x.round() as i64).collect();
            let mut excess: i64 = q.iter().sum();
            while excess != 0 {
                let dir = excess.signum();
                // Entry whose rounding moved it furthest in the excess direction.
                let k = (0..q.len())
                    .max_by(|&a, &b| {
                        let ea = (q[a] as f64 - v[a]) * dir as f64;
                        let eb = (q[b] as f64 - v[b]) * dir as f64;
                        ea.total_cmp(&eb)
                    })
                    .expect("non-empty intersection");
                q[k] -= dir;
                excess -= dir;
            }
            q.into_iter().map(|x| x * sampling_len.max(1) as i64).collect()
        })
        .collect();
    PlanDelta { deltas }
}

/// Base plan plus a proposal, balanced to keep every intersection on the
/// base cycle and repaired into `window`.
pub(crate) fn bounded_plan(
    base: &SignalPlan,
    proposal: &PlanDelta,
    window: &PhaseBoxes,
    sampling_len: u32,
) -> Result<SignalPlan> {
    let balanced = balance_proposal(proposal, sampling_len);
    let raw: Vec<Vec<i64>> = base
        .lengths()
        .iter()
        .zip(&balanced.deltas)
        .map(|(b, d)| b.iter().zip(d).map(|(&t, x)| t as i64 + x).collect())
        .collect();
    repair_plan(&raw, window, sampling_len)
}

/// Maps actor outputs in (-1, 1) to a plan within `±δ` of `base`. The
/// proposal `round(output · δ)` is balanced so each intersection keeps the
/// base cycle, then repaired into the phase bounds intersected with the
/// `±δ` window. Each intersection's plan therefore depends only on its own
/// actor's outputs, and the returned delta never exceeds `δ` in magnitude.
pub fn decode_bounded_action<T: Scalar>(
    outputs: &[Vec<T>],
    base: &SignalPlan,
    delta: u32,
    boxes: &PhaseBoxes,
    sampling_len: u32,
) -> Result<(PlanDelta, SignalPlan)> {
    check_outputs(outputs, base)?;
    let proposal = bounded_proposal(outputs, delta, sampling_len);
    let window = boxes_around(boxes, base, delta as i64);
    let plan = bounded_plan(base, &proposal, &window, sampling_len)?;
    Ok((plan.delta_from(base)?, plan))
}

/// Maps actor outputs in (-1, 1) affinely onto each phase's full range,
/// ignoring any base plan.
pub fn decode_unbounded_action<T: Scalar>(
    outputs: &[Vec<T>],
    base: &SignalPlan,
    boxes: &PhaseBoxes,
    sampling_len: u32,
) -> Result<(PlanDelta, SignalPlan)> {
    check_outputs(outputs, base)?;
    let raw: Vec<Vec<i64>> = outputs
        .iter()
        .zip(boxes)
        .map(|(o, bs)| {
            o.iter()
                .zip(bs)
                .map(|(&x, &(lo, hi))| {
                    let u = (x.as_f64().clamp(-1.0, 1.0) + 1.0) / 2.0;
                    round_to_multiple(lo as f64 + u * (hi - lo) as f64, sampling_len)
                })
                .collect()
        })
        .collect();
    let plan = repair_plan(&raw, boxes, sampling_len)?;
    Ok((plan.delta_from(base)?, plan))
}

/// How plans are presented to critics: the inverse of the decoder, so that
/// an actor output maps to (approximately) the same critic input as the
/// plan it decodes to.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum ActionCoding {
    Bounded { base: Vec<f64>, delta: f64 },
    Unbounded { lo: Vec<f64>, hi: Vec<f64> },
}

impl ActionCoding {
    pub(crate) fn new(bounded: bool, base: &SignalPlan, boxes: &PhaseBoxes, delta: u32) -> Self {
        if bounded {
            ActionCoding::Bounded { base: base.to_params(), delta: delta as f64 }
        } else {
            let flat: Vec<(i64, i64)> = boxes.iter().flatten().copied().collect();
            ActionCoding::Unbounded {
                lo: flat.iter().map(|b| b.0 as f64).collect(),
                hi: flat.iter().map(|b| b.1 as f64).collect(),
            }
        }
    }

    /// Smooth stand-in for decoding one agent's outputs, in critic-feature
    /// units: the outputs themselves, centred under bounded actions to
    /// mirror the balancing step.
    pub(crate) fn relax<T: Scalar>(&self, outputs: &[T]) -> Vec<T> {
        match self {
            ActionCoding::Bounded { .. } => {
                let mean = outputs.iter().fold(T::zero(), |a, &b| a + b) / T::of(outputs.len() as f64);
                outputs.iter().map(|&o| o - mean).collect()
            }
            ActionCoding::Unbounded { .. } => outputs.to_vec(),
        }
    }

    /// Pulls a feature gradient back through [`relax`](Self::relax).
    pub(crate) fn relax_backward<T: Scalar>(&self, grad: &[T]) -> Vec<T> {
        // Centring is a symmetric projection, so it is its own transpose.
        self.relax(grad)
    }

    /// Critic features of a concrete plan (flattened lengths).
    pub(crate) fn encode(&self, lengths: &[f64]) -> Vec<f64> {
        match self {
            ActionCoding::Bounded { base, delta } => {
                lengths.iter().zip(base).map(|(t, b)| (t - b) / delta).collect()
            }
            ActionCoding::Unbounded { lo, hi } => lengths
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(t, (l, h))| if h > l { 2.0 * (t - l) / (h - l) - 1.0 } else { 0.0 })
                .collect(),
        }
    }
}
