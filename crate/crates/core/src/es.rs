//! Natural evolution strategies over fixed-time plans.
//!
//! The search distribution is an isotropic Gaussian around a real-valued
//! mean `θ` (one entry per phase). Each generation rounds `θ` to the nearest
//! valid plan `P`, draws constrained perturbations of `P` that keep every
//! intersection on a common cycle, evaluates antithetic pairs in the
//! simulator, and moves `θ` along the rank-weighted sum of the perturbations
//! that were actually applied (after clipping and repair).

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{
    apply_delta_within, phase_boxes, plan_from_params, repair_params, repair_plan, round_to_multiple,
    shape_of, IntersectionSpec, PhaseBoxes, PlanDelta, SignalPlan,
};
use crate::sim::{evaluate_plan, NetworkSpec};
use crate::Scalar;

/// How perturbations are spread across intersections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationScheme {
    /// The intersection with the fewest phases sets the cycle change; the
    /// others absorb it in their last phase.
    #[default]
    LeastPhases,
    /// A random anchor intersection; per-phase scales shrink with the number
    /// of phases so every intersection's total change has variance near σ².
    ConditionedVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsConfig {
    /// Perturbation scale σ, seconds.
    pub sigma: f64,
    /// Step size α.
    pub learning_rate: f64,
    pub pairs_per_generation: usize,
    pub generations: usize,
    pub scheme: PerturbationScheme,
    pub seed: u64,
    /// Replace raw fitness by centered ranks in the update.
    pub rank_shaping: bool,
    /// Cycles simulated before fitness is measured.
    pub warmup_cycles: usize,
    /// Cycles averaged into the fitness; `None` uses the network horizon.
    pub measured_cycles: Option<usize>,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            sigma: 2.0,
            learning_rate: 1.0,
            pairs_per_generation: 10,
            generations: 30,
            scheme: PerturbationScheme::LeastPhases,
            seed: 0,
            rank_shaping: true,
            warmup_cycles: 2,
            measured_cycles: None,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.pairs_per_generation == 0 {
            return bad("pairs_per_generation must be at least 1");
        }
        if self.generations == 0 {
            return bad("generations must be at least 1");
        }
        if self.measured_cycles == Some(0) {
            return bad("measured_cycles must be at least 1");
        }
        Ok(())
    }

    pub fn measured(&self, spec: &NetworkSpec) -> usize {
        self.measured_cycles.unwrap_or(spec.horizon.max(1))
    }

    /// Fitness queries a full run performs.
    pub fn total_queries(&self) -> usize {
        2 * self.pairs_per_generation * self.generations
    }
}

/// Continuous perturbation before rounding and repair. The last phase of
/// every non-anchor intersection is already balanced to the anchor's sum.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPerturbation {
    pub anchor: usize,
    pub values: Vec<Vec<f64>>,
}

impl RawPerturbation {
    pub fn sums(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.iter().sum()).collect()
    }
}

/// Intersection with the fewest phases, lowest index on ties.
pub fn least_phases_anchor(shape: &[usize]) -> usize {
    let mut best = 0;
    for (j, &n) in shape.iter().enumerate() {
        if n < shape[best] {
            best = j;
        }
    }
    best
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite non-negative standard deviation")
}

fn draw_raw<R: rand::Rng + ?Sized>(
    shape: &[usize],
    anchor: usize,
    anchor_sd: f64,
    other_sd: impl Fn(usize) -> f64,
    rng: &mut R,
) -> RawPerturbation {
    let a_dist = normal(anchor_sd);
    let anchor_values: Vec<f64> = (0..shape[anchor]).map(|_| a_dist.sample(rng)).collect();
    let total: f64 = anchor_values.iter().sum();
    let mut values = Vec::with_capacity(shape.len());
    for (j, &n) in shape.iter().enumerate() {
        if j == anchor {
            values.push(anchor_values.clone());
            continue;
        }
        let dist = normal(other_sd(n));
        let mut v: Vec<f64> = (0..n - 1).map(|_| dist.sample(rng)).collect();
        let partial: f64 = v.iter().sum();
        v.push(total - partial);
        values.push(v);
    }
    RawPerturbation { anchor, values }
}

/// Continuous draw of the least-phases scheme.
pub fn draw_least_phases<R: rand::Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> RawPerturbation {
    let anchor = least_phases_anchor(shape);
    draw_raw(shape, anchor, sigma, |_| sigma, rng)
}

/// Continuous draw of the conditioned-variance scheme: anchor phases with
/// standard deviation σ/√n_i, other free phases with σ/n_k.
pub fn draw_conditioned_variance<R: rand::Rng + ?Sized>(
    shape: &[usize],
    sigma: f64,
    rng: &mut R,
) -> RawPerturbation {
    let ids: Vec<usize> = (0..shape.len()).collect();
    let anchor = *ids.choose(rng).expect("at least one intersection");
    let n_i = shape[anchor] as f64;
    draw_raw(shape, anchor, sigma / n_i.sqrt(), |n| sigma / n as f64, rng)
}

/// Turns a continuous draw into an integer delta around `plan`: anchor
/// phases are rounded and clipped, other intersections' free phases are
/// rounded and clipped, their last phase balances to the anchor's total,
/// and the result is repaired into a valid plan.
pub fn realize(raw: &RawPerturbation, plan: &SignalPlan, boxes: &PhaseBoxes, sampling_len: u32) -> Result<PlanDelta> {
    if raw.values.len() != plan.num_intersections()
        || raw.values.iter().zip(plan.lengths()).any(|(v, t)| v.len() != t.len())
    {
        return Err(Error::shape("perturbation does not match the plan"));
    }
    let clip = |j: usize, i: usize, x: f64| -> i64 {
        let t = plan.intersection(j)[i] as f64;
        let (lo, hi) = boxes[j][i];
        round_to_multiple(t + x, sampling_len).clamp(lo, hi) - t as i64
    };
    let anchor: Vec<i64> = (0..raw.values[raw.anchor].len())
        .map(|i| clip(raw.anchor, i, raw.values[raw.anchor][i]))
        .collect();
    let total: i64 = anchor.iter().sum();
    let mut moved: Vec<Vec<i64>> = Vec::with_capacity(raw.values.len());
    for (j, v) in raw.values.iter().enumerate() {
        let base = plan.intersection(j);
        let d: Vec<i64> = if j == raw.anchor {
            anchor.clone()
        } else {
            let n = v.len();
            let mut d: Vec<i64> = (0..n - 1).map(|i| clip(j, i, v[i])).collect();
            let partial: i64 = d.iter().sum();
            d.push(total - partial);
            d
        };
        moved.push(base.iter().zip(&d).map(|(&t, x)| t as i64 + x).collect());
    }
    repair_plan(&moved, boxes, sampling_len)?.delta_from(plan)
}

pub fn sample_delta<R: rand::Rng + ?Sized>(
    scheme: PerturbationScheme,
    plan: &SignalPlan,
    boxes: &PhaseBoxes,
    sampling_len: u32,
    sigma: f64,
    rng: &mut R,
) -> Result<PlanDelta> {
    let shape = plan.shape();
    let raw = match scheme {
        PerturbationScheme::LeastPhases => draw_least_phases(&shape, sigma, rng),
        PerturbationScheme::ConditionedVariance => draw_conditioned_variance(&shape, sigma, rng),
    };
    realize(&raw, plan, boxes, sampling_len)
}

pub fn sample_delta_least_phases<R: rand::Rng + ?Sized>(
    plan: &SignalPlan,
    specs: &[IntersectionSpec],
    sampling_len: u32,
    sigma: f64,
    rng: &mut R,
) -> Result<PlanDelta> {
    let boxes = boxes_for(plan, specs, sampling_len)?;
    sample_delta(PerturbationScheme::LeastPhases, plan, &boxes, sampling_len, sigma, rng)
}

pub fn sample_delta_conditioned_variance<R: rand::Rng + ?Sized>(
    plan: &SignalPlan,
    specs: &[IntersectionSpec],
    sampling_len: u32,
    sigma: f64,
    rng: &mut R,
) -> Result<PlanDelta> {
    let boxes = boxes_for(plan, specs, sampling_len)?;
    sample_delta(PerturbationScheme::ConditionedVariance, plan, &boxes, sampling_len, sigma, rng)
}

fn boxes_for(plan: &SignalPlan, specs: &[IntersectionSpec], sampling_len: u32) -> Result<PhaseBoxes> {
    if plan.shape() != shape_of(specs) {
        return Err(Error::shape("plan does not match the intersections"));
    }
    phase_boxes(specs, sampling_len)
}

/// `plan + delta` and `plan - delta`, each clipped and repaired. When a
/// bound blocks one side the two plans are no longer mirror images.
pub fn antithetic_pair(
    delta: &PlanDelta,
    plan: &SignalPlan,
    specs: &[IntersectionSpec],
    sampling_len: u32,
) -> Result<(SignalPlan, SignalPlan)> {
    let boxes = boxes_for(plan, specs, sampling_len)?;
    antithetic_pair_within(delta, plan, &boxes, sampling_len)
}

pub fn antithetic_pair_within(
    delta: &PlanDelta,
    plan: &SignalPlan,
    boxes: &PhaseBoxes,
    sampling_len: u32,
) -> Result<(SignalPlan, SignalPlan)> {
    Ok((
        apply_delta_within(plan, delta, boxes, sampling_len)?,
        apply_delta_within(plan, &delta.negated(), boxes, sampling_len)?,
    ))
}

/// Centered ranks: the k-th smallest of m fitnesses (k from 0) gets
/// `k/(m-1) - 1/2`; tied values share the mean of their ranks.
pub fn rank_shape<T: Scalar>(fitness: &[T]) -> Result<Vec<T>> {
    let m = fitness.len();
    if m < 2 {
        return Err(Error::Config(format!("rank shaping needs at least 2 fitnesses, got {m}")));
    }
    if fitness.iter().any(|f| f.is_nan()) {
        return Err(Error::Config("fitness is NaN".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| fitness[a].partial_cmp(&fitness[b]).expect("no NaN"));
    let mut out = vec![T::zero(); m];
    let denom = (m - 1) as f64;
    let mut start = 0;
    while start < m {
        let mut end = start;
        while end + 1 < m && fitness[order[end + 1]] == fitness[order[start]] {
            end += 1;
        }
        let mean_rank = (start + end) as f64 / 2.0;
        for &k in &order[start..=end] {
            out[k] = T::of(mean_rank / denom - 0.5);
        }
        start = end + 1;
    }
    Ok(out)
}

/// `θ + α/(nσ) Σ_k u_k ε_k`, without rounding or repair.
pub fn es_update<T: Scalar>(theta: &[T], deltas: &[Vec<T>], utilities: &[T], alpha: T, sigma: T, n: usize) -> Result<Vec<T>> {
    if deltas.len() != utilities.len() {
        return Err(Error::shape(format!("{} deltas but {} utilities", deltas.len(), utilities.len())));
    }
    if deltas.iter().any(|d| d.len() != theta.len()) {
        return Err(Error::shape("delta length differs from parameter length"));
    }
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let scale = alpha / (T::of(n as f64) * sigma);
    let mut out = theta.to_vec();
    for (d, &u) in deltas.iter().zip(utilities) {
        for (o, &e) in out.iter_mut().zip(d) {
            *o = *o + scale * u * e;
        }
    }
    Ok(out)
}

/// Progress after one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Best fitness among this generation's evaluated plans.
    pub best_fitness: f64,
    pub mean_fitness: f64,
    /// Plan nearest to the search mean after the update.
    pub plan: SignalPlan,
    pub queries: usize,
}

impl GenerationRecord {
    pub fn cycle_length(&self) -> u32 {
        self.plan.cycle_length()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsOutcome {
    /// Best plan evaluated during the run.
    pub best_plan: SignalPlan,
    pub best_fitness: f64,
    /// Plan nearest to the final search mean.
    pub final_plan: SignalPlan,
    pub records: Vec<GenerationRecord>,
    pub queries: usize,
}

/// Runs the optimizer from `init` against the simulator.
pub fn run_es(init: &SignalPlan, spec: &NetworkSpec, cfg: &EsConfig) -> Result<EsOutcome> {
    let measured = cfg.measured(spec);
    run_es_with(init, &spec.intersections, spec.sampling_len, cfg, |p| {
        evaluate_plan(p, spec, cfg.warmup_cycles, measured)
    })
}

/// Runs the optimizer against an arbitrary fitness function. Evaluations
/// within a generation run in parallel.
pub fn run_es_with<F>(
    init: &SignalPlan,
    specs: &[IntersectionSpec],
    sampling_len: u32,
    cfg: &EsConfig,
    fitness: F,
) -> Result<EsOutcome>
where
    F: Fn(&SignalPlan) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let boxes = boxes_for(init, specs, sampling_len)?;
    let report = crate::plan::validate_plan(init, specs, sampling_len)?;
    if !report.is_ok() {
        return Err(Error::Config(format!("initial plan is invalid: {report}")));
    }
    let shape = init.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta: Vec<f64> = init.to_params();
    let mut current = init.clone();
    let mut best: Option<(SignalPlan, f64)> = None;
    let mut records = Vec::with_capacity(cfg.generations);
    let mut queries = 0;

    for generation in 0..cfg.generations {
        let mut plans = Vec::with_capacity(2 * cfg.pairs_per_generation);
        for _ in 0..cfg.pairs_per_generation {
            let delta = sample_delta(cfg.scheme, &current, &boxes, sampling_len, cfg.sigma, &mut rng)?;
            let (plus, minus) = antithetic_pair_within(&delta, &current, &boxes, sampling_len)?;
            plans.push(plus);
            plans.push(minus);
        }
        let scores: Vec<f64> = plans.par_iter().map(&fitness).collect::<Result<_>>()?;
        queries += plans.len();
        if let Some(bad) = scores.iter().find(|f| !f.is_finite()) {
            return Err(Error::Divergence(format!("fitness {bad}")));
        }

        for (p, &f) in plans.iter().zip(&scores) {
            if best.as_ref().is_none_or(|(_, b)| f > *b) {
                best = Some((p.clone(), f));
            }
        }

        let weights = if cfg.rank_shaping {
            rank_shape(&scores)?
        } else {
            scores.clone()
        };
        let deltas: Vec<Vec<f64>> = plans
            .iter()
            .map(|p| p.delta_from(&current).map(|d| d.to_params()))
            .collect::<Result<_>>()?;
        let raw = es_update(&theta, &deltas, &weights, cfg.learning_rate, cfg.sigma, plans.len())?;
        theta = repair_params(&raw, &shape, &boxes)?;
        current = plan_from_params(&theta, &shape, &boxes, sampling_len)?;

        records.push(GenerationRecord {
            generation,
            best_fitness: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_fitness: scores.iter().sum::<f64>() / scores.len() as f64,
            plan: current.clone(),
            queries,
        });
    }

    let (best_plan, best_fitness) = best.expect("at least one generation ran");
    Ok(EsOutcome { best_plan, best_fitness, final_plan: current, records, queries })
}

/// Learning curve with columns
/// `generation,best_fitness,mean_fitness,cycle_length,queries`.
pub fn write_curve_csv<W: Write>(records: &[GenerationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["generation", "best_fitness", "mean_fitness", "cycle_length", "queries"])?;
    for r in records {
        w.write_record([
            r.generation.to_string(),
            format!("{:.6}", r.best_fitness),
            format!("{:.6}", r.mean_fitness),
            r.cycle_length().to_string(),
            r.queries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
