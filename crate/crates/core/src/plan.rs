//! Signal plans, phase constraints and the repair projection.
//!
//! A plan assigns an integer length (seconds) to every phase of every
//! intersection. Valid plans satisfy three constraints: every intersection has
//! the same cycle length, every phase sits inside its `[min_len, max_len]`
//! box, and every length is a multiple of the simulator's sampling length.

use std::fmt;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Lower bound applied when a phase does not state one.
pub const DEFAULT_MIN_LEN: u32 = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub min_len: u32,
    pub max_len: u32,
    /// Movements that receive green while this phase is active.
    pub movements: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub id: usize,
    /// Phases in their fixed cyclic order.
    pub phases: Vec<PhaseSpec>,
}

impl IntersectionSpec {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }
}

/// Phase counts per intersection.
pub fn shape_of(specs: &[IntersectionSpec]) -> Vec<usize> {
    specs.iter().map(|s| s.phases.len()).collect()
}

/// Per-intersection phase lengths in seconds.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignalPlan {
    lengths: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct PlanEntry {
    id: usize,
    phases: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    intersections: Vec<PlanEntry>,
}

impl Serialize for SignalPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PlanFile {
            intersections: self
                .lengths
                .iter()
                .enumerate()
                .map(|(id, phases)| PlanEntry { id, phases: phases.clone() })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SignalPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut file = PlanFile::deserialize(d)?;
        file.intersections.sort_by_key(|e| e.id);
        for (k, e) in file.intersections.iter().enumerate() {
            if e.id != k {
                return Err(serde::de::Error::custom(format!(
                    "intersection ids must be 0..N without gaps, found {}",
                    e.id
                )));
            }
        }
        SignalPlan::new(file.intersections.into_iter().map(|e| e.phases).collect())
            .map_err(serde::de::Error::custom)
    }
}

impl SignalPlan {
    pub fn new(lengths: Vec<Vec<u32>>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::EmptyPlan);
        }
        if let Some(j) = lengths.iter().position(|p| p.is_empty()) {
            return Err(Error::shape(format!("intersection {j} has no phases")));
        }
        Ok(SignalPlan { lengths })
    }

    /// A plan giving every phase of every intersection an equal share of
    /// `cycle` seconds, rounded to `sampling_len`; the last phase takes the
    /// remainder.
    pub fn uniform(shape: &[usize], cycle: u32, sampling_len: u32) -> Result<Self> {
        let lengths = shape
            .iter()
            .map(|&n| {
                let share = (cycle / n as u32) / sampling_len * sampling_len;
                let mut v = vec![share; n];
                v[n - 1] = cycle - share * (n as u32 - 1);
                v
            })
            .collect();
        SignalPlan::new(lengths)
    }

    pub fn lengths(&self) -> &[Vec<u32>] {
        &self.lengths
    }

    pub fn intersection(&self, j: usize) -> &[u32] {
        &self.lengths[j]
    }

    pub fn num_intersections(&self) -> usize {
        self.lengths.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.lengths.iter().map(Vec::len).collect()
    }

    pub fn total_phases(&self) -> usize {
        self.lengths.iter().map(Vec::len).sum()
    }

    pub fn cycle_of(&self, j: usize) -> u32 {
        self.lengths[j].iter().sum()
    }

    /// Cycle length of the first intersection; equal to every other
    /// intersection's cycle on a valid plan.
    pub fn cycle_length(&self) -> u32 {
        self.cycle_of(0)
    }

    /// Concatenates phase lengths intersection by intersection.
    pub fn flatten(&self) -> Vec<u32> {
        self.lengths.iter().flatten().copied().collect()
    }

    /// Flattened lengths as real parameters.
    pub fn to_params<T: Scalar>(&self) -> Vec<T> {
        self.flatten().into_iter().map(|t| T::of(t as f64)).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for the given phase counts.
    pub fn unflatten(theta: &[u32], shape: &[usize]) -> Result<Self> {
        if shape.iter().sum::<usize>() != theta.len() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, shape needs {}",
                theta.len(),
                shape.iter().sum::<usize>()
            )));
        }
        SignalPlan::new(split_by_shape(theta, shape))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn signed(&self) -> Vec<Vec<i64>> {
        self.lengths
            .iter()
            .map(|p| p.iter().map(|&t| t as i64).collect())
            .collect()
    }

    /// Difference `self - base`, phase by phase.
    pub fn delta_from(&self, base: &SignalPlan) -> Result<PlanDelta> {
        check_shapes(&self.shape(), &base.shape())?;
        Ok(PlanDelta {
            deltas: self
                .lengths
                .iter()
                .zip(&base.lengths)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x as i64 - y as i64).collect())
                .collect(),
        })
    }
}

impl fmt::Display for SignalPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .lengths
            .iter()
            .map(|p| {
                let inner: Vec<String> = p.iter().map(u32::to_string).collect();
                format!("({})", inner.join(","))
            })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

pub(crate) fn split_by_shape<T: Copy>(flat: &[T], shape: &[usize]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(shape.len());
    let mut at = 0;
    for &n in shape {
        out.push(flat[at..at + n].to_vec());
        at += n;
    }
    out
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("phase counts {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Signed per-phase change in seconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDelta {
    pub deltas: Vec<Vec<i64>>,
}

impl PlanDelta {
    pub fn zeros(shape: &[usize]) -> Self {
        PlanDelta { deltas: shape.iter().map(|&n| vec![0; n]).collect() }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.deltas.iter().map(Vec::len).collect()
    }

    pub fn negated(&self) -> Self {
        PlanDelta {
            deltas: self.deltas.iter().map(|d| d.iter().map(|x| -x).collect()).collect(),
        }
    }

    pub fn sums(&self) -> Vec<i64> {
        self.deltas.iter().map(|d| d.iter().sum()).collect()
    }

    /// True when every intersection's deltas sum to the same value.
    pub fn preserves_cycle_equality(&self) -> bool {
        let sums = self.sums();
        sums.windows(2).all(|w| w[0] == w[1])
    }

    pub fn is_zero(&self) -> bool {
        self.deltas.iter().flatten().all(|&x| x == 0)
    }

    pub fn max_abs(&self) -> i64 {
        self.deltas.iter().flatten().map(|x| x.abs()).max().unwrap_or(0)
    }

    pub fn flatten(&self) -> Vec<i64> {
        self.deltas.iter().flatten().copied().collect()
    }

    pub fn to_params<T: Scalar>(&self) -> Vec<T> {
        self.flatten().into_iter().map(|x| T::of(x as f64)).collect()
    }
}

/// One violated constraint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    CycleMismatch { first: usize, first_cycle: u32, other: usize, other_cycle: u32 },
    BelowMin { intersection: usize, phase: usize, len: u32, min_len: u32 },
    AboveMax { intersection: usize, phase: usize, len: u32, max_len: u32 },
    NotMultiple { intersection: usize, phase: usize, len: u32, sampling_len: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CycleMismatch { first, first_cycle, other, other_cycle } => write!(
                f,
                "cycle of intersection {other} is {other_cycle}s, intersection {first} has {first_cycle}s"
            ),
            Violation::BelowMin { intersection, phase, len, min_len } => write!(
                f,
                "intersection {intersection} phase {phase}: {len}s below minimum {min_len}s"
            ),
            Violation::AboveMax { intersection, phase, len, max_len } => write!(
                f,
                "intersection {intersection} phase {phase}: {len}s above maximum {max_len}s"
            ),
            Violation::NotMultiple { intersection, phase, len, sampling_len } => write!(
                f,
                "intersection {intersection} phase {phase}: {len}s is not a multiple of {sampling_len}s"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlanReport {
    pub violations: Vec<Violation>,
}

impl PlanReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for PlanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.violations.iter().map(Violation::to_string).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Checks cycle equality, phase bounds and sampling-length alignment.
pub fn validate_plan(
    plan: &SignalPlan,
    specs: &[IntersectionSpec],
    sampling_len: u32,
) -> Result<PlanReport> {
    check_shapes(&plan.shape(), &shape_of(specs))?;
    let mut violations = Vec::new();
    let first_cycle = plan.cycle_of(0);
    for (j, spec) in specs.iter().enumerate() {
        let cycle = plan.cycle_of(j);
        if cycle != first_cycle {
            violations.push(Violation::CycleMismatch {
                first: 0,
                first_cycle,
                other: j,
                other_cycle: cycle,
            });
        }
        for (i, (&len, phase)) in plan.intersection(j).iter().zip(&spec.phases).enumerate() {
            if len < phase.min_len {
                violations.push(Violation::BelowMin { intersection: j, phase: i, len, min_len: phase.min_len });
            }
            if len > phase.max_len {
                violations.push(Violation::AboveMax { intersection: j, phase: i, len, max_len: phase.max_len });
            }
            if sampling_len > 0 && len % sampling_len != 0 {
                violations.push(Violation::NotMultiple { intersection: j, phase: i, len, sampling_len });
            }
        }
    }
    Ok(PlanReport { violations })
}

/// Inclusive per-phase bounds, aligned to the sampling length.
pub type PhaseBoxes = Vec<Vec<(i64, i64)>>;

/// Spec bounds tightened to multiples of `sampling_len`.
pub fn phase_boxes(specs: &[IntersectionSpec], sampling_len: u32) -> Result<PhaseBoxes> {
    let m = sampling_len.max(1) as i64;
    specs
        .iter()
        .map(|s| {
            s.phases
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let lo = (p.min_len as i64 + m - 1) / m * m;
                    let hi = p.max_len as i64 / m * m;
                    if lo > hi || lo <= 0 {
                        Err(Error::InfeasibleRepair(format!(
                            "intersection {} phase {i}: no multiple of {m}s inside [{}, {}]",
                            s.id, p.min_len, p.max_len
                        )))
                    } else {
                        Ok((lo, hi))
                    }
                })
                .collect()
        })
        .collect()
}

/// Intersects every box with `[base - radius, base + radius]`.
pub fn boxes_around(boxes: &PhaseBoxes, base: &SignalPlan, radius: i64) -> PhaseBoxes {
    boxes
        .iter()
        .zip(base.lengths())
        .map(|(bs, ts)| {
            bs.iter()
                .zip(ts)
                .map(|(&(lo, hi), &t)| (lo.max(t as i64 - radius), hi.min(t as i64 + radius)))
                .collect()
        })
        .collect()
}

pub fn round_to_multiple(x: f64, m: u32) -> i64 {
    let m = m.max(1) as f64;
    ((x / m).round() * m) as i64
}

/// Clips each length into its bounds, then moves the residual between the
/// clipped sum and `target` onto the last phase, cascading backwards when a
/// phase saturates. Returns `false` if the bounds cannot reach `target`.
pub fn project_to_cycle<T>(lengths: &mut [T], bounds: &[(T, T)], target: T) -> bool
where
    T: Copy + PartialOrd + Num,
{
    let zero = T::zero();
    let (sum_lo, sum_hi) = bounds.iter().fold((zero, zero), |(a, b), &(lo, hi)| (a + lo, b + hi));
    if target < sum_lo || target > sum_hi {
        return false;
    }
    let mut sum = zero;
    for (x, &(lo, hi)) in lengths.iter_mut().zip(bounds) {
        if *x < lo {
            *x = lo;
        }
        if *x > hi {
            *x = hi;
        }
        sum = sum + *x;
    }
    let mut residual = target - sum;
    for (x, &(lo, hi)) in lengths.iter_mut().zip(bounds).rev() {
        if residual == zero {
            break;
        }
        if residual > zero {
            let room = hi - *x;
            if room < residual {
                *x = hi;
                residual = residual - room;
            } else {
                *x = *x + residual;
                residual = zero;
            }
        } else {
            let room = lo - *x;
            if room > residual {
                *x = lo;
                residual = residual - room;
            } else {
                *x = *x + residual;
                residual = zero;
            }
        }
    }
    // Any remainder here is floating-point rounding: the target was checked
    // against the bounds above.
    true
}

/// Range of cycle lengths reachable by every intersection at once.
pub fn feasible_cycle_range<T>(bounds: &[Vec<(T, T)>]) -> Option<(T, T)>
where
    T: Copy + PartialOrd + Num,
{
    let mut lo: Option<T> = None;
    let mut hi: Option<T> = None;
    for bs in bounds {
        let l = bs.iter().fold(T::zero(), |acc, b| acc + b.0);
        let h = bs.iter().fold(T::zero(), |acc, b| acc + b.1);
        lo = Some(match lo {
            Some(v) if v > l => v,
            _ => l,
        });
        hi = Some(match hi {
            Some(v) if v < h => v,
            _ => h,
        });
    }
    match (lo, hi) {
        (Some(l), Some(h)) if l <= h => Some((l, h)),
        _ => None,
    }
}

/// Projects every intersection onto a common cycle: the target is `hint`
/// clamped into the jointly feasible range.
pub fn repair_lengths<T>(raw: &[Vec<T>], bounds: &[Vec<(T, T)>], hint: T) -> Result<Vec<Vec<T>>>
where
    T: Copy + PartialOrd + Num + fmt::Debug,
{
    if raw.len() != bounds.len() || raw.iter().zip(bounds).any(|(r, b)| r.len() != b.len()) {
        return Err(Error::shape("lengths and bounds differ in shape"));
    }
    let (lo, hi) = feasible_cycle_range(bounds).ok_or_else(|| {
        Error::InfeasibleRepair("phase bounds admit no common cycle length".into())
    })?;
    let target = if hint < lo {
        lo
    } else if hint > hi {
        hi
    } else {
        hint
    };
    let mut out = raw.to_vec();
    for (j, (lengths, bs)) in out.iter_mut().zip(bounds).enumerate() {
        if !project_to_cycle(lengths, bs, target) {
            return Err(Error::InfeasibleRepair(format!(
                "intersection {j} cannot reach cycle {target:?}"
            )));
        }
    }
    Ok(out)
}

/// Repairs signed integer lengths into a valid plan. Lengths are first
/// rounded to `sampling_len`; the common cycle follows the rounded mean of
/// the intersections' raw cycles.
pub fn repair_plan(raw: &[Vec<i64>], boxes: &PhaseBoxes, sampling_len: u32) -> Result<SignalPlan> {
    let rounded: Vec<Vec<i64>> = raw
        .iter()
        .map(|p| p.iter().map(|&t| round_to_multiple(t as f64, sampling_len)).collect())
        .collect();
    let mean_cycle = rounded.iter().map(|p| p.iter().sum::<i64>() as f64).sum::<f64>()
        / rounded.len().max(1) as f64;
    let hint = round_to_multiple(mean_cycle, sampling_len);
    let repaired = repair_lengths(&rounded, boxes, hint)?;
    SignalPlan::new(
        repaired
            .into_iter()
            .map(|p| p.into_iter().map(|t| t as u32).collect())
            .collect(),
    )
}

/// Adds `delta` to `plan` and repairs the result against `boxes`.
pub fn apply_delta_within(
    plan: &SignalPlan,
    delta: &PlanDelta,
    boxes: &PhaseBoxes,
    sampling_len: u32,
) -> Result<SignalPlan> {
    check_shapes(&plan.shape(), &delta.shape())?;
    let raw: Vec<Vec<i64>> = plan
        .signed()
        .iter()
        .zip(&delta.deltas)
        .map(|(t, d)| t.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    repair_plan(&raw, boxes, sampling_len)
}

/// Adds `delta` to `plan`, clips to the phase bounds and restores cycle
/// equality.
pub fn apply_delta(
    plan: &SignalPlan,
    delta: &PlanDelta,
    specs: &[IntersectionSpec],
    sampling_len: u32,
) -> Result<SignalPlan> {
    check_shapes(&plan.shape(), &shape_of(specs))?;
    let boxes = phase_boxes(specs, sampling_len)?;
    apply_delta_within(plan, delta, &boxes, sampling_len)
}

/// Real-valued counterpart of [`repair_plan`], used for search-distribution
/// means that live between integer plans.
pub fn repair_params<T: Scalar>(
    params: &[T],
    shape: &[usize],
    boxes: &PhaseBoxes,
) -> Result<Vec<T>> {
    let raw = split_by_shape(params, shape);
    let bounds: Vec<Vec<(T, T)>> = boxes
        .iter()
        .map(|bs| bs.iter().map(|&(l, h)| (T::of(l as f64), T::of(h as f64))).collect())
        .collect();
    let mean = raw.iter().map(|p| p.iter().copied().sum::<T>()).sum::<T>() / T::of(raw.len() as f64);
    Ok(repair_lengths(&raw, &bounds, mean)?.into_iter().flatten().collect())
}

/// Rounds real parameters to the nearest valid integer plan.
pub fn plan_from_params<T: Scalar>(
    params: &[T],
    shape: &[usize],
    boxes: &PhaseBoxes,
    sampling_len: u32,
) -> Result<SignalPlan> {
    let raw: Vec<Vec<i64>> = split_by_shape(params, shape)
        .into_iter()
        .map(|p| p.into_iter().map(|x| round_to_multiple(x.as_f64(), sampling_len)).collect())
        .collect();
    repair_plan(&raw, boxes, sampling_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(id: usize, n: usize, min: u32, max: u32) -> IntersectionSpec {
        IntersectionSpec {
            id,
            phases: (0..n)
                .map(|i| PhaseSpec { min_len: min, max_len: max, movements: vec![id * 10 + i] })
                .collect(),
        }
    }

    #[test]
    fn valid_plan_reports_ok() {
        let specs = vec![spec(0, 2, 10, 90), spec(1, 3, 10, 90)];
        let plan = SignalPlan::new(vec![vec![30, 90], vec![40, 40, 40]]).unwrap();
        assert!(validate_plan(&plan, &specs, 1).unwrap().is_ok());
    }

    #[test]
    fn cycle_mismatch_names_both_intersections() {
        let specs = vec![spec(0, 2, 10, 90), spec(1, 2, 10, 90)];
        let plan = SignalPlan::new(vec![vec![60, 60], vec![60, 65]]).unwrap();
        let report = validate_plan(&plan, &specs, 1).unwrap();
        assert_eq!(
            report.violations,
            vec![Violation::CycleMismatch { first: 0, first_cycle: 120, other: 1, other_cycle: 125 }]
        );
    }

    #[test]
    fn short_phase_is_a_bound_violation() {
        let specs = vec![spec(0, 2, 10, 200)];
        let plan = SignalPlan::new(vec![vec![8, 112]]).unwrap();
        let report = validate_plan(&plan, &specs, 1).unwrap();
        assert_eq!(
            report.violations,
            vec![Violation::BelowMin { intersection: 0, phase: 0, len: 8, min_len: 10 }]
        );
    }

    #[test]
    fn misaligned_phase_is_reported() {
        let specs = vec![spec(0, 2, 10, 200)];
        let plan = SignalPlan::new(vec![vec![11, 109]]).unwrap();
        let report = validate_plan(&plan, &specs, 2).unwrap();
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let specs = vec![spec(0, 2, 10, 90)];
        let plan = SignalPlan::new(vec![vec![30, 30, 30]]).unwrap();
        assert!(matches!(validate_plan(&plan, &specs, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn flatten_concatenates_in_order() {
        let plan = SignalPlan::new(vec![vec![30, 90], vec![40, 40, 40]]).unwrap();
        assert_eq!(plan.flatten(), vec![30, 90, 40, 40, 40]);
        assert_eq!(SignalPlan::unflatten(&plan.flatten(), &[2, 3]).unwrap(), plan);
    }

    #[test]
    fn empty_plan_is_rejected() {
        assert!(matches!(SignalPlan::new(vec![]), Err(Error::EmptyPlan)));
        assert!(matches!(SignalPlan::unflatten(&[], &[]), Err(Error::EmptyPlan)));
    }

    #[test]
    fn json_layout_is_stable() {
        let plan = SignalPlan::new(vec![vec![30, 90], vec![40, 40, 40]]).unwrap();
        assert_eq!(
            plan.to_json(),
            r#"{"intersections":[{"id":0,"phases":[30,90]},{"id":1,"phases":[40,40,40]}]}"#
        );
        assert_eq!(SignalPlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    #[test]
    fn zero_delta_is_identity() {
        let specs = vec![spec(0, 2, 10, 90), spec(1, 3, 10, 90)];
        let plan = SignalPlan::new(vec![vec![30, 90], vec![40, 40, 40]]).unwrap();
        let out = apply_delta(&plan, &PlanDelta::zeros(&[2, 3]), &specs, 1).unwrap();
        assert_eq!(out, plan);
    }

    #[test]
    fn mirrored_delta_clips_at_lower_bound() {
        // 12 s phase, +4 and its mirror -4 with a 10 s floor.
        let specs = vec![spec(0, 2, 10, 100), spec(1, 2, 10, 100)];
        let plan = SignalPlan::new(vec![vec![12, 48], vec![30, 30]]).unwrap();
        let delta = PlanDelta { deltas: vec![vec![4, -4], vec![2, -2]] };
        let plus = apply_delta(&plan, &delta, &specs, 2).unwrap();
        let minus = apply_delta(&plan, &delta.negated(), &specs, 2).unwrap();
        assert_eq!(plus.intersection(0)[0], 16);
        assert_eq!(minus.intersection(0)[0], 10);
        assert!(validate_plan(&minus, &specs, 2).unwrap().is_ok());
    }

    #[test]
    fn residual_cascades_past_a_saturated_last_phase() {
        let mut lengths = [20i64, 20, 20];
        let bounds = [(10, 40), (10, 40), (10, 25)];
        assert!(project_to_cycle(&mut lengths, &bounds, 80));
        assert_eq!(lengths, [20, 35, 25]);
    }

    #[test]
    fn unreachable_cycle_is_infeasible() {
        let specs = vec![spec(0, 2, 10, 20), spec(1, 2, 30, 40)];
        let plan = SignalPlan::new(vec![vec![20, 20], vec![30, 30]]).unwrap();
        let err = apply_delta(&plan, &PlanDelta::zeros(&[2, 2]), &specs, 1);
        assert!(matches!(err, Err(Error::InfeasibleRepair(_))));
    }

    // Brute-force oracle: enumerate every aligned assignment inside the boxes
    // and check that some valid plan exists at the repaired cycle, and that
    // the repaired plan is one of them.
    fn exists_assignment(bounds: &[(i64, i64)], m: i64, target: i64) -> bool {
        fn rec(bounds: &[(i64, i64)], m: i64, left: i64) -> bool {
            match bounds.split_first() {
                None => left == 0,
                Some((&(lo, hi), rest)) => {
                    let mut t = lo;
                    while t <= hi {
                        if rec(rest, m, left - t) {
                            return true;
                        }
                        t += m;
                    }
                    false
                }
            }
        }
        rec(bounds, m, target)
    }

    proptest! {
        #[test]
        fn repaired_deltas_always_validate(
            base in prop::collection::vec(5u32..=20, 5),
            deltas in prop::collection::vec(-12i64..=12, 5),
            m in 1u32..=3,
        ) {
            let specs = vec![spec(0, 2, 10, 60), spec(1, 3, 10, 60)];
            let boxes = phase_boxes(&specs, m).unwrap();
            // Start from some valid plan at a feasible cycle.
            let raw = split_by_shape(&base.iter().map(|&b| (b * m) as i64).collect::<Vec<_>>(), &[2, 3]);
            let plan = repair_plan(&raw, &boxes, m).unwrap();
            prop_assert!(validate_plan(&plan, &specs, m).unwrap().is_ok());
            let delta = PlanDelta { deltas: split_by_shape(&deltas, &[2, 3]) };
            let out = apply_delta(&plan, &delta, &specs, m).unwrap();
            prop_assert!(validate_plan(&out, &specs, m).unwrap().is_ok());
            for (j, bs) in boxes.iter().enumerate() {
                prop_assert!(exists_assignment(bs, m as i64, out.cycle_of(j) as i64));
            }
            // Idempotent on valid plans.
            let again = apply_delta(&out, &PlanDelta::zeros(&[2, 3]), &specs, m).unwrap();
            prop_assert_eq!(again, out);
        }

        #[test]
        fn flatten_round_trips(lens in prop::collection::vec(1u32..200, 1..12), cut in 1usize..4) {
            let n = lens.len();
            let mut shape = vec![];
            let mut left = n;
            while left > 0 {
                let k = cut.min(left);
                shape.push(k);
                left -= k;
            }
            let plan = SignalPlan::unflatten(&lens, &shape).unwrap();
            prop_assert_eq!(plan.flatten(), lens);
        }

        #[test]
        fn real_repair_restores_equal_cycles(params in prop::collection::vec(5.0f64..70.0, 5)) {
            let specs = vec![spec(0, 2, 10, 60), spec(1, 3, 10, 60)];
            let boxes = phase_boxes(&specs, 2).unwrap();
            let out = repair_params(&params, &[2, 3], &boxes).unwrap();
            let a: f64 = out[..2].iter().sum();
            let b: f64 = out[2..].iter().sum();
            prop_assert!((a - b).abs() < 1e-9);
            let plan = plan_from_params(&out, &[2, 3], &boxes, 2).unwrap();
            prop_assert!(validate_plan(&plan, &specs, 2).unwrap().is_ok());
        }
    }
}
