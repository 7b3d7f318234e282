use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::bounded_plan;
use crate::plan::{boxes_around, phase_boxes, validate_plan, PlanDelta, SignalPlan};
use crate::sim::{cycle_reward, observe, run_cycle, CycleTrace, NetworkSpec, Observation, SimState};

/// One control cycle recorded under the behaviour plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode: usize,
    /// Index of the cycle within its episode (after warm-up).
    pub step: usize,
    /// Per-intersection observations at cycle start.
    pub observations: Vec<Observation>,
    /// Applied change relative to the base plan.
    pub delta: PlanDelta,
    pub plan: SignalPlan,
    pub global_reward: f64,
    pub local_rewards: Vec<f64>,
    pub next_observations: Vec<Observation>,
    pub trace: CycleTrace,
}

/// Where a batch came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_plan: SignalPlan,
    pub seed: u64,
    /// Content hash of the network the batch was simulated on.
    pub network_hash: String,
    pub eta: u32,
    pub episodes: usize,
    pub cycles_per_episode: usize,
    pub warmup_cycles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDataset {
    pub provenance: Provenance,
    pub records: Vec<TransitionRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

impl BatchDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Consecutive records of an episode chain: the next observation of one
    /// is the observation of the following one.
    pub fn is_contiguous(&self) -> bool {
        self.records.windows(2).all(|w| {
            w[0].episode != w[1].episode
                || (w[1].step == w[0].step + 1 && w[0].next_observations == w[1].observations)
        })
    }

    /// JSON lines: a `{"provenance": ...}` header, then one record per line.
    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        self.write_jsonl_with_meta(out, None)
    }

    /// Like [`write_jsonl`](Self::write_jsonl), with caller metadata stored
    /// next to the provenance in the header line.
    pub fn write_jsonl_with_meta<W: Write>(&self, mut out: W, meta: Option<&serde_json::Value>) -> Result<()> {
        let header = Header { provenance: self.provenance.clone(), meta: meta.cloned() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        Ok(Self::read_jsonl_with_meta(input)?.0)
    }

    /// Dataset plus the header metadata, if any.
    pub fn read_jsonl_with_meta<R: BufRead>(input: R) -> Result<(Self, Option<serde_json::Value>)> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(Error::EmptyBatch)??;
        let Header { provenance, meta } = serde_json::from_str(&header)?;
        let mut records = vec![];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok((BatchDataset { provenance, records }, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub episodes: usize,
    /// Recorded cycles per episode; `None` uses the network horizon.
    pub cycles_per_episode: Option<usize>,
    /// Exploration half-width η, seconds.
    pub eta: u32,
    /// Cycles run under the base plan before recording starts.
    pub warmup_cycles: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { episodes: 100, cycles_per_episode: None, eta: 2, warmup_cycles: 2, seed: 0 }
    }
}

/// Simulates `episodes` runs of the base plan with uniform exploration
/// deltas in `[-η, η]` (sampling-length multiples, balanced and repaired
/// exactly as bounded actions are decoded) and records every cycle.
pub fn collect_batch(base: &SignalPlan, spec: &NetworkSpec, cfg: &CollectConfig) -> Result<BatchDataset> {
    let report = validate_plan(base, &spec.intersections, spec.sampling_len)?;
    if !report.is_ok() {
        return Err(Error::Config(format!("base plan is invalid: {report}")));
    }
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let cycles = cfg.cycles_per_episode.unwrap_or(spec.horizon.max(1));
    if cycles == 0 {
        return Err(Error::Config("cycles_per_episode must be at least 1".into()));
    }
    let m = spec.sampling_len.max(1) as i64;
    let steps = cfg.eta as i64 / m;
    let boxes = phase_boxes(&spec.intersections, spec.sampling_len)?;
    let window = boxes_around(&boxes, base, steps * m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = spec.num_intersections();
    let mut records = Vec::with_capacity(cfg.episodes * cycles);

    for episode in 0..cfg.episodes {
        let mut state = SimState::with_seed(spec, spec.seed.wrapping_add(episode as u64))?;
        for _ in 0..cfg.warmup_cycles {
            run_cycle(&mut state, base, spec)?;
        }
        let mut obs: Vec<Observation> = (0..n).map(|j| observe(&state, spec, j)).collect::<Result<_>>()?;
        for step in 0..cycles {
            let proposal = PlanDelta {
                deltas: base
                    .lengths()
                    .iter()
                    .map(|p| p.iter().map(|_| rng.random_range(-steps..=steps) * m).collect())
                    .collect(),
            };
            let plan = bounded_plan(base, &proposal, &window, spec.sampling_len)?;
            let trace = run_cycle(&mut state, &plan, spec)?;
            let reward = cycle_reward(&trace)?;
            let next: Vec<Observation> = (0..n).map(|j| observe(&state, spec, j)).collect::<Result<_>>()?;
            records.push(TransitionRecord {
                episode,
                step,
                observations: std::mem::replace(&mut obs, next.clone()),
                delta: plan.delta_from(base)?,
                plan,
                global_reward: reward.global,
                local_rewards: reward.local,
                next_observations: next,
                trace,
            });
        }
    }

    Ok(BatchDataset {
        provenance: Provenance {
            base_plan: base.clone(),
            seed: cfg.seed,
            network_hash: spec.content_hash(),
            eta: cfg.eta,
            episodes: cfg.episodes,
            cycles_per_episode: cycles,
            warmup_cycles: cfg.warmup_cycles,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::corridor_network;

    fn small() -> (NetworkSpec, SignalPlan) {
        let mut spec = corridor_network(0.8, 0.3, 2);
        spec.horizon = 4;
        (spec, SignalPlan::new(vec![vec![20, 16], vec![18, 18]]).unwrap())
    }

    #[test]
    fn zero_eta_replays_the_base_plan() {
        let (spec, base) = small();
        let cfg = CollectConfig { episodes: 3, eta: 0, ..CollectConfig::default() };
        let batch = collect_batch(&base, &spec, &cfg).unwrap();
        assert_eq!(batch.len(), 12);
        assert!(batch.records.iter().all(|r| r.plan == base && r.delta.is_zero()));
    }

    #[test]
    fn records_are_consistent_and_contiguous() {
        let (spec, base) = small();
        let cfg = CollectConfig { episodes: 4, eta: 4, seed: 9, ..CollectConfig::default() };
        let batch = collect_batch(&base, &spec, &cfg).unwrap();
        assert!(batch.is_contiguous());
        for r in &batch.records {
            assert!(validate_plan(&r.plan, &spec.intersections, 2).unwrap().is_ok());
            assert!(r.delta.max_abs() <= 4);
            let reward = cycle_reward(&r.trace).unwrap();
            assert_eq!(reward.global, r.global_reward);
            assert_eq!(reward.local, r.local_rewards);
        }
        assert!(batch.records.iter().any(|r| !r.delta.is_zero()));
    }

    #[test]
    fn jsonl_round_trips() {
        let (spec, base) = small();
        let cfg = CollectConfig { episodes: 2, eta: 2, ..CollectConfig::default() };
        let batch = collect_batch(&base, &spec, &cfg).unwrap();
        let mut buf = vec![];
        batch.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"provenance\":"));
        assert_eq!(text.lines().count(), 1 + batch.len());
        let back = BatchDataset::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, batch);

        let meta = serde_json::json!({"seed": 3});
        let mut buf = vec![];
        batch.write_jsonl_with_meta(&mut buf, Some(&meta)).unwrap();
        let (back, read_meta) = BatchDataset::read_jsonl_with_meta(&buf[..]).unwrap();
        assert_eq!((back, read_meta), (batch, Some(meta)));
    }

    #[test]
    fn collection_is_deterministic() {
        let (spec, base) = small();
        let cfg = CollectConfig { episodes: 2, eta: 4, seed: 1, ..CollectConfig::default() };
        assert_eq!(collect_batch(&base, &spec, &cfg).unwrap(), collect_batch(&base, &spec, &cfg).unwrap());
    }
}
