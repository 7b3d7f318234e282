use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plan::{IntersectionSpec, PhaseSpec, SignalPlan, DEFAULT_MIN_LEN};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Fractional accumulator: a vehicle is emitted each time the accumulated
    /// rate reaches one.
    #[default]
    Deterministic,
    /// Poisson-distributed arrivals from the seeded generator.
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    /// Maximum vehicles on the link, queued plus travelling.
    pub capacity: u64,
    /// Steps between entering the link and joining its stop-line queue.
    pub travel_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub id: usize,
    pub from_link: usize,
    /// Downstream link; `None` leaves the network.
    pub to_link: Option<usize>,
    /// Vehicles discharged per sampling step under green.
    pub saturation_flow: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub link: usize,
    /// Vehicles per sampling step.
    pub rate: f64,
    /// Optional multipliers cycled every `period_steps` steps.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profile: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub period_steps: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl Demand {
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.profile.is_empty() || self.period_steps == 0 {
            self.rate
        } else {
            let k = (step / self.period_steps) as usize % self.profile.len();
            self.rate * self.profile[k]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub movement: usize,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRatios {
    pub link: usize,
    pub shares: Vec<Share>,
}

/// Static road network plus demand and run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct NetworkSpec {
    /// Seconds per simulator step.
    pub sampling_len: u32,
    /// Control cycles per episode.
    pub horizon: usize,
    pub seed: u64,
    #[serde(default)]
    pub arrivals: ArrivalMode,
    pub intersections: Vec<IntersectionSpec>,
    pub links: Vec<Link>,
    pub movements: Vec<Movement>,
    pub demand: Vec<Demand>,
    pub turn_ratios: Vec<TurnRatios>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_plan: Option<SignalPlan>,
}

#[derive(Deserialize)]
struct RawPhase {
    min_len: Option<u32>,
    max_len: Option<u32>,
    movements: Vec<usize>,
}

#[derive(Deserialize)]
struct RawIntersection {
    id: usize,
    phases: Vec<RawPhase>,
}

#[derive(Deserialize)]
struct RawNetwork {
    sampling_len: u32,
    horizon: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    arrivals: ArrivalMode,
    intersections: Vec<RawIntersection>,
    links: Vec<Link>,
    movements: Vec<Movement>,
    #[serde(default)]
    demand: Vec<Demand>,
    turn_ratios: Vec<TurnRatios>,
    #[serde(default)]
    initial_plan: Option<SignalPlan>,
}

impl TryFrom<RawNetwork> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        let default_max = raw.initial_plan.as_ref().map(SignalPlan::cycle_length);
        let intersections = raw
            .intersections
            .into_iter()
            .map(|ri| {
                let phases = ri
                    .phases
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let max_len = p.max_len.or(default_max).ok_or_else(|| {
                            Error::InvalidNetwork(format!(
                                "intersection {} phase {i} has no max_len and there is no initial plan to default from",
                                ri.id
                            ))
                        })?;
                        Ok(PhaseSpec {
                            min_len: p.min_len.unwrap_or(DEFAULT_MIN_LEN),
                            max_len,
                            movements: p.movements,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(IntersectionSpec { id: ri.id, phases })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = NetworkSpec {
            sampling_len: raw.sampling_len,
            horizon: raw.horizon,
            seed: raw.seed,
            arrivals: raw.arrivals,
            intersections,
            links: raw.links,
            movements: raw.movements,
            demand: raw.demand,
            turn_ratios: raw.turn_ratios,
            initial_plan: raw.initial_plan,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl NetworkSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("network serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn shape(&self) -> Vec<usize> {
        crate::plan::shape_of(&self.intersections)
    }

    pub fn num_intersections(&self) -> usize {
        self.intersections.len()
    }

    /// Intersection whose movements leave `link`.
    pub fn link_owner(&self, link: usize) -> Option<usize> {
        let m = self.movements.iter().find(|m| m.from_link == link)?;
        self.movement_owner(m.id)
    }

    pub fn movement_owner(&self, movement: usize) -> Option<usize> {
        self.intersections
            .iter()
            .position(|s| s.phases.iter().any(|p| p.movements.contains(&movement)))
    }

    /// Links feeding `intersection`, ascending.
    pub fn incoming_links(&self, intersection: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .movements
            .iter()
            .filter(|m| self.movement_owner(m.id) == Some(intersection))
            .map(|m| m.from_link)
            .collect();
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidNetwork(msg));
        if self.sampling_len == 0 {
            return bad("sampling_len must be positive".into());
        }
        if self.intersections.is_empty() {
            return bad("no intersections".into());
        }
        for (k, s) in self.intersections.iter().enumerate() {
            if s.id != k {
                return bad(format!("intersection ids must be 0..N in order, found {} at {k}", s.id));
            }
            if s.phases.len() < 2 {
                return bad(format!("intersection {k} needs at least two phases"));
            }
            for (i, p) in s.phases.iter().enumerate() {
                if p.min_len == 0 || p.min_len > p.max_len {
                    return bad(format!("intersection {k} phase {i}: need 0 < min_len <= max_len"));
                }
                if p.movements.is_empty() {
                    return bad(format!("intersection {k} phase {i} grants no movement"));
                }
            }
        }
        for (k, l) in self.links.iter().enumerate() {
            if l.id != k {
                return bad(format!("link ids must be 0..L in order, found {} at {k}", l.id));
            }
            if l.capacity == 0 {
                return bad(format!("link {k} has zero capacity"));
            }
        }
        for (k, m) in self.movements.iter().enumerate() {
            if m.id != k {
                return bad(format!("movement ids must be 0..M in order, found {} at {k}", m.id));
            }
            if m.from_link >= self.links.len() || m.to_link.is_some_and(|t| t >= self.links.len()) {
                return bad(format!("movement {k} references an unknown link"));
            }
            if m.saturation_flow == 0 {
                return bad(format!("movement {k} has zero saturation flow"));
            }
            let owners: BTreeSet<usize> = self
                .intersections
                .iter()
                .filter(|s| s.phases.iter().any(|p| p.movements.contains(&k)))
                .map(|s| s.id)
                .collect();
            if owners.len() != 1 {
                return bad(format!(
                    "movement {k} must appear in phases of exactly one intersection, found {owners:?}"
                ));
            }
        }
        for s in &self.intersections {
            for p in &s.phases {
                if let Some(&m) = p.movements.iter().find(|&&m| m >= self.movements.len()) {
                    return bad(format!("intersection {} references unknown movement {m}", s.id));
                }
            }
        }
        for l in 0..self.links.len() {
            let owners: BTreeSet<Option<usize>> = self
                .movements
                .iter()
                .filter(|m| m.from_link == l)
                .map(|m| self.movement_owner(m.id))
                .collect();
            if owners.is_empty() {
                return bad(format!("link {l} has no outgoing movement"));
            }
            if owners.len() > 1 {
                return bad(format!("movements leaving link {l} belong to different intersections"));
            }
            let ratios: Vec<&TurnRatios> = self.turn_ratios.iter().filter(|t| t.link == l).collect();
            if ratios.len() != 1 {
                return bad(format!("link {l} needs exactly one turn_ratios entry"));
            }
            let tr = ratios[0];
            let mut listed = BTreeSet::new();
            let mut total = 0.0;
            for sh in &tr.shares {
                if sh.movement >= self.movements.len() || self.movements[sh.movement].from_link != l {
                    return bad(format!("turn ratio on link {l} names movement {} not leaving it", sh.movement));
                }
                if !(sh.share >= 0.0) {
                    return bad(format!("negative or NaN share on link {l}"));
                }
                listed.insert(sh.movement);
                total += sh.share;
            }
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("turn ratios on link {l} sum to {total}, not 1"));
            }
            for m in self.movements.iter().filter(|m| m.from_link == l) {
                if !listed.contains(&m.id) {
                    return bad(format!("turn ratios on link {l} omit movement {}", m.id));
                }
            }
        }
        for d in &self.demand {
            if d.link >= self.links.len() {
                return bad(format!("demand on unknown link {}", d.link));
            }
            if !(d.rate >= 0.0) || d.profile.iter().any(|p| !(*p >= 0.0)) {
                return bad(format!("demand on link {} must be non-negative", d.link));
            }
        }
        if let Some(plan) = &self.initial_plan {
            if plan.shape() != self.shape() {
                return bad("initial plan does not match the intersection layout".into());
            }
        }
        Ok(())
    }
}
