use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_two_phase, build_truncated_samples};
use super::{estimate_clip_levels, ActionCoding, BatchDataset, DecentralizedPolicy, MaddpgConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Mlp, OutputActivation};
use crate::plan::{boxes_around, phase_boxes, shape_of, validate_plan, IntersectionSpec, PhaseBoxes, SignalPlan};
use crate::sim::Observation;
use crate::Scalar;

/// One critic training example with inputs already encoded.
#[derive(Clone, Debug)]
struct Sample<T> {
    /// Per-agent observation features.
    obs: Vec<Vec<T>>,
    /// Joint observation features (concatenation of `obs`).
    x: Vec<T>,
    /// Joint action features.
    a: Vec<T>,
    reward_global: T,
    reward_local: Vec<T>,
    next_obs: Vec<Vec<T>>,
    next_x: Vec<T>,
    /// Source record, for the truncated-value estimate of the reward.
    record: Option<usize>,
}

/// Truncated-value input for one phase of a record with its weight
/// `b_i / ℓ(a)` in the reward estimate.
#[derive(Clone, Debug)]
struct PhaseTerm<T> {
    agent: usize,
    weight: T,
    input: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Mean over agents.
    pub critic_loss: f64,
    /// Mean over agents of the critic value at the actors' actions.
    pub actor_objective: f64,
    pub truncated_loss: Option<f64>,
    /// Mean global reward of the current policy in the simulator. Reported
    /// only; never used for updates.
    pub eval_fitness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub label: String,
    pub rows: Vec<HistoryRow>,
    /// Number of simulator evaluations performed during training.
    pub evaluations: usize,
}

impl TrainingHistory {
    /// Columns `iteration,critic_loss,actor_objective,truncated_loss,eval_waiting_time`;
    /// absent values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "critic_loss", "actor_objective", "truncated_loss", "eval_waiting_time"])?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                format!("{:.8}", r.critic_loss),
                format!("{:.8}", r.actor_objective),
                r.truncated_loss.map(|v| format!("{v:.8}")).unwrap_or_default(),
                r.eval_fitness.map(|v| format!("{:.6}", -v)).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cast<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&v| T::of(v)).collect()
}

fn finite<T: Scalar>(v: T, what: &str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} is {v}")))
    }
}

/// Offline trainer state: actors, critics, their targets, the shared
/// truncated-value network and the encoded batch.
pub struct Trainer<T: Scalar> {
    cfg: MaddpgConfig,
    base: SignalPlan,
    boxes: PhaseBoxes,
    sampling_len: u32,
    coding: ActionCoding,
    n_agents: usize,
    action_offsets: Vec<usize>,
    n_actions: usize,
    reward_scale: f64,
    /// Scaled clipping levels.
    clip: Vec<T>,
    samples: Vec<Sample<T>>,
    derived: Vec<Vec<Sample<T>>>,
    truncated: Vec<(Vec<T>, T)>,
    phase_terms: Vec<Vec<PhaseTerm<T>>>,
    actors: Vec<Mlp<T>>,
    actor_targets: Vec<Mlp<T>>,
    actor_opts: Vec<Adam<T>>,
    critics: Vec<Mlp<T>>,
    critic_targets: Vec<Mlp<T>>,
    critic_opts: Vec<Adam<T>>,
    qbar: Option<(Mlp<T>, Adam<T>)>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Encodes the batch and initializes all networks. Nothing here touches
    /// a simulator: the batch and the static intersection layout are the
    /// only inputs.
    pub fn new(
        batch: &BatchDataset,
        base: &SignalPlan,
        specs: &[IntersectionSpec],
        sampling_len: u32,
        cfg: &MaddpgConfig,
    ) -> Result<Self> {
        cfg.validate(sampling_len)?;
        let records = &batch.records;
        if records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let report = validate_plan(base, specs, sampling_len)?;
        if !report.is_ok() {
            return Err(Error::Config(format!("base plan is invalid: {report}")));
        }
        let shape = shape_of(specs);
        let n_agents = shape.len();
        for r in records {
            if r.plan.shape() != shape || r.observations.len() != n_agents || r.next_observations.len() != n_agents {
                return Err(Error::shape("batch does not match the intersections"));
            }
        }
        let boxes = phase_boxes(specs, sampling_len)?;
        let ablation = cfg.ablation;
        let coding = ActionCoding::new(ablation.bounded_action, base, &boxes, cfg.delta);
        let mut action_offsets = vec![0];
        for &n in &shape {
            action_offsets.push(action_offsets.last().unwrap() + n);
        }
        let n_actions = *action_offsets.last().unwrap();

        let mean_abs = records.iter().map(|r| r.global_reward.abs()).sum::<f64>() / records.len() as f64;
        let reward_scale = if mean_abs > 0.0 { 1.0 / mean_abs } else { 1.0 };
        let clip: Vec<T> = if ablation.src {
            estimate_clip_levels(records, cfg.c_quartile)?
                .into_iter()
                .map(|c| T::of(c * reward_scale))
                .collect()
        } else {
            vec![T::zero(); n_agents]
        };

        // Capacities of every link, read off the observations.
        let n_links = records[0].trace.end_loads.len();
        let mut capacity = vec![1.0; n_links];
        for o in &records[0].observations {
            for (&l, &c) in o.links.iter().zip(&o.capacities) {
                capacity[l] = c as f64;
            }
        }
        let state_features =
            |loads: &[u64]| -> Vec<T> { loads.iter().zip(&capacity).map(|(&q, c)| T::of(q as f64 / c)).collect() };
        let obs_features = |o: &[Observation]| -> Vec<Vec<T>> { o.iter().map(|o| cast(&o.features())).collect() };
        let encode_action = |lengths: &[f64]| -> Vec<T> { cast(&coding.encode(lengths)) };

        let mut samples = Vec::with_capacity(records.len());
        for (k, r) in records.iter().enumerate() {
            let obs = obs_features(&r.observations);
            let next_obs = obs_features(&r.next_observations);
            samples.push(Sample {
                x: obs.concat(),
                obs,
                a: encode_action(&r.plan.to_params()),
                reward_global: T::of(r.global_reward * reward_scale),
                reward_local: r.local_rewards.iter().map(|&v| T::of(v * reward_scale)).collect(),
                next_x: next_obs.concat(),
                next_obs,
                record: Some(k),
            });
        }

        let mut derived = vec![vec![]; n_agents];
        let mut truncated = vec![];
        let mut phase_terms = vec![];
        if ablation.batch_augmentation {
            if cfg.derived_pairs {
                // Only pairs whose shortened action the decoder can emit.
                let window =
                    if ablation.bounded_action { boxes_around(&boxes, base, cfg.delta as i64) } else { boxes.clone() };
                for (k, r) in records.iter().enumerate() {
                    for p in augment_two_phase(r)? {
                        let j = p.intersection;
                        let representable = p
                            .phase_lengths
                            .iter()
                            .zip(&window[j])
                            .all(|(&t, &(lo, hi))| lo <= t as i64 && t as i64 <= hi);
                        if !representable {
                            continue;
                        }
                        let obs: Vec<Vec<T>> = r
                            .observations
                            .iter()
                            .map(|o| o.with_loads(&p.start_loads).map(|o| cast(&o.features())))
                            .collect::<Result<_>>()?;
                        let mut lengths = r.plan.to_params::<f64>();
                        for (i, &t) in p.phase_lengths.iter().enumerate() {
                            lengths[action_offsets[j] + i] = t as f64;
                        }
                        let mut local = samples[k].reward_local.clone();
                        local[j] = T::of(p.local_reward * reward_scale);
                        derived[j].push(Sample {
                            x: obs.concat(),
                            obs,
                            a: encode_action(&lengths),
                            reward_global: T::of(p.global_reward * reward_scale),
                            reward_local: local,
                            next_obs: samples[k].next_obs.clone(),
                            next_x: samples[k].next_x.clone(),
                            record: None,
                        });
                    }
                }
            }
            let qbar_input = |loads: &[u64], action: &[T], code: usize| -> Vec<T> {
                let mut v = state_features(loads);
                v.extend_from_slice(action);
                v.extend((0..n_actions).map(|c| if c == code { T::one() } else { T::zero() }));
                v
            };
            for s in build_truncated_samples(records)? {
                let code = action_offsets[s.intersection] + s.phase;
                let input = qbar_input(&s.start_loads, &samples[s.record].a, code);
                truncated.push((input, T::of(s.target * reward_scale)));
            }
            for (k, r) in records.iter().enumerate() {
                let len = r.trace.len() as f64;
                let mut terms = vec![];
                for j in 0..n_agents {
                    let starts = r.trace.phase_starts(j);
                    for (i, &b) in base.intersection(j).iter().enumerate() {
                        let b_steps = (b / sampling_len.max(1)) as f64;
                        terms.push(PhaseTerm {
                            agent: j,
                            weight: T::of(b_steps / len),
                            input: qbar_input(r.trace.loads_at(starts[i]), &samples[k].a, action_offsets[j] + i),
                        });
                    }
                }
                phase_terms.push(terms);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let x_len = samples[0].x.len();
        let sizes = |input: usize, output: usize| -> Vec<usize> {
            std::iter::once(input).chain(cfg.hidden.iter().copied()).chain(std::iter::once(output)).collect()
        };
        let mut actors = vec![];
        for (j, &n) in shape.iter().enumerate() {
            let mut actor = Mlp::new(&sizes(samples[0].obs[j].len(), n), OutputActivation::Bounded, &mut rng)?;
            let last = actor.layers.last_mut().expect("at least one layer");
            for w in &mut last.weights {
                *w = *w * T::of(cfg.actor_output_scale);
            }
            actors.push(actor);
        }
        let mut critics = vec![];
        for _ in 0..n_agents {
            critics.push(Mlp::new(&sizes(x_len + n_actions, 1), OutputActivation::Identity, &mut rng)?);
        }
        let qbar = if ablation.batch_augmentation {
            let net = Mlp::new(&sizes(n_links + 2 * n_actions, 1), OutputActivation::Identity, &mut rng)?;
            let opt = Adam::new(&net, T::of(cfg.truncated_lr));
            Some((net, opt))
        } else {
            None
        };
        let actor_opts = actors.iter().map(|a| Adam::new(a, T::of(cfg.actor_lr))).collect();
        let critic_opts = critics.iter().map(|c| Adam::new(c, T::of(cfg.critic_lr))).collect();

        Ok(Trainer {
            cfg: cfg.clone(),
            base: base.clone(),
            boxes,
            sampling_len,
            coding,
            n_agents,
            action_offsets,
            n_actions,
            reward_scale,
            clip,
            samples,
            derived,
            truncated,
            phase_terms,
            actor_targets: actors.clone(),
            actors,
            actor_opts,
            critic_targets: critics.clone(),
            critics,
            critic_opts,
            qbar,
            rng,
            iteration: 0,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.n_agents
    }

    pub fn num_records(&self) -> usize {
        self.samples.len()
    }

    /// Extra critic samples from two-phase augmentation, per agent.
    pub fn num_derived(&self, agent: usize) -> usize {
        self.derived.get(agent).map_or(0, Vec::len)
    }

    pub fn num_truncated(&self) -> usize {
        self.truncated.len()
    }

    /// Multiplier applied to every reward read from the batch.
    pub fn reward_scale(&self) -> f64 {
        self.reward_scale
    }

    /// Clipping levels in batch units (unscaled).
    pub fn clip_levels(&self) -> Vec<f64> {
        self.clip.iter().map(|c| c.as_f64() / self.reward_scale).collect()
    }

    pub fn actors(&self) -> &[Mlp<T>] {
        &self.actors
    }

    pub fn actors_mut(&mut self) -> &mut [Mlp<T>] {
        &mut self.actors
    }

    pub fn critics(&self) -> &[Mlp<T>] {
        &self.critics
    }

    pub fn critics_mut(&mut self) -> &mut [Mlp<T>] {
        &mut self.critics
    }

    pub fn truncated_net(&self) -> Option<&Mlp<T>> {
        self.qbar.as_ref().map(|(n, _)| n)
    }

    pub fn truncated_net_mut(&mut self) -> Option<&mut Mlp<T>> {
        self.qbar.as_mut().map(|(n, _)| n)
    }

    pub fn policy(&self) -> DecentralizedPolicy<T> {
        DecentralizedPolicy {
            actors: self.actors.clone(),
            base_plan: self.base.clone(),
            bounded: self.cfg.ablation.bounded_action,
            delta: self.cfg.delta,
            sampling_len: self.sampling_len,
            boxes: self.boxes.clone(),
        }
    }

    fn pool_len(&self, agent: usize) -> usize {
        self.samples.len() + self.derived[agent].len()
    }

    fn sample(&self, agent: usize, idx: usize) -> &Sample<T> {
        if idx < self.samples.len() {
            &self.samples[idx]
        } else {
            &self.derived[agent][idx - self.samples.len()]
        }
    }

    fn draw(&mut self, pool: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..pool)).collect()
    }

    fn critic_input(x: &[T], a: &[T]) -> Vec<T> {
        let mut v = Vec::with_capacity(x.len() + a.len());
        v.extend_from_slice(x);
        v.extend_from_slice(a);
        v
    }

    /// Immediate-reward estimate from the truncated-value network:
    /// `Σ_i (b_i / ℓ(a)) · Q̄(s'_i, a, i)` over the agent's phases.
    fn truncated_estimate(&self, agent: usize, record: usize) -> Result<T> {
        let (net, _) = self.qbar.as_ref().expect("augmentation enabled");
        let mut total = T::zero();
        for term in self.phase_terms[record].iter().filter(|t| t.agent == agent) {
            total = total + term.weight * net.forward(&term.input)?[0];
        }
        Ok(total)
    }

    /// Bootstrapped targets `y` for `agent`'s critic on the given pool
    /// indices.
    pub fn critic_targets(&self, agent: usize, batch: &[usize]) -> Result<Vec<T>> {
        let gamma = T::of(self.cfg.gamma);
        let alpha = T::of(self.cfg.alpha_src);
        let ablation = self.cfg.ablation;
        batch
            .iter()
            .map(|&idx| {
                let s = self.sample(agent, idx);
                let mut reward = match (ablation.batch_augmentation, s.record) {
                    (true, Some(k)) => self.truncated_estimate(agent, k)?,
                    _ => s.reward_global,
                };
                if ablation.src {
                    let local = s.reward_local[agent].min(self.clip[agent]);
                    reward = alpha * reward + (T::one() - alpha) * local;
                }
                let mut next_a = Vec::with_capacity(self.n_actions);
                for (k, o) in s.next_obs.iter().enumerate() {
                    next_a.extend(self.actor_targets[k].forward(o)?);
                }
                let q_next = self.critic_targets[agent].forward(&Self::critic_input(&s.next_x, &next_a))?[0];
                Ok(reward + gamma * q_next)
            })
            .collect()
    }

    /// Mean squared error of `agent`'s critic and its gradient.
    pub fn critic_loss_and_grad(&self, agent: usize, batch: &[usize]) -> Result<(T, Gradients<T>)> {
        let targets = self.critic_targets(agent, batch)?;
        let critic = &self.critics[agent];
        let mut grads = Gradients::zeros_like(critic);
        let n = T::of(batch.len() as f64);
        let mut loss = T::zero();
        for (&idx, &y) in batch.iter().zip(&targets) {
            let s = self.sample(agent, idx);
            let input = Self::critic_input(&s.x, &s.a);
            critic.forward_backward(&input, &mut grads, |q| {
                let err = q[0] - y;
                loss = loss + err * err / n;
                vec![T::of(2.0) * err / n]
            })?;
        }
        Ok((finite(loss, "critic loss")?, grads))
    }

    pub fn critic_update(&mut self, agent: usize, batch: &[usize]) -> Result<T> {
        let (loss, grads) = self.critic_loss_and_grad(agent, batch)?;
        self.critic_opts[agent].step(&mut self.critics[agent], &grads)?;
        Ok(loss)
    }

    /// Mean critic value when `agent` plays its actor's output and the
    /// other agents keep the recorded actions, with the gradient of that
    /// value with respect to the actor's parameters. Actor outputs enter
    /// the critic through a smooth stand-in for the decoder, which agrees
    /// with the coding of the decoded plan up to rounding and clipping.
    pub fn actor_objective_and_grad(&self, agent: usize, batch: &[usize]) -> Result<(T, Gradients<T>)> {
        let actor = &self.actors[agent];
        let critic = &self.critics[agent];
        let mut grads = Gradients::zeros_like(actor);
        let n = T::of(batch.len() as f64);
        let (lo, hi) = (self.action_offsets[agent], self.action_offsets[agent + 1]);
        let mut objective = T::zero();
        for &idx in batch {
            let s = &self.samples[idx];
            let offset = s.x.len();
            let mut critic_result = Ok(());
            actor.forward_backward(&s.obs[agent], &mut grads, |out| {
                let mut a = s.a.clone();
                a[lo..hi].copy_from_slice(&self.coding.relax(out));
                let input = Self::critic_input(&s.x, &a);
                match critic.input_gradient(&input, &[T::one() / n]) {
                    Ok((q, dinput)) => {
                        objective = objective + q[0] / n;
                        self.coding.relax_backward(&dinput[offset + lo..offset + hi])
                    }
                    Err(e) => {
                        critic_result = Err(e);
                        vec![T::zero(); hi - lo]
                    }
                }
            })?;
            critic_result?;
        }
        Ok((finite(objective, "actor objective")?, grads))
    }

    /// Gradient ascent on the actor objective.
    pub fn actor_update(&mut self, agent: usize, batch: &[usize]) -> Result<T> {
        let (objective, mut grads) = self.actor_objective_and_grad(agent, batch)?;
        grads.scale(-T::one());
        self.actor_opts[agent].step(&mut self.actors[agent], &grads)?;
        Ok(objective)
    }

    /// One regression step of the truncated-value network.
    pub fn truncated_update(&mut self, batch: &[usize]) -> Result<T> {
        let (net, opt) = self
            .qbar
            .as_mut()
            .ok_or_else(|| Error::Config("batch augmentation is disabled".into()))?;
        let mut grads = Gradients::zeros_like(net);
        let n = T::of(batch.len() as f64);
        let mut loss = T::zero();
        for &k in batch {
            let (input, target) = &self.truncated[k];
            net.forward_backward(input, &mut grads, |q| {
                let err = q[0] - *target;
                loss = loss + err * err / n;
                vec![T::of(2.0) * err / n]
            })?;
        }
        finite(loss, "truncated-value loss")?;
        opt.step(net, &grads)?;
        Ok(loss)
    }

    fn soft_update_targets(&mut self) -> Result<()> {
        let tau = T::of(self.cfg.tau);
        for (t, o) in self.actor_targets.iter_mut().zip(&self.actors) {
            t.soft_update(o, tau)?;
        }
        for (t, o) in self.critic_targets.iter_mut().zip(&self.critics) {
            t.soft_update(o, tau)?;
        }
        Ok(())
    }

    /// One training iteration over every network.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let truncated_loss = if self.qbar.is_some() && !self.truncated.is_empty() {
            let b = self.draw(self.truncated.len());
            Some(self.truncated_update(&b)?.as_f64())
        } else {
            None
        };
        let mut critic_loss = 0.0;
        for j in 0..self.n_agents {
            let b = self.draw(self.pool_len(j));
            critic_loss += self.critic_update(j, &b)?.as_f64();
        }
        let mut actor_objective = 0.0;
        for j in 0..self.n_agents {
            let b = self.draw(self.samples.len());
            actor_objective += self.actor_update(j, &b)?.as_f64();
        }
        self.soft_update_targets()?;
        let row = HistoryRow {
            iteration: self.iteration,
            critic_loss: critic_loss / self.n_agents as f64,
            actor_objective: actor_objective / self.n_agents as f64,
            truncated_loss,
            eval_fitness: None,
        };
        self.iteration += 1;
        Ok(row)
    }
}

/// Caller-supplied policy evaluation, used for reporting only.
pub type Evaluator<'a, T> = dyn FnMut(&DecentralizedPolicy<T>) -> Result<f64> + 'a;

/// Trains decentralized actors from the batch alone. When `evaluator` is
/// given and `eval_every > 0`, the current policy is scored periodically;
/// those scores go into the history and nowhere else.
pub fn train_offline<T: Scalar>(
    batch: &BatchDataset,
    base: &SignalPlan,
    specs: &[IntersectionSpec],
    sampling_len: u32,
    cfg: &MaddpgConfig,
    mut evaluator: Option<&mut Evaluator<'_, T>>,
) -> Result<(DecentralizedPolicy<T>, TrainingHistory)> {
    let mut trainer = Trainer::new(batch, base, specs, sampling_len, cfg)?;
    let mut history = TrainingHistory { label: cfg.ablation.label(), ..TrainingHistory::default() };
    for it in 0..cfg.iterations {
        let mut row = trainer.step()?;
        if let Some(eval) = evaluator.as_mut() {
            if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
                row.eval_fitness = Some(eval(&trainer.policy())?);
                history.evaluations += 1;
            }
        }
        history.rows.push(row);
    }
    Ok((trainer.policy(), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::{collect_batch, Ablation, CollectConfig};
    use crate::scenario::corridor_network;

    fn setup(eta: u32) -> (BatchDataset, SignalPlan, Vec<IntersectionSpec>) {
        let mut spec = corridor_network(0.8, 0.3, 2);
        spec.horizon = 4;
        let base = SignalPlan::new(vec![vec![20, 16], vec![18, 18]]).unwrap();
        let cfg = CollectConfig { episodes: 3, eta, seed: 4, ..CollectConfig::default() };
        (collect_batch(&base, &spec, &cfg).unwrap(), base, spec.intersections)
    }

    fn small_cfg(ablation: Ablation) -> MaddpgConfig {
        MaddpgConfig { hidden: vec![8, 8], batch_size: 8, iterations: 5, ablation, ..MaddpgConfig::default() }
    }

    #[test]
    fn vanishing_discount_targets_the_reward() {
        let (batch, base, specs) = setup(2);
        let cfg = MaddpgConfig { gamma: 1e-12, ..small_cfg(Ablation::BASELINE) };
        let t = Trainer::<f64>::new(&batch, &base, &specs, 2, &cfg).unwrap();
        let idx: Vec<usize> = (0..t.num_records()).collect();
        let y = t.critic_targets(0, &idx).unwrap();
        for (k, y) in idx.iter().zip(y) {
            let r = batch.records[*k].global_reward * t.reward_scale();
            assert!((y - r).abs() < 1e-9, "{y} vs {r}");
        }
    }

    #[test]
    fn critic_fits_one_record_against_frozen_targets() {
        let (batch, base, specs) = setup(2);
        let cfg = MaddpgConfig { critic_lr: 1e-2, ..small_cfg(Ablation::FULL) };
        let mut t = Trainer::<f64>::new(&batch, &base, &specs, 2, &cfg).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            loss = t.critic_update(1, &[0]).unwrap();
        }
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn constant_truncated_value_is_the_reward_estimate_on_the_base_plan() {
        let (batch, base, specs) = setup(0);
        let cfg = MaddpgConfig {
            gamma: 1e-12,
            ablation: Ablation { src: false, ..Ablation::FULL },
            ..small_cfg(Ablation::FULL)
        };
        let mut t = Trainer::<f64>::new(&batch, &base, &specs, 2, &cfg).unwrap();
        assert!(t.num_truncated() > 0 && t.num_derived(0) > 0);
        let net = t.truncated_net_mut().unwrap();
        let mut p = vec![0.0; net.num_params()];
        *p.last_mut().unwrap() = -0.75;
        net.set_params(&p).unwrap();
        let idx: Vec<usize> = (0..t.num_records()).collect();
        for j in 0..2 {
            for y in t.critic_targets(j, &idx).unwrap() {
                assert!((y + 0.75).abs() < 1e-9, "{y}");
            }
        }
    }

    #[test]
    fn zero_critic_gives_zero_actor_gradient() {
        let (batch, base, specs) = setup(2);
        let mut t = Trainer::<f64>::new(&batch, &base, &specs, 2, &small_cfg(Ablation::FULL)).unwrap();
        for c in t.critics_mut() {
            let n = c.num_params();
            c.set_params(&vec![0.0; n]).unwrap();
        }
        let (obj, g) = t.actor_objective_and_grad(0, &[0, 1, 2, 3]).unwrap();
        assert_eq!(obj, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let (batch, base, specs) = setup(2);
        let mut t = Trainer::<f64>::new(&batch, &base, &specs, 2, &small_cfg(Ablation::FULL)).unwrap();
        let idx = [0, 3, 5, 7];
        let (_, g) = t.actor_objective_and_grad(1, &idx).unwrap();
        let g = g.flat();
        let p0 = t.actors()[1].params();
        let h = 1e-6;
        for i in (0..p0.len()).step_by(7) {
            let mut p = p0.clone();
            p[i] += h;
            t.actors_mut()[1].set_params(&p).unwrap();
            let up = t.actor_objective_and_grad(1, &idx).unwrap().0;
            p[i] -= 2.0 * h;
            t.actors_mut()[1].set_params(&p).unwrap();
            let down = t.actor_objective_and_grad(1, &idx).unwrap().0;
            t.actors_mut()[1].set_params(&p0).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (batch, base, specs) = setup(2);
        let cfg = small_cfg(Ablation::FULL);
        let run = || train_offline::<f64>(&batch, &base, &specs, 2, &cfg, None).unwrap();
        let (p1, h1) = run();
        let (p2, h2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_eq!(h1.rows.len(), 5);
        assert!(h1.rows.iter().all(|r| r.truncated_loss.is_some()));
        let mut csv = vec![];
        h1.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 6);
    }

    #[test]
    fn evaluator_is_called_on_schedule() {
        let (batch, base, specs) = setup(2);
        let cfg = MaddpgConfig { iterations: 6, eval_every: 2, ..small_cfg(Ablation::BASELINE) };
        let mut calls = 0;
        let mut eval = |_: &DecentralizedPolicy<f64>| -> Result<f64> {
            calls += 1;
            Ok(-1.0)
        };
        let (_, h) = train_offline(&batch, &base, &specs, 2, &cfg, Some(&mut eval)).unwrap();
        assert_eq!(h.evaluations, 3);
        assert_eq!(h.rows.iter().filter(|r| r.eval_fitness.is_some()).count(), 3);
        assert_eq!(calls, 3);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (mut batch, base, specs) = setup(2);
        batch.records.clear();
        let r = Trainer::<f64>::new(&batch, &base, &specs, 2, &small_cfg(Ablation::FULL));
        assert!(matches!(r, Err(Error::EmptyBatch)));
    }

    #[test]
    fn single_precision_trains() {
        let (batch, base, specs) = setup(2);
        let (p, _) = train_offline::<f32>(&batch, &base, &specs, 2, &small_cfg(Ablation::FULL), None).unwrap();
        p.check().unwrap();
    }
}
