//! Sequential multi-agent PPO with a shared critic.
//!
//! Each iteration collects a batch of episodes with the current actors,
//! estimates advantages with GAE over the joint reward, then updates the
//! actors one at a time in a shuffled order. Every agent after the first
//! optimizes an advantage that has been multiplied by the probability ratios
//! of the agents already updated in this iteration. The critic regresses onto
//! the GAE returns.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Architecture, Network, NetworkSpec};
use crate::nn;
use crate::obsmap::feature_len;
use crate::policy::{ActionDistribution, CheckpointMeta, PolicySet};
use crate::seed;
use crate::trace::Episode;
use crate::world::{Action, ActionMask, EnvConfig, RewardCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Training iterations (n_e); each collects `batch` episodes.
    pub episodes: usize,
    /// Steps per episode (n_s).
    pub steps: usize,
    /// Episodes per iteration (n_b).
    pub batch: usize,
    pub clip: f64,
    pub ppo_epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    /// Rescale each update's gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    pub architecture: Architecture,
    /// Periodic checkpoint interval in iterations; 0 keeps only init and final.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            steps: 200,
            batch: 8,
            clip: 0.2,
            ppo_epochs: 5,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 0.0,
            max_grad_norm: None,
            architecture: Architecture::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Small networks and a larger step size for desk-scale runs.
    pub fn lite() -> Self {
        Self {
            episodes: 500,
            steps: 50,
            batch: 8,
            actor_lr: 0.02,
            critic_lr: 0.01,
            max_grad_norm: Some(1.0),
            architecture: Architecture::mlp(&[64, 64]),
            checkpoint_every: 100,
            ..Self::default()
        }
    }

    /// The 6×6, two-agent arena [`TrainConfig::lite`] is tuned for.
    pub fn lite_env() -> EnvConfig {
        EnvConfig { rows: 6, cols: 6, n_agents: 2, reward_case: RewardCase::Case2, ..EnvConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.episodes == 0 || self.steps == 0 || self.batch == 0 || self.ppo_epochs == 0 {
            return bad("episodes, steps, batch and ppo_epochs must be at least 1".into());
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip {} outside (0, 1)", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("gamma {} and lambda {} must lie in (0, 1]", self.gamma, self.lambda));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("learning rates must be positive and entropy_coef non-negative".into());
        }
        if self.max_grad_norm.is_some_and(|g| !(g > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        self.architecture.validate()
    }
}

/// Joint experience of one batch, flattened over episodes in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub n_agents: usize,
    pub obs_len: usize,
    /// Concatenated per-agent features; also the critic input.
    pub joint_obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<u8>>,
    pub log_probs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<ActionMask>>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// True on the last step of each episode.
    pub dones: Vec<bool>,
    pub episode_returns: Vec<f64>,
    pub final_max_ratios: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn agent_obs(&self, t: usize, agent: usize) -> &[f64] {
        &self.joint_obs[t][agent * self.obs_len..(agent + 1) * self.obs_len]
    }

    fn extend(&mut self, other: RolloutBuffer) {
        self.joint_obs.extend(other.joint_obs);
        self.actions.extend(other.actions);
        self.log_probs.extend(other.log_probs);
        self.masks.extend(other.masks);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.dones.extend(other.dones);
        self.episode_returns.extend(other.episode_returns);
        self.final_max_ratios.extend(other.final_max_ratios);
    }

    pub fn mean_return(&self) -> f64 {
        mean(&self.episode_returns)
    }

    pub fn mean_final_ratio(&self) -> f64 {
        mean(&self.final_max_ratios)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_shapes(env: &EnvConfig, actors: &[Network], critic: &Network) -> Result<()> {
    let n = env.n_agents;
    if actors.len() != n {
        return Err(Error::ShapeMismatch(format!("{} actors for {n} agents", actors.len())));
    }
    let obs_len = feature_len(n);
    for a in actors {
        if a.input_len() != obs_len || a.output_len() != crate::world::N_ACTIONS {
            return Err(Error::ShapeMismatch(format!("actor expects {} inputs, env gives {obs_len}", a.input_len())));
        }
    }
    if critic.input_len() != n * obs_len || critic.output_len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "critic expects {} inputs, env gives {}",
            critic.input_len(),
            n * obs_len
        )));
    }
    Ok(())
}

fn collect_episode(env: &EnvConfig, actors: &[Network], critic: &Network, steps: usize, seed: u64) -> Result<RolloutBuffer> {
    let env = EnvConfig { horizon: steps, ..env.clone() };
    let n = env.n_agents;
    let mut episode = Episode::new(env, seed)?;
    let mut rngs: Vec<_> = (0..n).map(|i| seed::derived_rng(seed, "policy", i as u64)).collect();
    let mut buf = RolloutBuffer { n_agents: n, obs_len: feature_len(n), ..Default::default() };
    let mut ret = 0.0;
    while !episode.done() {
        let obs = episode.observations();
        let joint: Vec<f64> = obs.iter().flat_map(|o| o.features()).collect();
        let value = critic.forward(&joint)?[0];
        let mut actions = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut lps = Vec::with_capacity(n);
        for (i, o) in obs.iter().enumerate() {
            let x = &joint[i * buf.obs_len..(i + 1) * buf.obs_len];
            let dist = ActionDistribution::new(&actors[i].forward(x)?, o.mask)?;
            let a = dist.sample(&mut rngs[i]);
            lps.push(dist.log_probs[a.id() as usize]);
            ids.push(a.id());
            actions.push(a);
        }
        let outcome = episode.step(&actions)?;
        ret += outcome.joint_reward;
        buf.joint_obs.push(joint);
        buf.actions.push(ids);
        buf.log_probs.push(lps);
        buf.masks.push(obs.iter().map(|o| o.mask).collect());
        buf.rewards.push(outcome.joint_reward);
        buf.values.push(value);
        buf.dones.push(outcome.done);
    }
    buf.episode_returns.push(ret);
    buf.final_max_ratios.push(episode.trace().final_max_ratio());
    Ok(buf)
}

/// Runs `train.batch` episodes of `train.steps` steps; episode `b` uses seed `derive(seed, "episode", b)`.
pub fn collect_rollout(
    env: &EnvConfig,
    actors: &[Network],
    critic: &Network,
    train: &TrainConfig,
    seed: u64,
) -> Result<RolloutBuffer> {
    check_shapes(env, actors, critic)?;
    let parts: Vec<RolloutBuffer> = (0..train.batch)
        .into_par_iter()
        .map(|b| collect_episode(env, actors, critic, train.steps, seed::derive(seed, "episode", b as u64)))
        .collect::<Result<_>>()?;
    let mut buf = RolloutBuffer { n_agents: env.n_agents, obs_len: feature_len(env.n_agents), ..Default::default() };
    for p in parts {
        buf.extend(p);
    }
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    /// Pre-normalization GAE advantages.
    pub raw: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE over one reward stream; `dones[t]` stops bootstrapping past `t`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Advantages {
    let n = rewards.len();
    let mut raw = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] || t + 1 == n { (0.0, 0.0) } else { (values[t + 1], next_adv) };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * carry;
        raw[t] = next_adv;
    }
    let returns = raw.iter().zip(values).map(|(a, v)| a + v).collect();
    Advantages { raw, returns }
}

pub fn compute_advantages(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Advantages {
    gae(&buffer.rewards, &buffer.values, &buffer.dones, gamma, lambda)
}

/// Zero mean, unit variance; constant inputs map to zeros.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / sd).collect()
}

/// Samples for one agent's policy update.
#[derive(Debug, Clone, Copy)]
pub struct ActorBatch<'a> {
    pub buffer: &'a RolloutBuffer,
    pub agent: usize,
    pub advantages: &'a [f64],
}

impl ActorBatch<'_> {
    fn len(&self) -> usize {
        self.buffer.len()
    }

    fn obs(&self, t: usize) -> &[f64] {
        self.buffer.agent_obs(t, self.agent)
    }

    fn action(&self, t: usize) -> usize {
        self.buffer.actions[t][self.agent] as usize
    }

    fn mask(&self, t: usize) -> ActionMask {
        self.buffer.masks[t][self.agent]
    }

    fn old_log_prob(&self, t: usize) -> f64 {
        self.buffer.log_probs[t][self.agent]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub clip_fraction: f64,
    pub entropy: f64,
}

/// Clipped surrogate (plus entropy bonus) averaged over the batch, and its gradient.
pub fn surrogate(actor: &Network, batch: &ActorBatch<'_>, clip: f64, entropy_coef: f64) -> Result<Surrogate> {
    let n = batch.len();
    let mut grad = vec![0.0; actor.param_count()];
    let mut objective = 0.0;
    let mut clipped_count = 0usize;
    let mut entropy_sum = 0.0;
    for t in 0..n {
        let (logits, tape) = actor.forward_train(batch.obs(t))?;
        let mask = batch.mask(t);
        let lp = nn::masked_log_softmax(&logits, |i| mask.is_available_id(i));
        let a = batch.action(t);
        let ratio = (lp[a] - batch.old_log_prob(t)).exp();
        let m = batch.advantages[t];
        let unclipped = ratio * m;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * m;
        objective += unclipped.min(clipped);
        let mut dlogits = vec![0.0; logits.len()];
        if unclipped <= clipped {
            for (d, g) in dlogits.iter_mut().zip(nn::log_prob_grad(&lp, a)) {
                *d = m * ratio * g;
            }
        } else {
            clipped_count += 1;
        }
        let h: f64 = lp.iter().filter(|v| v.is_finite()).map(|&l| -l.exp() * l).sum();
        entropy_sum += h;
        if entropy_coef != 0.0 {
            objective += entropy_coef * h;
            for (i, d) in dlogits.iter_mut().enumerate() {
                if lp[i].is_finite() {
                    *d -= entropy_coef * lp[i].exp() * (lp[i] + h);
                }
            }
        }
        let scaled: Vec<f64> = dlogits.iter().map(|d| d / n as f64).collect();
        actor.backward(&tape, &scaled, &mut grad);
    }
    let objective = objective / n as f64;
    if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("surrogate of agent {}", batch.agent)));
    }
    Ok(Surrogate { objective, grad, clip_fraction: clipped_count as f64 / n as f64, entropy: entropy_sum / n as f64 })
}

fn clip_norm(grad: &mut [f64], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Log-probabilities of the taken actions under `actor`.
fn taken_log_probs(actor: &Network, batch: &ActorBatch<'_>) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|t| {
            let logits = actor.forward(batch.obs(t))?;
            let mask = batch.mask(t);
            Ok(nn::masked_log_softmax(&logits, |i| mask.is_available_id(i))[batch.action(t)])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorDiagnostics {
    pub agent: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Mean new/old probability ratio of the taken actions after the update.
    pub mean_ratio: f64,
}

/// `ppo_epochs` full-batch ascent steps on one agent's clipped surrogate.
///
/// Returns the diagnostics and the per-sample post/pre probability ratios.
pub fn update_actor(actor: &mut Network, batch: &ActorBatch<'_>, cfg: &TrainConfig) -> Result<(ActorDiagnostics, Vec<f64>)> {
    let mut before = None;
    let mut last = None;
    for _ in 0..cfg.ppo_epochs {
        let mut s = surrogate(actor, batch, cfg.clip, cfg.entropy_coef)?;
        before.get_or_insert(s.objective);
        clip_norm(&mut s.grad, cfg.max_grad_norm);
        for (p, g) in actor.params_mut().iter_mut().zip(&s.grad) {
            *p += cfg.actor_lr * g;
        }
        last = Some(s);
    }
    let after = surrogate(actor, batch, cfg.clip, cfg.entropy_coef)?;
    let new_lp = taken_log_probs(actor, batch)?;
    let ratios: Vec<f64> = new_lp.iter().enumerate().map(|(t, lp)| (lp - batch.old_log_prob(t)).exp()).collect();
    let last = last.expect("ppo_epochs is at least 1");
    Ok((
        ActorDiagnostics {
            agent: batch.agent,
            objective_before: before.expect("ppo_epochs is at least 1"),
            objective_after: after.objective,
            clip_fraction: last.clip_fraction,
            entropy: after.entropy,
            mean_ratio: mean(&ratios),
        },
        ratios,
    ))
}

/// Updates actors in `order`, carrying the multiplicative advantage correction.
pub fn update_actors_sequential(
    actors: &mut [Network],
    buffer: &RolloutBuffer,
    advantages: &[f64],
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<ActorDiagnostics>> {
    let mut corrected = advantages.to_vec();
    let mut diags = Vec::with_capacity(order.len());
    for &agent in order {
        let batch = ActorBatch { buffer, agent, advantages: &corrected };
        let (diag, ratios) = update_actor(&mut actors[agent], &batch, cfg)?;
        for (m, r) in corrected.iter_mut().zip(&ratios) {
            *m *= r;
        }
        diags.push(diag);
    }
    diags.sort_by_key(|d| d.agent);
    Ok(diags)
}

/// `mean((pred - target)^2)` and its derivative with respect to each prediction.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    (loss, grad)
}

/// Critic MSE over `inputs` and the gradient of the loss.
pub fn critic_loss(critic: &Network, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut preds = Vec::with_capacity(inputs.len());
    let mut tapes = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (out, tape) = critic.forward_train(x)?;
        preds.push(out[0]);
        tapes.push(tape);
    }
    let (loss, dpred) = mse(&preds, targets);
    let mut grad = vec![0.0; critic.param_count()];
    for (tape, d) in tapes.iter().zip(dpred) {
        critic.backward(tape, &[d], &mut grad);
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("critic loss".into()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticDiagnostics {
    pub loss_before: f64,
    pub loss_after: f64,
}

pub fn update_critic(critic: &mut Network, inputs: &[Vec<f64>], returns: &[f64], cfg: &TrainConfig) -> Result<CriticDiagnostics> {
    let mut before = None;
    for _ in 0..cfg.ppo_epochs {
        let (loss, mut grad) = critic_loss(critic, inputs, returns)?;
        before.get_or_insert(loss);
        clip_norm(&mut grad, cfg.max_grad_norm);
        for (p, g) in critic.params_mut().iter_mut().zip(&grad) {
            *p -= cfg.critic_lr * g;
        }
    }
    let (after, _) = critic_loss(critic, inputs, returns)?;
    Ok(CriticDiagnostics { loss_before: before.expect("ppo_epochs is at least 1"), loss_after: after })
}

/// One row of the learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub mean_return: f64,
    pub exploration_ratio: f64,
    pub actor_objectives: Vec<f64>,
    pub critic_loss: f64,
}

impl CurveRecord {
    fn csv_header(n_agents: usize) -> String {
        let mut h = String::from("iteration,mean_return,exploration_ratio");
        for i in 0..n_agents {
            h.push_str(&format!(",actor_loss_{i}"));
        }
        h.push_str(",critic_loss\n");
        h
    }

    fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.iteration, self.mean_return, self.exploration_ratio);
        for o in &self.actor_objectives {
            // Reported as a loss: the negated surrogate.
            r.push_str(&format!(",{}", -o));
        }
        r.push_str(&format!(",{}\n", self.critic_loss));
        r
    }
}

pub const CURVE_FILE: &str = "learning_curve.csv";

/// Trainer state: networks, configs and the iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub env: EnvConfig,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub actors: Vec<Network>,
    pub critic: Network,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(env: EnvConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        env.validate()?;
        cfg.validate()?;
        let n = env.n_agents;
        let actors = (0..n)
            .map(|i| Network::new(NetworkSpec::actor(cfg.architecture.clone(), n), &mut seed::derived_rng(seed, "init", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let critic = Network::new(
            NetworkSpec::critic(cfg.architecture.clone(), n),
            &mut seed::derived_rng(seed, "init", n as u64),
        )?;
        Ok(Self { env, cfg, seed, actors, critic, iteration: 0 })
    }

    pub fn policy_set(&self) -> PolicySet {
        PolicySet {
            actors: self.actors.clone(),
            critic: Some(self.critic.clone()),
            meta: CheckpointMeta { iteration: self.iteration as u64, env: Some(self.env.clone()) },
        }
    }

    /// Collect, estimate advantages, update actors sequentially, update the critic.
    pub fn iterate(&mut self) -> Result<CurveRecord> {
        let it = self.iteration;
        let buffer = collect_rollout(&self.env, &self.actors, &self.critic, &self.cfg, seed::derive(self.seed, "iteration", it as u64))?;
        let adv = compute_advantages(&buffer, self.cfg.gamma, self.cfg.lambda);
        let normalized = normalize(&adv.raw);
        let mut order: Vec<usize> = (0..self.env.n_agents).collect();
        order.shuffle(&mut seed::derived_rng(self.seed, "order", it as u64));
        let diags = update_actors_sequential(&mut self.actors, &buffer, &normalized, &order, &self.cfg)?;
        let critic = update_critic(&mut self.critic, &buffer.joint_obs, &adv.returns, &self.cfg)?;
        self.iteration += 1;
        Ok(CurveRecord {
            iteration: it,
            mean_return: buffer.mean_return(),
            exploration_ratio: buffer.mean_final_ratio(),
            actor_objectives: diags.iter().map(|d| d.objective_before).collect(),
            critic_loss: critic.loss_before,
        })
    }
}

pub fn checkpoint_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("checkpoint_{label}.swmp"))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub policies: PolicySet,
}

/// Full training run. With an output directory, writes `checkpoint_init`,
/// periodic and `checkpoint_final` files plus an append-only learning curve.
pub fn train(
    env: &EnvConfig,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    mut on_iteration: impl FnMut(&CurveRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(env.clone(), cfg.clone(), seed)?;
    let mut checkpoints = Vec::new();
    let mut curve_file: Option<File> = None;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = checkpoint_path(dir, "init");
        trainer.policy_set().save(&path)?;
        checkpoints.push(path);
        let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(dir.join(CURVE_FILE))?;
        f.write_all(CurveRecord::csv_header(env.n_agents).as_bytes())?;
        curve_file = Some(f);
    }
    let mut curve = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let record = trainer.iterate()?;
        if let Some(f) = curve_file.as_mut() {
            f.write_all(record.csv_row().as_bytes())?;
            f.flush()?;
        }
        on_iteration(&record);
        curve.push(record);
        let done = trainer.iteration;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.episodes {
                let path = checkpoint_path(dir, &format!("{done:06}"));
                trainer.policy_set().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out {
        let path = checkpoint_path(dir, "final");
        trainer.policy_set().save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { curve, checkpoints, policies: trainer.policy_set() })
}

/// Reads a learning curve written by [`train`].
pub fn read_curve(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Trace("empty learning curve".into()))?;
    let n_actor = header.split(',').filter(|c| c.starts_with("actor_loss_")).count();
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::Trace(format!("learning curve line {}: malformed row", k + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 + n_actor {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurveRecord {
                iteration: cols[0].parse().map_err(|_| bad())?,
                mean_return: num(cols[1])?,
                exploration_ratio: num(cols[2])?,
                actor_objectives: cols[3..3 + n_actor].iter().map(|c| num(c).map(|v| -v)).collect::<Result<_>>()?,
                critic_loss: num(cols[3 + n_actor])?,
            })
        })
        .collect()
}

/// Joint action ids of a buffer step, for inspection.
pub fn step_actions(buffer: &RolloutBuffer, t: usize) -> Vec<Action> {
    buffer.actions[t].iter().map(|&id| Action::from_id(id).expect("stored ids are valid")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_env() -> EnvConfig {
        TrainConfig::lite_env()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            episodes: 1,
            steps: 5,
            batch: 2,
            architecture: Architecture::mlp(&[8, 6]),
            ..TrainConfig::default()
        }
    }

    fn tiny_buffer(seed_value: u64) -> (Vec<Network>, Network, RolloutBuffer) {
        let trainer = Trainer::new(tiny_env(), tiny_cfg(), seed_value).unwrap();
        let buf = collect_rollout(&trainer.env, &trainer.actors, &trainer.critic, &trainer.cfg, 1).unwrap();
        (trainer.actors, trainer.critic, buf)
    }

    #[test]
    fn buffer_has_steps_times_batch_rows() {
        let env = EnvConfig::default();
        let cfg = TrainConfig { steps: 20, batch: 3, architecture: Architecture::mlp(&[8]), ..TrainConfig::default() };
        let t = Trainer::new(env.clone(), cfg.clone(), 4).unwrap();
        let buf = collect_rollout(&env, &t.actors, &t.critic, &cfg, 9).unwrap();
        assert_eq!(buf.len(), 60);
        for len in [buf.joint_obs.len(), buf.actions.len(), buf.log_probs.len(), buf.masks.len(), buf.values.len(), buf.dones.len()] {
            assert_eq!(len, 60);
        }
        assert_eq!(buf.dones.iter().filter(|d| **d).count(), 3);
        assert_eq!(buf.joint_obs[0].len(), 148);
        let again = collect_rollout(&env, &t.actors, &t.critic, &cfg, 9).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn stay_actors_earn_minus_one_every_step() {
        let mut t = Trainer::new(EnvConfig::default(), TrainConfig { steps: 30, batch: 2, architecture: Architecture::mlp(&[4]), ..TrainConfig::default() }, 2).unwrap();
        for a in &mut t.actors {
            a.params_mut().fill(0.0);
            a.block_mut("head.bias").unwrap()[Action::STAY_ID as usize] = 60.0;
        }
        let buf = collect_rollout(&t.env, &t.actors, &t.critic, &t.cfg, 3).unwrap();
        assert!(buf.rewards.iter().all(|&r| r == -1.0));
    }

    #[test]
    fn gae_constant_reward_telescopes() {
        let t = 7;
        let adv = gae(&vec![2.0; t], &vec![0.0; t], &[vec![false; t - 1], vec![true]].concat(), 1.0, 1.0);
        for (k, a) in adv.raw.iter().enumerate() {
            assert_eq!(*a, 2.0 * (t - k) as f64);
        }
    }

    #[test]
    fn gae_with_perfect_critic_is_zero() {
        let rewards = [1.0, -0.5, 0.25, 3.0, 0.0, 1.0];
        let dones = [false, false, true, false, false, true];
        let gamma = 0.9;
        let mut values = vec![0.0; 6];
        for t in (0..6).rev() {
            values[t] = rewards[t] + if dones[t] { 0.0 } else { gamma * values[t + 1] };
        }
        let adv = gae(&rewards, &values, &dones, gamma, 0.8);
        assert!(adv.raw.iter().all(|a| a.abs() < 1e-12));
    }

    /// Direct double sum: A_t = Σ_l (γλ)^l δ_{t+l} within the episode.
    fn gae_oracle(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| {
                let next = if dones[t] || t + 1 == n { 0.0 } else { values[t + 1] };
                rewards[t] + gamma * next - values[t]
            })
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for l in t..n {
                    sum += w * delta[l];
                    if dones[l] {
                        break;
                    }
                    w *= gamma * lambda;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_matches_double_loop_oracle() {
        let mut rng = seed::rng(21);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
            dones[n - 1] = true;
            let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
            let got = gae(&rewards, &values, &dones, g, l);
            for (a, b) in got.raw.iter().zip(gae_oracle(&rewards, &values, &dones, g, l)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (mut actors, _, mut buf) = tiny_buffer(5);
        let mut rng = seed::rng(22);
        // Spread the old probabilities so ratios sit on both sides of the clip range.
        for lp in buf.log_probs.iter_mut().flatten() {
            *lp += rng.random_range(-0.6..0.6);
        }
        let adv: Vec<f64> = (0..buf.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actor = &mut actors[0];
        for p in actor.params_mut().iter_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let batch = ActorBatch { buffer: &buf, agent: 0, advantages: &adv };
        let s = surrogate(actor, &batch, 0.2, 0.01).unwrap();
        assert!(s.clip_fraction > 0.0 && s.clip_fraction < 1.0);
        let h = 1e-5;
        for k in 0..actor.param_count() {
            let orig = actor.params()[k];
            actor.params_mut()[k] = orig + h;
            let up = surrogate(actor, &batch, 0.2, 0.01).unwrap().objective;
            actor.params_mut()[k] = orig - h;
            let down = surrogate(actor, &batch, 0.2, 0.01).unwrap().objective;
            actor.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, s.grad[k]) < 1e-4, "param {k}: {fd} vs {}", s.grad[k]);
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let (_, mut critic, buf) = tiny_buffer(6);
        let mut rng = seed::rng(23);
        let targets: Vec<f64> = (0..buf.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = critic_loss(&critic, &buf.joint_obs, &targets).unwrap();
        let h = 1e-5;
        for k in 0..critic.param_count() {
            let orig = critic.params()[k];
            critic.params_mut()[k] = orig + h;
            let up = critic_loss(&critic, &buf.joint_obs, &targets).unwrap().0;
            critic.params_mut()[k] = orig - h;
            let down = critic_loss(&critic, &buf.joint_obs, &targets).unwrap().0;
            critic.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, grad[k]) < 1e-4, "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn ratio_one_surrogate_is_vanilla_policy_gradient() {
        let (actors, _, buf) = tiny_buffer(7);
        let adv = normalize(&compute_advantages(&buf, 0.99, 0.95).raw);
        let batch = ActorBatch { buffer: &buf, agent: 1, advantages: &adv };
        let s = surrogate(&actors[1], &batch, 0.2, 0.0).unwrap();
        let mut pg = vec![0.0; actors[1].param_count()];
        for t in 0..buf.len() {
            let (logits, tape) = actors[1].forward_train(buf.agent_obs(t, 1)).unwrap();
            let mask = buf.masks[t][1];
            let lp = nn::masked_log_softmax(&logits, |i| mask.is_available_id(i));
            let g: Vec<f64> = nn::log_prob_grad(&lp, buf.actions[t][1] as usize)
                .iter()
                .map(|v| v * adv[t] / buf.len() as f64)
                .collect();
            actors[1].backward(&tape, &g, &mut pg);
        }
        for (a, b) in s.grad.iter().zip(&pg) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.clip_fraction, 0.0);
    }

    #[test]
    fn unbounded_clip_single_epoch_follows_policy_gradient() {
        let (mut actors, _, buf) = tiny_buffer(8);
        let adv = normalize(&compute_advantages(&buf, 0.99, 0.95).raw);
        let batch = ActorBatch { buffer: &buf, agent: 0, advantages: &adv };
        let pg = surrogate(&actors[0], &batch, 1e9, 0.0).unwrap().grad;
        let before = actors[0].params().to_vec();
        let cfg = TrainConfig { clip: 1e9, ppo_epochs: 1, actor_lr: 1e-3, ..tiny_cfg() };
        update_actor(&mut actors[0], &batch, &cfg).unwrap();
        let delta: Vec<f64> = actors[0].params().iter().zip(&before).map(|(a, b)| a - b).collect();
        let dot: f64 = delta.iter().zip(&pg).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (norm(&delta) * norm(&pg)) > 0.999);
    }

    #[test]
    fn single_agent_sequence_is_plain_clipped_update() {
        let env = EnvConfig { n_agents: 1, ..tiny_env() };
        let t = Trainer::new(env.clone(), tiny_cfg(), 9).unwrap();
        let buf = collect_rollout(&env, &t.actors, &t.critic, &t.cfg, 2).unwrap();
        let adv = normalize(&compute_advantages(&buf, 0.99, 0.95).raw);
        let mut seq = t.actors.clone();
        update_actors_sequential(&mut seq, &buf, &adv, &[0], &t.cfg).unwrap();
        let mut direct = t.actors[0].clone();
        update_actor(&mut direct, &ActorBatch { buffer: &buf, agent: 0, advantages: &adv }, &t.cfg).unwrap();
        assert_eq!(seq[0].params(), direct.params());
    }

    #[test]
    fn correction_multiplies_by_earlier_agent_ratios() {
        let (actors, _, buf) = tiny_buffer(10);
        let adv = normalize(&compute_advantages(&buf, 0.99, 0.95).raw);
        let cfg = TrainConfig { actor_lr: 0.05, ..tiny_cfg() };
        let mut seq = actors.clone();
        update_actors_sequential(&mut seq, &buf, &adv, &[1, 0], &cfg).unwrap();
        let mut first = actors[1].clone();
        let (_, ratios) = update_actor(&mut first, &ActorBatch { buffer: &buf, agent: 1, advantages: &adv }, &cfg).unwrap();
        assert!(ratios.iter().any(|r| (r - 1.0).abs() > 1e-6));
        let corrected: Vec<f64> = adv.iter().zip(&ratios).map(|(a, r)| a * r).collect();
        let mut second = actors[0].clone();
        update_actor(&mut second, &ActorBatch { buffer: &buf, agent: 0, advantages: &corrected }, &cfg).unwrap();
        assert_eq!(seq[1].params(), first.params());
        assert_eq!(seq[0].params(), second.params());
    }

    #[test]
    fn critic_targets_equal_predictions_give_zero_gradient() {
        let (_, critic, buf) = tiny_buffer(11);
        let preds: Vec<f64> = buf.joint_obs.iter().map(|x| critic.forward(x).unwrap()[0]).collect();
        let (loss, grad) = critic_loss(&critic, &buf.joint_obs, &preds).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_least_squares_step_moves_toward_optimum() {
        let xs = [-1.0, 0.0, 0.5, 2.0, 3.0];
        let ys = [-1.5, 0.2, 1.1, 3.9, 6.2];
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let w_opt = sxy / sxx;
        let b_opt = my - w_opt * mx;
        let (mut w, mut b) = (0.0, 0.0);
        let dist = |w: f64, b: f64| ((w - w_opt).powi(2) + (b - b_opt).powi(2)).sqrt();
        let preds: Vec<f64> = xs.iter().map(|x| w * x + b).collect();
        let (loss0, dp) = mse(&preds, &ys);
        let gw: f64 = dp.iter().zip(&xs).map(|(d, x)| d * x).sum();
        let gb: f64 = dp.iter().sum();
        let d0 = dist(w, b);
        w -= 0.05 * gw;
        b -= 0.05 * gb;
        let preds: Vec<f64> = xs.iter().map(|x| w * x + b).collect();
        assert!(dist(w, b) < d0);
        assert!(mse(&preds, &ys).0 < loss0);
    }

    #[test]
    fn critic_loss_does_not_increase_on_fixture() {
        let (_, mut critic, buf) = tiny_buffer(12);
        let adv = compute_advantages(&buf, 0.99, 0.95);
        let cfg = TrainConfig { critic_lr: 1e-3, ..tiny_cfg() };
        let d = update_critic(&mut critic, &buf.joint_obs, &adv.returns, &cfg).unwrap();
        assert!(d.loss_after <= d.loss_before);
    }

    #[test]
    fn one_iteration_writes_two_checkpoints_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let out = dir.path().join(sub);
            let outcome = train(&tiny_env(), &tiny_cfg(), 3, Some(&out), |_| {}).unwrap();
            (out, outcome)
        };
        let (a, oa) = run("a");
        let (b, _) = run("b");
        assert_eq!(oa.checkpoints.len(), 2);
        for name in ["checkpoint_init.swmp", "checkpoint_final.swmp", CURVE_FILE] {
            assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        }
        let curve = read_curve(&a.join(CURVE_FILE)).unwrap();
        assert_eq!(curve, oa.curve);
        let loaded = PolicySet::load(&a.join("checkpoint_final.swmp")).unwrap();
        assert_eq!(loaded.actors[0].params(), oa.policies.actors[0].params());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::lite().validate().is_ok());
        assert!(TrainConfig { clip: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 0.0, ..TrainConfig::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"episodes": 5000, "steps": 200, "batch": 8, "clip": 0.2, "ppo_epochs": 5, "actor_lr": 0.0005}"#).unwrap();
        assert_eq!(parsed, TrainConfig::default());
    }
}

