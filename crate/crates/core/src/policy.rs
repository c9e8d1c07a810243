//! Action selection: masked categorical sampling, scripted baselines,
//! network-backed actors and the checkpoint container.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Direction;
use crate::network::{Network, NetworkSpec, Role};
use crate::nn;
use crate::obsmap::Observation;
use crate::seed::SimRng;
use crate::world::{Action, ActionMask, EnvConfig, N_ACTIONS};

/// Probabilities over the ten actions; masked actions carry exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: [f64; N_ACTIONS],
    pub log_probs: [f64; N_ACTIONS],
}

impl ActionDistribution {
    pub fn new(logits: &[f64], mask: ActionMask) -> Result<Self> {
        if logits.len() != N_ACTIONS {
            return Err(Error::ShapeMismatch(format!("expected {N_ACTIONS} logits, got {}", logits.len())));
        }
        if mask.count() == 0 {
            return Err(Error::Precondition("every action is masked".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        let lp = nn::masked_log_softmax(logits, |i| mask.is_available_id(i));
        let mut log_probs = [f64::NEG_INFINITY; N_ACTIONS];
        let mut probs = [0.0; N_ACTIONS];
        for i in 0..N_ACTIONS {
            log_probs[i] = lp[i];
            probs[i] = if mask.is_available_id(i) { lp[i].exp() } else { 0.0 };
        }
        Ok(Self { probs, log_probs })
    }

    /// Inverse-CDF draw: one uniform `u ∈ [0,1)`, cumulative sums in action-id order.
    pub fn sample(&self, rng: &mut SimRng) -> Action {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = Some(i);
                if u < acc {
                    return action(i);
                }
            }
        }
        action(last.expect("at least one action has positive probability"))
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| -p * lp)
            .sum()
    }
}

fn action(id: usize) -> Action {
    Action::from_id(id as u8).expect("id below N_ACTIONS")
}

pub fn masked_sample(logits: &[f64], mask: ActionMask, rng: &mut SimRng) -> Result<Action> {
    Ok(ActionDistribution::new(logits, mask)?.sample(rng))
}

/// A decentralized policy: each call sees one agent's observation only.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;
    fn act(&self, agent: usize, obs: &Observation, rng: &mut SimRng) -> Result<Action>;
}

fn random_available(mask: ActionMask, moves_only: bool, rng: &mut SimRng) -> Action {
    let choices: Vec<Action> = mask.available().filter(|a| !moves_only || a.is_move()).collect();
    if choices.is_empty() {
        return Action::Stay;
    }
    choices[rng.random_range(0..choices.len())]
}

/// Ordering of candidate directions for [`GreedyFrontier`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GreedyKey {
    /// Shortest mean path first, then most frontiers. Converges.
    #[default]
    NearestMean,
    /// Most frontiers first, then shortest mean path. Prone to two-cycles.
    MostFrontiers,
}

/// Moves along the first step of the best frontier group; never communicates.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyFrontier {
    pub key: GreedyKey,
}

impl GreedyFrontier {
    pub fn most_frontiers() -> Self {
        Self { key: GreedyKey::MostFrontiers }
    }

    pub fn choose(&self, obs: &Observation, rng: &mut SimRng) -> Action {
        let mut best: Option<(Direction, f64, f64)> = None;
        for d in Direction::ALL {
            let (n, mu, _) = obs.fpr_triple(d.index());
            if !obs.mask.is_available(Action::Move(d)) || n <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bn, bmu)) => match self.key {
                    GreedyKey::NearestMean => mu < bmu || (mu == bmu && n > bn),
                    GreedyKey::MostFrontiers => n > bn || (n == bn && mu < bmu),
                },
            };
            if better {
                best = Some((d, n, mu));
            }
        }
        match best {
            Some((d, _, _)) => Action::Move(d),
            None => random_available(obs.mask, true, rng),
        }
    }
}

impl Policy for GreedyFrontier {
    fn name(&self) -> String {
        match self.key {
            GreedyKey::NearestMean => "greedy".into(),
            GreedyKey::MostFrontiers => "greedy-count".into(),
        }
    }

    fn act(&self, _agent: usize, obs: &Observation, rng: &mut SimRng) -> Result<Action> {
        Ok(self.choose(obs, rng))
    }
}

/// Greedy exploration that communicates half the time when a teammate is in range.
#[derive(Debug, Clone, Copy, Default)]
pub struct CommOnContact;

pub const CONTACT_COMM_PROBABILITY: f64 = 0.5;

impl Policy for CommOnContact {
    fn name(&self) -> String {
        "comm".into()
    }

    fn act(&self, _agent: usize, obs: &Observation, rng: &mut SimRng) -> Result<Action> {
        let in_range = obs.net.iter().filter(|&&b| b > 0.5).count();
        if in_range >= 2 && rng.random_bool(CONTACT_COMM_PROBABILITY) {
            return Ok(Action::Communicate);
        }
        Ok(GreedyFrontier::default().choose(obs, rng))
    }
}

/// Uniform over available actions, communicate included.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandom;

impl Policy for UniformRandom {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&self, _agent: usize, obs: &Observation, rng: &mut SimRng) -> Result<Action> {
        Ok(random_available(obs.mask, false, rng))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StayPut;

impl Policy for StayPut {
    fn name(&self) -> String {
        "stay".into()
    }

    fn act(&self, _agent: usize, _obs: &Observation, _rng: &mut SimRng) -> Result<Action> {
        Ok(Action::Stay)
    }
}

/// Samples from trained actor networks; a single actor is shared by all agents.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub label: String,
    pub actors: Vec<Network>,
}

impl ActorPolicy {
    pub fn actor_for(&self, agent: usize) -> Result<&Network> {
        match self.actors.len() {
            1 => Ok(&self.actors[0]),
            n if agent < n => Ok(&self.actors[agent]),
            n => Err(Error::ShapeMismatch(format!("checkpoint has {n} actors, agent {agent} requested"))),
        }
    }

    pub fn distribution(&self, agent: usize, obs: &Observation) -> Result<ActionDistribution> {
        let logits = self.actor_for(agent)?.forward(&obs.features())?;
        ActionDistribution::new(&logits, obs.mask)
    }
}

impl Policy for ActorPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn act(&self, agent: usize, obs: &Observation, rng: &mut SimRng) -> Result<Action> {
        Ok(self.distribution(agent, obs)?.sample(rng))
    }
}

/// Policies assigned to agents; one entry applies to every agent.
#[derive(Clone)]
pub struct Team {
    members: Vec<Arc<dyn Policy>>,
}

impl std::fmt::Debug for Team {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.members.iter().map(|m| m.name())).finish()
    }
}

impl Team {
    pub fn new(members: Vec<Arc<dyn Policy>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidConfig("a team needs at least one policy".into()));
        }
        Ok(Self { members })
    }

    pub fn uniform(policy: impl Policy + 'static) -> Self {
        Self { members: vec![Arc::new(policy)] }
    }

    pub fn policy_for(&self, agent: usize) -> &dyn Policy {
        let k = if self.members.len() == 1 { 0 } else { agent };
        self.members[k].as_ref()
    }

    pub fn check_size(&self, n_agents: usize) -> Result<()> {
        if self.members.len() == 1 || self.members.len() == n_agents {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "{} policies given for {n_agents} agents",
                self.members.len()
            )))
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.members.iter().map(|m| m.name()).collect()
    }

    pub fn act(&self, agent: usize, obs: &Observation, rng: &mut SimRng) -> Result<Action> {
        self.policy_for(agent).act(agent, obs, rng)
    }
}

pub const BASELINE_NAMES: [&str; 5] = ["greedy", "greedy-count", "comm", "random", "stay"];

/// Resolves a baseline name or a checkpoint path.
pub fn load_policy(spec: &str) -> Result<Arc<dyn Policy>> {
    Ok(match spec.trim() {
        "greedy" => Arc::new(GreedyFrontier::default()),
        "greedy-count" => Arc::new(GreedyFrontier::most_frontiers()),
        "comm" => Arc::new(CommOnContact),
        "random" => Arc::new(UniformRandom),
        "stay" => Arc::new(StayPut),
        path if Path::new(path).is_file() => {
            let set = PolicySet::load(Path::new(path))?;
            Arc::new(ActorPolicy { label: path.to_string(), actors: set.actors })
        }
        other => return Err(Error::UnknownPolicy(other.to_string())),
    })
}

/// Parses a comma-separated policy list for a team of `n_agents`.
pub fn load_team(specs: &str, n_agents: usize) -> Result<Team> {
    let members = specs.split(',').map(load_policy).collect::<Result<Vec<_>>>()?;
    let team = Team::new(members)?;
    team.check_size(n_agents)?;
    Ok(team)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SWMPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-agent actors plus an optional shared critic.
#[derive(Debug, Clone)]
pub struct PolicySet {
    pub actors: Vec<Network>,
    pub critic: Option<Network>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    #[serde(default)]
    pub env: Option<EnvConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkHeader {
    spec: NetworkSpec,
    tag: String,
    params: usize,
    shapes: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    networks: Vec<NetworkHeader>,
}

impl PolicySet {
    fn networks(&self) -> impl Iterator<Item = &Network> {
        self.actors.iter().chain(self.critic.iter())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            meta: self.meta.clone(),
            networks: self
                .networks()
                .map(|n| NetworkHeader {
                    spec: n.spec().clone(),
                    tag: n.spec().architecture.tag(),
                    params: n.param_count(),
                    shapes: n.shapes().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for n in self.networks() {
            buf.clear();
            buf.reserve(n.param_count() * 8);
            for v in n.params() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} unsupported, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = read_u32(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut actors = Vec::new();
        let mut critic = None;
        for h in header.networks {
            let mut net = Network::zeros(h.spec)?;
            if net.param_count() != h.params || net.shapes() != h.shapes.as_slice() {
                return Err(Error::Checkpoint(format!("layout of {} does not match its tag", h.tag)));
            }
            let mut bytes = vec![0u8; h.params * 8];
            r.read_exact(&mut bytes).map_err(|_| Error::Checkpoint("truncated payload".into()))?;
            for (dst, chunk) in net.params_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            match net.spec().role {
                Role::Actor => actors.push(net),
                Role::Critic if critic.is_none() => critic = Some(net),
                Role::Critic => return Err(Error::Checkpoint("more than one critic".into())),
            }
        }
        if actors.is_empty() {
            return Err(Error::Checkpoint("no actor networks".into()));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { actors, critic, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated preamble".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::obsmap::{FOV_LEN, FPR_LEN};
    use crate::seed;

    fn obs(mask: ActionMask, fpr: [f64; FPR_LEN], net: Vec<f64>) -> Observation {
        Observation { fov: [0.0; FOV_LEN], fpr, net, mask }
    }

    #[test]
    fn only_stay_available_always_stays() {
        let mask = ActionMask::NONE.with(Action::Stay);
        let mut rng = seed::rng(1);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(masked_sample(&logits, mask, &mut rng).unwrap(), Action::Stay);
        }
    }

    #[test]
    fn all_masked_is_a_precondition_error() {
        let mut rng = seed::rng(1);
        assert!(matches!(
            masked_sample(&[0.0; 10], ActionMask::NONE, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn uniform_logits_sample_uniformly_over_available() {
        let mask = [0usize, 2, 4, 8, 9].iter().fold(ActionMask::NONE, |m, &i| m.with(action(i)));
        let mut rng = seed::rng(2);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[masked_sample(&[0.0; 10], mask, &mut rng).unwrap().id() as usize] += 1;
        }
        let p = 0.2;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            if mask.is_available_id(i) {
                assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "action {i}: {c}");
            } else {
                assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn distribution_is_shift_invariant_and_normalized() {
        let mask = ActionMask::ALL;
        let logits: Vec<f64> = (0..10).map(|i| f64::from(i) * 0.3).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 42.0).collect();
        let a = ActionDistribution::new(&logits, mask).unwrap();
        let b = ActionDistribution::new(&shifted, mask).unwrap();
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_follows_single_east_frontier() {
        let mut fpr = [0.0; FPR_LEN];
        fpr[3 * Direction::E.index()] = 1.0;
        fpr[3 * Direction::E.index() + 1] = 1.0;
        let o = obs(ActionMask::ALL, fpr, vec![1.0, 0.0]);
        let mut rng = seed::rng(3);
        for g in [GreedyFrontier::default(), GreedyFrontier::most_frontiers()] {
            assert_eq!(g.act(0, &o, &mut rng).unwrap(), Action::Move(Direction::E));
        }
    }

    #[test]
    fn greedy_key_orders() {
        let mut fpr = [0.0; FPR_LEN];
        for (d, n, mu) in [(Direction::N, 0.5, 1.0), (Direction::S, 0.5, 0.5), (Direction::W, 1.0, 0.8)] {
            fpr[3 * d.index()] = n;
            fpr[3 * d.index() + 1] = mu;
        }
        let o = obs(ActionMask::ALL, fpr, vec![1.0]);
        let mut rng = seed::rng(3);
        assert_eq!(GreedyFrontier::default().act(0, &o, &mut rng).unwrap(), Action::Move(Direction::S));
        assert_eq!(GreedyFrontier::most_frontiers().act(0, &o, &mut rng).unwrap(), Action::Move(Direction::W));
        fpr[3 * Direction::W.index()] = 0.0;
        let o = obs(ActionMask::ALL, fpr, vec![1.0]);
        assert_eq!(GreedyFrontier::most_frontiers().act(0, &o, &mut rng).unwrap(), Action::Move(Direction::S));
    }

    #[test]
    fn greedy_without_frontiers_moves_randomly() {
        let mask = ActionMask::NONE.with(Action::Stay).with(Action::Communicate).with(Action::Move(Direction::W));
        let o = obs(mask, [0.0; FPR_LEN], vec![1.0]);
        let mut rng = seed::rng(4);
        for _ in 0..50 {
            assert_eq!(GreedyFrontier::default().act(0, &o, &mut rng).unwrap(), Action::Move(Direction::W));
        }
    }

    #[test]
    fn comm_on_contact_frequencies() {
        let alone = obs(ActionMask::ALL, [0.0; FPR_LEN], vec![1.0, 0.0, 0.0, 0.0]);
        let mut rng = seed::rng(5);
        for _ in 0..1000 {
            assert_ne!(CommOnContact.act(0, &alone, &mut rng).unwrap(), Action::Communicate);
        }
        let contact = obs(ActionMask::ALL, [0.0; FPR_LEN], vec![1.0, 1.0, 0.0, 0.0]);
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| CommOnContact.act(0, &contact, &mut rng).unwrap() == Action::Communicate)
            .count();
        let sigma = (draws as f64 * 0.25).sqrt();
        assert!((hits as f64 - draws as f64 * 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn comm_on_contact_is_reproducible() {
        let contact = obs(ActionMask::ALL, [0.0; FPR_LEN], vec![1.0, 1.0]);
        let run = |s| {
            let mut rng = seed::rng(s);
            (0..200).map(|_| CommOnContact.act(0, &contact, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = seed::rng(6);
        let set = PolicySet {
            actors: vec![
                Network::new(NetworkSpec::actor(Architecture::mlp(&[8, 4]), 2), &mut rng).unwrap(),
                Network::new(NetworkSpec::actor(Architecture::cnn(), 2), &mut rng).unwrap(),
            ],
            critic: Some(Network::new(NetworkSpec::critic(Architecture::mlp(&[5]), 2), &mut rng).unwrap()),
            meta: CheckpointMeta { iteration: 17, env: Some(EnvConfig::default()) },
        };
        let mut bytes = Vec::new();
        set.write_to(&mut bytes).unwrap();
        let back = PolicySet::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.meta, set.meta);
        for (a, b) in set.networks().zip(back.networks()) {
            assert_eq!(a.spec(), b.spec());
            assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let mut rng = seed::rng(7);
        let set = PolicySet {
            actors: vec![Network::new(NetworkSpec::actor(Architecture::mlp(&[3]), 1), &mut rng).unwrap()],
            critic: None,
            meta: CheckpointMeta::default(),
        };
        let mut bytes = Vec::new();
        set.write_to(&mut bytes).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(PolicySet::read_from(&mut bad_magic.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(PolicySet::read_from(&mut &truncated[..]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(PolicySet::read_from(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn unknown_policy_name() {
        assert!(matches!(load_policy("nope"), Err(Error::UnknownPolicy(_))));
        assert_eq!(load_team("greedy,stay", 2).unwrap().names(), vec!["greedy", "stay"]);
        assert!(load_team("greedy,stay", 3).is_err());
    }
}
