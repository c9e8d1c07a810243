//! In-process episodes and their replayable JSON traces.

use serde::{Deserialize, Serialize};

use crate::comms::MergeEvent;
use crate::error::{Error, Result};
use crate::geom::Pos;
use crate::obsmap::{self, Observation, SENSE_RADIUS};
use crate::reward;
use crate::seed;
use crate::world::{self, Action, AgentEvents, Arena, EnvConfig, StepEvents, WorldState};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub agents: Vec<AgentEvents>,
    pub positions: Vec<Pos>,
    pub networks: Vec<MergeEvent>,
    pub rewards: Vec<f64>,
    pub joint_reward: f64,
    /// Known-cell count per agent after the step.
    pub known: Vec<usize>,
    /// Cells known to at least one agent after the step.
    pub union_known: usize,
}

impl TraceStep {
    pub fn actions(&self) -> Vec<Action> {
        self.agents.iter().map(|a| a.action).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub version: u32,
    pub config: EnvConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    pub arena: Arena,
    pub initial_positions: Vec<Pos>,
    pub initial_known: Vec<usize>,
    pub initial_union_known: usize,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let trace: EpisodeTrace = serde_json::from_str(text)?;
        if trace.version != TRACE_FORMAT_VERSION {
            return Err(Error::Trace(format!("unsupported trace version {}", trace.version)));
        }
        Ok(trace)
    }

    pub fn area(&self) -> usize {
        self.arena.area()
    }

    pub fn n_agents(&self) -> usize {
        self.initial_positions.len()
    }

    pub fn total_joint_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.joint_reward).sum()
    }

    /// Known-cell ratio of the best-informed agent at the end of the episode.
    pub fn final_max_ratio(&self) -> f64 {
        let known = self.steps.last().map_or(&self.initial_known, |s| &s.known);
        known.iter().copied().max().unwrap_or(0) as f64 / self.area() as f64
    }
}

/// Result of one environment step including rewards.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub events: StepEvents,
    pub rewards: Vec<f64>,
    pub joint_reward: f64,
    pub done: bool,
}

/// One episode: world state, reward bookkeeping and the growing trace.
#[derive(Debug, Clone)]
pub struct Episode {
    config: EnvConfig,
    state: WorldState,
    trace: EpisodeTrace,
}

impl Episode {
    /// Fresh arena and spawn drawn from independent streams of `seed`.
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arena = world::generate_arena(seed::derive(seed, "arena", 0), &config)?;
        let state = world::spawn_agents(seed::derive(seed, "spawn", 0), arena, config.n_agents)?;
        Ok(Self::from_state(config, state, Some(seed)))
    }

    pub fn from_parts(config: EnvConfig, arena: Arena, positions: Vec<Pos>) -> Result<Self> {
        config.validate()?;
        if positions.len() != config.n_agents {
            return Err(Error::InvalidConfig(format!(
                "config declares {} agents, {} positions given",
                config.n_agents,
                positions.len()
            )));
        }
        let state = WorldState::from_positions(arena, positions)?;
        Ok(Self::from_state(config, state, None))
    }

    fn from_state(config: EnvConfig, state: WorldState, seed: Option<u64>) -> Self {
        let trace = EpisodeTrace {
            version: TRACE_FORMAT_VERSION,
            config: config.clone(),
            seed,
            arena: state.arena.clone(),
            initial_positions: state.positions.clone(),
            initial_known: state.known_counts(),
            initial_union_known: state.union_known(),
            steps: Vec::new(),
        };
        Self { config, state, trace }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EpisodeTrace {
        self.trace
    }

    pub fn done(&self) -> bool {
        self.state.t >= self.config.horizon
    }

    pub fn observation(&self, agent: usize) -> Observation {
        obsmap::build_observation(&self.state, agent, &self.config)
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.state.n_agents()).map(|i| self.observation(i)).collect()
    }

    pub fn e_max(&self) -> u32 {
        reward::e_max(SENSE_RADIUS as u32)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::Precondition(format!(
                "episode finished at horizon {}",
                self.config.horizon
            )));
        }
        let events = world::step(&mut self.state, actions, &self.config)?;
        let area = self.state.arena.area();
        let rewards = reward::step_rewards(self.config.reward_case, &events, area, self.e_max());
        let joint_reward = reward::joint_reward(&rewards)?;
        self.trace.steps.push(TraceStep {
            t: self.state.t,
            agents: events.agents.clone(),
            positions: self.state.positions.clone(),
            networks: events.networks.clone(),
            rewards: rewards.clone(),
            joint_reward,
            known: events.known_after.clone(),
            union_known: self.state.union_known(),
        });
        Ok(StepOutcome { events, rewards, joint_reward, done: self.done() })
    }
}

/// Re-simulates a trace from its arena, spawn and recorded actions.
pub fn replay(trace: &EpisodeTrace) -> Result<EpisodeTrace> {
    let mut episode = Episode::from_parts(trace.config.clone(), trace.arena.clone(), trace.initial_positions.clone())?;
    episode.trace.seed = trace.seed;
    for s in &trace.steps {
        episode.step(&s.actions())?;
    }
    Ok(episode.into_trace())
}

/// Replays and checks that the serialized forms match byte for byte.
pub fn verify_replay(trace: &EpisodeTrace) -> Result<()> {
    let again = replay(trace)?;
    if again.to_json() != trace.to_json() {
        let first_diff = trace
            .steps
            .iter()
            .zip(&again.steps)
            .position(|(a, b)| a != b)
            .unwrap_or(trace.steps.len().min(again.steps.len()));
        return Err(Error::Trace(format!("replay diverges at step index {first_diff}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::random_joint_action;

    #[test]
    fn random_episode_replays_identically() {
        let config = EnvConfig { horizon: 60, ..EnvConfig::default() };
        let mut ep = Episode::new(config, 21).unwrap();
        let mut rng = seed::rng(5);
        while !ep.done() {
            let a = random_joint_action(&mut rng, 4);
            ep.step(&a).unwrap();
        }
        let trace = ep.into_trace();
        verify_replay(&trace).unwrap();
        let parsed = EpisodeTrace::from_json(&trace.to_json()).unwrap();
        assert_eq!(parsed.to_json(), trace.to_json());
    }

    #[test]
    fn stepping_past_horizon_fails() {
        let config = EnvConfig { horizon: 1, n_agents: 1, ..EnvConfig::default() };
        let mut ep = Episode::new(config, 0).unwrap();
        assert!(ep.step(&[Action::Stay]).unwrap().done);
        assert!(ep.step(&[Action::Stay]).is_err());
    }

    #[test]
    fn all_stay_case2_gives_minus_one() {
        let mut ep = Episode::new(EnvConfig::default(), 3).unwrap();
        let out = ep.step(&[Action::Stay; 4]).unwrap();
        assert_eq!(out.joint_reward, -1.0);
        assert!(out.rewards.iter().all(|&r| r == -1.0));
    }
}
