//! The two team reward functions.
//!
//! Case 1 scores raw cell gains with a -100 collision penalty. Case 2 scales
//! exploration by the per-step maximum `e_max`, penalizes idling, and weights
//! sharing by how much each partner has not yet heard from the agent.

use crate::error::{Error, Result};
use crate::world::{RewardCase, StepEvents};

pub const CASE1_DANGER: f64 = -100.0;
pub const CASE2_DANGER: f64 = -10.0;
/// Constant floor of the sharing weight `p_i`.
pub const SHARE_BASE: f64 = 0.8;
/// Idle penalty subtracted in Case 2.
pub const IDLE_PENALTY: f64 = 1.0;

/// Most cells one move can reveal with a square sensor of the given radius.
pub fn e_max(radius_cells: u32) -> u32 {
    4 * radius_cells + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardInputs {
    pub dangerous: bool,
    pub acted_communicate: bool,
    pub network_size: usize,
    pub known_prev: usize,
    pub known_now: usize,
    pub known_network: usize,
    /// `q_ij` for every `j`; the entry for `i` itself is ignored.
    pub discoveries: Vec<u64>,
    /// Indices of the agent's network partners, the agent excluded.
    pub partners: Vec<usize>,
    pub area: usize,
    pub e_max: u32,
    pub stationary: bool,
}

impl RewardInputs {
    pub fn shared(&self) -> bool {
        self.acted_communicate && self.network_size >= 2
    }

    /// Gathers agent `i`'s inputs from a step's events.
    pub fn from_events(events: &StepEvents, agent: usize, area: usize, e_max: u32) -> Self {
        let ev = &events.agents[agent];
        let partners: Vec<usize> = ev
            .network
            .map(|k| events.networks[k].members.iter().copied().filter(|&j| j != agent).collect())
            .unwrap_or_default();
        let network_size = events.network_size(agent);
        Self {
            dangerous: ev.dangerous,
            acted_communicate: ev.action == crate::world::Action::Communicate,
            network_size,
            known_prev: events.known_before[agent],
            known_now: events.known_sensed[agent],
            known_network: events.known_after[agent],
            discoveries: events.discoveries_before_merge[agent].clone(),
            partners,
            area,
            e_max,
            stationary: !ev.moved,
        }
    }

    /// `p_i`: mean partner discovery share plus the constant floor.
    pub fn share_weight(&self) -> f64 {
        if self.partners.is_empty() {
            return SHARE_BASE;
        }
        let area = self.area as f64;
        let sum: f64 = self.partners.iter().map(|&j| self.discoveries[j] as f64 / area).sum();
        sum / self.partners.len() as f64 + SHARE_BASE
    }
}

pub fn reward_case1(inputs: &RewardInputs) -> f64 {
    if inputs.dangerous {
        CASE1_DANGER
    } else if inputs.shared() {
        inputs.known_network as f64 - inputs.known_prev as f64
    } else {
        inputs.known_now as f64 - inputs.known_prev as f64
    }
}

pub fn reward_case2(inputs: &RewardInputs) -> f64 {
    if inputs.dangerous {
        CASE2_DANGER
    } else if inputs.shared() {
        inputs.share_weight() * (inputs.known_network as f64 - inputs.known_prev as f64) / inputs.area as f64
    } else {
        let idle = if inputs.stationary { IDLE_PENALTY } else { 0.0 };
        (inputs.known_now as f64 - inputs.known_prev as f64) / f64::from(inputs.e_max) - idle
    }
}

pub fn reward(case: RewardCase, inputs: &RewardInputs) -> f64 {
    match case {
        RewardCase::Case1 => reward_case1(inputs),
        RewardCase::Case2 => reward_case2(inputs),
    }
}

/// Team reward: the mean of the individual rewards, given to everyone.
pub fn joint_reward(per_agent: &[f64]) -> Result<f64> {
    if per_agent.is_empty() {
        return Err(Error::Precondition("joint reward of an empty team".into()));
    }
    Ok(per_agent.iter().sum::<f64>() / per_agent.len() as f64)
}

/// Per-agent rewards for one step.
pub fn step_rewards(case: RewardCase, events: &StepEvents, area: usize, e_max: u32) -> Vec<f64> {
    (0..events.agents.len())
        .map(|i| reward(case, &RewardInputs::from_events(events, i, area, e_max)))
        .collect()
}
