//! Multi-agent exploration of unknown grid arenas.
//!
//! Agents move on an occupancy grid, sense a 3×3 patch, grow private maps,
//! and may spend a step communicating to merge maps with every agent reachable
//! through a chain of in-range communicators. Policies see a compact
//! observation: the binarized patch, 24 frontier-reachability features derived
//! from A* paths on the agent's own map, and a reachability bit per teammate.
//!
//! The crate also contains a small dense/convolutional network library with
//! hand-written gradients, a sequential multi-agent PPO trainer with a shared
//! critic, an evaluation harness and a line-oriented JSON environment server.

pub mod comms;
pub mod envd;
pub mod error;
pub mod eval;
pub mod frontier;
pub mod geom;
pub mod happo;
pub mod network;
pub mod nn;
pub mod obsmap;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod trace;
pub mod world;

pub use error::{Error, Result};
pub use geom::{Direction, Pos};
pub use obsmap::{Knowledge, Observation, ReconMap};
pub use trace::{Episode, EpisodeTrace};
pub use world::{Action, ActionMask, Arena, EnvConfig, RewardCase, WorldState};
