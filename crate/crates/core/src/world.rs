//! Ground-truth arena, team state and the joint transition.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comms::{self, MergeEvent};
use crate::error::{Error, Result};
use crate::geom::{Direction, Pos};
use crate::obsmap::{self, ReconMap};
use crate::seed;

/// Rejection-sampling cap when searching for an obstacle layout with connected free space.
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;
pub const N_ACTIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RewardCase {
    Case1,
    Case2,
}

impl Serialize for RewardCase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(match self {
            RewardCase::Case1 => 1,
            RewardCase::Case2 => 2,
        })
    }
}

impl<'de> Deserialize<'de> for RewardCase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            1 => Ok(RewardCase::Case1),
            2 => Ok(RewardCase::Case2),
            other => Err(serde::de::Error::custom(format!(
                "reward_case must be 1 or 2, got {other}"
            ))),
        }
    }
}

impl std::str::FromStr for RewardCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "case1" => Ok(RewardCase::Case1),
            "2" | "case2" => Ok(RewardCase::Case2),
            other => Err(Error::InvalidConfig(format!("unknown reward case `{other}`"))),
        }
    }
}

/// Environment parameters. Defaults reproduce the published 12×12 setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub rows: usize,
    pub cols: usize,
    pub obstacle_ratio: f64,
    /// Cell side length in metres.
    pub cell_side: f64,
    /// Detection range in metres. Sensing itself always uses a one-cell radius.
    pub detection_range: f64,
    /// Communication range in metres.
    pub comm_range: f64,
    pub n_agents: usize,
    pub horizon: usize,
    pub reward_case: RewardCase,
    pub diagonal_through_free: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            rows: 12,
            cols: 12,
            obstacle_ratio: 0.1,
            cell_side: 0.5,
            detection_range: 1.1,
            comm_range: 3.2,
            n_agents: 4,
            horizon: 300,
            reward_case: RewardCase::Case2,
            diagonal_through_free: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("arena must be non-empty, got {}x{}", self.rows, self.cols));
        }
        if !(0.0..1.0).contains(&self.obstacle_ratio) {
            return bad(format!("obstacle_ratio {} outside [0, 1)", self.obstacle_ratio));
        }
        if !(self.cell_side > 0.0 && self.cell_side.is_finite()) {
            return bad(format!("cell_side must be positive, got {}", self.cell_side));
        }
        if !(self.detection_range > 0.0) {
            return bad(format!("detection_range must be positive, got {}", self.detection_range));
        }
        if !(self.comm_range >= self.detection_range) || !self.comm_range.is_finite() {
            return bad(format!(
                "comm_range {} must be at least detection_range {}",
                self.comm_range, self.detection_range
            ));
        }
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        Ok(())
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    pub fn obstacle_count(&self) -> usize {
        (self.obstacle_ratio * self.area() as f64).floor() as usize
    }
}

/// Ground truth: which cells hold static obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct Arena {
    rows: usize,
    cols: usize,
    cell_side: f64,
    obstacle_ratio: f64,
    occupied: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ArenaFile {
    version: u32,
    rows: usize,
    cols: usize,
    cell_side: f64,
    obstacle_ratio: f64,
    grid: Vec<Vec<i8>>,
}

pub const ARENA_FORMAT_VERSION: u32 = 1;

impl Arena {
    pub fn from_occupancy(
        rows: usize,
        cols: usize,
        cell_side: f64,
        obstacle_ratio: f64,
        occupied: Vec<bool>,
    ) -> Result<Self> {
        if occupied.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "occupancy has {} cells, expected {}",
                occupied.len(),
                rows * cols
            )));
        }
        Ok(Self { rows, cols, cell_side, obstacle_ratio, occupied })
    }

    /// Parses `.` free / `#` obstacle rows.
    pub fn from_ascii(text: &str, cell_side: f64) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.len());
        let mut occ = Vec::with_capacity(rows * cols);
        for line in &lines {
            if line.len() != cols {
                return Err(Error::DimensionMismatch("ragged arena rows".into()));
            }
            for ch in line.chars() {
                occ.push(match ch {
                    '.' => false,
                    '#' => true,
                    other => return Err(Error::InvalidConfig(format!("unexpected arena character {other:?}"))),
                });
            }
        }
        let ratio = occ.iter().filter(|&&o| o).count() as f64 / (rows * cols).max(1) as f64;
        Self::from_occupancy(rows, cols, cell_side, ratio, occ)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_side(&self) -> f64 {
        self.cell_side
    }

    pub fn obstacle_ratio(&self) -> f64 {
        self.obstacle_ratio
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.row >= 0 && p.col >= 0 && (p.row as usize) < self.rows && (p.col as usize) < self.cols
    }

    fn idx(&self, p: Pos) -> usize {
        p.row as usize * self.cols + p.col as usize
    }

    /// In-grid static obstacle.
    pub fn is_obstacle(&self, p: Pos) -> bool {
        self.in_bounds(p) && self.occupied[self.idx(p)]
    }

    /// In-grid and not a static obstacle.
    pub fn is_free(&self, p: Pos) -> bool {
        self.in_bounds(p) && !self.occupied[self.idx(p)]
    }

    pub fn obstacle_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn free_cells(&self) -> Vec<Pos> {
        (0..self.area())
            .filter(|&i| !self.occupied[i])
            .map(|i| Pos::new((i / self.cols) as i32, (i % self.cols) as i32))
            .collect()
    }

    /// Cells reachable from `start` by king moves over free cells.
    pub fn flood_fill(&self, start: Pos) -> Vec<bool> {
        let mut seen = vec![false; self.area()];
        if !self.is_free(start) {
            return seen;
        }
        let mut stack = vec![start];
        seen[self.idx(start)] = true;
        while let Some(p) = stack.pop() {
            for d in Direction::ALL {
                let q = p.step(d);
                if self.is_free(q) && !seen[self.idx(q)] {
                    seen[self.idx(q)] = true;
                    stack.push(q);
                }
            }
        }
        seen
    }

    /// True when the free cells form a single 8-connected component (vacuously true if none).
    pub fn free_space_connected(&self) -> bool {
        let Some(first) = (0..self.area()).find(|&i| !self.occupied[i]) else {
            return true;
        };
        let start = Pos::new((first / self.cols) as i32, (first % self.cols) as i32);
        let seen = self.flood_fill(start);
        (0..self.area()).all(|i| self.occupied[i] || seen[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arena serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    fn from_file(file: ArenaFile) -> Result<Self> {
        if file.version != ARENA_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported arena format version {}", file.version)));
        }
        if file.grid.len() != file.rows || file.grid.iter().any(|r| r.len() != file.cols) {
            return Err(Error::DimensionMismatch("arena grid does not match declared size".into()));
        }
        let mut occ = Vec::with_capacity(file.rows * file.cols);
        for row in &file.grid {
            for &v in row {
                occ.push(match v {
                    0 => false,
                    1 => true,
                    other => return Err(Error::InvalidConfig(format!("arena cell value {other} is not 0 or 1"))),
                });
            }
        }
        Self::from_occupancy(file.rows, file.cols, file.cell_side, file.obstacle_ratio, occ)
    }

    fn serialize_grid(&self) -> Vec<Vec<i8>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| i8::from(self.occupied[r * self.cols + c])).collect())
            .collect()
    }
}

impl Serialize for Arena {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ArenaFile {
            version: ARENA_FORMAT_VERSION,
            rows: self.rows,
            cols: self.cols,
            cell_side: self.cell_side,
            obstacle_ratio: self.obstacle_ratio,
            grid: self.serialize_grid(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Arena {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Arena::from_file(ArenaFile::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Samples obstacle layouts until the free space is one 8-connected component.
pub fn generate_arena(seed: u64, config: &EnvConfig) -> Result<Arena> {
    config.validate()?;
    let area = config.area();
    let k = config.obstacle_count();
    if k + config.n_agents >= area {
        return Err(Error::InvalidConfig(format!(
            "{k} obstacles leave too few free cells for {} agents in {area} cells",
            config.n_agents
        )));
    }
    let mut rng = seed::rng(seed);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let mut occ = vec![false; area];
        for i in sample(&mut rng, area, k) {
            occ[i] = true;
        }
        let arena = Arena::from_occupancy(config.rows, config.cols, config.cell_side, config.obstacle_ratio, occ)?;
        if arena.free_space_connected() {
            return Ok(arena);
        }
    }
    Err(Error::GenerationFailed {
        attempts: MAX_GENERATION_ATTEMPTS,
        reason: format!("no layout with {k} obstacles kept the free space connected"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Move(Direction),
    Stay,
    Communicate,
}

impl Action {
    pub const STAY_ID: u8 = 8;
    pub const COMMUNICATE_ID: u8 = 9;

    pub fn id(self) -> u8 {
        match self {
            Action::Move(d) => d.index() as u8,
            Action::Stay => Self::STAY_ID,
            Action::Communicate => Self::COMMUNICATE_ID,
        }
    }

    pub fn from_id(id: u8) -> Option<Action> {
        match id {
            0..=7 => Direction::from_index(id as usize).map(Action::Move),
            8 => Some(Action::Stay),
            9 => Some(Action::Communicate),
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..N_ACTIONS as u8).map(|i| Action::from_id(i).unwrap())
    }

    pub fn is_move(self) -> bool {
        matches!(self, Action::Move(_))
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.id())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let id = u8::deserialize(d)?;
        Action::from_id(id).ok_or_else(|| serde::de::Error::custom(format!("action id {id} out of range")))
    }
}

/// Ten availability bits indexed by action id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionMask(u16);

impl ActionMask {
    pub const ALL: ActionMask = ActionMask((1 << N_ACTIONS) - 1);
    pub const NONE: ActionMask = ActionMask(0);

    pub fn from_bits(bits: u16) -> Self {
        ActionMask(bits & Self::ALL.0)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn with(self, a: Action) -> Self {
        ActionMask(self.0 | (1 << a.id()))
    }

    pub fn is_available(self, a: Action) -> bool {
        self.0 & (1 << a.id()) != 0
    }

    pub fn is_available_id(self, id: usize) -> bool {
        id < N_ACTIONS && self.0 & (1 << id) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn available(self) -> impl Iterator<Item = Action> {
        Action::all().filter(move |&a| self.is_available(a))
    }

    pub fn to_vec(self) -> Vec<f64> {
        (0..N_ACTIONS).map(|i| if self.is_available_id(i) { 1.0 } else { 0.0 }).collect()
    }
}

/// Everything the environment knows at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub arena: Arena,
    pub positions: Vec<Pos>,
    pub maps: Vec<ReconMap>,
    /// `discoveries[i][j]`: cells agent `i` has added to its map since it last
    /// shared a network with agent `j`.
    pub discoveries: Vec<Vec<u64>>,
    pub t: usize,
}

impl WorldState {
    /// Places agents at the given cells and performs their initial sense.
    pub fn from_positions(arena: Arena, positions: Vec<Pos>) -> Result<Self> {
        for (i, &p) in positions.iter().enumerate() {
            if !arena.is_free(p) {
                return Err(Error::Precondition(format!("agent {i} placed on non-free cell {p}")));
            }
            if positions[..i].contains(&p) {
                return Err(Error::Precondition(format!("two agents placed on {p}")));
            }
        }
        let n = positions.len();
        let mut maps = vec![ReconMap::unknown(arena.rows(), arena.cols()); n];
        for (i, map) in maps.iter_mut().enumerate() {
            let patch = obsmap::sense_fov(&arena, &positions, i);
            obsmap::update_map(map, &patch);
        }
        Ok(Self {
            arena,
            positions,
            maps,
            discoveries: vec![vec![0; n]; n],
            t: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn known_counts(&self) -> Vec<usize> {
        self.maps.iter().map(ReconMap::known_count).collect()
    }

    /// Number of cells known to at least one agent.
    pub fn union_known(&self) -> usize {
        (0..self.arena.area())
            .filter(|&i| self.maps.iter().any(|m| m.cells()[i].is_known()))
            .count()
    }

    fn occupied_by_other(&self, p: Pos, agent: usize) -> bool {
        self.positions.iter().enumerate().any(|(j, &q)| j != agent && q == p)
    }

    /// Free for a mover at the start of this step: on-grid, no obstacle, no other agent.
    fn passable(&self, p: Pos, agent: usize) -> bool {
        self.arena.is_free(p) && !self.occupied_by_other(p, agent)
    }
}

/// Distinct free cells sampled uniformly, each agent sensing its surroundings once.
pub fn spawn_agents(seed: u64, arena: Arena, n_agents: usize) -> Result<WorldState> {
    let free = arena.free_cells();
    if free.len() < n_agents {
        return Err(Error::Precondition(format!(
            "{} free cells cannot host {n_agents} agents",
            free.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let positions = sample(&mut rng, free.len(), n_agents)
        .into_iter()
        .map(|i| free[i])
        .collect();
    WorldState::from_positions(arena, positions)
}

/// The mask a policy sees. Stay and communicate are always allowed.
pub fn available_actions(state: &WorldState, agent: usize, diagonal_through_free: bool) -> ActionMask {
    let here = state.positions[agent];
    let mut mask = ActionMask::NONE.with(Action::Stay).with(Action::Communicate);
    for d in Direction::ALL {
        if move_is_safe(state, agent, here, d, diagonal_through_free) {
            mask = mask.with(Action::Move(d));
        }
    }
    mask
}

fn move_is_safe(state: &WorldState, agent: usize, here: Pos, d: Direction, diagonal_through_free: bool) -> bool {
    if !state.passable(here.step(d), agent) {
        return false;
    }
    match (diagonal_through_free, d.cardinal_parts()) {
        (true, Some((a, b))) => state.passable(here.step(a), agent) || state.passable(here.step(b), agent),
        _ => true,
    }
}

/// Outcome of one agent's action this step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEvents {
    pub action: Action,
    /// The move was unsafe (off-grid, obstacle, occupied cell, swap); the agent stayed put.
    pub dangerous: bool,
    /// The move lost a same-cell race to a lower-indexed agent; the agent stayed put.
    pub blocked: bool,
    pub moved: bool,
    pub sensing_gain: usize,
    pub merge_gain: usize,
    /// Index into [`StepEvents::networks`] for agents that chose to communicate.
    pub network: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEvents {
    pub agents: Vec<AgentEvents>,
    /// Every network formed this step, singletons included.
    pub networks: Vec<MergeEvent>,
    /// `known(M_i)` before the step.
    pub known_before: Vec<usize>,
    /// `known(M_i)` after sensing, before any merge.
    pub known_sensed: Vec<usize>,
    /// `known(M_i)` at the end of the step.
    pub known_after: Vec<usize>,
    /// Discovery counters after sensing, before merges reset them.
    pub discoveries_before_merge: Vec<Vec<u64>>,
}

impl StepEvents {
    pub fn network_size(&self, agent: usize) -> usize {
        self.agents[agent]
            .network
            .map_or(0, |n| self.networks[n].members.len())
    }

    /// The agent chose to communicate and was joined by at least one other agent.
    pub fn shared(&self, agent: usize) -> bool {
        self.network_size(agent) >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resolution {
    Stays,
    Moving(Pos),
    Dangerous,
    Blocked,
}

/// Resolves a joint action into per-agent outcomes without mutating anything.
fn resolve_moves(state: &WorldState, actions: &[Action], diagonal_through_free: bool) -> Vec<Resolution> {
    let n = actions.len();
    let mut res: Vec<Resolution> = actions
        .iter()
        .enumerate()
        .map(|(i, &a)| match a {
            Action::Move(d) => {
                let here = state.positions[i];
                let target = here.step(d);
                let corner_cut = diagonal_through_free
                    && d.cardinal_parts().is_some_and(|(a, b)| {
                        !state.passable(here.step(a), i) && !state.passable(here.step(b), i)
                    });
                if !state.arena.is_free(target) || corner_cut {
                    Resolution::Dangerous
                } else {
                    Resolution::Moving(target)
                }
            }
            _ => Resolution::Stays,
        })
        .collect();

    // Mutual swaps.
    for i in 0..n {
        for j in i + 1..n {
            if let (Resolution::Moving(ti), Resolution::Moving(tj)) = (res[i], res[j]) {
                if ti == state.positions[j] && tj == state.positions[i] {
                    res[i] = Resolution::Dangerous;
                    res[j] = Resolution::Dangerous;
                }
            }
        }
    }

    // Blocking can cascade, so iterate to a fixed point.
    loop {
        let mut changed = false;
        for i in 0..n {
            let Resolution::Moving(t) = res[i] else { continue };
            let hits_stationary = (0..n).any(|j| {
                j != i && state.positions[j] == t && !matches!(res[j], Resolution::Moving(_))
            });
            if hits_stationary {
                res[i] = Resolution::Dangerous;
                changed = true;
            }
        }
        for i in 0..n {
            let Resolution::Moving(t) = res[i] else { continue };
            if (0..i).any(|j| res[j] == Resolution::Moving(t)) {
                res[i] = Resolution::Blocked;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    res
}

/// Advances the world by one joint action.
///
/// Order: classify and apply moves, sense, form networks and merge, advance time.
/// On error the state is left untouched.
pub fn step(state: &mut WorldState, actions: &[Action], config: &EnvConfig) -> Result<StepEvents> {
    let n = state.n_agents();
    if actions.len() != n {
        return Err(Error::BadActions(format!("expected {n} actions, got {}", actions.len())));
    }
    let known_before = state.known_counts();
    let resolution = resolve_moves(state, actions, config.diagonal_through_free);

    let mut agents: Vec<AgentEvents> = actions
        .iter()
        .zip(&resolution)
        .map(|(&action, r)| AgentEvents {
            action,
            dangerous: *r == Resolution::Dangerous,
            blocked: *r == Resolution::Blocked,
            moved: matches!(r, Resolution::Moving(_)),
            sensing_gain: 0,
            merge_gain: 0,
            network: None,
        })
        .collect();

    for (i, r) in resolution.iter().enumerate() {
        if let Resolution::Moving(t) = *r {
            state.positions[i] = t;
        }
    }
    debug_assert!(positions_distinct(&state.positions));

    for i in 0..n {
        let patch = obsmap::sense_fov(&state.arena, &state.positions, i);
        let gain = obsmap::update_map(&mut state.maps[i], &patch);
        agents[i].sensing_gain = gain;
        for j in 0..n {
            if j != i {
                state.discoveries[i][j] += gain as u64;
            }
        }
    }
    let known_sensed = state.known_counts();
    let discoveries_before_merge = state.discoveries.clone();

    let communicators: Vec<usize> = (0..n).filter(|&i| actions[i] == Action::Communicate).collect();
    let networks = comms::form_networks(&state.positions, &communicators, config.comm_range, config.cell_side);
    let mut merges = Vec::with_capacity(networks.len());
    for (k, net) in networks.iter().enumerate() {
        let event = comms::apply_merge(state, net)?;
        for (&m, &g) in event.members.iter().zip(&event.gains) {
            agents[m].network = Some(k);
            agents[m].merge_gain = g;
        }
        merges.push(event);
    }
    state.t += 1;

    Ok(StepEvents {
        agents,
        networks: merges,
        known_before,
        known_sensed,
        known_after: state.known_counts(),
        discoveries_before_merge,
    })
}

fn positions_distinct(p: &[Pos]) -> bool {
    (0..p.len()).all(|i| !p[..i].contains(&p[i]))
}

/// Draws a uniformly random joint action, unmasked. Test and fuzzing helper.
pub fn random_joint_action<R: Rng>(rng: &mut R, n_agents: usize) -> Vec<Action> {
    (0..n_agents)
        .map(|_| Action::from_id(rng.random_range(0..N_ACTIONS as u8)).unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(rows: usize, cols: usize) -> Arena {
        Arena::from_occupancy(rows, cols, 0.5, 0.0, vec![false; rows * cols]).unwrap()
    }

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn default_arena_has_fourteen_obstacles_and_connected_free_space() {
        let arena = generate_arena(0, &cfg()).unwrap();
        assert_eq!(arena.obstacle_count(), 14);
        assert!(arena.free_space_connected());
        assert_eq!((arena.rows(), arena.cols()), (12, 12));
    }

    #[test]
    fn zero_ratio_gives_empty_arena() {
        let c = EnvConfig { obstacle_ratio: 0.0, ..cfg() };
        let arena = generate_arena(3, &c).unwrap();
        assert_eq!(arena.obstacle_count(), 0);
        assert!(arena.free_space_connected());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_arena(11, &cfg()).unwrap(), generate_arena(11, &cfg()).unwrap());
        assert_ne!(generate_arena(11, &cfg()).unwrap(), generate_arena(12, &cfg()).unwrap());
    }

    #[test]
    fn infeasible_density_is_rejected() {
        let c = EnvConfig { rows: 3, cols: 3, obstacle_ratio: 0.6, n_agents: 4, ..cfg() };
        assert!(matches!(generate_arena(0, &c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn generation_gives_up_after_cap() {
        // In a 1x30 corridor, 14 obstacles keep the free cells connected only when
        // they form end blocks: 15 of C(30, 14) layouts.
        let c = EnvConfig { rows: 1, cols: 30, obstacle_ratio: 14.5 / 30.0, n_agents: 1, ..cfg() };
        assert_eq!(c.obstacle_count(), 14);
        assert!(matches!(
            generate_arena(1, &c),
            Err(Error::GenerationFailed { attempts: MAX_GENERATION_ATTEMPTS, .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        for c in [
            EnvConfig { comm_range: 1.0, detection_range: 1.1, ..cfg() },
            EnvConfig { detection_range: 0.0, comm_range: 0.0, ..cfg() },
            EnvConfig { horizon: 0, ..cfg() },
            EnvConfig { n_agents: 0, ..cfg() },
            EnvConfig { obstacle_ratio: 1.0, ..cfg() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn spawn_single_agent_knows_only_initial_patch() {
        let st = spawn_agents(4, open(12, 12), 1).unwrap();
        let p = st.positions[0];
        let interior = p.row > 0 && p.col > 0 && p.row < 11 && p.col < 11;
        let expected = if interior { 9 } else { st.maps[0].known_count() };
        assert_eq!(st.maps[0].known_count(), expected);
        for r in 0..12 {
            for c in 0..12 {
                let q = Pos::new(r, c);
                assert_eq!(st.maps[0].get(q).is_known(), q.chebyshev(p) <= 1);
            }
        }
        assert_eq!(st.t, 0);
    }

    #[test]
    fn spawn_four_agents_distinct_free() {
        let arena = generate_arena(2, &cfg()).unwrap();
        let st = spawn_agents(2, arena, 4).unwrap();
        assert!(positions_distinct(&st.positions));
        assert!(st.positions.iter().all(|&p| st.arena.is_free(p)));
        assert!(st.discoveries.iter().flatten().all(|&q| q == 0));
        assert_eq!(st, spawn_agents(2, st.arena.clone(), 4).unwrap());
    }

    #[test]
    fn move_east_into_free_cell() {
        let mut st = WorldState::from_positions(open(5, 5), vec![Pos::new(2, 2)]).unwrap();
        let ev = step(&mut st, &[Action::Move(Direction::E)], &cfg()).unwrap();
        assert_eq!(st.positions[0], Pos::new(2, 3));
        assert!(!ev.agents[0].dangerous && ev.agents[0].moved);
        assert_eq!(ev.agents[0].sensing_gain, 3);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn move_into_obstacle_is_dangerous() {
        let arena = Arena::from_ascii(".....\n.....\n...#.\n.....\n.....", 0.5).unwrap();
        let mut st = WorldState::from_positions(arena, vec![Pos::new(2, 2)]).unwrap();
        let ev = step(&mut st, &[Action::Move(Direction::E)], &cfg()).unwrap();
        assert_eq!(st.positions[0], Pos::new(2, 2));
        assert!(ev.agents[0].dangerous);
    }

    #[test]
    fn off_grid_is_dangerous() {
        let mut st = WorldState::from_positions(open(5, 5), vec![Pos::new(0, 0)]).unwrap();
        let ev = step(&mut st, &[Action::Move(Direction::NW)], &cfg()).unwrap();
        assert!(ev.agents[0].dangerous);
        assert_eq!(st.positions[0], Pos::new(0, 0));
    }

    #[test]
    fn swap_blocks_both() {
        let mut st = WorldState::from_positions(open(5, 5), vec![Pos::new(2, 1), Pos::new(2, 2)]).unwrap();
        let ev = step(&mut st, &[Action::Move(Direction::E), Action::Move(Direction::W)], &cfg()).unwrap();
        assert!(ev.agents[0].dangerous && ev.agents[1].dangerous);
        assert_eq!(st.positions, vec![Pos::new(2, 1), Pos::new(2, 2)]);
    }

    #[test]
    fn follow_the_leader_is_allowed() {
        let mut st = WorldState::from_positions(open(5, 5), vec![Pos::new(2, 1), Pos::new(2, 2)]).unwrap();
        let ev = step(&mut st, &[Action::Move(Direction::E), Action::Move(Direction::E)], &cfg()).unwrap();
        assert!(ev.agents.iter().all(|a| a.moved && !a.dangerous));
        assert_eq!(st.positions, vec![Pos::new(2, 2), Pos::new(2, 3)]);
    }

    #[test]
    fn same_target_lower_index_wins() {
        let mut st = WorldState::from_positions(open(5, 5), vec![Pos::new(2, 1), Pos::new(2, 3)]).unwrap();
        let ev = step(&mut st, &[Action::Move(Direction::E), Action::Move(Direction::W)], &cfg()).unwrap();
        assert!(ev.agents[0].moved);
        assert!(ev.agents[1].blocked && !ev.agents[1].moved && !ev.agents[1].dangerous);
        assert_eq!(st.positions, vec![Pos::new(2, 2), Pos::new(2, 3)]);
    }

    #[test]
    fn wrong_action_count_rejected_without_mutation() {
        let mut st = WorldState::from_positions(open(5, 5), vec![Pos::new(2, 1), Pos::new(2, 3)]).unwrap();
        let before = st.clone();
        assert!(matches!(step(&mut st, &[Action::Stay], &cfg()), Err(Error::BadActions(_))));
        assert_eq!(st, before);
    }

    #[test]
    fn interior_and_corner_masks() {
        let st = WorldState::from_positions(open(5, 5), vec![Pos::new(2, 2)]).unwrap();
        assert_eq!(available_actions(&st, 0, false), ActionMask::ALL);
        let st = WorldState::from_positions(open(5, 5), vec![Pos::new(0, 0)]).unwrap();
        let m = available_actions(&st, 0, false);
        assert_eq!(m.count(), 5);
        for d in [Direction::E, Direction::SE, Direction::S] {
            assert!(m.is_available(Action::Move(d)));
        }
    }

    #[test]
    fn diagonal_through_free_blocks_corner_cutting() {
        let arena = Arena::from_ascii("...\n.#.\n...", 0.5).unwrap();
        let mut st = WorldState::from_positions(arena, vec![Pos::new(0, 1), Pos::new(1, 0)]).unwrap();
        // Agent 0 at top-middle moving SW lands on agent 1; move agent 1 away first.
        st.positions[1] = Pos::new(2, 2);
        let m_off = available_actions(&st, 0, false);
        let m_on = available_actions(&st, 0, true);
        // SE from (0,1) is (1,2); cardinals are S=(1,1) obstacle and E=(0,2) free → allowed.
        assert!(m_on.is_available(Action::Move(Direction::SE)));
        // Put an agent on (0,2): now both cardinals blocked.
        st.positions[1] = Pos::new(0, 2);
        let m_on = available_actions(&st, 0, true);
        assert!(!m_on.is_available(Action::Move(Direction::SE)));
        assert!(m_off.is_available(Action::Move(Direction::SE)));
        let c = EnvConfig { diagonal_through_free: true, ..cfg() };
        let ev = step(&mut st, &[Action::Move(Direction::SE), Action::Stay], &c).unwrap();
        assert!(ev.agents[0].dangerous);
    }

    #[test]
    fn arena_json_round_trip() {
        let arena = generate_arena(8, &cfg()).unwrap();
        let text = arena.to_json();
        assert_eq!(Arena::from_json(&text).unwrap(), arena);
        assert!(text.contains("\"grid\""));
    }

    #[test]
    fn action_ids_cover_ten_values() {
        let ids: Vec<u8> = Action::all().map(Action::id).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert_eq!(Action::from_id(10), None);
    }
}
