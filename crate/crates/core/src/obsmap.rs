//! Per-agent observations and the reconstructed map each agent grows.
//!
//! An agent senses the 3×3 patch around itself every step. The patch marks
//! static obstacles, off-grid cells and other agents as occupied; the
//! reconstructed map keeps only static structure, so cells holding another
//! agent are recorded as free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontier;
use crate::geom::Pos;
use crate::world::{available_actions, ActionMask, Arena, EnvConfig, WorldState};

/// Sensing radius in cells; the field of view is the `(2r+1)²` square around the agent.
pub const SENSE_RADIUS: i32 = 1;
pub const FOV_SIDE: usize = 3;
pub const FOV_LEN: usize = FOV_SIDE * FOV_SIDE;
pub const FPR_LEN: usize = 24;

/// Ternary knowledge of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Knowledge {
    Unknown,
    Free,
    Occupied,
}

impl Knowledge {
    pub fn code(self) -> i8 {
        match self {
            Knowledge::Unknown => -1,
            Knowledge::Free => 0,
            Knowledge::Occupied => 1,
        }
    }

    pub fn from_code(code: i8) -> Option<Knowledge> {
        match code {
            -1 => Some(Knowledge::Unknown),
            0 => Some(Knowledge::Free),
            1 => Some(Knowledge::Occupied),
            _ => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != Knowledge::Unknown
    }
}

/// An agent's belief grid. Knowledge only ever grows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconMap {
    rows: usize,
    cols: usize,
    cells: Vec<Knowledge>,
    known: usize,
}

#[derive(Serialize, Deserialize)]
struct ReconMapFile {
    version: u32,
    rows: usize,
    cols: usize,
    cells: Vec<Vec<i8>>,
}

pub const MAP_FORMAT_VERSION: u32 = 1;

impl ReconMap {
    pub fn unknown(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![Knowledge::Unknown; rows * cols],
            known: 0,
        }
    }

    /// Builds a map from row-major `{-1, 0, 1}` codes.
    pub fn from_codes(rows: usize, cols: usize, codes: &[i8]) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {} cells for a {rows}x{cols} map, got {}",
                rows * cols,
                codes.len()
            )));
        }
        let mut map = Self::unknown(rows, cols);
        for (i, &c) in codes.iter().enumerate() {
            let k = Knowledge::from_code(c)
                .ok_or_else(|| Error::InvalidConfig(format!("cell code {c} is not one of -1, 0, 1")))?;
            map.cells[i] = k;
            if k.is_known() {
                map.known += 1;
            }
        }
        Ok(map)
    }

    /// Parses a small ASCII picture: `?` unknown, `.` free, `#` occupied.
    pub fn from_ascii(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |(_, l)| l.chars().count());
        let mut codes = Vec::with_capacity(rows * cols);
        for &(line_no, line) in &lines {
            if line.chars().count() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "line {line_no}: width {} differs from first row width {cols}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                codes.push(match ch {
                    '?' => -1,
                    '.' => 0,
                    '#' => 1,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "line {line_no}, column {}: unexpected map character {other:?}",
                            c + 1
                        )))
                    }
                });
            }
        }
        Self::from_codes(rows, cols, &codes)
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(match self.cells[r * self.cols + c] {
                    Knowledge::Unknown => '?',
                    Knowledge::Free => '.',
                    Knowledge::Occupied => '#',
                });
            }
            s.push('\n');
        }
        s
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

    /// Number of cells that are Free or Occupied.
    pub fn known_count(&self) -> usize {
        self.known
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.row >= 0 && p.col >= 0 && (p.row as usize) < self.rows && (p.col as usize) < self.cols
    }

    pub fn index(&self, p: Pos) -> Option<usize> {
        self.in_bounds(p)
            .then(|| p.row as usize * self.cols + p.col as usize)
    }

    pub fn pos_of(&self, idx: usize) -> Pos {
        Pos::new((idx / self.cols) as i32, (idx % self.cols) as i32)
    }

    /// Knowledge at `p`; off-grid cells read as Occupied.
    pub fn get(&self, p: Pos) -> Knowledge {
        self.index(p).map_or(Knowledge::Occupied, |i| self.cells[i])
    }

    pub fn is_free(&self, p: Pos) -> bool {
        self.get(p) == Knowledge::Free
    }

    pub fn cells(&self) -> &[Knowledge] {
        &self.cells
    }

    /// Sets a cell only if it is still Unknown. Returns whether it changed.
    pub fn learn(&mut self, p: Pos, k: Knowledge) -> bool {
        match self.index(p) {
            Some(i) if self.cells[i] == Knowledge::Unknown && k.is_known() => {
                self.cells[i] = k;
                self.known += 1;
                true
            }
            _ => false,
        }
    }

    /// Overwrites a cell unconditionally. Used by merging, which owns its own conflict rule.
    pub(crate) fn set_raw(&mut self, idx: usize, k: Knowledge) {
        let was = self.cells[idx].is_known();
        self.cells[idx] = k;
        match (was, k.is_known()) {
            (false, true) => self.known += 1,
            (true, false) => self.known -= 1,
            _ => {}
        }
    }

    pub fn same_shape(&self, other: &ReconMap) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn to_json(&self) -> String {
        let file = ReconMapFile {
            version: MAP_FORMAT_VERSION,
            rows: self.rows,
            cols: self.cols,
            cells: (0..self.rows)
                .map(|r| {
                    self.cells[r * self.cols..(r + 1) * self.cols]
                        .iter()
                        .map(|k| k.code())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("map serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ReconMapFile = serde_json::from_str(text)?;
        if file.version != MAP_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported map format version {}",
                file.version
            )));
        }
        if file.cells.len() != file.rows {
            return Err(Error::DimensionMismatch(format!(
                "declared {} rows, found {}",
                file.rows,
                file.cells.len()
            )));
        }
        let mut codes = Vec::with_capacity(file.rows * file.cols);
        for (r, row) in file.cells.iter().enumerate() {
            if row.len() != file.cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {r} has {} cells, expected {}",
                    row.len(),
                    file.cols
                )));
            }
            codes.extend_from_slice(row);
        }
        Self::from_codes(file.rows, file.cols, &codes)
    }
}

/// What the sensor reports for one FOV cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FovCell {
    Free,
    /// Static obstacle.
    Obstacle,
    OffGrid,
    /// Statically free but holding another agent.
    Agent,
}

impl FovCell {
    pub fn is_occupied(self) -> bool {
        self != FovCell::Free
    }
}

/// The 3×3 patch around an agent, row-major from NW to SE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FovPatch {
    pub center: Pos,
    pub cells: [FovCell; FOV_LEN],
}

impl FovPatch {
    pub fn cell_pos(&self, k: usize) -> Pos {
        let r = (k / FOV_SIDE) as i32 - SENSE_RADIUS;
        let c = (k % FOV_SIDE) as i32 - SENSE_RADIUS;
        Pos::new(self.center.row + r, self.center.col + c)
    }

    pub fn binarized(&self) -> [f64; FOV_LEN] {
        self.cells.map(|c| if c.is_occupied() { 1.0 } else { 0.0 })
    }
}

pub fn sense_fov(arena: &Arena, positions: &[Pos], agent: usize) -> FovPatch {
    let center = positions[agent];
    let mut cells = [FovCell::Free; FOV_LEN];
    for (k, cell) in cells.iter_mut().enumerate() {
        let p = Pos::new(
            center.row + (k / FOV_SIDE) as i32 - SENSE_RADIUS,
            center.col + (k % FOV_SIDE) as i32 - SENSE_RADIUS,
        );
        *cell = if !arena.in_bounds(p) {
            FovCell::OffGrid
        } else if arena.is_obstacle(p) {
            FovCell::Obstacle
        } else if positions
            .iter()
            .enumerate()
            .any(|(j, &q)| j != agent && q == p)
        {
            FovCell::Agent
        } else {
            FovCell::Free
        };
    }
    FovPatch { center, cells }
}

/// Folds a patch into the map. Returns how many cells left the Unknown state.
pub fn update_map(map: &mut ReconMap, patch: &FovPatch) -> usize {
    let mut gained = 0;
    for (k, &cell) in patch.cells.iter().enumerate() {
        let knowledge = match cell {
            FovCell::OffGrid => continue,
            FovCell::Obstacle => Knowledge::Occupied,
            FovCell::Free | FovCell::Agent => Knowledge::Free,
        };
        if map.learn(patch.cell_pos(k), knowledge) {
            gained += 1;
        }
    }
    gained
}

/// Whether two cells are within communication range, measured between cell
/// centres and scaled to metres.
pub fn in_comm_range(a: Pos, b: Pos, comm_range: f64, cell_side: f64) -> bool {
    cell_side * a.euclidean(b) <= comm_range
}

/// Bit `j` is set when agent `j` is within communication range of `agent`; the self bit is always set.
pub fn net_vector(positions: &[Pos], agent: usize, comm_range: f64, cell_side: f64) -> Vec<bool> {
    let me = positions[agent];
    positions
        .iter()
        .map(|&p| in_comm_range(me, p, comm_range, cell_side))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub fov: [f64; FOV_LEN],
    pub fpr: [f64; FPR_LEN],
    pub net: Vec<f64>,
    pub mask: ActionMask,
}

impl Observation {
    /// Policy input: FOV, FPR and NET concatenated.
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.fov);
        v.extend_from_slice(&self.fpr);
        v.extend_from_slice(&self.net);
        v
    }

    pub fn len(&self) -> usize {
        FOV_LEN + FPR_LEN + self.net.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_agents(&self) -> usize {
        self.net.len()
    }

    /// Raw per-direction `(n, mu, sigma)` triple after normalization.
    pub fn fpr_triple(&self, dir: usize) -> (f64, f64, f64) {
        (self.fpr[3 * dir], self.fpr[3 * dir + 1], self.fpr[3 * dir + 2])
    }
}

/// Feature length for a team of `n_agents`.
pub fn feature_len(n_agents: usize) -> usize {
    FOV_LEN + FPR_LEN + n_agents
}

pub fn build_observation(state: &WorldState, agent: usize, config: &EnvConfig) -> Observation {
    let patch = sense_fov(&state.arena, &state.positions, agent);
    let (_, fpr) = frontier::fpr_features(&state.maps[agent], state.positions[agent])
        .expect("an agent's own cell is always free in its map");
    let net = net_vector(&state.positions, agent, config.comm_range, config.cell_side)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    Observation {
        fov: patch.binarized(),
        fpr,
        net,
        mask: available_actions(state, agent, config.diagonal_through_free),
    }
}
