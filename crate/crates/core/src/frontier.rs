//! Frontier detection, A* trajectories and per-direction reachability features.
//!
//! For every frontier reachable on known ground, an A* path is planned from
//! the agent. Paths are grouped by their first move; each of the eight
//! directions contributes the count, mean length and standard deviation of
//! its paths. The 24 numbers are then normalized to `[0, 1]`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geom::{Direction, Pos};
use crate::obsmap::{Knowledge, ReconMap, FPR_LEN};

/// Free cells with at least one 4-neighbour that is Unknown, in row-major order.
pub fn detect_frontiers(map: &ReconMap) -> Vec<Pos> {
    const CARDINAL: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];
    let mut out = Vec::new();
    for idx in 0..map.area() {
        let p = map.pos_of(idx);
        if map.cells()[idx] != Knowledge::Free {
            continue;
        }
        let touches_unknown = CARDINAL.iter().any(|&d| {
            let q = p.step(d);
            map.in_bounds(q) && map.get(q) == Knowledge::Unknown
        });
        if touches_unknown {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub cells: Vec<Pos>,
}

impl Path {
    /// Number of moves.
    pub fn len(&self) -> usize {
        self.cells.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_move(&self) -> Option<Direction> {
        match self.cells.as_slice() {
            [a, b, ..] => a.direction_to(*b),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Open {
    f: u32,
    h: u32,
    dir: u8,
    seq: u32,
    idx: u32,
}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for smallest (f, h, dir, seq) first.
        (other.f, other.h, other.dir, other.seq).cmp(&(self.f, self.h, self.dir, self.seq))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const UNSEEN: u32 = u32::MAX;

/// Reusable A* workspace for one map size.
pub struct Planner {
    g: Vec<u32>,
    parent: Vec<u32>,
    closed: Vec<bool>,
    heap: BinaryHeap<Open>,
}

impl Planner {
    pub fn new(area: usize) -> Self {
        Self {
            g: vec![UNSEEN; area],
            parent: vec![UNSEEN; area],
            closed: vec![false; area],
            heap: BinaryHeap::new(),
        }
    }

    /// Unit-cost 8-connected shortest path over Free cells with the Chebyshev heuristic.
    /// Ties are broken by `(f, h, direction of the move into the node)`.
    pub fn plan(&mut self, map: &ReconMap, start: Pos, goal: Pos) -> Result<Option<Path>> {
        if !map.is_free(start) {
            return Err(Error::Precondition(format!("A* start {start} is not free")));
        }
        if !map.is_free(goal) {
            return Ok(None);
        }
        let area = map.area();
        if self.g.len() != area {
            *self = Planner::new(area);
        }
        self.g.fill(UNSEEN);
        self.closed.fill(false);
        self.heap.clear();

        let s = map.index(start).unwrap();
        let goal_idx = map.index(goal).unwrap();
        let h0 = start.chebyshev(goal) as u32;
        self.g[s] = 0;
        self.parent[s] = UNSEEN;
        let mut seq = 0;
        self.heap.push(Open { f: h0, h: h0, dir: 0, seq, idx: s as u32 });

        while let Some(node) = self.heap.pop() {
            let cur = node.idx as usize;
            if self.closed[cur] {
                continue;
            }
            self.closed[cur] = true;
            if cur == goal_idx {
                return Ok(Some(self.reconstruct(map, goal_idx)));
            }
            let p = map.pos_of(cur);
            let ng = self.g[cur] + 1;
            for d in Direction::ALL {
                let q = p.step(d);
                if !map.is_free(q) {
                    continue;
                }
                let qi = map.index(q).unwrap();
                if self.closed[qi] || ng >= self.g[qi] {
                    continue;
                }
                self.g[qi] = ng;
                self.parent[qi] = cur as u32;
                let h = q.chebyshev(goal) as u32;
                seq += 1;
                self.heap.push(Open { f: ng + h, h, dir: d.index() as u8, seq, idx: qi as u32 });
            }
        }
        Ok(None)
    }

    fn reconstruct(&self, map: &ReconMap, goal: usize) -> Path {
        let mut cells = vec![map.pos_of(goal)];
        let mut cur = goal;
        while self.parent[cur] != UNSEEN {
            cur = self.parent[cur] as usize;
            cells.push(map.pos_of(cur));
        }
        cells.reverse();
        Path { cells }
    }
}

pub fn astar(map: &ReconMap, start: Pos, goal: Pos) -> Result<Option<Path>> {
    Planner::new(map.area()).plan(map, start, goal)
}

/// Per-direction path statistics, directions in N..NW order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FprTable {
    pub count: [usize; 8],
    pub mean: [f64; 8],
    pub std: [f64; 8],
}

impl FprTable {
    pub fn total(&self) -> usize {
        self.count.iter().sum()
    }

    /// Count as share of the total; mean and std divided by their maxima. `0/0` is 0.
    pub fn normalized(&self) -> [f64; FPR_LEN] {
        let total = self.total() as f64;
        let max_mean = self.mean.iter().copied().fold(0.0, f64::max);
        let max_std = self.std.iter().copied().fold(0.0, f64::max);
        let ratio = |x: f64, d: f64| if d > 0.0 { x / d } else { 0.0 };
        let mut out = [0.0; FPR_LEN];
        for d in 0..8 {
            out[3 * d] = ratio(self.count[d] as f64, total);
            out[3 * d + 1] = ratio(self.mean[d], max_mean);
            out[3 * d + 2] = ratio(self.std[d], max_std);
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::from("dir      n        mu     sigma\n");
        for d in Direction::ALL {
            let i = d.index();
            s.push_str(&format!(
                "{:<3} {:>6} {:>9.4} {:>9.4}\n",
                d.name(),
                self.count[i],
                self.mean[i],
                self.std[i]
            ));
        }
        s
    }
}

fn reachable_from(map: &ReconMap, start: Pos) -> Vec<bool> {
    let mut seen = vec![false; map.area()];
    let Some(s) = map.index(start) else { return seen };
    seen[s] = true;
    let mut stack = vec![start];
    while let Some(p) = stack.pop() {
        for d in Direction::ALL {
            let q = p.step(d);
            if map.is_free(q) {
                let qi = map.index(q).unwrap();
                if !seen[qi] {
                    seen[qi] = true;
                    stack.push(q);
                }
            }
        }
    }
    seen
}

/// Builds the statistics table and its normalized 24-value encoding.
///
/// Unreachable frontiers and the agent's own cell are left out.
pub fn fpr_features(map: &ReconMap, position: Pos) -> Result<(FprTable, [f64; FPR_LEN])> {
    if !map.is_free(position) {
        return Err(Error::Precondition(format!("agent position {position} is not free in its map")));
    }
    let reachable = reachable_from(map, position);
    let mut planner = Planner::new(map.area());
    let mut lengths: [Vec<usize>; 8] = Default::default();
    for f in detect_frontiers(map) {
        if f == position || !reachable[map.index(f).unwrap()] {
            continue;
        }
        // Reachability was checked, so a path exists.
        let Some(path) = planner.plan(map, position, f)? else { continue };
        let d = path.first_move().expect("non-self path has a first move");
        lengths[d.index()].push(path.len());
    }

    let mut table = FprTable::default();
    for (d, ls) in lengths.iter().enumerate() {
        if ls.is_empty() {
            continue;
        }
        let n = ls.len() as f64;
        let mean = ls.iter().sum::<usize>() as f64 / n;
        let var = ls.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
        table.count[d] = ls.len();
        table.mean[d] = mean;
        table.std[d] = var.sqrt();
    }
    let normalized = table.normalized();
    Ok((table, normalized))
}
