//! Map sharing between agents that chose to communicate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pos;
use crate::obsmap::{in_comm_range, Knowledge, ReconMap};
use crate::world::WorldState;

/// Agents that communicated this step and are linked by a chain of in-range pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommNetwork {
    /// Sorted ascending.
    pub members: Vec<usize>,
}

/// Connected components of the in-range graph over `communicators`.
///
/// Members are sorted and networks ordered by their smallest member, so the
/// partition does not depend on the order communicators are listed in.
pub fn form_networks(positions: &[Pos], communicators: &[usize], comm_range: f64, cell_side: f64) -> Vec<CommNetwork> {
    let mut nodes: Vec<usize> = communicators.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    let mut component = vec![usize::MAX; nodes.len()];
    let mut networks = Vec::new();
    for root in 0..nodes.len() {
        if component[root] != usize::MAX {
            continue;
        }
        let id = networks.len();
        component[root] = id;
        let mut stack = vec![root];
        let mut members = vec![nodes[root]];
        while let Some(a) = stack.pop() {
            for b in 0..nodes.len() {
                if component[b] == usize::MAX
                    && in_comm_range(positions[nodes[a]], positions[nodes[b]], comm_range, cell_side)
                {
                    component[b] = id;
                    members.push(nodes[b]);
                    stack.push(b);
                }
            }
        }
        members.sort_unstable();
        networks.push(CommNetwork { members });
    }
    networks
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub map: ReconMap,
    /// Cells that one map had Free and another Occupied. Resolved as Occupied.
    pub conflicts: Vec<Pos>,
}

/// Cell-wise union of knowledge. Known beats Unknown; on a Free/Occupied clash Occupied wins.
pub fn merge_maps(maps: &[&ReconMap]) -> Result<MergeOutcome> {
    let Some(first) = maps.first() else {
        return Err(Error::DimensionMismatch("no maps to merge".into()));
    };
    if let Some(bad) = maps.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::DimensionMismatch(format!(
            "cannot merge {}x{} with {}x{}",
            first.rows(),
            first.cols(),
            bad.rows(),
            bad.cols()
        )));
    }
    let mut merged = (*first).clone();
    let mut conflicts = Vec::new();
    for m in &maps[1..] {
        for (idx, &k) in m.cells().iter().enumerate() {
            let cur = merged.cells()[idx];
            match (cur, k) {
                (_, Knowledge::Unknown) => {}
                (Knowledge::Unknown, _) => merged.set_raw(idx, k),
                (Knowledge::Free, Knowledge::Occupied) | (Knowledge::Occupied, Knowledge::Free) => {
                    let p = merged.pos_of(idx);
                    if !conflicts.contains(&p) {
                        conflicts.push(p);
                    }
                    merged.set_raw(idx, Knowledge::Occupied);
                }
                _ => {}
            }
        }
    }
    conflicts.sort_unstable();
    Ok(MergeOutcome { map: merged, conflicts })
}

/// A network's merge as it appears in traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub members: Vec<usize>,
    /// Cells each member gained from the merge, aligned with `members`.
    pub gains: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicts: Vec<Pos>,
}

/// Replaces every member's map with the union and resets the members' mutual
/// discovery counters. Merge gains count as new discoveries towards non-members.
pub fn apply_merge(state: &mut WorldState, network: &CommNetwork) -> Result<MergeEvent> {
    let members = &network.members;
    if members.len() < 2 {
        return Ok(MergeEvent {
            members: members.clone(),
            gains: vec![0; members.len()],
            conflicts: Vec::new(),
        });
    }
    let outcome = {
        let maps: Vec<&ReconMap> = members.iter().map(|&i| &state.maps[i]).collect();
        merge_maps(&maps)?
    };
    let n = state.n_agents();
    let union_known = outcome.map.known_count();
    let mut gains = Vec::with_capacity(members.len());
    for &i in members {
        let gain = union_known - state.maps[i].known_count();
        gains.push(gain);
        state.maps[i] = outcome.map.clone();
        for j in 0..n {
            if j != i {
                state.discoveries[i][j] += gain as u64;
            }
        }
    }
    for &i in members {
        for &j in members {
            state.discoveries[i][j] = 0;
        }
    }
    Ok(MergeEvent { members: members.clone(), gains, conflicts: outcome.conflicts })
}
