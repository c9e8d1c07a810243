use std::collections::VecDeque;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use swarmap_core::comms::{apply_merge, form_networks, merge_maps, CommNetwork};
use swarmap_core::eval::{EvalReport, RunMetrics};
use swarmap_core::frontier::{astar, detect_frontiers, fpr_features};
use swarmap_core::obsmap::{net_vector, sense_fov, update_map};
use swarmap_core::policy::ActionDistribution;
use swarmap_core::reward::{reward_case1, reward_case2, RewardInputs, SHARE_BASE};
use swarmap_core::seed;
use swarmap_core::trace::verify_replay;
use swarmap_core::world::{available_actions, generate_arena, random_joint_action, spawn_agents, step};
use swarmap_core::{Action, ActionMask, Direction, EnvConfig, Episode, EpisodeTrace, Knowledge, Pos, ReconMap, WorldState};

fn small_config() -> impl Strategy<Value = EnvConfig> {
    (4usize..=12, 4usize..=12, 1usize..=5, prop::sample::select(vec![0.0, 0.1, 0.2]), any::<bool>(), 0.6f64..4.0)
        .prop_map(|(rows, cols, n_agents, obstacle_ratio, diagonal_through_free, comm_range)| EnvConfig {
            rows,
            cols,
            n_agents,
            obstacle_ratio,
            diagonal_through_free,
            comm_range,
            detection_range: 0.5,
            horizon: 1000,
            ..EnvConfig::default()
        })
}

fn random_episode(config: &EnvConfig, seed_value: u64, action_seed: u64, steps: usize) -> EpisodeTrace {
    let mut ep = Episode::new(config.clone(), seed_value).unwrap();
    let mut rng = seed::rng(action_seed);
    for _ in 0..steps {
        ep.step(&random_joint_action(&mut rng, config.n_agents)).unwrap();
    }
    ep.into_trace()
}

fn assert_safe(state: &WorldState) {
    for (i, &p) in state.positions.iter().enumerate() {
        assert!(state.arena.is_free(p), "agent {i} on non-free cell {p}");
        assert!(!state.positions[..i].contains(&p), "agents share cell {p}");
    }
}

fn assert_consistent(state: &WorldState) {
    for map in &state.maps {
        for (idx, &k) in map.cells().iter().enumerate() {
            let p = map.pos_of(idx);
            match k {
                Knowledge::Free => assert!(state.arena.is_free(p), "{p} marked free"),
                Knowledge::Occupied => assert!(state.arena.is_obstacle(p), "{p} marked occupied"),
                Knowledge::Unknown => {}
            }
        }
    }
}

fn random_map(rows: usize, cols: usize, codes: &[i8]) -> ReconMap {
    ReconMap::from_codes(rows, cols, &codes[..rows * cols]).unwrap()
}

fn map_strategy() -> impl Strategy<Value = ReconMap> {
    (2usize..=9, 2usize..=9, prop::collection::vec(prop::sample::select(vec![-1i8, 0, 0, 0, 1]), 81))
        .prop_map(|(r, c, codes)| random_map(r, c, &codes))
}

fn transform(map: &ReconMap, f: impl Fn(Pos) -> Pos, rows: usize, cols: usize) -> ReconMap {
    let mut codes = vec![0i8; rows * cols];
    for (idx, k) in map.cells().iter().enumerate() {
        let q = f(map.pos_of(idx));
        codes[q.row as usize * cols + q.col as usize] = k.code();
    }
    ReconMap::from_codes(rows, cols, &codes).unwrap()
}

fn bfs_frontier_distance(map: &ReconMap, start: Pos) -> Option<usize> {
    let frontiers = detect_frontiers(map);
    let mut dist = vec![usize::MAX; map.area()];
    let mut queue = VecDeque::from([start]);
    dist[map.index(start).unwrap()] = 0;
    while let Some(p) = queue.pop_front() {
        let d = dist[map.index(p).unwrap()];
        if frontiers.contains(&p) {
            return Some(d);
        }
        for dir in Direction::ALL {
            let q = p.step(dir);
            if map.is_free(q) && dist[map.index(q).unwrap()] == usize::MAX {
                dist[map.index(q).unwrap()] = d + 1;
                queue.push_back(q);
            }
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_keep_world_invariants(config in small_config(), s in any::<u64>(), a in any::<u64>(), steps in 1usize..60) {
        let mut ep = Episode::new(config.clone(), s).unwrap();
        let mut rng = seed::rng(a);
        let mut prev: Vec<Vec<Knowledge>> = ep.state().maps.iter().map(|m| m.cells().to_vec()).collect();
        for _ in 0..steps {
            ep.step(&random_joint_action(&mut rng, config.n_agents)).unwrap();
            let state = ep.state();
            assert_safe(state);
            assert_consistent(state);
            for (i, map) in state.maps.iter().enumerate() {
                for (before, now) in prev[i].iter().zip(map.cells()) {
                    prop_assert!(!before.is_known() || now == before);
                }
            }
            prev = state.maps.iter().map(|m| m.cells().to_vec()).collect();
        }
        let trace = ep.into_trace();
        verify_replay(&trace).unwrap();
        prop_assert_eq!(random_episode(&config, s, a, steps).to_json(), trace.to_json());
    }

    #[test]
    fn mask_is_exactly_the_safe_solo_moves(config in small_config(), s in any::<u64>(), a in any::<u64>(), warmup in 0usize..20) {
        let mut ep = Episode::new(config.clone(), s).unwrap();
        let mut rng = seed::rng(a);
        for _ in 0..warmup {
            ep.step(&random_joint_action(&mut rng, config.n_agents)).unwrap();
        }
        let state = ep.state().clone();
        for agent in 0..config.n_agents {
            let mask = available_actions(&state, agent, config.diagonal_through_free);
            prop_assert_eq!(mask, ep.observation(agent).mask);
            for action in Action::all() {
                let mut joint = vec![Action::Stay; config.n_agents];
                joint[agent] = action;
                let mut trial = state.clone();
                let events = step(&mut trial, &joint, &config).unwrap();
                prop_assert_eq!(events.agents[agent].dangerous, !mask.is_available(action), "{:?}", action);
                prop_assert!(!events.agents[agent].blocked);
            }
        }
    }

    #[test]
    fn sensing_is_idempotent_and_monotone(config in small_config(), s in any::<u64>()) {
        let arena = generate_arena(s, &config).unwrap();
        let state = spawn_agents(s, arena, config.n_agents).unwrap();
        for agent in 0..config.n_agents {
            let patch = sense_fov(&state.arena, &state.positions, agent);
            let mut once = ReconMap::unknown(config.rows, config.cols);
            update_map(&mut once, &patch);
            let mut twice = once.clone();
            prop_assert_eq!(update_map(&mut twice, &patch), 0);
            prop_assert_eq!(&once, &twice);
            let mut known = state.maps[agent].clone();
            let before = known.known_count();
            let gained = update_map(&mut known, &patch);
            prop_assert_eq!(known.known_count(), before + gained);
        }
    }

    #[test]
    fn net_vector_is_symmetric(cells in prop::collection::vec((0i32..12, 0i32..12), 1..6), range in 0.1f64..6.0, side in 0.1f64..1.0) {
        let positions: Vec<Pos> = cells.into_iter().map(|(r, c)| Pos::new(r, c)).collect();
        let rows: Vec<Vec<bool>> = (0..positions.len()).map(|i| net_vector(&positions, i, range, side)).collect();
        for i in 0..positions.len() {
            prop_assert!(rows[i][i]);
            for j in 0..positions.len() {
                prop_assert_eq!(rows[i][j], rows[j][i]);
            }
        }
    }

    #[test]
    fn observation_length(config in small_config(), s in any::<u64>()) {
        let ep = Episode::new(config.clone(), s).unwrap();
        for obs in ep.observations() {
            prop_assert_eq!(obs.features().len(), 33 + config.n_agents);
        }
    }

    #[test]
    fn fpr_outputs_are_normalized_and_pure(map in map_strategy(), pick in any::<prop::sample::Index>()) {
        let free: Vec<Pos> = (0..map.area()).map(|i| map.pos_of(i)).filter(|&p| map.is_free(p)).collect();
        prop_assume!(!free.is_empty());
        let p = free[pick.index(free.len())];
        let (table, v) = fpr_features(&map, p).unwrap();
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        if table.total() > 0 {
            prop_assert!((0..8).any(|d| v[3 * d + 1] == 1.0));
        }
        let (again, w) = fpr_features(&map, p).unwrap();
        prop_assert_eq!(table, again);
        prop_assert_eq!(v, w);
    }

    #[test]
    fn astar_length_survives_transpose_and_rotation(map in map_strategy(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let free: Vec<Pos> = (0..map.area()).map(|i| map.pos_of(i)).filter(|&p| map.is_free(p)).collect();
        prop_assume!(!free.is_empty());
        let (s, g) = (free[a.index(free.len())], free[b.index(free.len())]);
        let len = astar(&map, s, g).unwrap().map(|p| p.len());
        let (r, c) = (map.rows(), map.cols());
        let t = |p: Pos| Pos::new(p.col, p.row);
        let transposed = transform(&map, t, c, r);
        prop_assert_eq!(astar(&transposed, t(s), t(g)).unwrap().map(|p| p.len()), len);
        let rot = |p: Pos| Pos::new(p.col, r as i32 - 1 - p.row);
        let rotated = transform(&map, rot, c, r);
        prop_assert_eq!(astar(&rotated, rot(s), rot(g)).unwrap().map(|p| p.len()), len);
    }

    #[test]
    fn stepping_toward_most_frontiers_keeps_distance(map in map_strategy(), pick in any::<prop::sample::Index>()) {
        let free: Vec<Pos> = (0..map.area()).map(|i| map.pos_of(i)).filter(|&p| map.is_free(p)).collect();
        prop_assume!(!free.is_empty());
        let p = free[pick.index(free.len())];
        let (table, _) = fpr_features(&map, p).unwrap();
        prop_assume!(table.total() > 0);
        let best = (0..8).max_by_key(|&d| (table.count[d], std::cmp::Reverse(d))).unwrap();
        let q = p.step(Direction::from_index(best).unwrap());
        prop_assert!(map.is_free(q));
        let before = bfs_frontier_distance(&map, p).unwrap();
        let after = bfs_frontier_distance(&map, q).unwrap();
        prop_assert!(after <= before + 1);
    }

    #[test]
    fn merge_results(config in small_config(), s in any::<u64>(), a in any::<u64>(), steps in 0usize..30, pick in prop::collection::vec(any::<bool>(), 5)) {
        let mut ep = Episode::new(config.clone(), s).unwrap();
        let mut rng = seed::rng(a);
        for _ in 0..steps {
            let joint: Vec<Action> = random_joint_action(&mut rng, config.n_agents)
                .into_iter()
                .map(|x| if x == Action::Communicate { Action::Stay } else { x })
                .collect();
            ep.step(&joint).unwrap();
        }
        let mut state = ep.state().clone();
        let members: Vec<usize> = (0..config.n_agents).filter(|&i| pick[i]).collect();
        let before = state.clone();
        let event = apply_merge(&mut state, &CommNetwork { members: members.clone() }).unwrap();
        if members.len() >= 2 {
            let refs: Vec<&ReconMap> = members.iter().map(|&i| &before.maps[i]).collect();
            let union = merge_maps(&refs).unwrap().map;
            for (k, &i) in members.iter().enumerate() {
                prop_assert_eq!(&state.maps[i], &union);
                prop_assert_eq!(event.gains[k], union.known_count() - before.maps[i].known_count());
            }
        }
        for i in 0..config.n_agents {
            prop_assert!(state.maps[i].known_count() >= before.maps[i].known_count());
            if !members.contains(&i) || members.len() < 2 {
                prop_assert_eq!(&state.maps[i], &before.maps[i]);
                prop_assert_eq!(&state.discoveries[i], &before.discoveries[i]);
            }
        }
    }

    #[test]
    fn network_partition_ignores_listing_order(cells in prop::collection::vec((0i32..12, 0i32..12), 1..7), range in 0.5f64..4.0, shuffle in any::<u64>()) {
        let positions: Vec<Pos> = cells.into_iter().map(|(r, c)| Pos::new(r, c)).collect();
        let mut comm: Vec<usize> = (0..positions.len()).filter(|i| i % 3 != 1).collect();
        let reference = form_networks(&positions, &comm, range, 0.5);
        comm.shuffle(&mut seed::rng(shuffle));
        prop_assert_eq!(form_networks(&positions, &comm, range, 0.5), reference);
    }

    #[test]
    fn rewards_stay_in_range(config in small_config(), s in any::<u64>(), a in any::<u64>(), steps in 1usize..40) {
        let trace = random_episode(&config, s, a, steps);
        for st in &trace.steps {
            for (i, ev) in st.agents.iter().enumerate() {
                if !ev.dangerous && ev.network.map_or(true, |k| st.networks[k].members.len() < 2) {
                    prop_assert!((-1.0..=1.0).contains(&st.rewards[i]), "reward {} at t={}", st.rewards[i], st.t);
                }
            }
        }
    }

    #[test]
    fn reward_algebra(
        prev in 0usize..100, sensed in 0usize..6, merged in 0usize..100,
        q in prop::collection::vec(0u64..144, 4), partners in prop::collection::vec(any::<bool>(), 3),
        stationary in any::<bool>(),
    ) {
        let area = 144;
        let partners: Vec<usize> = (1..4).filter(|&j| partners[j - 1]).collect();
        let shared = RewardInputs {
            dangerous: false,
            acted_communicate: true,
            network_size: partners.len() + 1,
            known_prev: prev,
            known_now: prev + sensed,
            known_network: prev + sensed + merged,
            discoveries: q,
            partners: partners.clone(),
            area,
            e_max: 5,
            stationary,
        };
        let p = shared.share_weight();
        prop_assert!(p >= SHARE_BASE && p <= SHARE_BASE + (area as f64 - 1.0) / area as f64);
        let exploring = RewardInputs { acted_communicate: false, ..shared.clone() };
        if shared.shared() && merged > sensed {
            prop_assert!(reward_case1(&shared) >= reward_case1(&exploring));
        }
        prop_assert!((-1.0..=1.0).contains(&reward_case2(&exploring)));
        prop_assert_eq!(reward_case2(&shared).to_bits(), reward_case2(&shared.clone()).to_bits());
    }

    #[test]
    fn masked_distribution(logits in prop::collection::vec(-20.0f64..20.0, 10), bits in 1u16..1024, shift in -50.0f64..50.0) {
        let mask = ActionMask::from_bits(bits);
        let d = ActionDistribution::new(&logits, mask).unwrap();
        for (i, &p) in d.probs.iter().enumerate() {
            if !mask.is_available_id(i) {
                prop_assert_eq!(p, 0.0);
            }
        }
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let e = ActionDistribution::new(&shifted, mask).unwrap();
        for (x, y) in d.probs.iter().zip(&e.probs) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn curves_are_monotone_and_report_regenerates(config in small_config(), s in any::<u64>(), a in any::<u64>(), steps in 1usize..40) {
        let trace = random_episode(&config, s, a, steps);
        let m = RunMetrics::from_trace(0, &trace);
        for t in 1..m.agent_ratios.len() {
            for i in 0..config.n_agents {
                prop_assert!(m.agent_ratios[t][i] >= m.agent_ratios[t - 1][i]);
            }
        }
        for (t, row) in m.agent_ratios.iter().enumerate() {
            prop_assert!(row.iter().all(|&r| r <= m.union_ratio[t]));
        }
        let online = EvalReport::from_traces(std::slice::from_ref(&trace), steps, vec!["random".into()]);
        let parsed = EpisodeTrace::from_json(&trace.to_json()).unwrap();
        let offline = EvalReport::from_traces(&[parsed], steps, vec!["random".into()]);
        prop_assert_eq!(online.exploration_csv(), offline.exploration_csv());
        prop_assert_eq!(online.summary_json(), offline.summary_json());
    }
}

#[test]
fn conflict_resolution_is_total() {
    let mut rng = seed::rng(2024);
    let mut executed = 0;
    let mut episode_seed = 0;
    while executed < 100_000 {
        let config = EnvConfig {
            rows: rng.random_range(3..=12),
            cols: rng.random_range(3..=12),
            n_agents: rng.random_range(1..=6),
            obstacle_ratio: 0.1,
            diagonal_through_free: rng.random(),
            horizon: 1000,
            ..EnvConfig::default()
        };
        episode_seed += 1;
        let Ok(mut ep) = Episode::new(config.clone(), episode_seed) else { continue };
        for _ in 0..500 {
            let joint = random_joint_action(&mut rng, config.n_agents);
            ep.step(&joint).expect("every joint action resolves");
            assert_safe(ep.state());
            executed += 1;
        }
    }
}
