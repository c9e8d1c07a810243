//! Shared fixtures for the benchmarks.

use swarmap_core::{EnvConfig, Episode, Result};

/// A default-configuration episode advanced `steps` steps with a fixed action pattern,
/// so agents' maps are partially explored.
pub fn warmed_episode(seed: u64, steps: usize) -> Result<Episode> {
    use swarmap_core::policy::{GreedyFrontier, Policy};
    let mut episode = Episode::new(EnvConfig::default(), seed)?;
    let mut rng = swarmap_core::seed::rng(seed);
    for _ in 0..steps {
        let actions = episode
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| GreedyFrontier::default().act(i, o, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        episode.step(&actions)?;
    }
    Ok(episode)
}
