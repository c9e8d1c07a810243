//! Batch evaluation over randomized arenas and the exploration, communication
//! and merge-expansion metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obsmap::SENSE_RADIUS;
use crate::policy::Team;
use crate::reward;
use crate::seed;
use crate::trace::{Episode, EpisodeTrace};
use crate::world::{Action, EnvConfig, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationRatios {
    pub per_agent: Vec<f64>,
    pub max: f64,
    pub union: f64,
}

pub fn exploration_ratio(state: &WorldState) -> ExplorationRatios {
    let area = state.arena.area() as f64;
    let per_agent: Vec<f64> = state.known_counts().iter().map(|&k| k as f64 / area).collect();
    let max = per_agent.iter().copied().fold(0.0, f64::max);
    ExplorationRatios { per_agent, max, union: state.union_known() as f64 / area }
}

/// Runs one episode of `n_steps` (the horizon is set to `n_steps`).
///
/// Each agent samples from its own stream derived from `seed`, so runs are
/// reproducible regardless of how episodes are scheduled.
pub fn run_episode(config: &EnvConfig, team: &Team, seed: u64, n_steps: usize) -> Result<EpisodeTrace> {
    let config = EnvConfig { horizon: n_steps, ..config.clone() };
    team.check_size(config.n_agents)?;
    let mut episode = Episode::new(config, seed)?;
    let mut rngs: Vec<_> = (0..episode.config().n_agents)
        .map(|i| seed::derived_rng(seed, "policy", i as u64))
        .collect();
    while !episode.done() {
        let actions = episode
            .observations()
            .iter()
            .zip(rngs.iter_mut())
            .enumerate()
            .map(|(i, (obs, rng))| team.act(i, obs, rng))
            .collect::<Result<Vec<Action>>>()?;
        episode.step(&actions)?;
    }
    Ok(episode.into_trace())
}

/// `(communicate actions / all actions, successful communicates / communicates)`.
pub fn communication_stats(trace: &EpisodeTrace) -> (f64, f64) {
    let mut total = 0usize;
    let mut comm = 0usize;
    let mut success = 0usize;
    for step in &trace.steps {
        for a in &step.agents {
            total += 1;
            if a.action == Action::Communicate {
                comm += 1;
                if a.merge_gain > 0 {
                    success += 1;
                }
            }
        }
    }
    (ratio(comm, total), ratio(success, comm))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-member merge gains in unit-width bins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionHistogram {
    pub counts: BTreeMap<u64, u64>,
    pub e_max_reference: u32,
}

impl ExpansionHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn add(&mut self, gain: u64) {
        if gain > 0 {
            *self.counts.entry(gain).or_default() += 1;
        }
    }

    pub fn above(&self, threshold: u64) -> u64 {
        self.counts.range(threshold + 1..).map(|(_, c)| c).sum()
    }

    pub fn mean(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts.iter().map(|(g, c)| (g * c) as f64).sum::<f64>() / total as f64
    }
}

pub fn expansion_histogram<'a>(traces: impl IntoIterator<Item = &'a EpisodeTrace>) -> ExpansionHistogram {
    let mut hist = ExpansionHistogram { e_max_reference: reward::e_max(SENSE_RADIUS as u32), ..Default::default() };
    for trace in traces {
        for step in &trace.steps {
            for event in &step.networks {
                for &g in &event.gains {
                    hist.add(g as u64);
                }
            }
        }
    }
    hist
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    /// `[step][agent]` known ratio after each step.
    pub agent_ratios: Vec<Vec<f64>>,
    pub max_ratio: Vec<f64>,
    pub union_ratio: Vec<f64>,
    pub action_ratio: f64,
    pub success_ratio: f64,
    pub total_reward: f64,
}

impl RunMetrics {
    pub fn from_trace(run: usize, trace: &EpisodeTrace) -> Self {
        let area = trace.area() as f64;
        let mut agent_ratios = Vec::with_capacity(trace.steps.len());
        let mut max_ratio = Vec::with_capacity(trace.steps.len());
        let mut union_ratio = Vec::with_capacity(trace.steps.len());
        for step in &trace.steps {
            let ratios: Vec<f64> = step.known.iter().map(|&k| k as f64 / area).collect();
            max_ratio.push(ratios.iter().copied().fold(0.0, f64::max));
            union_ratio.push(step.union_known as f64 / area);
            agent_ratios.push(ratios);
        }
        let (action_ratio, success_ratio) = communication_stats(trace);
        Self {
            run,
            seed: trace.seed.unwrap_or(0),
            agent_ratios,
            max_ratio,
            union_ratio,
            action_ratio,
            success_ratio,
            total_reward: trace.total_joint_reward(),
        }
    }

    pub fn final_max_ratio(&self) -> f64 {
        self.max_ratio.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_runs: usize,
    pub n_steps: usize,
    pub policies: Vec<String>,
    pub final_max_ratio: MeanStd,
    pub final_union_ratio: MeanStd,
    pub action_ratio: MeanStd,
    pub success_ratio: MeanStd,
    pub total_reward: MeanStd,
    pub expansion_samples: u64,
    pub expansion_mean: f64,
    pub expansions_above_e_max: u64,
    pub e_max_reference: u32,
    /// Per-step mean and spread of the best agent's ratio.
    pub max_ratio_band: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_steps: usize,
    pub policies: Vec<String>,
    pub runs: Vec<RunMetrics>,
    pub histogram: ExpansionHistogram,
}

impl EvalReport {
    pub fn from_traces(traces: &[EpisodeTrace], n_steps: usize, policies: Vec<String>) -> Self {
        Self {
            n_steps,
            policies,
            runs: traces.iter().enumerate().map(|(i, t)| RunMetrics::from_trace(i, t)).collect(),
            histogram: expansion_histogram(traces),
        }
    }

    pub fn mean_final_max_ratio(&self) -> f64 {
        MeanStd::of(self.runs.iter().map(RunMetrics::final_max_ratio)).mean
    }

    pub fn summary(&self) -> EvalSummary {
        let band = (0..self.n_steps)
            .map(|t| MeanStd::of(self.runs.iter().filter_map(|r| r.max_ratio.get(t).copied())))
            .collect();
        EvalSummary {
            n_runs: self.runs.len(),
            n_steps: self.n_steps,
            policies: self.policies.clone(),
            final_max_ratio: MeanStd::of(self.runs.iter().map(RunMetrics::final_max_ratio)),
            final_union_ratio: MeanStd::of(self.runs.iter().map(|r| r.union_ratio.last().copied().unwrap_or(0.0))),
            action_ratio: MeanStd::of(self.runs.iter().map(|r| r.action_ratio)),
            success_ratio: MeanStd::of(self.runs.iter().map(|r| r.success_ratio)),
            total_reward: MeanStd::of(self.runs.iter().map(|r| r.total_reward)),
            expansion_samples: self.histogram.total(),
            expansion_mean: self.histogram.mean(),
            expansions_above_e_max: self.histogram.above(u64::from(self.histogram.e_max_reference)),
            e_max_reference: self.histogram.e_max_reference,
            max_ratio_band: band,
        }
    }

    pub fn exploration_csv(&self) -> String {
        let mut s = String::from("run,step,agent,ratio,max_ratio,union_ratio\n");
        for r in &self.runs {
            for (t, ratios) in r.agent_ratios.iter().enumerate() {
                for (a, ratio) in ratios.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{},{},{},{}", r.run, t + 1, a, ratio, r.max_ratio[t], r.union_ratio[t]);
                }
            }
        }
        s
    }

    pub fn comm_csv(&self) -> String {
        let mut s = String::from("run,action_ratio,success_ratio\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{}", r.run, r.action_ratio, r.success_ratio);
        }
        s
    }

    pub fn expansion_csv(&self) -> String {
        let mut s = String::from("gain,count\n");
        for (g, c) in &self.histogram.counts {
            let _ = writeln!(s, "{g},{c}");
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serialization is infallible") + "\n"
    }

    /// Writes the three CSVs and `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("exploration_curves.csv"), self.exploration_csv())?;
        std::fs::write(dir.join("comm_stats.csv"), self.comm_csv())?;
        std::fs::write(dir.join("expansion_hist.csv"), self.expansion_csv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json())?;
        Ok(())
    }
}

/// Seed of run `r` in a batch.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed::derive(seed, "run", run as u64)
}

/// Runs `n_runs` episodes on fresh arenas, at most `jobs` at a time (0 = all cores).
pub fn run_batch_traces(
    team: &Team,
    config: &EnvConfig,
    n_runs: usize,
    n_steps: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<EpisodeTrace>> {
    if n_runs == 0 || n_steps == 0 {
        return Err(Error::InvalidConfig("runs and steps must be at least 1".into()));
    }
    config.validate()?;
    team.check_size(config.n_agents)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..n_runs)
            .into_par_iter()
            .map(|r| run_episode(config, team, run_seed(seed, r), n_steps))
            .collect()
    })
}

pub fn run_batch(
    team: &Team,
    config: &EnvConfig,
    n_runs: usize,
    n_steps: usize,
    seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    let traces = run_batch_traces(team, config, n_runs, n_steps, seed, jobs)?;
    Ok(EvalReport::from_traces(&traces, n_steps, team.names()))
}
