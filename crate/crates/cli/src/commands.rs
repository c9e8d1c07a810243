use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use swarmap_core::envd::{Server, ServerConfig};
use swarmap_core::eval;
use swarmap_core::frontier::{detect_frontiers, fpr_features};
use swarmap_core::happo::{self, TrainConfig, CURVE_FILE};
use swarmap_core::policy::load_team;
use swarmap_core::trace::verify_replay;
use swarmap_core::world::generate_arena;
use swarmap_core::{EnvConfig, EpisodeTrace, Pos, ReconMap};

use crate::config::{self, ConfigFile, Manifest};
use crate::{Cli, Command, Common, Preset};

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.common.config {
        Some(path) => config::load(path)?,
        None => ConfigFile::default(),
    };
    let Some(command) = cli.command else {
        let addr = cli.serve.expect("clap requires --serve without a subcommand");
        return serve(&addr, &cli.common, &file);
    };
    match command {
        Command::Generate => generate(&cli.common, &file),
        Command::Run { policy, steps } => run(&cli.common, &file, &policy, steps),
        Command::Eval { policy, steps, runs, jobs } => evaluate(&cli.common, &file, &policy, steps, runs, jobs),
        Command::Train { preset, iterations, steps } => train(&cli.common, &file, preset, iterations, steps),
        Command::Analyze { map, position } => analyze(&map, position.into()),
        Command::Replay { trace } => replay(&cli.common, &trace),
    }
}

fn env_config(common: &Common, file: &ConfigFile, fallback: EnvConfig) -> Result<EnvConfig> {
    let mut env = file.env.clone().unwrap_or(fallback);
    if let Some(case) = common.reward_case {
        env.reward_case = case;
    }
    env.validate()?;
    Ok(env)
}

fn out_dir(common: &Common, name: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<String> {
    std::fs::write(dir.join(name), contents).with_context(|| format!("writing {name}"))?;
    Ok(name.to_string())
}

fn manifest(common: &Common, subcommand: &str, out: &Path, config: ConfigFile) -> Manifest {
    Manifest {
        subcommand: subcommand.into(),
        config_path: common.config.clone(),
        seed: common.seed,
        out: out.to_path_buf(),
        policies: Vec::new(),
        steps: None,
        runs: None,
        config,
        outputs: Vec::new(),
    }
}

fn generate(common: &Common, file: &ConfigFile) -> Result<()> {
    let env = env_config(common, file, EnvConfig::default())?;
    let arena = generate_arena(common.seed, &env)?;
    let out = out_dir(common, "generate")?;
    let mut m = manifest(common, "generate", &out, ConfigFile { env: Some(env), train: None });
    m.outputs.push(write(&out, "arena.json", &(arena.to_json() + "\n"))?);
    m.write(&out)?;
    println!(
        "arena {}x{}: {} obstacles, free space {}",
        arena.rows(),
        arena.cols(),
        arena.obstacle_count(),
        if arena.free_space_connected() { "connected" } else { "disconnected" }
    );
    println!("wrote {}", out.join("arena.json").display());
    Ok(())
}

/// Per-step metrics of one trace: `step,joint_reward,max_ratio,union_ratio`.
pub fn metrics_csv(trace: &EpisodeTrace) -> String {
    let area = trace.area() as f64;
    let mut s = String::from("step,joint_reward,max_ratio,union_ratio\n");
    for step in &trace.steps {
        let max = step.known.iter().copied().max().unwrap_or(0) as f64 / area;
        let union = step.union_known as f64 / area;
        writeln!(s, "{},{},{},{}", step.t, step.joint_reward, max, union).expect("writing to a String");
    }
    s
}

fn run(common: &Common, file: &ConfigFile, policy: &str, steps: Option<usize>) -> Result<()> {
    let env = env_config(common, file, EnvConfig::default())?;
    let steps = steps.unwrap_or(env.horizon);
    let team = load_team(policy, env.n_agents)?;
    let trace = eval::run_episode(&env, &team, common.seed, steps)?;
    let out = out_dir(common, "run")?;
    let mut m = manifest(common, "run", &out, ConfigFile { env: Some(env), train: None });
    m.policies = team.names();
    m.steps = Some(steps);
    m.outputs.push(write(&out, "trace.json", &(trace.to_json() + "\n"))?);
    m.outputs.push(write(&out, "metrics.csv", &metrics_csv(&trace))?);
    m.write(&out)?;
    print_final(&trace);
    Ok(())
}

fn print_final(trace: &EpisodeTrace) {
    let area = trace.area() as f64;
    let union = trace.steps.last().map_or(trace.initial_union_known, |s| s.union_known) as f64 / area;
    println!("steps: {}", trace.steps.len());
    println!("final exploration ratio (max agent): {:.4}", trace.final_max_ratio());
    println!("final exploration ratio (union): {union:.4}");
    println!("total joint reward: {:.4}", trace.total_joint_reward());
}

fn evaluate(
    common: &Common,
    file: &ConfigFile,
    policy: &str,
    steps: Option<usize>,
    runs: usize,
    jobs: usize,
) -> Result<()> {
    let env = env_config(common, file, EnvConfig::default())?;
    let steps = steps.unwrap_or(env.horizon);
    let team = load_team(policy, env.n_agents)?;
    let report = eval::run_batch(&team, &env, runs, steps, common.seed, jobs)?;
    let out = out_dir(common, "eval")?;
    report.write_to(&out)?;
    let mut m = manifest(common, "eval", &out, ConfigFile { env: Some(env), train: None });
    m.policies = team.names();
    m.steps = Some(steps);
    m.runs = Some(runs);
    m.outputs = ["exploration_curves.csv", "comm_stats.csv", "expansion_hist.csv", "summary.json"]
        .map(String::from)
        .to_vec();
    m.write(&out)?;
    let s = report.summary();
    println!("runs: {runs}, steps: {steps}, policies: {}", team.names().join(","));
    println!("final exploration ratio (max agent): {:.4} ± {:.4}", s.final_max_ratio.mean, s.final_max_ratio.std);
    println!("final exploration ratio (union): {:.4} ± {:.4}", s.final_union_ratio.mean, s.final_union_ratio.std);
    println!(
        "communication: action ratio {:.4}, success ratio {:.4}",
        s.action_ratio.mean, s.success_ratio.mean
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn train(
    common: &Common,
    file: &ConfigFile,
    preset: Preset,
    iterations: Option<usize>,
    steps: Option<usize>,
) -> Result<()> {
    let (env_fallback, cfg_fallback) = match preset {
        Preset::Paper => (EnvConfig::default(), TrainConfig::default()),
        Preset::Lite => (TrainConfig::lite_env(), TrainConfig::lite()),
    };
    let env = env_config(common, file, env_fallback)?;
    let mut cfg = file.train.clone().unwrap_or(cfg_fallback);
    if let Some(n) = iterations {
        cfg.episodes = n;
    }
    if let Some(n) = steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    let out = out_dir(common, "train")?;
    let every = (cfg.episodes / 20).max(1);
    let outcome = happo::train(&env, &cfg, common.seed, Some(&out), |r| {
        if r.iteration % every == 0 {
            println!(
                "iteration {:>6}: mean return {:>9.4}, exploration {:.4}, critic loss {:.4}",
                r.iteration, r.mean_return, r.exploration_ratio, r.critic_loss
            );
        }
    })?;
    let mut m = manifest(common, "train", &out, ConfigFile { env: Some(env), train: Some(cfg) });
    m.outputs.push(CURVE_FILE.into());
    for path in &outcome.checkpoints {
        let name = path.file_name().expect("checkpoint paths have a file name");
        m.outputs.push(name.to_string_lossy().into_owned());
    }
    m.write(&out)?;
    println!("wrote {} checkpoints and {CURVE_FILE} to {}", outcome.checkpoints.len(), out.display());
    Ok(())
}

fn load_map(path: &Path) -> Result<ReconMap> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let map = if text.trim_start().starts_with('{') {
        ReconMap::from_json(&text)
    } else {
        ReconMap::from_ascii(&text)
    };
    map.with_context(|| format!("parsing map {}", path.display()))
}

fn analyze(path: &Path, position: Pos) -> Result<()> {
    let map = load_map(path)?;
    if !map.is_free(position) {
        bail!("position {position} is not a free cell of the map");
    }
    let frontiers = detect_frontiers(&map);
    if frontiers.is_empty() {
        println!("no frontiers");
    } else {
        let list: Vec<String> = frontiers.iter().map(ToString::to_string).collect();
        println!("frontiers ({}): {}", frontiers.len(), list.join(" "));
    }
    let (table, features) = fpr_features(&map, position)?;
    print!("{}", table.render());
    let values: Vec<String> = features.iter().map(|v| format!("{v:.6}")).collect();
    println!("normalized: [{}]", values.join(", "));
    Ok(())
}

fn replay(common: &Common, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = EpisodeTrace::from_json(&text).with_context(|| format!("parsing trace {}", path.display()))?;
    verify_replay(&trace)?;
    let out = out_dir(common, "replay")?;
    let mut m = manifest(common, "replay", &out, ConfigFile { env: Some(trace.config.clone()), train: None });
    m.seed = trace.seed.unwrap_or(common.seed);
    m.steps = Some(trace.steps.len());
    m.outputs.push(write(&out, "metrics.csv", &metrics_csv(&trace))?);
    m.write(&out)?;
    println!("replay matches trace");
    print_final(&trace);
    Ok(())
}

fn serve(addr: &str, common: &Common, file: &ConfigFile) -> Result<()> {
    let defaults = env_config(common, file, EnvConfig::default())?;
    let server = Server::bind(addr, ServerConfig { defaults, trace_dir: common.out.clone() })
        .with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", server.local_addr()?);
    std::io::stdout().flush()?;
    server.serve()?;
    Ok(())
}

