use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use egcbf::egformer::NetParams;
use egcbf::harness::{
    graph_dump, run_check, run_episode, run_sweep, safety_plot_svg, write_csv, write_json, CheckKind, EpisodeHeader,
    ExperimentConfig, Manifest, Method, Policy, StepRecord, SweepSpec,
};
use egcbf::graph::build_graph;
use egcbf::learn::{gradient_decay, train_from, write_curve_csv, TrainError, TrainState};
use egcbf::world::{is_safe, sample_episode, scan_all, Obstacle, WorldConfig};
use egcbf::AgentState;

#[derive(Parser)]
#[command(name = "egcbf", version, about = "Learned, symmetry-respecting barrier functions for multi-agent navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file with [world], [model], [net], [train] and [eval] sections.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides)?,
            None => ExperimentConfig::from_toml("", &self.overrides)?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train policy and barrier networks.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate methods on the configured world and log trajectories.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write one JSONL trajectory per episode.
        #[arg(long)]
        log: bool,
    },
    /// Zero-shot sweep over swarm sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run property suites; exits with 2 if any fails.
    Check {
        /// Suites to run; all when empty.
        #[arg(value_parser = parse_check)]
        what: Vec<CheckKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the graph of one sampled episode with a topology audit.
        #[arg(long)]
        graph_dump: Option<PathBuf>,
    },
    /// Recompute metrics from a trajectory log.
    Replay {
        log: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        safety_radius: f64,
        #[arg(long, default_value_t = 0.1)]
        reach_radius: f64,
    },
}

fn parse_check(s: &str) -> Result<CheckKind, String> {
    s.parse()
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn load_checkpoint(cli: Option<&PathBuf>, cfg: &ExperimentConfig, needed: bool) -> Result<Option<NetParams>> {
    match cli.or(cfg.eval.checkpoint.as_ref()) {
        Some(p) => Ok(Some(NetParams::load(p).with_context(|| format!("loading {}", p.display()))?)),
        None if needed => bail!("the learned method needs --checkpoint or eval.checkpoint"),
        None => Ok(None),
    }
}

fn train(common: &Common, resume: Option<&PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    ensure_dir(&common.out)?;
    let ctx = cfg.learn_context();
    let state = match resume {
        Some(p) => TrainState::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainState::new(NetParams::new(cfg.net.clone(), ctx.model.system)),
    };
    let outcome = match train_from(state, &ctx, |_, _| {}) {
        Ok(o) => o,
        Err(TrainError::NonFiniteLoss { iteration, last_good }) => {
            last_good.save(&common.out.join("last_good.bin"))?;
            bail!("loss became non-finite at iteration {iteration}; last good weights in last_good.bin");
        }
        Err(e) => return Err(e.into()),
    };
    outcome.state.params.save(&common.out.join("checkpoint.bin"))?;
    outcome.state.save(&common.out.join("train_state.bin"))?;
    write_curve_csv(&outcome.curve, std::fs::File::create(common.out.join("curve.csv"))?)?;
    Manifest::new(
        "train",
        &cfg,
        cfg.train.seed,
        vec!["checkpoint.bin".into(), "train_state.bin".into(), "curve.csv".into()],
    )
    .write(&common.out.join("manifest.json"))?;
    if let Some(it) = outcome.first_reach(0.5) {
        println!("first reach rate >= 0.5 at iteration {it}");
    }
    // outer-ring gradients should be small if h only looks at its close neighbourhood
    let mut graphs = Vec::new();
    for seed in 0..8 {
        let world = WorldConfig { seed: cfg.eval.seed_base + seed, ..cfg.world.clone() };
        let ep = sample_episode(&world)?.for_system(ctx.model.system);
        graphs.push(build_graph(&ep, &scan_all(&ep, &world), &world)?);
    }
    let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.3e}"));
    let (outer, inner) = gradient_decay(&outcome.state.params, &graphs, &cfg.world);
    println!("mean |dh/dp| outer ring {} inner {}", fmt(outer), fmt(inner));
    println!("wrote {}", common.out.join("checkpoint.bin").display());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&PathBuf>, log: bool) -> Result<()> {
    let mut cfg = common.load()?;
    cfg.eval.sizes = vec![cfg.world.num_agents];
    cfg.eval.side_length = Some(cfg.world.side_length);
    cfg.eval.obstacles = Some(cfg.world.num_obstacles);
    let learned = load_checkpoint(checkpoint, &cfg, cfg.eval.methods.contains(&Method::Learned))?;
    ensure_dir(&common.out)?;
    let ctx = cfg.eval_context();
    let rows = run_sweep(&SweepSpec::from_config(&cfg), &ctx, learned.as_ref())?;
    write_csv(&rows, std::fs::File::create(common.out.join("results.csv"))?)?;
    write_json(&rows, std::fs::File::create(common.out.join("results.json"))?)?;
    let mut outputs = vec!["results.csv".to_string(), "results.json".to_string()];
    if log {
        for method in &cfg.eval.methods {
            let policy = match method {
                Method::Learned => Policy::Learned(learned.as_ref().expect("loaded above")),
                Method::Ccbf => Policy::Centralized,
                Method::Dcbf => Policy::Decentralized,
                Method::Nominal => Policy::Nominal,
            };
            for k in 0..cfg.eval.episodes {
                let seed = cfg.eval.seed_base + k as u64;
                let name = format!("traj_{}_{seed}.jsonl", method.name());
                let out = run_episode(&policy, &ctx, seed, true)?;
                out.write_jsonl(std::io::BufWriter::new(std::fs::File::create(common.out.join(&name))?))?;
                outputs.push(name);
            }
        }
    }
    Manifest::new("eval", &cfg, cfg.eval.seed_base, outputs).write(&common.out.join("manifest.json"))?;
    print!("{}", std::fs::read_to_string(common.out.join("results.csv"))?);
    Ok(())
}

fn sweep(common: &Common, checkpoint: Option<&PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let learned = load_checkpoint(checkpoint, &cfg, cfg.eval.methods.contains(&Method::Learned))?;
    ensure_dir(&common.out)?;
    let rows = run_sweep(&SweepSpec::from_config(&cfg), &cfg.eval_context(), learned.as_ref())?;
    write_csv(&rows, std::fs::File::create(common.out.join("results.csv"))?)?;
    write_json(&rows, std::fs::File::create(common.out.join("results.json"))?)?;
    let mut outputs = vec!["results.csv".to_string(), "results.json".to_string()];
    if cfg.eval.plot {
        std::fs::write(common.out.join("safety.svg"), safety_plot_svg(&rows))?;
        outputs.push("safety.svg".into());
    }
    Manifest::new("sweep", &cfg, cfg.eval.seed_base, outputs).write(&common.out.join("manifest.json"))?;
    print!("{}", std::fs::read_to_string(common.out.join("results.csv"))?);
    Ok(())
}

fn check(what: &[CheckKind], seed: u64, dump: Option<&PathBuf>) -> Result<bool> {
    let kinds = if what.is_empty() { CheckKind::ALL.to_vec() } else { what.to_vec() };
    let mut ok = true;
    for kind in kinds {
        for r in run_check(kind, seed) {
            ok &= r.passed;
            println!("{}", serde_json::to_string(&r)?);
        }
    }
    if let Some(path) = dump {
        let cfg = ExperimentConfig::default().world;
        let d = graph_dump(&sample_episode(&egcbf::world::WorldConfig { seed, ..cfg.clone() })?, &cfg);
        ok &= d.lidar_edges_to_owner && d.targets_to_owner && d.agent_edges_symmetric;
        std::fs::write(path, serde_json::to_string_pretty(&d)?)?;
    }
    Ok(ok)
}

fn replay(path: &Path, safety_radius: f64, reach_radius: f64) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: EpisodeHeader = serde_json::from_str(lines.next().context("empty log")?)?;
    let obstacles: Vec<Obstacle> =
        header.obstacles.iter().map(|(c, r)| Obstacle { center: (*c).into(), radius: *r }).collect();
    let mut last: Option<StepRecord> = None;
    let mut safe: Vec<bool> = Vec::new();
    for line in lines {
        let rec: StepRecord = serde_json::from_str(line)?;
        let states: Vec<AgentState> = rec
            .positions
            .iter()
            .map(|p| AgentState::at_rest(nalgebra::Vector3::from(*p), 0.0))
            .collect();
        let report = is_safe(&states, &obstacles, safety_radius);
        if safe.is_empty() {
            safe = vec![true; states.len()];
        }
        for (s, r) in safe.iter_mut().zip(&report.per_agent) {
            *s &= r;
        }
        last = Some(rec);
    }
    let last = last.context("log has no steps")?;
    let reached = last
        .positions
        .iter()
        .zip(&header.targets)
        .filter(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt() < reach_radius)
        .count();
    let n = safe.len().max(1) as f64;
    println!(
        "seed {} steps {} safe {:.3} reached_at_last_logged_step {:.3}",
        header.seed,
        last.step + 1,
        safe.iter().filter(|s| **s).count() as f64 / n,
        reached as f64 / n
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train { common, resume } => train(common, resume.as_ref()).map(|_| true),
        Command::Eval { common, checkpoint, log } => eval(common, checkpoint.as_ref(), *log).map(|_| true),
        Command::Sweep { common, checkpoint } => sweep(common, checkpoint.as_ref()).map(|_| true),
        Command::Check { what, seed, graph_dump } => check(what, *seed, graph_dump.as_ref()),
        Command::Replay { log, safety_radius, reach_radius } => replay(log, *safety_radius, *reach_radius).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
