use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hsim_core::closed_loop::{episode_seed, run_episode};
use hsim_core::gradcheck;
use hsim_core::io::{checkpoint, log, render};
use hsim_core::metrics::{accumulate, AdeReference, MetricCounts};
use hsim_core::realizer::LowObjective;
use hsim_core::scenario::{bundled, parse_scenario};
use hsim_core::{
    cotrain, EpisodeConfig, Error, Executor, HighPolicyParams, Models, RealizerParams, RunConfig, Scenario,
};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "hsim", version, about = "Hierarchical closed-loop traffic simulator")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run closed-loop episodes and write logs and metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Bundled scenario name (straight, intersection, grid) or a file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        hold_k: Option<usize>,
        /// Zero the intention embeddings.
        #[arg(long)]
        passive: bool,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// realizer, expert or bang-bang.
        #[arg(long, value_parser = parse_executor)]
        executor: Option<Executor>,
        /// Policy checkpoint (overrides the config).
        #[arg(long)]
        high: Option<PathBuf>,
        /// Realizer checkpoint (overrides the config).
        #[arg(long)]
        low: Option<PathBuf>,
    },
    /// Co-train both levels and write checkpoints and training curves.
    Cotrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        scenario: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hold_k: Option<usize>,
    },
    /// Compute metrics from a log.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        log: PathBuf,
    },
    /// Render a log as SVG frames.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Finite-difference check of the realizer gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        fixtures: u64,
    },
}

fn parse_executor(s: &str) -> std::result::Result<Executor, String> {
    match s {
        "realizer" => Ok(Executor::Realizer),
        "expert" => Ok(Executor::Expert),
        "bang-bang" => Ok(Executor::BangBang),
        _ => Err(format!("unknown executor '{s}'")),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.episode.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let file = match bundled(name) {
        Some(f) => f,
        None => {
            let text = fs::read_to_string(name).with_context(|| format!("reading scenario {name}"))?;
            parse_scenario(&text)?
        }
    };
    Ok(file.build()?)
}

fn load_params(cfg: &RunConfig, high: Option<&Path>, low: Option<&Path>) -> Result<(HighPolicyParams, RealizerParams)> {
    let high = match high.or(cfg.checkpoints.high.as_deref()) {
        Some(p) => checkpoint::read_high(BufReader::new(
            fs::File::open(p).with_context(|| p.display().to_string())?,
        ))?,
        None => HighPolicyParams::init(cfg.policy, cfg.init_seed),
    };
    let low = match low.or(cfg.checkpoints.low.as_deref()) {
        Some(p) => checkpoint::read_low(BufReader::new(
            fs::File::open(p).with_context(|| p.display().to_string())?,
        ))?,
        None => RealizerParams::fresh(cfg.realizer, cfg.init_seed),
    };
    Ok((high, low))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_checkpoints(dir: &Path, high: &HighPolicyParams, low: &RealizerParams) -> Result<()> {
    // write then rename so an interrupted run leaves the previous pair intact
    for (name, bytes) in [
        ("high.ckpt", {
            let mut b = Vec::new();
            checkpoint::write_high(high, &mut b)?;
            b
        }),
        ("low.ckpt", {
            let mut b = Vec::new();
            checkpoint::write_low(low, &mut b)?;
            b
        }),
    ] {
        let tmp = dir.join(format!("{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, dir.join(name))?;
    }
    Ok(())
}

fn simulate(
    cfg: RunConfig,
    scenario: &str,
    episodes: usize,
    high: Option<&Path>,
    low: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let sc = load_scenario(scenario)?;
    let (high, low) = load_params(&cfg, high, low)?;
    fs::create_dir_all(out)?;
    let models = Models {
        high: &high,
        low: &low,
        expert: &cfg.expert,
    };
    let results = (0..episodes)
        .into_par_iter()
        .map(|k| {
            let seed = if episodes == 1 {
                cfg.episode.seed
            } else {
                episode_seed(cfg.episode.seed, 0, k)
            };
            run_episode(&EpisodeConfig { seed, ..cfg.episode }, models, &sc)
        })
        .collect::<hsim_core::Result<Vec<_>>>()?;
    let mut total = MetricCounts::default();
    for (k, r) in results.iter().enumerate() {
        let name = if episodes == 1 {
            "log.csv".to_string()
        } else {
            format!("log-{k:03}.csv")
        };
        let mut w = create(&out.join(name))?;
        log::write_log(&r.records, &mut w)?;
        w.flush()?;
        total = total.merge(&r.metrics);
    }
    let report = total.report(cfg.episode.dt);
    fs::write(out.join("metrics.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn train(cfg: RunConfig, scenarios: &[String], out: &Path) -> Result<()> {
    let scs = scenarios.iter().map(|s| load_scenario(s)).collect::<Result<Vec<_>>>()?;
    let (high, low) = load_params(&cfg, None, None)?;
    fs::create_dir_all(out)?;
    let mut failed = None;
    let outcome = cotrain(
        &cfg.train,
        &cfg.episode,
        &scs,
        &cfg.expert,
        high,
        low,
        &mut |epoch, h, l, c| {
            if failed.is_none() {
                if let Err(e) = write_checkpoints(out, h, l) {
                    failed = Some(e);
                }
            }
            eprintln!(
                "epoch {epoch}: held-out loss {:.6}, mean return {:.3}",
                c.heldout_loss.last().copied().unwrap_or(f64::NAN),
                c.mean_return.last().copied().unwrap_or(f64::NAN)
            );
        },
    );
    if let Some(e) = failed {
        return Err(e);
    }
    let outcome = outcome?;
    write_checkpoints(out, &outcome.high, &outcome.low)?;
    let mut w = create(&out.join("curves.csv"))?;
    writeln!(w, "epoch,heldout_loss,train_loss,mean_return")?;
    let c = &outcome.curves;
    for (e, held) in c.heldout_loss.iter().enumerate() {
        let train = if e == 0 { f64::NAN } else { c.train_loss[e - 1] };
        let ret = if e == 0 { f64::NAN } else { c.mean_return[e - 1] };
        writeln!(w, "{e},{held:.16e},{train:.16e},{ret:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

fn eval(cfg: RunConfig, scenario: &str, log_path: &Path, out: &Path) -> Result<()> {
    let sc = load_scenario(scenario)?;
    let rows = log::read_log(BufReader::new(
        fs::File::open(log_path).with_context(|| log_path.display().to_string())?,
    ))?;
    let records = log::records_from_rows(&rows, &sc)?;
    let ade = AdeReference {
        network: sc.network.clone(),
        expert: cfg.expert,
        horizon: cfg.realizer.t_f,
    };
    let report = accumulate(&records, cfg.episode.dt, Some(ade))?.report(cfg.episode.dt);
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn render_log(scenario: &str, log_path: &Path, stride: usize, out: &Path) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be >= 1".into()).into());
    }
    let sc = load_scenario(scenario)?;
    let rows = log::read_log(BufReader::new(
        fs::File::open(log_path).with_context(|| log_path.display().to_string())?,
    ))?;
    let records = log::records_from_rows(&rows, &sc)?;
    let frames = render::render_frames(&records, &sc.network, stride);
    fs::create_dir_all(out)?;
    frames
        .par_iter()
        .enumerate()
        .try_for_each(|(k, f)| fs::write(out.join(format!("frame-{k:05}.svg")), f))?;
    println!("{} frames", frames.len());
    Ok(())
}

fn run_gradcheck(cfg: RunConfig, fixtures: u64, out: &Path) -> Result<()> {
    let obj = LowObjective {
        weights: cfg.train.loss,
        bounds: cfg.episode.bounds,
        dt: cfg.episode.dt,
    };
    let seeds: Vec<u64> = (0..fixtures).map(|k| cfg.episode.seed.wrapping_add(k)).collect();
    let dims = cfg.realizer;
    let r = gradcheck::run(&seeds, dims, &obj, 1e-3, 1e-8, 1e-4)?;
    let mut text = format!(
        "fixtures = {}\nchecked = {}\nmax_rel = {:e}\ntolerance = {:e}\npassed = {}\n",
        r.fixtures,
        r.checked,
        r.max_rel,
        r.tolerance,
        r.passed()
    );
    if let Some(w) = r.worst {
        text += &format!(
            "worst = seed {} coord {} analytic {:e} numeric {:e}\n",
            w.seed, w.index, w.analytic, w.numeric
        );
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if !r.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.cmd {
        Cmd::Simulate {
            common,
            scenario,
            hold_k,
            passive,
            episodes,
            executor,
            high,
            low,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = hold_k {
                cfg.episode.hold_k = k;
            }
            cfg.episode.passive |= passive;
            if let Some(e) = executor {
                cfg.episode.executor = e;
            }
            cfg.validate()?;
            simulate(cfg, &scenario, episodes, high.as_deref(), low.as_deref(), &common.out)
        }
        Cmd::Cotrain {
            common,
            scenario,
            epochs,
            hold_k,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(k) = hold_k {
                cfg.episode.hold_k = k;
            }
            cfg.validate()?;
            train(cfg, &scenario, &common.out)
        }
        Cmd::Eval { common, scenario, log } => eval(load_config(&common)?, &scenario, &log, &common.out),
        Cmd::Render {
            common,
            scenario,
            log,
            stride,
        } => render_log(&scenario, &log, stride, &common.out),
        Cmd::Gradcheck { common, fixtures } => run_gradcheck(load_config(&common)?, fixtures, &common.out),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence(_)) => 3,
        Some(err) if err.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
