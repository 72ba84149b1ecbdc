use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deadend_nav::config::{ControllerId, RunConfig, SuiteManifest};
use deadend_nav::costmap::{parse_recovery_sidecar, PosteriorImage};
use deadend_nav::render::{parse_trace_positions, render, Overlay};
use deadend_nav::sim::{run_episode, run_suite, Outcome};
use deadend_nav::world::{load_named_scenario, Point2, Scenario};

const RECOVERY_FILE: &str = "recovery_points.txt";

#[derive(Parser)]
#[command(name = "deadend-nav", version, about = "Dead-end aware navigation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and export its trace, report and final costmap.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first seed in the config, then the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        controller: Option<ControllerId>,
        #[arg(long)]
        lambda_score: Option<f64>,
        /// Also write a costmap snapshot every N ticks.
        #[arg(long)]
        export_every: Option<u64>,
    },
    /// Run a suite manifest and write per-episode and summary reports.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a trace over an exported costmap as a binary pixmap.
    Render {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        costmap: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Adds walls, start and goal from the scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Recovery-point sidecar; defaults to the one next to the costmap.
        #[arg(long)]
        recovery: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

type Fallible<T> = Result<T, String>;

fn read(path: &Path) -> Fallible<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Fallible<()> {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_scenario(path: &Path) -> Fallible<Scenario> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    load_named_scenario(&name, &read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Fallible<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn make_dir(dir: &Path) -> Fallible<()> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    scenario: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    controller: Option<ControllerId>,
    lambda_score: Option<f64>,
    export_every: Option<u64>,
) -> Fallible<Outcome> {
    let s = load_scenario(scenario)?;
    let mut cfg = load_config(config)?;
    if let Some(c) = controller {
        cfg.controller = c;
    }
    if let Some(l) = lambda_score {
        cfg.planner.lambda_score = l;
    }
    if let Some(n) = export_every {
        cfg.export_every = n;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    let seed = seed.or(cfg.seeds.first().copied()).unwrap_or(s.rng_seed);
    make_dir(out)?;

    let r = run_episode(&s, &cfg, seed).map_err(|e| e.to_string())?;
    write(&out.join("trace.csv"), r.trace_csv())?;
    write(&out.join("decisions.csv"), r.decision_log())?;
    let json = serde_json::to_string_pretty(&r).map_err(|e| e.to_string())?;
    write(&out.join("report.json"), json + "\n")?;
    if let Some(cm) = &r.final_costmap {
        write(&out.join("costmap.pgm"), cm.to_pgm())?;
        write(&out.join(RECOVERY_FILE), cm.recovery_sidecar())?;
    }
    for (tick, pgm) in &r.snapshots {
        write(&out.join(format!("costmap_{tick:06}.pgm")), pgm)?;
    }
    println!("{}", r.stable_record());
    Ok(r.outcome)
}

fn cmd_bench(manifest: &Path, out: &Path) -> Fallible<()> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let m = SuiteManifest::parse(&read(manifest)?, base).map_err(|e| format!("{}: {e}", manifest.display()))?;
    let cfg = load_config(m.config.as_deref())?;
    let scenarios = m.scenarios.iter().map(|p| load_scenario(p)).collect::<Fallible<Vec<_>>>()?;
    make_dir(out)?;
    let report = run_suite(&scenarios, &m.controllers, &m.seeds, &cfg).map_err(|e| e.to_string())?;

    let mut rows = Vec::new();
    for row in &report.rows {
        writeln!(rows, "{}", serde_json::to_string(row).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    }
    write(&out.join("report.jsonl"), rows)?;
    let mut episodes = Vec::new();
    for r in &report.results {
        writeln!(episodes, "{}", serde_json::to_string(r).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    }
    write(&out.join("episodes.jsonl"), episodes)?;
    let table = report.table();
    write(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_render(
    trace: &Path,
    costmap: &Path,
    out: &Path,
    scenario: Option<&Path>,
    recovery: Option<&Path>,
    scale: usize,
) -> Fallible<()> {
    let positions = parse_trace_positions(&read(trace)?).map_err(|e| format!("{}: {e}", trace.display()))?;
    let image = PosteriorImage::parse_pgm(&read(costmap)?).map_err(|e| format!("{}: {e}", costmap.display()))?;
    let scenario = scenario.map(load_scenario).transpose()?;
    let sibling = costmap.with_file_name(RECOVERY_FILE);
    let recovery_path = recovery.map(Path::to_path_buf).or(sibling.exists().then_some(sibling));
    let recovery_points: Vec<Point2> = match recovery_path {
        Some(p) => parse_recovery_sidecar(&read(&p)?)
            .map_err(|e| format!("{}: {e}", p.display()))?
            .into_iter()
            .map(|(pt, _)| pt)
            .collect(),
        None => Vec::new(),
    };
    let overlay = Overlay {
        trajectory: &positions,
        recovery_points: &recovery_points,
        scenario: scenario.as_ref(),
        start: None,
    };
    let px = render(&image, &overlay, scale).map_err(|e| e.to_string())?;
    write(out, px.to_p6())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            config,
            out,
            seed,
            controller,
            lambda_score,
            export_every,
        } => cmd_run(scenario, config.as_deref(), out, *seed, *controller, *lambda_score, *export_every).map(|o| {
            if o == Outcome::Reached {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }),
        Command::Bench { manifest, out } => cmd_bench(manifest, out).map(|()| ExitCode::SUCCESS),
        Command::Render {
            trace,
            costmap,
            out,
            scenario,
            recovery,
            scale,
        } => cmd_render(trace, costmap, out, scenario.as_deref(), recovery.as_deref(), *scale).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        log::error!("{e}");
        ExitCode::from(1)
    })
}
