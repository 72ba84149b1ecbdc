//! Closed-loop episodes and benchmark suites.
//!
//! Each tick runs sense, costmap update, plan, control and integrate, in
//! that order, at the planner's `dt`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ControllerId, EstimatorKind, RunConfig};
use crate::controllers::{dwa_track, mppi_step};
use crate::costmap::{CostmapError, Footprint, SemanticCostmap};
use crate::planner::{plan_step, unicycle_step, CandidateScore, Control, PlanContext, PlanDecision, PlannerConfig};
use crate::sensor::{DeadEndEstimator, FusionEstimator, SensorError, SensorParams, SyntheticEstimator};
use crate::world::{CellIndex, DeadEndSet, GridMap, Point2, Pose, Scenario};

/// Stream offset of the MPPI noise generator.
const MPPI_STREAM: u64 = 2;
/// A recovery maneuver is abandoned after this many ticks.
const RECOVERY_TIMEOUT: u64 = 300;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config/scenario mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Costmap(#[from] CostmapError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("{scenario} / {controller} / seed {seed}: {source}")]
    Episode {
        scenario: String,
        controller: ControllerId,
        seed: u64,
        #[source]
        source: Box<SimError>,
    },
    #[error("empty suite: {0}")]
    EmptySuite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Reached,
    Stuck,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Reached => "reached",
            Outcome::Stuck => "stuck",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub tick: u64,
    pub pose: Pose,
    pub control: Control,
    pub decision: &'static str,
}

/// One planner decision with the selected endpoint and its score terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub tick: u64,
    pub decision: &'static str,
    pub chosen: Option<CandidateScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub scenario: String,
    pub controller: ControllerId,
    pub seed: u64,
    pub outcome: Outcome,
    pub ticks: u64,
    pub distance: f64,
    pub straight_line: f64,
    pub path_efficiency: f64,
    pub avg_speed: f64,
    pub deadend_entries: u32,
    pub recovery_invocations: u32,
    /// NaN (serialized as null) when no cell was observed often enough.
    pub detection_accuracy: f64,
    pub scored_cells: usize,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub decisions: Vec<DecisionRecord>,
    #[serde(skip)]
    pub final_costmap: Option<SemanticCostmap>,
    #[serde(skip)]
    pub snapshots: Vec<(u64, String)>,
}

impl RunResult {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("tick,x,y,theta,v,omega,decision\n");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.tick, r.pose.x, r.pose.y, r.pose.heading, r.control.v, r.control.omega, r.decision
            );
        }
        s
    }

    pub fn decision_log(&self) -> String {
        let mut s = String::from("tick,decision,goal_x,goal_y,score,ede,jgeom\n");
        for d in &self.decisions {
            match d.chosen {
                Some(c) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        d.tick, d.decision, c.endpoint.x, c.endpoint.y, c.score, c.ede, c.j_geom
                    );
                }
                None => {
                    let _ = writeln!(s, "{},{},,,,,", d.tick, d.decision);
                }
            }
        }
        s
    }

    /// One-line record of every scalar field except wall-clock time.
    pub fn stable_record(&self) -> String {
        format!(
            "{} {} {} {} {} {:?} {:?} {:?} {:?} {} {} {:?} {}",
            self.scenario,
            self.controller,
            self.seed,
            self.outcome.as_str(),
            self.ticks,
            self.distance,
            self.straight_line,
            self.path_efficiency,
            self.avg_speed,
            self.deadend_entries,
            self.recovery_invocations,
            self.detection_accuracy,
            self.scored_cells
        )
    }
}

fn make_estimator(cfg: &RunConfig, seed: u64) -> Result<Box<dyn DeadEndEstimator>, SimError> {
    Ok(match cfg.estimator {
        EstimatorKind::Synthetic => Box::new(SyntheticEstimator),
        EstimatorKind::Fusion => Box::new(FusionEstimator::seeded(crate::fusion::DEFAULT_DIM, seed)?),
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Nominal,
    Recovery { target: CellIndex, since: u64 },
}

/// Planner settings for the controller: the vanilla pipeline is the same
/// pipeline with the exposure weight forced to zero.
fn effective_planner(cfg: &RunConfig) -> PlannerConfig {
    let mut p = cfg.planner.clone();
    if cfg.controller == ControllerId::VanillaDwa {
        p.lambda_score = 0.0;
    }
    p
}

struct Episode<'a> {
    scenario: &'a Scenario,
    cfg: RunConfig,
    planner: PlannerConfig,
    footprint: Footprint,
    costmap: SemanticCostmap,
    observations: Vec<u32>,
    mode: Mode,
    nominal: Vec<Control>,
    prev: Control,
    stuck_ticks: u64,
    history: VecDeque<Point2>,
    recovery_invocations: u32,
    decisions: Vec<DecisionRecord>,
}

impl Episode<'_> {
    /// Risk level above which cells block recovery paths. Semantics-blind
    /// runs ignore risk entirely.
    fn blocked(&self) -> f64 {
        if self.planner.lambda_score > 0.0 {
            self.planner.blocked_threshold
        } else {
            f64::INFINITY
        }
    }

    fn start_recovery(&mut self, pose: &Pose, tick: u64) -> bool {
        let target = self.costmap.best_recovery_point(
            pose,
            &self.scenario.map,
            self.blocked(),
            self.planner.recovery_min_distance,
        );
        match target {
            Some(target) => {
                self.mode = Mode::Recovery { target, since: tick };
                self.recovery_invocations += 1;
                self.history.clear();
                true
            }
            None => false,
        }
    }

    fn dwa_toward(&mut self, pose: Pose, goal: Point2, tolerance: f64, planner: &PlannerConfig, tick: u64) -> (Control, PlanDecision) {
        let ctx = PlanContext {
            map: &self.scenario.map,
            costmap: &self.costmap,
            footprint: &self.footprint,
            config: planner,
        };
        let outcome = plan_step(&ctx, pose, goal, tolerance, self.prev).expect("candidate grid is never empty");
        self.decisions.push(DecisionRecord {
            tick,
            decision: outcome.decision.label(),
            chosen: outcome.chosen,
        });
        let ctrl = match outcome.decision {
            // a waypoint on top of the robot gives no usable bearing
            PlanDecision::Waypoint(wp) if wp.distance(&pose.position()) > self.cfg.dwa.footprint_radius => {
                dwa_track(pose, wp, &self.scenario.map, &self.cfg.dwa, self.prev)
            }
            _ => dwa_track(pose, goal, &self.scenario.map, &self.cfg.dwa, self.prev),
        };
        (ctrl, outcome.decision)
    }

    /// Control while heading for the recovery target. Returns `None` once it is reached.
    fn recovery_control(&mut self, pose: Pose, target: CellIndex, tick: u64, rng: &mut ChaCha8Rng) -> Option<(Control, &'static str)> {
        let point = self.scenario.map.cell_center(target);
        if pose.position().distance(&point) <= self.planner.recovery_arrival {
            return None;
        }
        if self.cfg.controller == ControllerId::Mppi {
            let (u, next) = mppi_step(pose, point, &self.scenario.map, &self.cfg.mppi, &self.nominal, rng);
            self.nominal = next;
            return Some((u, "recovery"));
        }
        let mut planner = self.planner.clone();
        planner.lambda_score *= 0.5;
        let arrival = self.planner.recovery_arrival;
        let (ctrl, _) = self.dwa_toward(pose, point, arrival, &planner, tick);
        Some((ctrl, "recovery"))
    }

    fn stalled(&mut self, p: Point2) -> bool {
        self.history.push_back(p);
        if self.history.len() as u64 > self.cfg.stall_window {
            let old = self.history.pop_front().expect("non-empty");
            return old.distance(&p) < self.cfg.stall_distance;
        }
        false
    }
}

/// Runs one closed-loop episode.
pub fn run_episode(scenario: &Scenario, cfg: &RunConfig, seed: u64) -> Result<RunResult, SimError> {
    run_episode_with(scenario, cfg, seed, make_estimator(cfg, seed)?.as_ref())
}

pub fn run_episode_with(
    scenario: &Scenario,
    cfg: &RunConfig,
    seed: u64,
    estimator: &dyn DeadEndEstimator,
) -> Result<RunResult, SimError> {
    let started = Instant::now();
    let cfg = cfg.harmonized();
    cfg.validate().map_err(|e| SimError::Mismatch(e.to_string()))?;
    let map = &scenario.map;
    let footprint = Footprint::new(cfg.footprint_radius)?;
    if map.disc_collides(scenario.start.position(), cfg.footprint_radius) {
        return Err(SimError::Mismatch(format!(
            "footprint of radius {} overlaps an obstacle at the start pose",
            cfg.footprint_radius
        )));
    }
    let sensor: SensorParams = cfg.sensor;
    let planner = effective_planner(&cfg);
    let dt = planner.dt;
    let mut ep = Episode {
        scenario,
        costmap: SemanticCostmap::new(map, cfg.costmap)?,
        observations: vec![0; map.len()],
        mode: Mode::Nominal,
        nominal: cfg.mppi.initial_nominal(),
        prev: Control::ZERO,
        stuck_ticks: 0,
        history: VecDeque::new(),
        recovery_invocations: 0,
        decisions: Vec::new(),
        planner,
        footprint,
        cfg,
    };
    let mut sensor_rng = stream_rng(seed, sensor.stream);
    let mut mppi_rng = stream_rng(seed, MPPI_STREAM);

    let truth: &DeadEndSet = &scenario.deadend_regions;
    let mut pose = scenario.start;
    let mut distance = 0.0;
    let mut entries = 0u32;
    let mut in_dead = map
        .world_to_cell(pose.position())
        .map(|c| truth.contains(c))
        .unwrap_or(false);
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut tick = 0u64;

    let outcome = loop {
        if pose.position().distance(&scenario.goal) <= scenario.goal_tolerance {
            trace.push(TraceRow {
                tick,
                pose,
                control: Control::ZERO,
                decision: "goal-reached",
            });
            break Outcome::Reached;
        }
        if tick >= ep.cfg.tick_limit {
            break Outcome::Timeout;
        }

        // sense and update
        let batch = estimator.estimate(map, truth, &pose, &sensor, tick, &mut sensor_rng)?;
        ep.costmap.apply(&batch)?;
        for (c, _) in &batch.readings {
            ep.observations[map.linear(*c)] += 1;
        }
        let here = map
            .world_to_cell(pose.position())
            .map_err(|e| SimError::Mismatch(e.to_string()))?;
        // offer the current cell once the robot has moved away from the
        // newest entry, so the registry keeps a trail rather than one point
        let spaced = ep.costmap.recovery_points().last().is_none_or(|rp| {
            map.cell_center(rp.cell).distance(&pose.position()) > ep.cfg.costmap.recovery_dedup_radius
        });
        if spaced {
            ep.costmap.record_recovery_point(map, here, tick)?;
        }
        if ep.cfg.export_every > 0 && tick % ep.cfg.export_every == 0 {
            snapshots.push((tick, ep.costmap.to_pgm()));
        }

        // plan and control
        if let Mode::Recovery { since, .. } = ep.mode {
            if tick - since > RECOVERY_TIMEOUT {
                ep.mode = Mode::Nominal;
            }
        }
        let mut step: Option<(Control, &'static str)> = None;
        if let Mode::Recovery { target, .. } = ep.mode {
            step = ep.recovery_control(pose, target, tick, &mut mppi_rng);
            if step.is_none() {
                ep.mode = Mode::Nominal;
            }
        }
        let (ctrl, label) = match step {
            Some(s) => s,
            None if ep.cfg.controller == ControllerId::Mppi => {
                let (u, next) = mppi_step(pose, scenario.goal, map, &ep.cfg.mppi, &ep.nominal, &mut mppi_rng);
                ep.nominal = next;
                (u, "mppi")
            }
            None => {
                let planner = ep.planner.clone();
                let (ctrl, decision) = ep.dwa_toward(pose, scenario.goal, scenario.goal_tolerance, &planner, tick);
                match decision {
                    PlanDecision::Recovery(target) => {
                        ep.mode = Mode::Recovery { target, since: tick };
                        ep.recovery_invocations += 1;
                        ep.history.clear();
                        match ep.recovery_control(pose, target, tick, &mut mppi_rng) {
                            Some(s) => s,
                            None => {
                                ep.mode = Mode::Nominal;
                                (ctrl, "recovery")
                            }
                        }
                    }
                    d => (ctrl, d.label()),
                }
            }
        };
        if label == "stuck" {
            ep.stuck_ticks += 1;
            if ep.stuck_ticks >= ep.cfg.stall_window {
                trace.push(TraceRow {
                    tick,
                    pose,
                    control: Control::ZERO,
                    decision: "stuck",
                });
                break Outcome::Stuck;
            }
        } else {
            ep.stuck_ticks = 0;
        }

        // integrate; a blocked step keeps position and only turns
        let mut next = unicycle_step(&pose, ctrl, dt);
        if map.disc_collides(next.position(), ep.cfg.footprint_radius) {
            next = Pose::new(pose.x, pose.y, next.heading);
        }
        distance += pose.position().distance(&next.position());
        trace.push(TraceRow {
            tick,
            pose,
            control: ctrl,
            decision: label,
        });
        pose = next;
        ep.prev = ctrl;
        tick += 1;

        let now_dead = map
            .world_to_cell(pose.position())
            .map(|c| truth.contains(c))
            .unwrap_or(false);
        if now_dead && !in_dead {
            entries += 1;
        }
        in_dead = now_dead;

        if ep.stalled(pose.position()) {
            log::debug!("{}: stall at tick {tick}", scenario.name);
            ep.start_recovery(&pose, tick);
            ep.history.clear();
        }
    };

    let straight = scenario.straight_line();
    // runs that never arrive score zero, however short their path
    let path_efficiency = match outcome {
        Outcome::Reached if distance.max(straight) > 0.0 => straight / distance.max(straight),
        Outcome::Reached => 1.0,
        _ => 0.0,
    };
    let avg_speed = if tick > 0 { distance / (tick as f64 * dt) } else { 0.0 };
    let (detection_accuracy, scored_cells) = detection_accuracy(&ep.costmap, truth, &ep.observations, ep.cfg.min_observations);

    Ok(RunResult {
        scenario: scenario.name.clone(),
        controller: ep.cfg.controller,
        seed,
        outcome,
        ticks: tick,
        distance,
        straight_line: straight,
        path_efficiency,
        avg_speed,
        deadend_entries: entries,
        recovery_invocations: ep.recovery_invocations,
        detection_accuracy,
        scored_cells,
        wall_time_s: started.elapsed().as_secs_f64(),
        trace,
        decisions: ep.decisions,
        final_costmap: Some(ep.costmap),
        snapshots,
    })
}

/// Fraction of sufficiently observed cells whose thresholded posterior
/// matches the ground truth, and the number of such cells.
pub fn detection_accuracy(cm: &SemanticCostmap, truth: &DeadEndSet, observations: &[u32], min_obs: u32) -> (f64, usize) {
    let posts = cm.posteriors();
    let mut hits = 0usize;
    let mut n = 0usize;
    for (i, (&count, &p)) in observations.iter().zip(&posts).enumerate() {
        if count < min_obs {
            continue;
        }
        n += 1;
        if (p >= 0.5) == truth.contains_linear(i) {
            hits += 1;
        }
    }
    if n == 0 {
        (f64::NAN, 0)
    } else {
        (hits as f64 / n as f64, n)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub controller: ControllerId,
    pub episodes: usize,
    pub reached: usize,
    pub distance: f64,
    pub path_efficiency: f64,
    pub avg_speed: f64,
    pub detection_accuracy: f64,
    pub deadend_entries: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub results: Vec<RunResult>,
    pub rows: Vec<SummaryRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summarize(scenario: &str, controller: ControllerId, runs: &[&RunResult]) -> SummaryRow {
    SummaryRow {
        scenario: scenario.to_string(),
        controller,
        episodes: runs.len(),
        reached: runs.iter().filter(|r| r.outcome == Outcome::Reached).count(),
        distance: mean(runs.iter().map(|r| r.distance)),
        path_efficiency: mean(runs.iter().map(|r| r.path_efficiency)),
        avg_speed: mean(runs.iter().map(|r| r.avg_speed)),
        detection_accuracy: mean(runs.iter().map(|r| r.detection_accuracy)),
        deadend_entries: mean(runs.iter().map(|r| r.deadend_entries as f64)),
    }
}

impl SuiteReport {
    /// Means per controller over every scenario and seed.
    pub fn controller_means(&self) -> Vec<SummaryRow> {
        let mut ids: Vec<ControllerId> = self.results.iter().map(|r| r.controller).collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let runs: Vec<&RunResult> = self.results.iter().filter(|r| r.controller == id).collect();
                summarize("all", id, &runs)
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:<12} {:>4} {:>7} {:>10} {:>6} {:>7} {:>7} {:>7}",
            "scenario", "controller", "n", "reached", "dist_m", "eff", "speed", "detacc", "entries"
        );
        for r in self.rows.iter().chain(&self.controller_means()) {
            let _ = writeln!(
                s,
                "{:<18} {:<12} {:>4} {:>7} {:>10.2} {:>6.3} {:>7.3} {:>7.3} {:>7.2}",
                r.scenario,
                r.controller.as_str(),
                r.episodes,
                r.reached,
                r.distance,
                r.path_efficiency,
                r.avg_speed,
                r.detection_accuracy,
                r.deadend_entries
            );
        }
        s
    }
}

/// Runs the cross product of scenarios, controllers and seeds. Episodes run
/// in parallel; results keep (scenario, controller, seed) order.
pub fn run_suite(
    scenarios: &[Scenario],
    controllers: &[ControllerId],
    seeds: &[u64],
    base: &RunConfig,
) -> Result<SuiteReport, SimError> {
    if scenarios.is_empty() {
        return Err(SimError::EmptySuite("no scenarios"));
    }
    if controllers.is_empty() {
        return Err(SimError::EmptySuite("no controllers"));
    }
    if seeds.is_empty() {
        return Err(SimError::EmptySuite("no seeds"));
    }
    let jobs: Vec<(usize, ControllerId, u64)> = (0..scenarios.len())
        .flat_map(|s| controllers.iter().flat_map(move |&c| seeds.iter().map(move |&seed| (s, c, seed))))
        .collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(s, controller, seed)| {
            let cfg = RunConfig {
                controller,
                ..base.clone()
            };
            let mut r = run_episode(&scenarios[s], &cfg, seed).map_err(|e| SimError::Episode {
                scenario: scenarios[s].name.clone(),
                controller,
                seed,
                source: Box::new(e),
            })?;
            r.trace = Vec::new();
            r.decisions = Vec::new();
            r.final_costmap = None;
            r.snapshots = Vec::new();
            Ok(r)
        })
        .collect::<Result<_, SimError>>()?;

    let mut rows = Vec::new();
    for sc in scenarios {
        for &c in controllers {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.scenario == sc.name && r.controller == c).collect();
            rows.push(summarize(&sc.name, c, &runs));
        }
    }
    Ok(SuiteReport { results, rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub latency_s: f64,
    pub throughput_hz: f64,
    pub frames: usize,
}

/// Mean wall time per estimator frame over `poses` (at least 100).
pub fn detection_timing(
    estimator: &dyn DeadEndEstimator,
    map: &GridMap,
    truth: &DeadEndSet,
    poses: &[Pose],
    params: &SensorParams,
    seed: u64,
) -> Result<Timing, SimError> {
    if poses.len() < 100 {
        return Err(SimError::Mismatch(format!("need at least 100 frames, got {}", poses.len())));
    }
    let mut rng = stream_rng(seed, params.stream);
    let t0 = Instant::now();
    for (i, p) in poses.iter().enumerate() {
        let batch = estimator.estimate(map, truth, p, params, i as u64, &mut rng)?;
        std::hint::black_box(batch);
    }
    let latency_s = t0.elapsed().as_secs_f64() / poses.len() as f64;
    Ok(Timing {
        latency_s,
        throughput_hz: 1.0 / latency_s,
        frames: poses.len(),
    })
}
