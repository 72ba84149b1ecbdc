//! Short-horizon goal generation: rollouts of admissible controls, exposure
//! scoring, endpoint selection and the recovery trigger.

use std::cmp::Ordering;

use thiserror::Error;

use crate::costmap::{Footprint, SemanticCostmap};
use crate::world::{normalize_angle, CellIndex, GridMap, Point2, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no candidate rollouts")]
    NoCandidates,
    #[error("invalid planner config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub v: f64,
    pub omega: f64,
}

impl Control {
    pub const ZERO: Control = Control { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn is_admissible(&self, v_max: f64, omega_max: f64) -> bool {
        self.v.abs() <= v_max && self.omega.abs() <= omega_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Weight of the exposure term in the endpoint score.
    pub lambda_score: f64,
    /// Per-meter discount rate inside the exposure sum.
    pub lambda_discount: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub v_samples: usize,
    pub omega_samples: usize,
    pub w_collision: f64,
    pub w_smoothness: f64,
    pub w_goal: f64,
    pub blocked_threshold: f64,
    pub waypoint_range_min: f64,
    pub waypoint_range_max: f64,
    /// Arrival radius that ends a recovery maneuver.
    pub recovery_arrival: f64,
    /// Recovery targets closer than this are ignored.
    pub recovery_min_distance: f64,
    /// Optional acceleration bounds (v, omega) per second; off when `None`.
    pub accel_limits: Option<(f64, f64)>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 3.0,
            dt: 0.1,
            lambda_score: 1.0,
            lambda_discount: 0.5,
            v_max: 0.5,
            omega_max: 1.0,
            v_samples: 7,
            omega_samples: 15,
            w_collision: 1.0,
            w_smoothness: 0.1,
            w_goal: 3.0,
            blocked_threshold: 0.7,
            waypoint_range_min: 3.0,
            waypoint_range_max: 5.0,
            recovery_arrival: 0.3,
            recovery_min_distance: 1.0,
            accel_limits: None,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let err = |m: String| Err(PlannerError::Config(m));
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.dt <= self.horizon) {
            return err(format!("need 0 < dt ({}) <= horizon ({})", self.dt, self.horizon));
        }
        if self.v_samples < 3 || self.omega_samples < 3 {
            return err("sample counts must be at least 3".into());
        }
        for (name, v) in [
            ("lambda_score", self.lambda_score),
            ("lambda_discount", self.lambda_discount),
            ("w_collision", self.w_collision),
            ("w_smoothness", self.w_smoothness),
            ("w_goal", self.w_goal),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(self.v_max > 0.0 && self.omega_max > 0.0) {
            return err("velocity bounds must be positive".into());
        }
        if !(self.blocked_threshold > 0.0 && self.blocked_threshold < 1.0) {
            return err(format!("blocked_threshold {}", self.blocked_threshold));
        }
        if !(0.0 < self.waypoint_range_min && self.waypoint_range_min <= self.waypoint_range_max) {
            return err("waypoint range must satisfy 0 < min <= max".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    /// Cap applied to the goal-distance term.
    pub fn goal_distance_cap(&self) -> f64 {
        2.0 * self.waypoint_range_max
    }
}

/// One integration step of the unicycle with the heading taken at mid-step.
pub fn unicycle_step(p: &Pose, ctrl: Control, dt: f64) -> Pose {
    let mid = p.heading + 0.5 * ctrl.omega * dt;
    Pose::new(
        p.x + ctrl.v * mid.cos() * dt,
        p.y + ctrl.v * mid.sin() * dt,
        p.heading + ctrl.omega * dt,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub control: Control,
    pub start: Pose,
    /// States after each step; empty when the first step already collides.
    pub states: Vec<Pose>,
    /// Cumulative path length at each state.
    pub arc_lengths: Vec<f64>,
    pub endpoint: Point2,
    pub collided: bool,
}

impl Rollout {
    pub fn end_pose(&self) -> Pose {
        self.states.last().copied().unwrap_or(self.start)
    }
}

/// Holds `ctrl` for the horizon; stops before the first colliding state.
pub fn rollout_for(
    start: Pose,
    ctrl: Control,
    horizon: f64,
    dt: f64,
    map: &GridMap,
    fp: &Footprint,
) -> Rollout {
    let steps = ((horizon / dt).round() as usize).max(1);
    let mut states = Vec::with_capacity(steps);
    let mut arcs = Vec::with_capacity(steps);
    let mut pose = start;
    let mut s = 0.0;
    let mut collided = false;
    let step_len = ctrl.v.abs() * dt;
    for _ in 0..steps {
        let next = unicycle_step(&pose, ctrl, dt);
        if map.disc_collides(next.position(), fp.radius) {
            collided = true;
            break;
        }
        s += step_len;
        pose = next;
        states.push(pose);
        arcs.push(s);
    }
    Rollout {
        control: ctrl,
        start,
        endpoint: states.last().map_or(start.position(), Pose::position),
        states,
        arc_lengths: arcs,
        collided,
    }
}

pub fn rollout(start: Pose, ctrl: Control, cfg: &PlannerConfig, map: &GridMap, fp: &Footprint) -> Rollout {
    rollout_for(start, ctrl, cfg.horizon, cfg.dt, map, fp)
}

/// `sum_k exp(-lambda_discount * s_k) * P_foot(x_k)` over the rollout states.
pub fn ede(r: &Rollout, cm: &SemanticCostmap, fp: &Footprint, cfg: &PlannerConfig) -> f64 {
    r.states
        .iter()
        .zip(&r.arc_lengths)
        .map(|(x, &s)| {
            let p = cm.footprint_prob(x.position(), fp).unwrap_or(1.0);
            (-cfg.lambda_discount * s).exp() * p
        })
        .sum()
}

/// Largest footprint probability met along the rollout.
pub fn max_footprint_prob(r: &Rollout, cm: &SemanticCostmap, fp: &Footprint) -> f64 {
    r.states
        .iter()
        .map(|x| cm.footprint_prob(x.position(), fp).unwrap_or(1.0))
        .fold(0.0, f64::max)
}

/// Geometric cost: infinite on collision, otherwise smoothness plus a goal
/// term. For goals farther than the cap, the common excess distance is
/// subtracted from every candidate so the term stays bounded without
/// changing which endpoint is closest.
pub fn j_geom(r: &Rollout, goal: Point2, prev_ctrl: Control, cfg: &PlannerConfig) -> f64 {
    if r.collided {
        return f64::INFINITY;
    }
    let d = r.endpoint.distance(&goal);
    let excess = (r.start.position().distance(&goal) - cfg.goal_distance_cap()).max(0.0);
    cfg.w_smoothness * (r.control.omega - prev_ctrl.omega).abs() + cfg.w_goal * (d - excess)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub index: usize,
    pub control: Control,
    pub endpoint: Point2,
    pub j_geom: f64,
    pub ede: f64,
    pub score: f64,
    pub max_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Waypoint {
        chosen: CandidateScore,
        scores: Vec<CandidateScore>,
    },
    Recovery {
        scores: Vec<CandidateScore>,
    },
}

/// Lexicographic order: score, then weighted exposure, then |omega|, then index.
fn candidate_order(a: &CandidateScore, b: &CandidateScore, lambda: f64) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then((lambda * a.ede).total_cmp(&(lambda * b.ede)))
        .then(a.control.omega.abs().total_cmp(&b.control.omega.abs()))
        .then(a.index.cmp(&b.index))
}

pub fn score_candidates(
    candidates: &[Rollout],
    cm: &SemanticCostmap,
    fp: &Footprint,
    goal: Point2,
    prev_ctrl: Control,
    cfg: &PlannerConfig,
) -> Vec<CandidateScore> {
    let semantic = cfg.lambda_score > 0.0;
    candidates
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let jg = j_geom(r, goal, prev_ctrl, cfg);
            // with a zero weight the exposure is ignored entirely
            let (e, max_risk) = if semantic {
                (ede(r, cm, fp, cfg), max_footprint_prob(r, cm, fp))
            } else {
                (0.0, 0.0)
            };
            let score = if semantic { jg + cfg.lambda_score * e } else { jg };
            CandidateScore {
                index,
                control: r.control,
                endpoint: r.endpoint,
                j_geom: jg,
                ede: e,
                score,
                max_risk,
            }
        })
        .collect()
}

/// Picks the minimum-score endpoint, or signals recovery when every
/// candidate is blocked or high-risk.
pub fn select_goal(
    candidates: &[Rollout],
    cm: &SemanticCostmap,
    fp: &Footprint,
    goal: Point2,
    prev_ctrl: Control,
    cfg: &PlannerConfig,
) -> Result<Selection, PlannerError> {
    if candidates.is_empty() {
        return Err(PlannerError::NoCandidates);
    }
    let scores = score_candidates(candidates, cm, fp, goal, prev_ctrl, cfg);
    let semantic = cfg.lambda_score > 0.0;
    let all_bad = scores
        .iter()
        .all(|s| s.score.is_infinite() || (semantic && s.max_risk >= cfg.blocked_threshold));
    if all_bad {
        return Ok(Selection::Recovery { scores });
    }
    let chosen = *scores
        .iter()
        .filter(|s| s.score.is_finite())
        .min_by(|a, b| candidate_order(a, b, cfg.lambda_score))
        .expect("at least one finite score");
    Ok(Selection::Waypoint { chosen, scores })
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| {
        if n == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    })
}

/// The `v x omega` sample grid, `v` in `[0, v_max]`, `omega` in `[-omega_max, omega_max]`.
pub fn control_grid(cfg: &PlannerConfig, prev: Control) -> Vec<Control> {
    let (v_lo, v_hi, w_lo, w_hi) = match cfg.accel_limits {
        Some((av, aw)) => (
            (prev.v - av * cfg.dt).max(0.0),
            (prev.v + av * cfg.dt).min(cfg.v_max),
            (prev.omega - aw * cfg.dt).max(-cfg.omega_max),
            (prev.omega + aw * cfg.dt).min(cfg.omega_max),
        ),
        None => (0.0, cfg.v_max, -cfg.omega_max, cfg.omega_max),
    };
    let mut out = Vec::with_capacity(cfg.v_samples * cfg.omega_samples);
    for v in linspace(v_lo, v_hi, cfg.v_samples) {
        for w in linspace(w_lo, w_hi, cfg.omega_samples) {
            out.push(Control::new(v, w));
        }
    }
    out
}

/// Rollouts of the admissible grid, filtered to the waypoint range when the
/// horizon can reach it.
pub fn candidate_rollouts(
    robot: Pose,
    map: &GridMap,
    fp: &Footprint,
    prev: Control,
    cfg: &PlannerConfig,
) -> Vec<Rollout> {
    let reach = cfg.horizon * cfg.v_max;
    control_grid(cfg, prev)
        .into_iter()
        .map(|c| rollout(robot, c, cfg, map, fp))
        .filter(|r| reach < cfg.waypoint_range_min || r.endpoint.distance(&robot.position()) <= cfg.waypoint_range_max)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanDecision {
    Waypoint(Point2),
    Recovery(CellIndex),
    GoalReached,
    Stuck,
}

impl PlanDecision {
    pub fn label(&self) -> &'static str {
        match self {
            PlanDecision::Waypoint(_) => "waypoint",
            PlanDecision::Recovery(_) => "recovery",
            PlanDecision::GoalReached => "goal-reached",
            PlanDecision::Stuck => "stuck",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub decision: PlanDecision,
    /// The selected candidate, when a waypoint was produced.
    pub chosen: Option<CandidateScore>,
}

pub struct PlanContext<'a> {
    pub map: &'a GridMap,
    pub costmap: &'a SemanticCostmap,
    pub footprint: &'a Footprint,
    pub config: &'a PlannerConfig,
}

pub fn plan_step(
    ctx: &PlanContext<'_>,
    robot: Pose,
    goal: Point2,
    goal_tolerance: f64,
    prev_ctrl: Control,
) -> Result<PlanOutcome, PlannerError> {
    if robot.position().distance(&goal) <= goal_tolerance {
        return Ok(PlanOutcome {
            decision: PlanDecision::GoalReached,
            chosen: None,
        });
    }
    let cfg = ctx.config;
    let candidates = candidate_rollouts(robot, ctx.map, ctx.footprint, prev_ctrl, cfg);
    if candidates.is_empty() {
        return Ok(recovery_or_stuck(ctx, robot));
    }
    match select_goal(&candidates, ctx.costmap, ctx.footprint, goal, prev_ctrl, cfg)? {
        Selection::Waypoint { chosen, .. } => Ok(PlanOutcome {
            decision: PlanDecision::Waypoint(chosen.endpoint),
            chosen: Some(chosen),
        }),
        Selection::Recovery { .. } => Ok(recovery_or_stuck(ctx, robot)),
    }
}

fn recovery_or_stuck(ctx: &PlanContext<'_>, robot: Pose) -> PlanOutcome {
    let target = ctx.costmap.best_recovery_point(
        &robot,
        ctx.map,
        ctx.config.blocked_threshold,
        ctx.config.recovery_min_distance,
    );
    PlanOutcome {
        decision: target.map_or(PlanDecision::Stuck, PlanDecision::Recovery),
        chosen: None,
    }
}

/// Heading error from `pose` to `target`.
pub fn bearing_error(pose: &Pose, target: Point2) -> f64 {
    normalize_angle((target.y - pose.y).atan2(target.x - pose.x) - pose.heading)
}
