//! Low-level controllers: a DWA waypoint tracker and an MPPI baseline.
//! Both only see occupancy; semantics live in the goal generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::planner::{bearing_error, rollout_for, unicycle_step, Control};
use crate::world::{GridMap, Point2, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("invalid controller config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwaConfig {
    pub v_max: f64,
    pub omega_max: f64,
    pub v_samples: usize,
    pub omega_samples: usize,
    /// Tracking horizon in seconds.
    pub horizon: f64,
    pub dt: f64,
    pub w_heading: f64,
    pub w_distance: f64,
    pub w_clearance: f64,
    pub w_speed: f64,
    /// Clearance beyond this distance is not rewarded.
    pub clearance_cap: f64,
    /// Gain of the rotate-in-place fallback.
    pub rotate_gain: f64,
    pub footprint_radius: f64,
}

impl Default for DwaConfig {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            omega_max: 1.0,
            v_samples: 7,
            omega_samples: 21,
            horizon: 1.0,
            dt: 0.1,
            w_heading: 1.0,
            w_distance: 2.0,
            w_clearance: 0.3,
            w_speed: 0.2,
            clearance_cap: 0.6,
            rotate_gain: 1.5,
            footprint_radius: 0.25,
        }
    }
}

fn check_nonneg(pairs: &[(&str, f64)]) -> Result<(), ControllerError> {
    for (name, v) in pairs {
        if !(*v >= 0.0 && v.is_finite()) {
            return Err(ControllerError::Config(format!("{name} must be nonnegative, got {v}")));
        }
    }
    Ok(())
}

impl DwaConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(ControllerError::Config("need 0 < dt <= horizon".into()));
        }
        if !(self.v_max > 0.0 && self.omega_max > 0.0 && self.footprint_radius > 0.0) {
            return Err(ControllerError::Config("bounds and footprint must be positive".into()));
        }
        if self.v_samples < 2 || self.omega_samples < 3 {
            return Err(ControllerError::Config("too few samples".into()));
        }
        check_nonneg(&[
            ("w_heading", self.w_heading),
            ("w_distance", self.w_distance),
            ("w_clearance", self.w_clearance),
            ("w_speed", self.w_speed),
            ("clearance_cap", self.clearance_cap),
            ("rotate_gain", self.rotate_gain),
        ])
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Rotation used when no forward sample survives. Turns the shorter way
/// toward the nearest heading whose short straight probe is collision-free
/// and closes on `waypoint`; otherwise faces the waypoint, or turns toward
/// the freer side when it is already dead ahead.
fn rotate_in_place(robot: &Pose, waypoint: Point2, map: &GridMap, cfg: &DwaConfig) -> Control {
    const STEP: f64 = 0.1;
    let probe_len = (cfg.v_max * cfg.horizon).max(map.resolution());
    let here = robot.position().distance(&waypoint);
    let opens = |delta: f64| {
        let a = robot.heading + delta;
        (1..=4).all(|i| {
            let s = probe_len * i as f64 / 4.0;
            !map.disc_collides(Point2::new(robot.x + s * a.cos(), robot.y + s * a.sin()), cfg.footprint_radius)
        }) && Point2::new(robot.x + probe_len * a.cos(), robot.y + probe_len * a.sin()).distance(&waypoint) < here
    };
    let turns = (std::f64::consts::PI / STEP).ceil() as usize;
    let err = bearing_error(robot, waypoint);
    let mut omega = if err.abs() > 0.05 {
        (cfg.rotate_gain * err).clamp(-cfg.omega_max, cfg.omega_max)
    } else {
        let side = |s: f64| {
            let a = robot.heading + s * std::f64::consts::FRAC_PI_2;
            map.clearance(Point2::new(robot.x + 0.5 * a.cos(), robot.y + 0.5 * a.sin()), cfg.clearance_cap)
        };
        if side(1.0) >= side(-1.0) {
            cfg.omega_max
        } else {
            -cfg.omega_max
        }
    };
    for k in 1..=turns {
        let d = k as f64 * STEP;
        // ties go to the side the waypoint lies on
        let order = if err >= 0.0 { [d, -d] } else { [-d, d] };
        if let Some(&delta) = order.iter().find(|&&delta| opens(delta)) {
            omega = cfg.omega_max.copysign(delta);
            break;
        }
    }
    Control::new(0.0, omega)
}

/// Tracks `waypoint` with the best collision-free sampled control.
pub fn dwa_track(robot: Pose, waypoint: Point2, map: &GridMap, cfg: &DwaConfig, _prev: Control) -> Control {
    let mut best: Option<(f64, Control)> = None;
    let mut forward_survivor = false;
    let cap = cfg.clearance_cap.max(1e-9);
    for v in grid(0.0, cfg.v_max, cfg.v_samples) {
        for omega in grid(-cfg.omega_max, cfg.omega_max, cfg.omega_samples) {
            let ctrl = Control::new(v, omega);
            let r = rollout_for(robot, ctrl, cfg.horizon, cfg.dt, map, &crate::costmap::Footprint {
                radius: cfg.footprint_radius,
            });
            if r.collided {
                continue;
            }
            forward_survivor |= v > 0.0;
            let end = r.end_pose();
            let heading = bearing_error(&end, waypoint).abs() / std::f64::consts::PI;
            let dist = end.position().distance(&waypoint);
            let clearance = r
                .states
                .iter()
                .map(|s| map.clearance(s.position(), cap) - cfg.footprint_radius)
                .fold(cap, f64::min)
                .max(0.0);
            let cost = cfg.w_heading * heading + cfg.w_distance * dist + cfg.w_clearance * (1.0 - clearance / cap)
                - cfg.w_speed * v / cfg.v_max;
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, ctrl));
            }
        }
    }
    // pure rotations go through the fallback so turning stays consistent
    // between ticks with and without forward survivors
    match best {
        Some((_, ctrl)) if forward_survivor && ctrl.v > 0.0 => ctrl,
        _ => rotate_in_place(&robot, waypoint, map, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiConfig {
    pub samples: usize,
    pub steps: usize,
    pub dt: f64,
    pub noise_std: (f64, f64),
    pub temperature: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub w_goal: f64,
    pub w_terminal: f64,
    pub collision_cost: f64,
    pub footprint_radius: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            steps: 20,
            dt: 0.1,
            noise_std: (0.2, 0.5),
            temperature: 1.0,
            v_max: 0.5,
            omega_max: 1.0,
            w_goal: 1.0,
            w_terminal: 5.0,
            collision_cost: 1000.0,
            footprint_radius: 0.25,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.samples < 16 {
            return Err(ControllerError::Config(format!("sample count {} < 16", self.samples)));
        }
        if self.steps == 0 || !(self.dt > 0.0) {
            return Err(ControllerError::Config("steps and dt must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(ControllerError::Config(format!("temperature {}", self.temperature)));
        }
        if !(self.v_max > 0.0 && self.omega_max > 0.0 && self.footprint_radius > 0.0) {
            return Err(ControllerError::Config("bounds and footprint must be positive".into()));
        }
        check_nonneg(&[
            ("noise_std_v", self.noise_std.0),
            ("noise_std_omega", self.noise_std.1),
            ("w_goal", self.w_goal),
            ("w_terminal", self.w_terminal),
            ("collision_cost", self.collision_cost),
        ])
    }

    /// Initial nominal sequence: half speed, straight.
    pub fn initial_nominal(&self) -> Vec<Control> {
        vec![Control::new(0.5 * self.v_max, 0.0); self.steps]
    }
}

/// Normalized `exp(-(c - min) / temperature)`. Infinite costs get zero
/// weight; if every cost is infinite the weights are uniform.
pub fn softmin_weights(costs: &[f64], temperature: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    if costs.is_empty() {
        return Vec::new();
    }
    if !min.is_finite() {
        return vec![1.0 / costs.len() as f64; costs.len()];
    }
    let raw: Vec<f64> = costs.iter().map(|&c| (-(c - min) / temperature).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn sequence_cost(robot: Pose, seq: &[Control], goal: Point2, map: &GridMap, cfg: &MppiConfig) -> f64 {
    let mut pose = robot;
    let mut cost = 0.0;
    for &ctrl in seq {
        let next = unicycle_step(&pose, ctrl, cfg.dt);
        if map.disc_collides(next.position(), cfg.footprint_radius) {
            cost += cfg.collision_cost;
            pose.heading = next.heading;
        } else {
            pose = next;
        }
        cost += cfg.w_goal * pose.position().distance(&goal) * cfg.dt;
    }
    cost + cfg.w_terminal * pose.position().distance(&goal)
}

fn clamp_ctrl(c: Control, cfg: &MppiConfig) -> Control {
    Control::new(c.v.clamp(0.0, cfg.v_max), c.omega.clamp(-cfg.omega_max, cfg.omega_max))
}

/// One MPPI iteration. Returns the control to apply and the shifted,
/// reweighted nominal sequence.
pub fn mppi_step<R: Rng + ?Sized>(
    robot: Pose,
    goal: Point2,
    map: &GridMap,
    cfg: &MppiConfig,
    nominal: &[Control],
    rng: &mut R,
) -> (Control, Vec<Control>) {
    let mut nominal: Vec<Control> = nominal.iter().map(|&c| clamp_ctrl(c, cfg)).collect();
    nominal.resize(cfg.steps, nominal.last().copied().unwrap_or(Control::ZERO));
    let nv = Normal::new(0.0, cfg.noise_std.0).expect("validated std");
    let nw = Normal::new(0.0, cfg.noise_std.1).expect("validated std");

    // perturbations are clamped so that every sample stays admissible
    let noise: Vec<Vec<Control>> = (0..cfg.samples)
        .map(|_| {
            nominal
                .iter()
                .map(|&u| {
                    let raw = Control::new(u.v + nv.sample(rng), u.omega + nw.sample(rng));
                    let c = clamp_ctrl(raw, cfg);
                    Control::new(c.v - u.v, c.omega - u.omega)
                })
                .collect()
        })
        .collect();

    let costs: Vec<f64> = noise
        .iter()
        .map(|eps| {
            let seq: Vec<Control> = nominal
                .iter()
                .zip(eps)
                .map(|(u, e)| Control::new(u.v + e.v, u.omega + e.omega))
                .collect();
            sequence_cost(robot, &seq, goal, map, cfg)
        })
        .collect();
    let weights = softmin_weights(&costs, cfg.temperature);

    let mut updated = nominal.clone();
    for (t, u) in updated.iter_mut().enumerate() {
        let (dv, dw) = weights
            .iter()
            .zip(&noise)
            .fold((0.0, 0.0), |(a, b), (w, eps)| (a + w * eps[t].v, b + w * eps[t].omega));
        *u = clamp_ctrl(Control::new(u.v + dv, u.omega + dw), cfg);
    }
    let first = updated[0];
    updated.remove(0);
    updated.push(*updated.last().unwrap_or(&first));
    (first, updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{CellIndex, OccupancyClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn open(w: usize, h: usize) -> GridMap {
        GridMap::filled(0.1, w, h, OccupancyClass::Traversable).unwrap()
    }

    fn wall_map() -> GridMap {
        // vertical wall whose face is 0.3 m ahead of a robot at x = 1.0
        let mut m = open(40, 40);
        for y in 0..40 {
            m.set(CellIndex::new(13, y), OccupancyClass::Occupied).unwrap();
        }
        m
    }

    #[test]
    fn dead_ahead_goes_full_speed_straight() {
        let map = open(60, 60);
        let cfg = DwaConfig::default();
        let c = dwa_track(Pose::new(1.0, 3.0, 0.0), Point2::new(4.0, 3.0), &map, &cfg, Control::ZERO);
        assert!(c.omega.abs() < 1e-9);
        assert_eq!(c.v, cfg.v_max);
    }

    #[test]
    fn waypoint_behind_rotates() {
        let map = open(60, 60);
        let cfg = DwaConfig::default();
        let c = dwa_track(Pose::new(3.0, 3.0, 0.0), Point2::new(1.0, 3.0), &map, &cfg, Control::ZERO);
        assert!(c.omega.abs() > 0.0);
        assert!(c.v < 0.1, "{c:?}");
    }

    #[test]
    fn wall_ahead_removes_straight_samples() {
        let map = wall_map();
        let cfg = DwaConfig::default();
        let robot = Pose::new(1.0, 2.0, 0.0);
        let fp = crate::costmap::Footprint::new(cfg.footprint_radius).unwrap();
        // enumerate the grid: no straight forward sample survives
        for v in grid(0.0, cfg.v_max, cfg.v_samples).filter(|&v| v > 0.0) {
            let r = rollout_for(robot, Control::new(v, 0.0), cfg.horizon, cfg.dt, &map, &fp);
            assert!(r.collided, "v={v}");
        }
        let c = dwa_track(robot, Point2::new(2.0, 2.0), &map, &cfg, Control::ZERO);
        assert!(c.omega.abs() > 0.0);
        if c.v > 0.0 {
            let r = rollout_for(robot, c, cfg.horizon, cfg.dt, &map, &fp);
            assert!(!r.collided);
        }
    }

    #[test]
    fn boxed_in_rotation_does_not_dither() {
        // robot tucked under a wall stub; the way out is to the right
        let mut map = open(40, 40);
        for x in 16..19 {
            for y in 25..40 {
                map.set(CellIndex::new(x, y), OccupancyClass::Occupied).unwrap();
            }
        }
        let cfg = DwaConfig::default();
        let wp = Point2::new(3.0, 3.9);
        for heading in [0.47, 0.57, 1.2] {
            let c = dwa_track(Pose::new(1.645, 2.2378, heading), wp, &map, &cfg, Control::ZERO);
            assert_eq!(c.v, 0.0, "heading {heading}: {c:?}");
            assert!(c.omega < 0.0, "heading {heading}: {c:?}");
        }
    }

    #[test]
    fn outputs_stay_within_bounds_and_collision_free() {
        let map = wall_map();
        let cfg = DwaConfig::default();
        let fp = crate::costmap::Footprint::new(cfg.footprint_radius).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let robot = Pose::new(rng.random_range(0.4..1.0), rng.random_range(0.5..3.5), rng.random_range(-PI..PI));
            let wp = Point2::new(rng.random_range(0.3..3.7), rng.random_range(0.3..3.7));
            let c = dwa_track(robot, wp, &map, &cfg, Control::ZERO);
            assert!(c.is_admissible(cfg.v_max, cfg.omega_max));
            if c.v > 0.0 {
                assert!(!rollout_for(robot, c, 1.0, cfg.dt, &map, &fp).collided);
            }
        }
    }

    #[test]
    fn softmin_weights_are_a_distribution() {
        let w = softmin_weights(&[3.0, 1.0, 2.0, f64::INFINITY], 0.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert_eq!(w[3], 0.0);
        assert!(w[1] > w[2] && w[2] > w[0]);
        let huge = softmin_weights(&[1.0, 50.0, 1e6], 1e300);
        for x in huge {
            assert!((x - 1.0 / 3.0).abs() < 1e-9);
        }
        // large magnitudes do not underflow to NaN
        let big = softmin_weights(&[1e6, 1e6 + 1.0], 1.0);
        assert!(big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_noise_returns_nominal() {
        let map = open(60, 60);
        let cfg = MppiConfig {
            noise_std: (0.0, 0.0),
            ..Default::default()
        };
        let nominal: Vec<Control> = (0..cfg.steps).map(|i| Control::new(0.3, 0.01 * i as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, next) = mppi_step(Pose::new(3.0, 3.0, 0.0), Point2::new(5.0, 5.0), &map, &cfg, &nominal, &mut rng);
        assert_eq!(u, nominal[0]);
        assert_eq!(&next[..cfg.steps - 1], &nominal[1..]);
        assert_eq!(next.len(), cfg.steps);
    }

    #[test]
    fn hot_temperature_gives_sample_mean() {
        let map = open(60, 60);
        let cfg = MppiConfig {
            temperature: 1e300,
            samples: 64,
            ..Default::default()
        };
        let nominal = cfg.initial_nominal();
        let robot = Pose::new(3.0, 3.0, 0.5);
        let goal = Point2::new(5.0, 1.0);
        let (u, _) = mppi_step(robot, goal, &map, &cfg, &nominal, &mut ChaCha8Rng::seed_from_u64(9));

        // regenerate the identical sample stream and average it directly
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nv = Normal::new(0.0, cfg.noise_std.0).unwrap();
        let nw = Normal::new(0.0, cfg.noise_std.1).unwrap();
        let mut first = Vec::new();
        for _ in 0..cfg.samples {
            for (t, n) in nominal.iter().enumerate() {
                let c = clamp_ctrl(Control::new(n.v + nv.sample(&mut rng), n.omega + nw.sample(&mut rng)), &cfg);
                if t == 0 {
                    first.push(c);
                }
            }
        }
        let mv = first.iter().map(|c| c.v).sum::<f64>() / first.len() as f64;
        let mw = first.iter().map(|c| c.omega).sum::<f64>() / first.len() as f64;
        assert!((u.v - mv).abs() < 1e-9 && (u.omega - mw).abs() < 1e-9);
    }

    #[test]
    fn mppi_is_deterministic_and_bounded() {
        let map = wall_map();
        let cfg = MppiConfig::default();
        let nominal = cfg.initial_nominal();
        let robot = Pose::new(0.8, 2.0, 0.0);
        let a = mppi_step(robot, Point2::new(3.5, 2.0), &map, &cfg, &nominal, &mut ChaCha8Rng::seed_from_u64(4));
        let b = mppi_step(robot, Point2::new(3.5, 2.0), &map, &cfg, &nominal, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.0.is_admissible(cfg.v_max, cfg.omega_max));
        assert!(a.1.iter().all(|c| c.is_admissible(cfg.v_max, cfg.omega_max)));
    }

    #[test]
    fn mppi_drives_toward_goal() {
        let map = open(80, 80);
        let cfg = MppiConfig::default();
        let mut nominal = cfg.initial_nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pose = Pose::new(1.0, 1.0, 0.0);
        let goal = Point2::new(6.0, 6.0);
        let mut reached = false;
        for _ in 0..300 {
            let (u, next) = mppi_step(pose, goal, &map, &cfg, &nominal, &mut rng);
            nominal = next;
            pose = unicycle_step(&pose, u, cfg.dt);
            if pose.position().distance(&goal) < 0.75 {
                reached = true;
                break;
            }
        }
        assert!(reached, "{pose:?}");
    }

    #[test]
    fn config_validation() {
        assert!(DwaConfig::default().validate().is_ok());
        assert!(MppiConfig::default().validate().is_ok());
        assert!(MppiConfig {
            samples: 8,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MppiConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DwaConfig {
            w_speed: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
