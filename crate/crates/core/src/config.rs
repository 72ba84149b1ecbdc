//! Run configuration and suite manifests.
//!
//! Config files are flat `key = value` lines; `#` starts a comment.
//! Component parameters use a prefix, e.g. `planner.lambda_score = 0.5`,
//! `dwa.w_heading = 1.0`, `sensor.max_range = 4`. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::controllers::{DwaConfig, MppiConfig};
use crate::costmap::CostmapParams;
use crate::planner::PlannerConfig;
use crate::sensor::SensorParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn perr(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum ControllerId {
    #[serde(rename = "drnav-dwa")]
    DrNavDwa,
    #[serde(rename = "vanilla-dwa")]
    VanillaDwa,
    #[serde(rename = "mppi")]
    Mppi,
}

impl ControllerId {
    pub const ALL: [ControllerId; 3] = [ControllerId::DrNavDwa, ControllerId::VanillaDwa, ControllerId::Mppi];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerId::DrNavDwa => "drnav-dwa",
            ControllerId::VanillaDwa => "vanilla-dwa",
            ControllerId::Mppi => "mppi",
        }
    }
}

impl fmt::Display for ControllerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drnav-dwa" => Ok(ControllerId::DrNavDwa),
            "vanilla-dwa" => Ok(ControllerId::VanillaDwa),
            "mppi" => Ok(ControllerId::Mppi),
            other => Err(ConfigError::Invalid(format!(
                "unknown controller `{other}` (expected drnav-dwa, vanilla-dwa or mppi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorKind {
    #[default]
    Synthetic,
    Fusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub controller: ControllerId,
    pub planner: PlannerConfig,
    pub dwa: DwaConfig,
    pub mppi: MppiConfig,
    pub sensor: SensorParams,
    pub costmap: CostmapParams,
    pub estimator: EstimatorKind,
    pub footprint_radius: f64,
    pub tick_limit: u64,
    /// Write a costmap snapshot every N ticks; 0 disables.
    pub export_every: u64,
    /// Seeds to run; empty means the scenario's own seed.
    pub seeds: Vec<u64>,
    /// Net displacement below this over `stall_window` ticks counts as a stall.
    pub stall_distance: f64,
    pub stall_window: u64,
    /// Observations needed before a cell enters the detection score.
    pub min_observations: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            controller: ControllerId::DrNavDwa,
            planner: PlannerConfig::default(),
            dwa: DwaConfig::default(),
            mppi: MppiConfig::default(),
            sensor: SensorParams::default(),
            costmap: CostmapParams::default(),
            estimator: EstimatorKind::Synthetic,
            footprint_radius: 0.25,
            tick_limit: 3000,
            export_every: 0,
            seeds: Vec::new(),
            stall_distance: 0.25,
            stall_window: 50,
            min_observations: 5,
        }
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| perr(line, format!("`{key}`: cannot parse `{v}`")))
}

fn finite(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(line, key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(perr(line, format!("`{key}` must be finite")))
    }
}

pub fn parse_seed_list(v: &str) -> Result<Vec<u64>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| ConfigError::Invalid(format!("bad seed `{s}`")))
        })
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let f = |v: &str| finite(line, key, v);
        match key {
            "controller" => self.controller = v.parse()?,
            "estimator" => {
                self.estimator = match v {
                    "synthetic" => EstimatorKind::Synthetic,
                    "fusion" => EstimatorKind::Fusion,
                    _ => return Err(perr(line, format!("unknown estimator `{v}`"))),
                }
            }
            "footprint_radius" => self.footprint_radius = f(v)?,
            "tick_limit" => self.tick_limit = num(line, key, v)?,
            "export_every" => self.export_every = num(line, key, v)?,
            "seeds" => self.seeds = parse_seed_list(v)?,
            "stall_distance" => self.stall_distance = f(v)?,
            "stall_window" => self.stall_window = num(line, key, v)?,
            "min_observations" => self.min_observations = num(line, key, v)?,

            "planner.horizon" => self.planner.horizon = f(v)?,
            "planner.dt" => self.planner.dt = f(v)?,
            "planner.lambda_score" => self.planner.lambda_score = f(v)?,
            "planner.lambda_discount" => self.planner.lambda_discount = f(v)?,
            "planner.v_max" => self.planner.v_max = f(v)?,
            "planner.omega_max" => self.planner.omega_max = f(v)?,
            "planner.v_samples" => self.planner.v_samples = num(line, key, v)?,
            "planner.omega_samples" => self.planner.omega_samples = num(line, key, v)?,
            "planner.w_collision" => self.planner.w_collision = f(v)?,
            "planner.w_smoothness" => self.planner.w_smoothness = f(v)?,
            "planner.w_goal" => self.planner.w_goal = f(v)?,
            "planner.blocked_threshold" => self.planner.blocked_threshold = f(v)?,
            "planner.waypoint_range_min" => self.planner.waypoint_range_min = f(v)?,
            "planner.waypoint_range_max" => self.planner.waypoint_range_max = f(v)?,
            "planner.recovery_arrival" => self.planner.recovery_arrival = f(v)?,
            "planner.recovery_min_distance" => self.planner.recovery_min_distance = f(v)?,

            "dwa.v_max" => self.dwa.v_max = f(v)?,
            "dwa.omega_max" => self.dwa.omega_max = f(v)?,
            "dwa.v_samples" => self.dwa.v_samples = num(line, key, v)?,
            "dwa.omega_samples" => self.dwa.omega_samples = num(line, key, v)?,
            "dwa.horizon" => self.dwa.horizon = f(v)?,
            "dwa.dt" => self.dwa.dt = f(v)?,
            "dwa.w_heading" => self.dwa.w_heading = f(v)?,
            "dwa.w_distance" => self.dwa.w_distance = f(v)?,
            "dwa.w_clearance" => self.dwa.w_clearance = f(v)?,
            "dwa.w_speed" => self.dwa.w_speed = f(v)?,
            "dwa.clearance_cap" => self.dwa.clearance_cap = f(v)?,
            "dwa.rotate_gain" => self.dwa.rotate_gain = f(v)?,

            "mppi.samples" => self.mppi.samples = num(line, key, v)?,
            "mppi.steps" => self.mppi.steps = num(line, key, v)?,
            "mppi.dt" => self.mppi.dt = f(v)?,
            "mppi.noise_std_v" => self.mppi.noise_std.0 = f(v)?,
            "mppi.noise_std_omega" => self.mppi.noise_std.1 = f(v)?,
            "mppi.temperature" => self.mppi.temperature = f(v)?,
            "mppi.v_max" => self.mppi.v_max = f(v)?,
            "mppi.omega_max" => self.mppi.omega_max = f(v)?,
            "mppi.w_goal" => self.mppi.w_goal = f(v)?,
            "mppi.w_terminal" => self.mppi.w_terminal = f(v)?,
            "mppi.collision_cost" => self.mppi.collision_cost = f(v)?,

            "sensor.fov" => self.sensor.fov = f(v)?,
            "sensor.max_range" => self.sensor.max_range = f(v)?,
            "sensor.accuracy_at_zero" => self.sensor.accuracy_at_zero = f(v)?,
            "sensor.accuracy_at_max" => self.sensor.accuracy_at_max = f(v)?,
            "sensor.stream" => self.sensor.stream = num(line, key, v)?,

            "costmap.prior" => self.costmap.prior = f(v)?,
            "costmap.l_min" => self.costmap.l_min = f(v)?,
            "costmap.l_max" => self.costmap.l_max = f(v)?,
            "costmap.recovery_threshold" => self.costmap.recovery_threshold = f(v)?,
            "costmap.recovery_min_neighbors" => self.costmap.recovery_min_neighbors = num(line, key, v)?,
            "costmap.recovery_dedup_radius" => self.costmap.recovery_dedup_radius = f(v)?,

            other => return Err(perr(line, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config document on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(i + 1, "expected `key = value`"))?;
            cfg.set_at(i + 1, k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.planner.validate().map_err(|e| inv(e.to_string()))?;
        self.dwa.validate().map_err(|e| inv(e.to_string()))?;
        self.mppi.validate().map_err(|e| inv(e.to_string()))?;
        self.sensor.validate().map_err(|e| inv(e.to_string()))?;
        self.costmap.validate().map_err(|e| inv(e.to_string()))?;
        if !(self.footprint_radius > 0.0) {
            return Err(inv(format!("footprint_radius {}", self.footprint_radius)));
        }
        if self.tick_limit == 0 || self.stall_window == 0 || !(self.stall_distance >= 0.0) {
            return Err(inv("tick_limit and stall_window must be positive".into()));
        }
        if self.min_observations == 0 {
            return Err(inv("min_observations must be positive".into()));
        }
        Ok(())
    }

    /// Copy with the controller footprint forced to `footprint_radius`.
    pub fn harmonized(&self) -> RunConfig {
        let mut c = self.clone();
        c.dwa.footprint_radius = c.footprint_radius;
        c.mppi.footprint_radius = c.footprint_radius;
        c
    }
}

/// A benchmark suite: scenarios x controllers x seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteManifest {
    pub scenarios: Vec<PathBuf>,
    pub controllers: Vec<ControllerId>,
    pub seeds: Vec<u64>,
    pub config: Option<PathBuf>,
}

impl SuiteManifest {
    /// Parses a manifest; relative paths resolve against `base`.
    ///
    /// ```text
    /// scenario u_corridor.scn
    /// controller drnav-dwa
    /// seeds 1,2,3
    /// config base.cfg
    /// ```
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut m = SuiteManifest {
            scenarios: Vec::new(),
            controllers: Vec::new(),
            seeds: Vec::new(),
            config: None,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match key {
                "scenario" => m.scenarios.push(base.join(rest)),
                "controller" => m.controllers.push(rest.parse()?),
                "seeds" => m.seeds.extend(parse_seed_list(rest)?),
                "config" => m.config = Some(base.join(rest)),
                other => return Err(perr(i + 1, format!("unknown manifest key `{other}`"))),
            }
        }
        if m.scenarios.is_empty() || m.controllers.is_empty() || m.seeds.is_empty() {
            return Err(ConfigError::Invalid(
                "manifest needs at least one scenario, controller and seed".into(),
            ));
        }
        Ok(m)
    }
}
