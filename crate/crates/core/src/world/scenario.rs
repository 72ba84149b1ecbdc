//! Scenario documents.
//!
//! ```text
//! resolution 0.1
//! start 0.15 0.15 0
//! goal 0.25 0.25
//! tolerance 0.75
//! seed 7
//! ...
//! .D.
//! ...
//! ```
//!
//! Header lines come first; the raster follows with the top row first.
//! `.` traversable, `#` occupied, `?` uncertain, `D` traversable with an
//! authored dead-end label, `d` uncertain with an authored dead-end label.

use thiserror::Error;

use super::labels::{ground_truth_deadend, DeadEndSet};
use super::map::{CellIndex, GridError, GridMap, OccupancyClass, Point2, Pose};
use crate::sensor::SensorParams;

pub const DEFAULT_RESOLUTION: f64 = 0.1;
pub const DEFAULT_GOAL_TOLERANCE: f64 = 0.75;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub map: GridMap,
    pub start: Pose,
    pub goal: Point2,
    pub goal_tolerance: f64,
    pub deadend_regions: DeadEndSet,
    pub rng_seed: u64,
    pub sensor_params: SensorParams,
}

impl Scenario {
    pub fn straight_line(&self) -> f64 {
        self.start.position().distance(&self.goal)
    }
}

fn floats<const N: usize>(line: usize, key: &str, rest: &[&str]) -> Result<[f64; N], ScenarioError> {
    if rest.len() != N {
        return Err(parse_err(line, format!("`{key}` expects {N} value(s)")));
    }
    let mut out = [0.0; N];
    for (slot, tok) in out.iter_mut().zip(rest) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(line, format!("`{key}`: bad number `{tok}`")))?;
    }
    Ok(out)
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    load_named_scenario("scenario", text)
}

pub fn load_named_scenario(name: &str, text: &str) -> Result<Scenario, ScenarioError> {
    let mut resolution = DEFAULT_RESOLUTION;
    let mut start = None;
    let mut goal = None;
    let mut tolerance = DEFAULT_GOAL_TOLERANCE;
    let mut seed = 0u64;
    let mut rows: Vec<(usize, &str)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let is_raster = line.chars().all(|c| matches!(c, '.' | '#' | '?' | 'D' | 'd'));
        if is_raster {
            rows.push((lineno, line));
            continue;
        }
        if !rows.is_empty() {
            return Err(parse_err(lineno, "header line after raster"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let (key, rest) = toks.split_first().expect("non-empty line");
        match *key {
            "resolution" => resolution = floats::<1>(lineno, key, rest)?[0],
            "start" => start = Some(floats::<3>(lineno, key, rest)?),
            "goal" => goal = Some(floats::<2>(lineno, key, rest)?),
            "tolerance" => tolerance = floats::<1>(lineno, key, rest)?[0],
            "seed" => {
                let [tok] = rest else {
                    return Err(parse_err(lineno, "`seed` expects 1 value"));
                };
                seed = tok
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("`seed`: bad integer `{tok}`")))?;
            }
            other => return Err(parse_err(lineno, format!("unknown key `{other}`"))),
        }
    }

    let start = start.ok_or_else(|| parse_err(0, "missing `start`"))?;
    let goal = goal.ok_or_else(|| parse_err(0, "missing `goal`"))?;
    if rows.is_empty() {
        return Err(parse_err(0, "missing raster"));
    }
    let width = rows[0].1.len();
    let height = rows.len();
    let mut cells = vec![OccupancyClass::Traversable; width * height];
    let mut authored = Vec::new();
    for (r, (lineno, row)) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(parse_err(
                *lineno,
                format!("raster row has {} columns, expected {width}", row.len()),
            ));
        }
        let y = height - 1 - r;
        for (x, ch) in row.chars().enumerate() {
            cells[y * width + x] = match ch {
                '#' => OccupancyClass::Occupied,
                '?' => OccupancyClass::Uncertain,
                'D' => {
                    authored.push(CellIndex::new(x, y));
                    OccupancyClass::Traversable
                }
                'd' => {
                    authored.push(CellIndex::new(x, y));
                    OccupancyClass::Uncertain
                }
                _ => OccupancyClass::Traversable,
            };
        }
    }

    if !(resolution > 0.0) {
        return Err(ScenarioError::Validation(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    if !(tolerance > 0.0) {
        return Err(ScenarioError::Validation(format!(
            "goal tolerance must be positive, got {tolerance}"
        )));
    }
    let map = GridMap::new(resolution, width, height, cells)?;
    let start = Pose::new(start[0], start[1], start[2]);
    let goal = Point2::new(goal[0], goal[1]);
    for (what, p) in [("start", start.position()), ("goal", goal)] {
        let c = map
            .world_to_cell(p)
            .map_err(|_| ScenarioError::Validation(format!("{what} lies outside the map")))?;
        if !map.is_passable(c) {
            return Err(ScenarioError::Validation(format!(
                "{what} lies on an occupied cell ({}, {})",
                c.x, c.y
            )));
        }
    }

    let oracle = ground_truth_deadend(&map, goal)?;
    let deadend_regions = if authored.is_empty() {
        oracle
    } else {
        let mut set = DeadEndSet::for_map(&map);
        for c in &authored {
            set.insert(*c);
        }
        if set != oracle {
            log::warn!(
                "{name}: authored dead-end labels ({} cells) disagree with the connectivity oracle ({} cells); using authored labels",
                set.len(),
                oracle.len()
            );
        }
        set
    };

    Ok(Scenario {
        name: name.to_string(),
        map,
        start,
        goal,
        goal_tolerance: tolerance,
        deadend_regions,
        rng_seed: seed,
        sensor_params: SensorParams::default(),
    })
}
