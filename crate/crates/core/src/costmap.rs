//! Semantic costmap: per-cell dead-end log-odds with clipped recursive
//! updates, footprint pooling and the recovery-point registry.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

use crate::fusion::open_sigmoid;
use crate::sensor::ObservationBatch;
use crate::world::{CellIndex, GridMap, OccupancyClass, Point2, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostmapError {
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("cell ({x}, {y}) outside the costmap")]
    OutOfBounds { x: usize, y: usize },
    #[error("footprint disc at ({x}, {y}) misses the map")]
    DiscOutside { x: f64, y: f64 },
    #[error("invalid costmap parameters: {0}")]
    Params(String),
    #[error("costmap export: {0}")]
    Format(String),
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCell {
    pub log_odds: f64,
    pub last_update: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostmapParams {
    pub prior: f64,
    pub l_min: f64,
    pub l_max: f64,
    /// Posterior below which a visited cell may become a recovery point.
    pub recovery_threshold: f64,
    /// Passable 8-neighbours required for a recovery point.
    pub recovery_min_neighbors: usize,
    pub recovery_dedup_radius: f64,
}

impl Default for CostmapParams {
    fn default() -> Self {
        Self {
            prior: 0.5,
            l_min: -10.0,
            l_max: 10.0,
            recovery_threshold: 0.3,
            recovery_min_neighbors: 3,
            recovery_dedup_radius: 0.5,
        }
    }
}

impl CostmapParams {
    pub fn validate(&self) -> Result<(), CostmapError> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(CostmapError::Params(format!("prior {} outside (0, 1)", self.prior)));
        }
        if !(self.l_min.is_finite() && self.l_max.is_finite() && self.l_min < self.l_max) {
            return Err(CostmapError::Params(format!(
                "clip bounds [{}, {}] must be finite and ordered",
                self.l_min, self.l_max
            )));
        }
        let l0 = logit(self.prior);
        if l0 < self.l_min || l0 > self.l_max {
            return Err(CostmapError::Params("prior log-odds outside clip bounds".into()));
        }
        if !(self.recovery_dedup_radius >= 0.0) {
            return Err(CostmapError::Params("negative dedup radius".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub radius: f64,
}

impl Footprint {
    pub fn new(radius: f64) -> Result<Self, CostmapError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CostmapError::Params(format!("footprint radius {radius}")));
        }
        Ok(Self { radius })
    }

    /// A robot body must at least cover the cell it stands in.
    pub fn covers_cell(&self, resolution: f64) -> bool {
        self.radius >= resolution * std::f64::consts::FRAC_1_SQRT_2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryPoint {
    pub cell: CellIndex,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordStatus {
    Recorded,
    /// Older entries inside the dedup radius were dropped.
    Replaced(usize),
    Skipped(SkipReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    NotTraversable,
    HighRisk,
    Cramped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCostmap {
    width: usize,
    height: usize,
    resolution: f64,
    params: CostmapParams,
    prior_logodds: f64,
    cells: Vec<RiskCell>,
    recovery_points: Vec<RecoveryPoint>,
}

impl SemanticCostmap {
    pub fn new(map: &GridMap, params: CostmapParams) -> Result<Self, CostmapError> {
        params.validate()?;
        let l0 = logit(params.prior);
        Ok(Self {
            width: map.width(),
            height: map.height(),
            resolution: map.resolution(),
            params,
            prior_logodds: l0,
            cells: vec![
                RiskCell {
                    log_odds: l0,
                    last_update: 0,
                };
                map.len()
            ],
            recovery_points: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn params(&self) -> &CostmapParams {
        &self.params
    }

    pub fn prior_logodds(&self) -> f64 {
        self.prior_logodds
    }

    fn index(&self, c: CellIndex) -> Result<usize, CostmapError> {
        if c.x < self.width && c.y < self.height {
            Ok(c.y * self.width + c.x)
        } else {
            Err(CostmapError::OutOfBounds { x: c.x, y: c.y })
        }
    }

    pub fn cell(&self, c: CellIndex) -> Result<&RiskCell, CostmapError> {
        Ok(&self.cells[self.index(c)?])
    }

    pub fn log_odds(&self, c: CellIndex) -> Result<f64, CostmapError> {
        Ok(self.cell(c)?.log_odds)
    }

    /// Overwrites a cell's state, clipped; used to seed fixtures.
    pub fn set_log_odds(&mut self, c: CellIndex, l: f64) -> Result<(), CostmapError> {
        let i = self.index(c)?;
        self.cells[i].log_odds = l.clamp(self.params.l_min, self.params.l_max);
        Ok(())
    }

    /// `l <- clip(l + logit(p_hat) - l0, l_min, l_max)`; returns the new value.
    pub fn update_cell(&mut self, c: CellIndex, p_hat: f64, tick: u64) -> Result<f64, CostmapError> {
        if !(p_hat > 0.0 && p_hat < 1.0) {
            return Err(CostmapError::Probability(p_hat));
        }
        let i = self.index(c)?;
        let (l_min, l_max, l0) = (self.params.l_min, self.params.l_max, self.prior_logodds);
        let cell = &mut self.cells[i];
        cell.log_odds = (cell.log_odds + logit(p_hat) - l0).clamp(l_min, l_max);
        cell.last_update = tick;
        Ok(cell.log_odds)
    }

    pub fn apply(&mut self, batch: &ObservationBatch) -> Result<(), CostmapError> {
        for &(c, p) in &batch.readings {
            self.update_cell(c, p, batch.tick)?;
        }
        Ok(())
    }

    pub fn posterior(&self, c: CellIndex) -> Result<f64, CostmapError> {
        Ok(open_sigmoid(self.log_odds(c)?))
    }

    fn posterior_linear(&self, i: usize) -> f64 {
        open_sigmoid(self.cells[i].log_odds)
    }

    pub fn posteriors(&self) -> Vec<f64> {
        (0..self.cells.len()).map(|i| self.posterior_linear(i)).collect()
    }

    fn contains_point(&self, p: Point2) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x < self.width as f64 * self.resolution
            && p.y < self.height as f64 * self.resolution
    }

    /// Maximum posterior over cells whose centers lie inside the footprint
    /// disc; a disc too small to hold any center reads its containing cell.
    pub fn footprint_prob(&self, p: Point2, fp: &Footprint) -> Result<f64, CostmapError> {
        let res = self.resolution;
        let r = fp.radius;
        let x0 = ((p.x - r) / res - 0.5).ceil().max(0.0);
        let x1 = ((p.x + r) / res - 0.5).floor().min(self.width as f64 - 1.0);
        let y0 = ((p.y - r) / res - 0.5).ceil().max(0.0);
        let y1 = ((p.y + r) / res - 0.5).floor().min(self.height as f64 - 1.0);
        let mut best: Option<f64> = None;
        if x0 <= x1 && y0 <= y1 {
            let r2 = r * r;
            for y in y0 as usize..=y1 as usize {
                let cy = (y as f64 + 0.5) * res;
                for x in x0 as usize..=x1 as usize {
                    let cx = (x as f64 + 0.5) * res;
                    if (cx - p.x).powi(2) + (cy - p.y).powi(2) <= r2 {
                        let v = self.posterior_linear(y * self.width + x);
                        best = Some(best.map_or(v, |b: f64| b.max(v)));
                    }
                }
            }
        }
        match best {
            Some(v) => Ok(v),
            None if self.contains_point(p) => {
                let c = CellIndex::new((p.x / res) as usize, (p.y / res) as usize);
                self.posterior(c)
            }
            None => Err(CostmapError::DiscOutside { x: p.x, y: p.y }),
        }
    }

    pub fn recovery_points(&self) -> &[RecoveryPoint] {
        &self.recovery_points
    }

    fn cell_distance(&self, a: CellIndex, b: CellIndex) -> f64 {
        let dx = a.x as f64 - b.x as f64;
        let dy = a.y as f64 - b.y as f64;
        dx.hypot(dy) * self.resolution
    }

    /// Registers `c` as a recovery point when it is passable, low-risk and
    /// open enough; entries within the dedup radius give way to it.
    pub fn record_recovery_point(
        &mut self,
        map: &GridMap,
        c: CellIndex,
        tick: u64,
    ) -> Result<RecordStatus, CostmapError> {
        let i = self.index(c)?;
        if map.class(c) != Some(OccupancyClass::Traversable) {
            return Ok(RecordStatus::Skipped(SkipReason::NotTraversable));
        }
        if self.posterior_linear(i) >= self.params.recovery_threshold {
            return Ok(RecordStatus::Skipped(SkipReason::HighRisk));
        }
        let open = map
            .neighbors8(c)
            .filter(|&n| map.class(n) == Some(OccupancyClass::Traversable))
            .count();
        if open < self.params.recovery_min_neighbors {
            return Ok(RecordStatus::Skipped(SkipReason::Cramped));
        }
        let radius = self.params.recovery_dedup_radius;
        let before = self.recovery_points.len();
        let points = std::mem::take(&mut self.recovery_points);
        self.recovery_points = points
            .into_iter()
            .filter(|rp| self.cell_distance(rp.cell, c) > radius)
            .collect();
        let dropped = before - self.recovery_points.len();
        self.recovery_points.push(RecoveryPoint { cell: c, tick });
        Ok(if dropped > 0 {
            RecordStatus::Replaced(dropped)
        } else {
            RecordStatus::Recorded
        })
    }

    /// Cells reachable from `from` over passable cells whose posterior is
    /// below `blocked`. The search may leave the high-risk region the robot
    /// currently stands in, but never re-enters high-risk cells afterwards.
    pub fn low_risk_reach(&self, map: &GridMap, from: CellIndex, blocked: f64) -> Vec<bool> {
        let n = map.len();
        // state 0: still escaping the starting high-risk blob; 1: in low-risk space
        let mut seen = [vec![false; n], vec![false; n]];
        let mut reach = vec![false; n];
        if !map.is_passable(from) {
            return reach;
        }
        let start_low = self.posterior_linear(map.linear(from)) < blocked;
        let s0 = usize::from(start_low);
        let mut queue = VecDeque::from([(from, s0)]);
        seen[s0][map.linear(from)] = true;
        while let Some((c, state)) = queue.pop_front() {
            let ci = map.linear(c);
            if state == 1 {
                reach[ci] = true;
            }
            for nb in map.neighbors8(c) {
                if !map.is_passable(nb) {
                    continue;
                }
                // no diagonal corner cutting
                if nb.x != c.x && nb.y != c.y {
                    let a = CellIndex::new(nb.x, c.y);
                    let b = CellIndex::new(c.x, nb.y);
                    if !map.is_passable(a) || !map.is_passable(b) {
                        continue;
                    }
                }
                let ni = map.linear(nb);
                let low = self.posterior_linear(ni) < blocked;
                let next = match (state, low) {
                    (_, true) => 1,
                    (0, false) => 0,
                    (_, false) => continue,
                };
                if !seen[next][ni] {
                    seen[next][ni] = true;
                    queue.push_back((nb, next));
                }
            }
        }
        reach
    }

    /// Most recent registry entry that is itself below `blocked` and reachable
    /// through low-risk cells, at least `min_distance` away from the robot.
    pub fn best_recovery_point(
        &self,
        robot: &Pose,
        map: &GridMap,
        blocked: f64,
        min_distance: f64,
    ) -> Option<CellIndex> {
        if self.recovery_points.is_empty() {
            return None;
        }
        let from = map.world_to_cell(robot.position()).ok()?;
        let reach = self.low_risk_reach(map, from, blocked);
        self.recovery_points
            .iter()
            .rev()
            .filter(|rp| map.cell_center(rp.cell).distance(&robot.position()) >= min_distance)
            .find(|rp| {
                let i = map.linear(rp.cell);
                reach[i] && self.posterior_linear(i) < blocked
            })
            .map(|rp| rp.cell)
    }

    /// Plain graymap of posteriors scaled to 0..=255, top row first.
    pub fn to_pgm(&self) -> String {
        let mut s = String::with_capacity(self.cells.len() * 4 + 64);
        let _ = writeln!(s, "P2");
        let _ = writeln!(s, "# resolution {}", self.resolution);
        let _ = writeln!(s, "{} {}", self.width, self.height);
        let _ = writeln!(s, "255");
        for y in (0..self.height).rev() {
            let row: Vec<String> = (0..self.width)
                .map(|x| {
                    let p = self.posterior_linear(y * self.width + x);
                    format!("{}", (p * 255.0).round() as u8)
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Sidecar listing recovery points as `x y tick` in world coordinates.
    pub fn recovery_sidecar(&self) -> String {
        let mut s = String::new();
        for rp in &self.recovery_points {
            let cx = (rp.cell.x as f64 + 0.5) * self.resolution;
            let cy = (rp.cell.y as f64 + 0.5) * self.resolution;
            let _ = writeln!(s, "{cx:.3} {cy:.3} {}", rp.tick);
        }
        s
    }
}

/// A posterior image read back from a graymap export.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorImage {
    pub width: usize,
    pub height: usize,
    pub resolution: Option<f64>,
    /// Row-major, bottom row first (map orientation).
    pub values: Vec<u8>,
}

impl PosteriorImage {
    pub fn parse_pgm(text: &str) -> Result<Self, CostmapError> {
        let mut resolution = None;
        let mut tokens = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                let mut parts = comment.split_whitespace();
                if parts.next() == Some("resolution") {
                    resolution = parts.next().and_then(|v| v.parse().ok());
                }
                continue;
            }
            tokens.extend(line.split_whitespace());
        }
        let mut it = tokens.into_iter();
        if it.next() != Some("P2") {
            return Err(CostmapError::Format("not a plain graymap".into()));
        }
        let mut num = |what: &str| -> Result<usize, CostmapError> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| CostmapError::Format(format!("missing {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(CostmapError::Format(format!("unsupported maxval {maxval}")));
        }
        let mut rows = vec![0u8; width * height];
        for r in 0..height {
            let y = height - 1 - r;
            for x in 0..width {
                let v = num("pixel")?;
                if v > maxval {
                    return Err(CostmapError::Format(format!("pixel {v} exceeds maxval")));
                }
                rows[y * width + x] = (v * 255 / maxval) as u8;
            }
        }
        Ok(Self {
            width,
            height,
            resolution,
            values: rows,
        })
    }
}

pub fn parse_recovery_sidecar(text: &str) -> Result<Vec<(Point2, u64)>, CostmapError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            match parts.as_slice() {
                [x, y, t] => Ok((
                    Point2::new(
                        x.parse().map_err(|_| CostmapError::Format(l.to_string()))?,
                        y.parse().map_err(|_| CostmapError::Format(l.to_string()))?,
                    ),
                    t.parse().map_err(|_| CostmapError::Format(l.to_string()))?,
                )),
                _ => Err(CostmapError::Format(format!("bad recovery line `{l}`"))),
            }
        })
        .collect()
}
