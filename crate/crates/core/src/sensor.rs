//! Synthetic dead-end estimator.
//!
//! Stands in for the perception stack: every visible cell gets a soft reading
//! whose band depends on the ground truth and a range-dependent accuracy.

use std::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

use crate::fusion::{self, FusionError, FusionWeights, HeadWeights, Token};
use crate::world::{normalize_angle, CellIndex, DeadEndSet, GridMap, OccupancyClass, Point2, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("invalid sensor parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    /// Full field-of-view angle, radians.
    pub fov: f64,
    pub max_range: f64,
    pub accuracy_at_zero: f64,
    pub accuracy_at_max: f64,
    /// Stream id mixed into the run seed.
    pub stream: u64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            fov: 2.0 * PI / 3.0,
            max_range: 5.0,
            accuracy_at_zero: 0.9,
            accuracy_at_max: 0.6,
            stream: 1,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(SensorError::Params(format!("max_range {}", self.max_range)));
        }
        if !(self.fov > 0.0 && self.fov <= 2.0 * PI) {
            return Err(SensorError::Params(format!("fov {}", self.fov)));
        }
        let (a0, a1) = (self.accuracy_at_zero, self.accuracy_at_max);
        if !(0.5 < a1 && a1 <= a0 && a0 < 1.0) {
            return Err(SensorError::Params(format!(
                "need 0.5 < accuracy_at_max ({a1}) <= accuracy_at_zero ({a0}) < 1"
            )));
        }
        Ok(())
    }

    /// Accuracy at range `r`, linear between the two endpoints.
    pub fn accuracy(&self, r: f64) -> f64 {
        let t = (r / self.max_range).clamp(0.0, 1.0);
        self.accuracy_at_zero + (self.accuracy_at_max - self.accuracy_at_zero) * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub tick: u64,
    pub readings: Vec<(CellIndex, f64)>,
}

pub const DEAD_BAND: (f64, f64) = (0.6, 0.95);
pub const OPEN_BAND: (f64, f64) = (0.05, 0.4);
pub const UNCERTAIN_BAND: (f64, f64) = (0.3, 0.7);

/// Supercover traversal: true iff the segment touches an occupied cell.
/// Where the segment passes exactly through a cell corner both side cells
/// count as touched.
pub fn occluded(map: &GridMap, from: Point2, to: Point2) -> bool {
    if from == to {
        return false;
    }
    let res = map.resolution();
    let blocked = |x: i64, y: i64| map.class_at(x as isize, y as isize) == OccupancyClass::Occupied;

    let (fx, fy) = (from.x / res, from.y / res);
    let (tx, ty) = (to.x / res, to.y / res);
    let mut x = fx.floor() as i64;
    let mut y = fy.floor() as i64;
    let end_x = tx.floor() as i64;
    let end_y = ty.floor() as i64;
    if blocked(x, y) {
        return true;
    }
    let dx = tx - fx;
    let dy = ty - fy;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        (x as f64 + 1.0 - fx) * t_delta_x
    } else if dx < 0.0 {
        (fx - x as f64) * t_delta_x
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        (y as f64 + 1.0 - fy) * t_delta_y
    } else if dy < 0.0 {
        (fy - y as f64) * t_delta_y
    } else {
        f64::INFINITY
    };

    const TIE: f64 = 1e-12;
    let max_steps = (end_x - x).unsigned_abs() + (end_y - y).unsigned_abs() + 2;
    for _ in 0..max_steps {
        if x == end_x && y == end_y {
            break;
        }
        if t_max_x.min(t_max_y) > 1.0 {
            break;
        }
        if (t_max_x - t_max_y).abs() < TIE {
            if blocked(x + step_x, y) || blocked(x, y + step_y) {
                return true;
            }
            x += step_x;
            y += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        } else if t_max_x < t_max_y {
            x += step_x;
            t_max_x += t_delta_x;
        } else {
            y += step_y;
            t_max_y += t_delta_y;
        }
        if blocked(x, y) {
            return true;
        }
    }
    blocked(end_x, end_y)
}

/// Cells inside range, inside the field of view and in line of sight.
pub fn visible_cells(map: &GridMap, robot: &Pose, params: &SensorParams) -> Vec<(CellIndex, f64)> {
    let res = map.resolution();
    let origin = robot.position();
    let half_fov = params.fov / 2.0;
    let r = params.max_range;
    let x0 = ((robot.x - r) / res).floor().max(0.0) as usize;
    let y0 = ((robot.y - r) / res).floor().max(0.0) as usize;
    let x1 = (((robot.x + r) / res).floor() as usize).min(map.width().saturating_sub(1));
    let y1 = (((robot.y + r) / res).floor() as usize).min(map.height().saturating_sub(1));
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let c = CellIndex::new(x, y);
            if map.class(c) == Some(OccupancyClass::Occupied) {
                continue;
            }
            let centre = map.cell_center(c);
            let range = origin.distance(&centre);
            if range > r {
                continue;
            }
            if range > 1e-9 {
                let bearing = (centre.y - origin.y).atan2(centre.x - origin.x);
                if normalize_angle(bearing - robot.heading).abs() > half_fov {
                    continue;
                }
            }
            if occluded(map, origin, centre) {
                continue;
            }
            out.push((c, range));
        }
    }
    out
}

fn draw<R: Rng + ?Sized>(rng: &mut R, band: (f64, f64)) -> f64 {
    rng.random_range(band.0..band.1)
}

/// Banded reading for one cell.
pub fn reading<R: Rng + ?Sized>(
    rng: &mut R,
    class: OccupancyClass,
    is_dead: bool,
    accuracy: f64,
) -> f64 {
    let correct = rng.random::<f64>() < accuracy;
    if class == OccupancyClass::Uncertain {
        return draw(rng, UNCERTAIN_BAND);
    }
    let dead_band = correct == is_dead;
    draw(rng, if dead_band { DEAD_BAND } else { OPEN_BAND })
}

pub fn sense<R: Rng + ?Sized>(
    map: &GridMap,
    truth: &DeadEndSet,
    robot: &Pose,
    params: &SensorParams,
    tick: u64,
    rng: &mut R,
) -> ObservationBatch {
    let readings = visible_cells(map, robot, params)
        .into_iter()
        .map(|(c, range)| {
            let class = map.class(c).expect("visible cells are in bounds");
            let p = reading(rng, class, truth.contains(c), params.accuracy(range));
            (c, p)
        })
        .collect();
    ObservationBatch { tick, readings }
}

/// Produces per-cell instantaneous dead-end probabilities.
pub trait DeadEndEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(
        &self,
        map: &GridMap,
        truth: &DeadEndSet,
        robot: &Pose,
        params: &SensorParams,
        tick: u64,
        rng: &mut dyn rand::RngCore,
    ) -> Result<ObservationBatch, SensorError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticEstimator;

impl DeadEndEstimator for SyntheticEstimator {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn estimate(
        &self,
        map: &GridMap,
        truth: &DeadEndSet,
        robot: &Pose,
        params: &SensorParams,
        tick: u64,
        rng: &mut dyn rand::RngCore,
    ) -> Result<ObservationBatch, SensorError> {
        Ok(sense(map, truth, robot, params, tick, rng))
    }
}

/// Estimator that runs the untrained fusion stack on tokens synthesized from
/// the local map around each visible cell. Outputs are not calibrated.
#[derive(Debug, Clone)]
pub struct FusionEstimator {
    pub weights: FusionWeights,
    pub head: HeadWeights,
    /// Fixed random feature embedding, `dim x FEATURES`.
    embed: nalgebra::DMatrix<f64>,
}

const FEATURES: usize = 8;
const PATCH_RADIUS: isize = 3;

impl FusionEstimator {
    pub fn seeded(dim: usize, seed: u64) -> Result<Self, SensorError> {
        use rand::SeedableRng;
        let weights = FusionWeights::seeded(dim, 1, seed)?;
        let head = HeadWeights::seeded(dim, seed ^ 0x5eed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let embed = nalgebra::DMatrix::from_fn(dim, FEATURES, |_, _| rng.random_range(-1.0..1.0));
        Ok(Self {
            weights,
            head,
            embed,
        })
    }

    fn token(&self, features: [f64; FEATURES]) -> Token {
        let v = &self.embed * nalgebra::DVector::from_row_slice(&features);
        Token { values: v }
    }

    /// Occupancy statistics of one quadrant of the patch around `c`.
    fn quadrant(map: &GridMap, c: CellIndex, qx: isize, qy: isize, range: f64, bearing: f64) -> [f64; FEATURES] {
        let mut occ = 0.0;
        let mut unc = 0.0;
        let mut n = 0.0;
        for dy in 0..=PATCH_RADIUS {
            for dx in 0..=PATCH_RADIUS {
                let class = map.class_at(c.x as isize + qx * dx, c.y as isize + qy * dy);
                n += 1.0;
                match class {
                    OccupancyClass::Occupied => occ += 1.0,
                    OccupancyClass::Uncertain => unc += 1.0,
                    OccupancyClass::Traversable => {}
                }
            }
        }
        [
            occ / n,
            unc / n,
            range,
            bearing.cos(),
            bearing.sin(),
            qx as f64,
            qy as f64,
            1.0,
        ]
    }

    pub fn estimate_cell(
        &self,
        map: &GridMap,
        robot: &Pose,
        c: CellIndex,
        range: f64,
    ) -> Result<f64, SensorError> {
        let centre = map.cell_center(c);
        let bearing = normalize_angle((centre.y - robot.y).atan2(centre.x - robot.x) - robot.heading);
        let quads = [(1, 1), (-1, 1), (-1, -1), (1, -1)];
        let patches: Vec<Token> = quads
            .iter()
            .map(|&(qx, qy)| self.token(Self::quadrant(map, c, qx, qy, range, bearing)))
            .collect();
        let mut global = Token::zeros(self.weights.dim);
        for p in &patches {
            global.values += &p.values;
        }
        global.values /= patches.len() as f64;
        let (z_img, _) = fusion::image_token(&patches, &global, &self.weights)?;

        // ray samples stand in for lidar returns
        let samples = 4;
        let points: Vec<Token> = (1..=samples)
            .map(|k| {
                let t = k as f64 / samples as f64;
                let px = robot.x + (centre.x - robot.x) * t;
                let py = robot.y + (centre.y - robot.y) * t;
                let clear = map.clearance(Point2::new(px, py), 1.0);
                self.token([clear, t, range * t, bearing.cos(), bearing.sin(), 0.0, 0.0, 1.0])
            })
            .collect();
        let mut context = Token::zeros(self.weights.dim);
        for p in &points {
            context.values += &p.values;
        }
        context.values /= points.len() as f64;
        let (z_lidar, _) = fusion::lidar_token(&points, &context, &self.weights)?;
        let fused = fusion::cross_fuse(&z_img, &z_lidar, &self.weights)?;
        Ok(fusion::deadend_head(&fused, &self.head)?)
    }
}

impl DeadEndEstimator for FusionEstimator {
    fn name(&self) -> &str {
        "fusion"
    }

    fn estimate(
        &self,
        map: &GridMap,
        _truth: &DeadEndSet,
        robot: &Pose,
        params: &SensorParams,
        tick: u64,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<ObservationBatch, SensorError> {
        let readings = visible_cells(map, robot, params)
            .into_iter()
            .map(|(c, range)| Ok((c, self.estimate_cell(map, robot, c, range)?)))
            .collect::<Result<_, SensorError>>()?;
        Ok(ObservationBatch { tick, readings })
    }
}
