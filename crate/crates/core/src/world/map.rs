use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error("cell buffer has {actual} entries, expected {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("point ({x}, {y}) lies outside the map")]
    OutOfBounds { x: f64, y: f64 },
    #[error("cell ({x}, {y}) lies outside the map")]
    CellOutOfBounds { x: usize, y: usize },
}

/// A point in the map frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub x: usize,
    pub y: usize,
}

impl CellIndex {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OccupancyClass {
    Traversable,
    Occupied,
    Uncertain,
}

impl OccupancyClass {
    /// Uncertain space counts as passable; only walls block.
    pub fn is_passable(self) -> bool {
        !matches!(self, OccupancyClass::Occupied)
    }
}

/// Dense local map. Cell `(x, y)` covers `[x*res, (x+1)*res) x [y*res, (y+1)*res)`.
#[derive(Debug, Clone)]
pub struct GridMap {
    resolution: f64,
    width: usize,
    height: usize,
    cells: Vec<OccupancyClass>,
    // Chebyshev ring (in cells) of the nearest occupied cell, the map
    // border counting as occupied; built lazily, dropped on `set`
    rings: OnceLock<Vec<u32>>,
}

impl PartialEq for GridMap {
    fn eq(&self, other: &Self) -> bool {
        self.resolution == other.resolution
            && self.width == other.width
            && self.height == other.height
            && self.cells == other.cells
    }
}

const OFFSETS_4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const OFFSETS_8: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

impl GridMap {
    pub fn new(
        resolution: f64,
        width: usize,
        height: usize,
        cells: Vec<OccupancyClass>,
    ) -> Result<Self, GridError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::BadResolution(resolution));
        }
        if cells.len() != width * height {
            return Err(GridError::SizeMismatch {
                width,
                height,
                actual: cells.len(),
            });
        }
        Ok(Self {
            resolution,
            width,
            height,
            cells,
            rings: OnceLock::new(),
        })
    }

    pub fn filled(
        resolution: f64,
        width: usize,
        height: usize,
        class: OccupancyClass,
    ) -> Result<Self, GridError> {
        Self::new(resolution, width, height, vec![class; width * height])
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn width_m(&self) -> f64 {
        self.width as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.height as f64 * self.resolution
    }

    pub fn in_bounds(&self, c: CellIndex) -> bool {
        c.x < self.width && c.y < self.height
    }

    /// Row-major linear index.
    pub fn linear(&self, c: CellIndex) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell_of_linear(&self, i: usize) -> CellIndex {
        CellIndex::new(i % self.width, i / self.width)
    }

    pub fn class(&self, c: CellIndex) -> Option<OccupancyClass> {
        self.in_bounds(c).then(|| self.cells[self.linear(c)])
    }

    /// Class lookup by signed coordinates; anything off the map reads as `Occupied`.
    pub fn class_at(&self, x: isize, y: isize) -> OccupancyClass {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            OccupancyClass::Occupied
        } else {
            self.cells[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, c: CellIndex, class: OccupancyClass) -> Result<(), GridError> {
        if !self.in_bounds(c) {
            return Err(GridError::CellOutOfBounds { x: c.x, y: c.y });
        }
        let i = self.linear(c);
        self.cells[i] = class;
        self.rings = OnceLock::new();
        Ok(())
    }

    pub fn is_passable(&self, c: CellIndex) -> bool {
        self.class(c).is_some_and(OccupancyClass::is_passable)
    }

    pub fn cells(&self) -> &[OccupancyClass] {
        &self.cells
    }

    pub fn contains_point(&self, p: Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width_m() && p.y < self.height_m()
    }

    pub fn world_to_cell(&self, p: Point2) -> Result<CellIndex, GridError> {
        if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 {
            return Err(GridError::OutOfBounds { x: p.x, y: p.y });
        }
        let cx = (p.x / self.resolution).floor() as usize;
        let cy = (p.y / self.resolution).floor() as usize;
        if cx >= self.width || cy >= self.height {
            return Err(GridError::OutOfBounds { x: p.x, y: p.y });
        }
        Ok(CellIndex::new(cx, cy))
    }

    pub fn cell_center(&self, c: CellIndex) -> Point2 {
        Point2::new(
            (c.x as f64 + 0.5) * self.resolution,
            (c.y as f64 + 0.5) * self.resolution,
        )
    }

    fn offsets<'a>(
        &'a self,
        c: CellIndex,
        offsets: &'a [(isize, isize)],
    ) -> impl Iterator<Item = CellIndex> + 'a {
        offsets.iter().filter_map(move |&(dx, dy)| {
            let x = c.x as isize + dx;
            let y = c.y as isize + dy;
            (x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height)
                .then(|| CellIndex::new(x as usize, y as usize))
        })
    }

    pub fn neighbors4(&self, c: CellIndex) -> impl Iterator<Item = CellIndex> + '_ {
        self.offsets(c, &OFFSETS_4)
    }

    pub fn neighbors8(&self, c: CellIndex) -> impl Iterator<Item = CellIndex> + '_ {
        self.offsets(c, &OFFSETS_8)
    }

    fn rings(&self) -> &[u32] {
        self.rings.get_or_init(|| {
            let (w, h) = (self.width, self.height);
            let mut d: Vec<u32> = (0..w * h)
                .map(|i| {
                    if self.cells[i] == OccupancyClass::Occupied {
                        0
                    } else {
                        let (x, y) = (i % w, i / w);
                        (x + 1).min(y + 1).min(w - x).min(h - y) as u32
                    }
                })
                .collect();
            // two-pass chamfer; unit weights give the exact Chebyshev distance
            for y in 0..h {
                for x in 0..w {
                    let mut v = d[y * w + x];
                    if x > 0 {
                        v = v.min(d[y * w + x - 1] + 1);
                    }
                    if y > 0 {
                        v = v.min(d[(y - 1) * w + x] + 1);
                        if x > 0 {
                            v = v.min(d[(y - 1) * w + x - 1] + 1);
                        }
                        if x + 1 < w {
                            v = v.min(d[(y - 1) * w + x + 1] + 1);
                        }
                    }
                    d[y * w + x] = v;
                }
            }
            for y in (0..h).rev() {
                for x in (0..w).rev() {
                    let mut v = d[y * w + x];
                    if x + 1 < w {
                        v = v.min(d[y * w + x + 1] + 1);
                    }
                    if y + 1 < h {
                        v = v.min(d[(y + 1) * w + x] + 1);
                        if x + 1 < w {
                            v = v.min(d[(y + 1) * w + x + 1] + 1);
                        }
                        if x > 0 {
                            v = v.min(d[(y + 1) * w + x - 1] + 1);
                        }
                    }
                    d[y * w + x] = v;
                }
            }
            d
        })
    }

    /// Lower bound on the distance from `p` to any occupied cell, or `None`
    /// when `p` is off the map.
    fn free_bound(&self, p: Point2) -> Option<f64> {
        let c = self.world_to_cell(p).ok()?;
        let k = self.rings()[self.linear(c)];
        Some(k.saturating_sub(1) as f64 * self.resolution)
    }

    /// True when a disc of `radius` centered at `p` touches an occupied cell
    /// or leaves the map.
    pub fn disc_collides(&self, p: Point2, radius: f64) -> bool {
        if self.free_bound(p).is_some_and(|b| b >= radius) {
            return false;
        }
        let res = self.resolution;
        let x0 = ((p.x - radius) / res).floor() as isize;
        let x1 = ((p.x + radius) / res).floor() as isize;
        let y0 = ((p.y - radius) / res).floor() as isize;
        let y1 = ((p.y + radius) / res).floor() as isize;
        let r2 = radius * radius;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.class_at(x, y) != OccupancyClass::Occupied {
                    continue;
                }
                // closest point of the cell square to the disc center
                let qx = p.x.clamp(x as f64 * res, (x + 1) as f64 * res);
                let qy = p.y.clamp(y as f64 * res, (y + 1) as f64 * res);
                if (qx - p.x).powi(2) + (qy - p.y).powi(2) < r2 {
                    return true;
                }
            }
        }
        false
    }

    /// Distance from `p` to the nearest occupied cell, searched up to `cap`.
    pub fn clearance(&self, p: Point2, cap: f64) -> f64 {
        if self.free_bound(p).is_some_and(|b| b >= cap) {
            return cap;
        }
        let res = self.resolution;
        let x0 = ((p.x - cap) / res).floor() as isize;
        let x1 = ((p.x + cap) / res).floor() as isize;
        let y0 = ((p.y - cap) / res).floor() as isize;
        let y1 = ((p.y + cap) / res).floor() as isize;
        let mut best = cap;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.class_at(x, y) != OccupancyClass::Occupied {
                    continue;
                }
                let qx = p.x.clamp(x as f64 * res, (x + 1) as f64 * res);
                let qy = p.y.clamp(y as f64 * res, (y + 1) as f64 * res);
                best = best.min((qx - p.x).hypot(qy - p.y));
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open(w: usize, h: usize) -> GridMap {
        GridMap::filled(0.1, w, h, OccupancyClass::Traversable).unwrap()
    }

    #[test]
    fn world_to_cell_examples() {
        let m = open(10, 10);
        assert_eq!(
            m.world_to_cell(Point2::new(0.05, 0.05)).unwrap(),
            CellIndex::new(0, 0)
        );
        assert_eq!(
            m.world_to_cell(Point2::new(0.25, 0.10)).unwrap(),
            CellIndex::new(2, 1)
        );
        assert!(matches!(
            m.world_to_cell(Point2::new(-0.01, 0.0)),
            Err(GridError::OutOfBounds { .. })
        ));
        assert!(m.world_to_cell(Point2::new(1.0, 0.5)).is_err());
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(
            GridMap::new(0.0, 1, 1, vec![OccupancyClass::Traversable]),
            Err(GridError::BadResolution(_))
        ));
        assert!(matches!(
            GridMap::new(0.1, 2, 2, vec![OccupancyClass::Traversable]),
            Err(GridError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn disc_collision_touches_walls_and_edges() {
        let mut m = open(10, 10);
        m.set(CellIndex::new(5, 5), OccupancyClass::Occupied).unwrap();
        assert!(m.disc_collides(Point2::new(0.45, 0.55), 0.06));
        assert!(!m.disc_collides(Point2::new(0.35, 0.55), 0.04));
        // map edge counts as wall
        assert!(m.disc_collides(Point2::new(0.05, 0.5), 0.1));
        assert!((m.clearance(Point2::new(0.35, 0.55), 1.0) - 0.15).abs() < 1e-12);
    }

    fn brute_clearance(m: &GridMap, p: Point2) -> f64 {
        // every occupied cell plus a one-cell frame standing in for off-map
        let res = m.resolution();
        let mut best = f64::INFINITY;
        for y in -1..=m.height() as isize {
            for x in -1..=m.width() as isize {
                if m.class_at(x, y) != OccupancyClass::Occupied {
                    continue;
                }
                let qx = p.x.clamp(x as f64 * res, (x + 1) as f64 * res);
                let qy = p.y.clamp(y as f64 * res, (y + 1) as f64 * res);
                best = best.min((qx - p.x).hypot(qy - p.y));
            }
        }
        best
    }

    proptest! {
        #[test]
        fn cached_queries_match_exhaustive_scan(
            walls in proptest::collection::vec((0usize..24, 0usize..18), 0..12),
            px in 0.0f64..2.4, py in 0.0f64..1.8, r in 0.01f64..0.9,
        ) {
            let mut m = open(24, 18);
            for (x, y) in walls {
                m.set(CellIndex::new(x, y), OccupancyClass::Occupied).unwrap();
            }
            let p = Point2::new(px, py);
            let d = brute_clearance(&m, p);
            prop_assert_eq!(m.disc_collides(p, r), d < r);
            prop_assert!((m.clearance(p, r) - d.min(r)).abs() < 1e-12);
        }

        #[test]
        fn cell_center_round_trips(x in 0usize..57, y in 0usize..31, res in 0.01f64..2.0) {
            let m = GridMap::filled(res, 57, 31, OccupancyClass::Traversable).unwrap();
            let c = CellIndex::new(x, y);
            prop_assert_eq!(m.world_to_cell(m.cell_center(c)).unwrap(), c);
        }

        #[test]
        fn normalized_angles_stay_in_range(theta in -100.0f64..100.0) {
            let a = normalize_angle(theta);
            prop_assert!(a > -PI && a <= PI);
            prop_assert!(((a - theta) / (2.0 * PI)).fract().abs() < 1e-9
                || (1.0 - ((a - theta) / (2.0 * PI)).fract().abs()) < 1e-9);
        }
    }
}
