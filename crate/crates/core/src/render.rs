//! Static run images: posterior heatmap with trajectory and markers, written
//! as a binary pixmap (P6).

use thiserror::Error;

use crate::costmap::PosteriorImage;
use crate::world::{OccupancyClass, Point2, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("costmap has no resolution and no scenario was given")]
    NoResolution,
    #[error("scenario map is {sw}x{sh} cells but the costmap is {cw}x{ch}")]
    SizeMismatch { sw: usize, sh: usize, cw: usize, ch: usize },
    #[error("scale must be at least 1")]
    Scale,
}

pub type Rgb = [u8; 3];

pub const TRAJECTORY: Rgb = [220, 30, 30];
pub const RECOVERY: Rgb = [30, 80, 230];
pub const START: Rgb = [20, 180, 40];
pub const GOAL: Rgb = [210, 40, 210];
pub const WALL: Rgb = [40, 40, 70];

/// Positions from a trace CSV with a `tick,x,y,...` header.
pub fn parse_trace_positions(text: &str) -> Result<Vec<Point2>, RenderError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| RenderError::Trace {
            line: 1,
            msg: format!("missing `{name}` column"),
        })
    };
    let (ix, iy) = (find("x")?, find("y")?);
    lines
        .map(|(n, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            let get = |i: usize| {
                fields
                    .get(i)
                    .and_then(|f| f.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| RenderError::Trace {
                        line: n + 1,
                        msg: format!("bad row `{l}`"),
                    })
            };
            Ok(Point2::new(get(ix)?, get(iy)?))
        })
        .collect()
}

/// What to draw on top of the heatmap.
#[derive(Debug, Clone, Default)]
pub struct Overlay<'a> {
    pub trajectory: &'a [Point2],
    pub recovery_points: &'a [Point2],
    pub scenario: Option<&'a Scenario>,
    /// Used when no scenario is given; defaults to the first trajectory point.
    pub start: Option<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, top row first.
    pub pixels: Vec<Rgb>,
}

impl Pixmap {
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: isize, y: isize, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn square(&mut self, cx: isize, cy: isize, half: isize, c: Rgb) {
        for y in cy - half..=cy + half {
            for x in cx - half..=cx + half {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (mut x0, mut y0): (isize, isize), (x1, y1): (isize, isize), c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_p6(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Renders the posterior image at `scale` pixels per cell. Darker means a
/// higher dead-end posterior.
pub fn render(image: &PosteriorImage, overlay: &Overlay, scale: usize) -> Result<Pixmap, RenderError> {
    if scale == 0 {
        return Err(RenderError::Scale);
    }
    if let Some(s) = overlay.scenario {
        if (s.map.width(), s.map.height()) != (image.width, image.height) {
            return Err(RenderError::SizeMismatch {
                sw: s.map.width(),
                sh: s.map.height(),
                cw: image.width,
                ch: image.height,
            });
        }
    }
    let res = image
        .resolution
        .or(overlay.scenario.map(|s| s.map.resolution()))
        .ok_or(RenderError::NoResolution)?;
    let (w, h) = (image.width * scale, image.height * scale);
    let mut px = Pixmap {
        width: w,
        height: h,
        pixels: vec![[0; 3]; w * h],
    };
    for row in 0..h {
        let cy = image.height - 1 - row / scale;
        for col in 0..w {
            let cx = col / scale;
            let walled = overlay
                .scenario
                .is_some_and(|s| s.map.cells()[cy * image.width + cx] == OccupancyClass::Occupied);
            let g = 255 - image.values[cy * image.width + cx];
            px.pixels[row * w + col] = if walled { WALL } else { [g, g, g] };
        }
    }

    let to_px = |p: Point2| -> (isize, isize) {
        let x = (p.x / res * scale as f64).floor() as isize;
        let y = ((image.height as f64 - p.y / res) * scale as f64).floor() as isize;
        (x, y)
    };
    for pair in overlay.trajectory.windows(2) {
        px.line(to_px(pair[0]), to_px(pair[1]), TRAJECTORY);
    }
    if let [only] = overlay.trajectory {
        let (x, y) = to_px(*only);
        px.put(x, y, TRAJECTORY);
    }
    let half = scale as isize;
    for &p in overlay.recovery_points {
        let (x, y) = to_px(p);
        px.square(x, y, half, RECOVERY);
    }
    let start = overlay
        .scenario
        .map(|s| s.start.position())
        .or(overlay.start)
        .or(overlay.trajectory.first().copied());
    if let Some(p) = start {
        let (x, y) = to_px(p);
        px.square(x, y, half + 1, START);
    }
    if let Some(s) = overlay.scenario {
        let (x, y) = to_px(s.goal);
        px.square(x, y, half + 1, GOAL);
    }
    Ok(px)
}
