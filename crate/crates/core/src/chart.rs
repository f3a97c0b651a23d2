//! Synthetic line-chart rendering and chart-side data augmentation.
//!
//! Stands in for a visual element extractor: every line of a chart becomes
//! its own binary greyscale raster, and the y-axis tick range is reported
//! exactly.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tabular::{Column, Interval, UnderlyingData};

/// Fraction of the value span added above and below the data when drawing.
pub const Y_MARGIN: f64 = 0.05;

/// A single line rendered on an `h x w` canvas, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct LineImage {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl LineImage {
    /// Builds an image, checking that every x position has a lit pixel.
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(Error::Shape(format!("{} pixels for a {h}x{w} image", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("pixel intensity outside [0, 1]".into()));
        }
        let img = LineImage { h, w, pixels };
        if let Some(x) = (0..w).find(|&x| (0..h).all(|y| img.get(y, x) <= 0.0)) {
            return Err(Error::Domain(format!("line image has no lit pixel at x={x}")));
        }
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.w + col]
    }

    /// Pixels of the vertical strip `[x0, x0 + width)`, row-major.
    pub fn strip(&self, x0: usize, width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h * width);
        for r in 0..self.h {
            out.extend_from_slice(&self.pixels[r * self.w + x0..r * self.w + x0 + width]);
        }
        out
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.w, self.h).expect("write to vec");
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Format(format!("not a binary PGM (magic {})", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field '{s}'")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        let raster = bytes
            .get(pos..pos + w * h)
            .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
        LineImage::new(h, w, raster.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// What the chart encoder receives: one raster per line plus the y-axis range.
#[derive(Debug, Clone, PartialEq)]
pub struct LineChartQuery {
    lines: Vec<LineImage>,
    ytick_range: Interval,
}

impl LineChartQuery {
    pub fn new(lines: Vec<LineImage>, ytick_range: Interval) -> Result<Self> {
        let Some(first) = lines.first() else {
            return Err(Error::Empty("chart has no lines".into()));
        };
        let (h, w) = (first.height(), first.width());
        if lines.iter().any(|l| l.height() != h || l.width() != w) {
            return Err(Error::Shape("chart line images differ in size".into()));
        }
        if !(ytick_range.lo < ytick_range.hi) {
            return Err(Error::InvalidArgument(format!(
                "degenerate y-tick range [{}, {}]",
                ytick_range.lo, ytick_range.hi
            )));
        }
        Ok(LineChartQuery { lines, ytick_range })
    }

    pub fn lines(&self) -> &[LineImage] {
        &self.lines
    }

    pub fn ytick_range(&self) -> Interval {
        self.ytick_range
    }

    pub fn height(&self) -> usize {
        self.lines[0].height()
    }

    pub fn width(&self) -> usize {
        self.lines[0].width()
    }

    /// Value window mapped onto the canvas (tick range plus margin).
    pub fn frame(&self) -> Interval {
        plot_frame(self.ytick_range)
    }
}

/// Tick range widened by [`Y_MARGIN`] on each side.
pub fn plot_frame(ytick: Interval) -> Interval {
    let pad = (ytick.hi - ytick.lo) * Y_MARGIN;
    Interval {
        lo: ytick.lo - pad,
        hi: ytick.hi + pad,
    }
}

/// Tick range for a value span: exact `[min, max]`, or `±0.5` around a flat value.
pub fn tick_range(values: Interval) -> Interval {
    if values.hi > values.lo {
        values
    } else {
        Interval {
            lo: values.lo - 0.5,
            hi: values.hi + 0.5,
        }
    }
}

/// Renders each series into its own binary raster on a shared y-scale.
pub fn rasterize(d: &UnderlyingData, h: usize, w: usize) -> Result<LineChartQuery> {
    if h < 16 || w < 32 {
        return Err(Error::InvalidArgument(format!(
            "canvas {h}x{w} below the 16x32 minimum"
        )));
    }
    let ytick = tick_range(d.value_range());
    let frame = plot_frame(ytick);
    let span = frame.hi - frame.lo;
    let mut lines = Vec::with_capacity(d.len());
    for s in d.series() {
        let n = s.len();
        if n < 2 {
            return Err(Error::InvalidArgument("series too short to draw".into()));
        }
        let pts: Vec<(i64, i64)> = s
            .y()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = (i as f64 * (w - 1) as f64 / (n - 1) as f64).round() as i64;
                let y = ((frame.hi - v) / span * (h - 1) as f64).round() as i64;
                (x, y.clamp(0, h as i64 - 1))
            })
            .collect();
        let mut pixels = vec![0.0; h * w];
        for seg in pts.windows(2) {
            draw_segment(&mut pixels, w, seg[0], seg[1]);
        }
        lines.push(LineImage::new(h, w, pixels)?);
    }
    LineChartQuery::new(lines, ytick)
}

fn draw_segment(pixels: &mut [f64], w: usize, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        pixels[y as usize * w + x as usize] = 1.0;
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// `(a_1, ..., a_n)` becomes `(a_n, ..., a_1)`.
pub fn augment_reverse(c: &Column) -> Column {
    let mut v = c.values().to_vec();
    v.reverse();
    c.with_values(v).expect("reversal keeps values valid")
}

/// Splits after the first `at` values.
pub fn augment_partition_at(c: &Column, at: usize) -> Result<(Column, Column)> {
    let n = c.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "partition needs at least 4 values, got {n}"
        )));
    }
    if !(2..=n - 2).contains(&at) {
        return Err(Error::InvalidArgument(format!(
            "partition point {at} outside [2, {}]",
            n - 2
        )));
    }
    let (a, b) = c.values().split_at(at);
    Ok((
        Column::new(format!("{}.a", c.name()), a.to_vec())?,
        Column::new(format!("{}.b", c.name()), b.to_vec())?,
    ))
}

/// Splits at a uniform position in `[2, n - 2]`.
pub fn augment_partition<R: Rng + ?Sized>(c: &Column, rng: &mut R) -> Result<(Column, Column)> {
    if c.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "partition needs at least 4 values, got {}",
            c.len()
        )));
    }
    let at = rng.random_range(2..=c.len() - 2);
    augment_partition_at(c, at)
}

/// Keeps one value in every `rho`, starting with the first.
pub fn augment_downsample(c: &Column, rho: usize) -> Result<Column> {
    if rho < 2 {
        return Err(Error::InvalidArgument(format!("downsample stride {rho} < 2")));
    }
    if c.len() < rho {
        return Err(Error::InvalidArgument(format!(
            "downsample stride {rho} exceeds column length {}",
            c.len()
        )));
    }
    c.with_values(c.values().iter().step_by(rho).copied().collect())
}

pub fn save_pgm(path: impl AsRef<Path>, img: &LineImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, img.to_pgm()).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<LineImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LineImage::from_pgm(&bytes)
}
