//! Dependency-free image output: grayscale PGM maps, diverging-colormap PPM
//! maps, and minimal PPM line plots for sweep summaries.
//!
//! Images are written with image row 0 at the top, matching axial index 0
//! (shallowest depth) of the underlying arrays. Numeric color scales live in
//! sidecar text files written by the pipeline, not in the pixels.

use std::path::Path;

use crate::array2::Array2D;
use crate::io;
use crate::{Error, Result};

/// 8-bit grayscale P5 image of `img`, mapping `lo..hi` onto 0..255.
/// Non-finite samples clamp to black.
pub fn pgm_bytes(img: &Array2D<f64>, lo: f64, hi: f64) -> Vec<u8> {
    let (h, w) = (img.rows(), img.cols());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for i in 0..h {
        for j in 0..w {
            let v = img.get(i, j);
            let t = if v.is_finite() { (v - lo) / span } else { 0.0 };
            out.push((t.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, img: &Array2D<f64>, lo: f64, hi: f64) -> Result<()> {
    io::write_bytes(path, &pgm_bytes(img, lo, hi))
}

/// Diverging blue-white-red color for `t` in [-1, 1].
pub fn diverging_rgb(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let blend = |end: f64, a: f64| (255.0 + (end - 255.0) * a).round() as u8;
    if t < 0.0 {
        let a = -t;
        [blend(59.0, a), blend(76.0, a), blend(192.0, a)]
    } else {
        [blend(180.0, t), blend(4.0, t), blend(38.0, t)]
    }
}

const INVALID_GRAY: [u8; 3] = [64, 64, 64];

/// P6 image of `img` under the diverging colormap with symmetric limits
/// `-limit..limit`; masked-out pixels render dark gray.
pub fn ppm_bytes(img: &Array2D<f64>, valid: &Array2D<bool>, limit: f64) -> Result<Vec<u8>> {
    if img.rows() != valid.rows() || img.cols() != valid.cols() {
        return Err(Error::GridMismatch("image and mask differ in shape".into()));
    }
    if !(limit > 0.0) {
        return Err(Error::InvalidArgument("color limit must be positive".into()));
    }
    let (h, w) = (img.rows(), img.cols());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for i in 0..h {
        for j in 0..w {
            let rgb = if valid.get(i, j) {
                diverging_rgb(img.get(i, j) / limit)
            } else {
                INVALID_GRAY
            };
            out.extend_from_slice(&rgb);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Array2D<f64>, valid: &Array2D<bool>, limit: f64) -> Result<()> {
    io::write_bytes(path, &ppm_bytes(img, valid, limit)?)
}

/// One polyline of a plot; points with non-finite coordinates are skipped.
pub struct PlotSeries<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub color: [u8; 3],
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Canvas {
        Canvas {
            w,
            h,
            px: vec![255; 3 * w * h],
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let at = 3 * (y as usize * self.w + x as usize);
        self.px[at..at + 3].copy_from_slice(&rgb);
    }

    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, rgb);
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

    fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.px);
        out
    }
}

const PLOT_MARGIN: usize = 12;

/// Minimal line plot: white background, black frame around the data area,
/// one polyline per series. Axis ranges span all finite points of all
/// series; numeric ranges belong in a text sidecar.
pub fn line_plot(series: &[PlotSeries], width: usize, height: usize) -> Result<Vec<u8>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one series".into()));
    }
    if width < 4 * PLOT_MARGIN || height < 4 * PLOT_MARGIN {
        return Err(Error::InvalidArgument("plot canvas too small".into()));
    }
    let mut xr = (f64::INFINITY, f64::NEG_INFINITY);
    let mut yr = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        if s.x.len() != s.y.len() {
            return Err(Error::InvalidArgument(
                "series x and y lengths differ".into(),
            ));
        }
        for (&x, &y) in s.x.iter().zip(s.y) {
            if x.is_finite() && y.is_finite() {
                xr = (xr.0.min(x), xr.1.max(x));
                yr = (yr.0.min(y), yr.1.max(y));
            }
        }
    }
    if !(xr.0 <= xr.1 && yr.0 <= yr.1) {
        return Err(Error::InvalidArgument("plot has no finite points".into()));
    }
    // Degenerate ranges expand to a unit span so the line stays centered.
    let pad = |r: (f64, f64)| if r.0 == r.1 { (r.0 - 0.5, r.1 + 0.5) } else { r };
    let (xr, yr) = (pad(xr), pad(yr));

    let mut canvas = Canvas::new(width, height);
    let (x0, x1) = (PLOT_MARGIN as i64, (width - PLOT_MARGIN - 1) as i64);
    let (y0, y1) = (PLOT_MARGIN as i64, (height - PLOT_MARGIN - 1) as i64);
    let black = [0, 0, 0];
    canvas.line(x0, y0, x1, y0, black);
    canvas.line(x0, y1, x1, y1, black);
    canvas.line(x0, y0, x0, y1, black);
    canvas.line(x1, y0, x1, y1, black);

    let to_px = |x: f64, y: f64| {
        let fx = (x - xr.0) / (xr.1 - xr.0);
        let fy = (y - yr.0) / (yr.1 - yr.0);
        (
            x0 + (fx * (x1 - x0) as f64).round() as i64,
            // Larger y plots higher on the canvas.
            y1 - (fy * (y1 - y0) as f64).round() as i64,
        )
    };
    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for (&x, &y) in s.x.iter().zip(s.y) {
            if !(x.is_finite() && y.is_finite()) {
                prev = None;
                continue;
            }
            let p = to_px(x, y);
            match prev {
                Some(q) => canvas.line(q.0, q.1, p.0, p.1, s.color),
                None => canvas.put(p.0, p.1, s.color),
            }
            prev = Some(p);
        }
    }
    Ok(canvas.encode())
}

pub fn write_line_plot(
    path: &Path,
    series: &[PlotSeries],
    width: usize,
    height: usize,
) -> Result<()> {
    io::write_bytes(path, &line_plot(series, width, height)?)
}
