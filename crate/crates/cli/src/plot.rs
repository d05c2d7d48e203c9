//! Unlabelled raster line plots: white canvas, black axes box, one colour
//! per series, square markers on every point.

use std::path::Path;

use anyhow::{bail, Result};
use diffrecon_core::io::write_png_rgb;

pub const WIDTH: usize = 480;
pub const HEIGHT: usize = 360;
const MARGIN: usize = 30;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
}

struct Canvas {
    rgb: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            rgb: vec![255; WIDTH * HEIGHT * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let i = (y as usize * WIDTH + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
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

    fn marker(&mut self, (x, y): (i64, i64), c: [u8; 3]) {
        for dx in -2..=2 {
            for dy in -2..=2 {
                self.put(x + dx, y + dy, c);
            }
        }
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Renders the series on shared axes. Non-finite points are dropped.
pub fn line_plot(path: &Path, series: &[Series]) -> Result<()> {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().filter(finite).copied())
        .collect();
    if all.is_empty() {
        bail!("nothing to plot");
    }
    let (x_lo, x_hi) = range(all.iter().map(|p| p.0));
    let (y_lo, y_hi) = range(all.iter().map(|p| p.1));
    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * w;
        let py = (HEIGHT - MARGIN) as f64 - (y - y_lo) / (y_hi - y_lo) * h;
        (px.round() as i64, py.round() as i64)
    };
    let mut c = Canvas::new();
    let (l, r, t, b) = (
        MARGIN as i64,
        (WIDTH - MARGIN) as i64,
        MARGIN as i64,
        (HEIGHT - MARGIN) as i64,
    );
    for (a, z) in [
        ((l, t), (r, t)),
        ((r, t), (r, b)),
        ((r, b), (l, b)),
        ((l, b), (l, t)),
    ] {
        c.line(a, z, [0, 0, 0]);
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s.points.iter().filter(finite).map(|&p| to_px(p)).collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], color);
        }
        for &p in &pts {
            c.marker(p, color);
        }
    }
    write_png_rgb(path, WIDTH, HEIGHT, &c.rgb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png_and_rejects_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        line_plot(
            &path,
            &[Series {
                points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, f64::NAN)],
            }],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(line_plot(
            &path,
            &[Series {
                points: vec![(f64::NAN, 0.0)]
            }]
        )
        .is_err());
    }

    #[test]
    fn bresenham_hits_both_end_points() {
        let mut c = Canvas::new();
        c.line((3, 4), (40, 17), [0, 0, 0]);
        for (x, y) in [(3usize, 4usize), (40, 17)] {
            assert_eq!(c.rgb[(y * WIDTH + x) * 3], 0);
        }
    }
}
