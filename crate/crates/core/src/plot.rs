//! Minimal static PNG charts. There is no text rendering: series colors follow
//! `PALETTE` in order, and axes span the data range with a 5% margin.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Mat;
use crate::error::{DactError, Result};

pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: f64 = 40.0;

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                return (0.0, 1.0);
            }
            let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
            (lo - pad, hi + pad)
        };
        Self {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        (
            MARGIN + fx * (W as f64 - 2.0 * MARGIN),
            H as f64 - MARGIN - fy * (H as f64 - 2.0 * MARGIN),
        )
    }
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (x0, y1) = (MARGIN as i64, (H as f64 - MARGIN) as i64);
    line(&mut img, (x0 as f64, MARGIN), (x0 as f64, y1 as f64), axis, 1);
    line(&mut img, (x0 as f64, y1 as f64), (W as f64 - MARGIN, y1 as f64), axis, 1);
    img
}

fn dot(img: &mut RgbImage, x: i64, y: i64, r: i64, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>, width: i64) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        dot(img, x.round() as i64, y.round() as i64, width / 2, c);
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DactError::io(parent, e))?;
    }
    img.save(path).map_err(|e| DactError::Image(e.to_string()))?;
    Ok(())
}

/// One polyline with markers per series.
pub fn line_chart(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let pts = series.iter().flatten();
    let frame = Frame::fit(pts.clone().map(|p| p.0), pts.map(|p| p.1));
    let mut img = canvas();
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        for w in s.windows(2) {
            line(&mut img, frame.px(w[0].0, w[0].1), frame.px(w[1].0, w[1].1), c, 3);
        }
        for &(x, y) in s {
            let (px, py) = frame.px(x, y);
            dot(&mut img, px.round() as i64, py.round() as i64, 4, c);
        }
    }
    save(&img, path)
}

/// Grouped bars: `groups[g][s]` is series `s` in group `g`; the y axis starts at zero.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>]) -> Result<()> {
    let ymax = groups.iter().flatten().copied().fold(0.0, f64::max);
    let frame = Frame {
        x: (0.0, groups.len().max(1) as f64),
        y: (0.0, if ymax > 0.0 { ymax * 1.05 } else { 1.0 }),
    };
    let mut img = canvas();
    for (g, bars) in groups.iter().enumerate() {
        let n = bars.len().max(1) as f64;
        for (s, &v) in bars.iter().enumerate() {
            let left = g as f64 + 0.1 + 0.8 * s as f64 / n;
            let right = left + 0.8 / n;
            let (x0, y0) = frame.px(left, 0.0);
            let (x1, y1) = frame.px(right, v.max(0.0));
            let c = color(s);
            for x in x0.round() as u32..(x1.round() as u32).max(x0.round() as u32 + 1) {
                for y in y1.round() as u32..=y0.round() as u32 {
                    if x < W && y < H {
                        img.put_pixel(x, y, c);
                    }
                }
            }
        }
    }
    save(&img, path)
}

/// Points colored by category.
pub fn scatter(path: &Path, points: &[(f64, f64, usize)]) -> Result<()> {
    let frame = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut img = canvas();
    for &(x, y, c) in points {
        let (px, py) = frame.px(x, y);
        dot(&mut img, px.round() as i64, py.round() as i64, 3, color(c));
    }
    save(&img, path)
}

/// Projection of the rows of `x` onto their two leading principal components.
pub fn pca2(x: &Mat) -> Result<Vec<(f64, f64)>> {
    let (n, d) = x.dim();
    if n < 2 || d < 2 {
        return Err(DactError::Degenerate("PCA needs at least two rows and two columns".into()));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let m = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = (m.transpose() * &m) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pc1 = eig.eigenvectors.column(order[0]);
    let pc2 = eig.eigenvectors.column(order[1]);
    Ok((0..n)
        .map(|i| {
            let row = m.row(i);
            (row.dot(&pc1.transpose()), row.dot(&pc2.transpose()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pca_recovers_dominant_axis() {
        let x = array![[-2.0, 0.1], [-1.0, -0.1], [0.0, 0.05], [1.0, -0.05], [2.0, 0.0]];
        let p = pca2(&x).unwrap();
        let spread1: f64 = p.iter().map(|q| q.0 * q.0).sum();
        let spread2: f64 = p.iter().map(|q| q.1 * q.1).sum();
        assert!(spread1 > 100.0 * spread2);
    }

    #[test]
    fn charts_write_pngs() {
        let dir = tempfile::tempdir().unwrap();
        line_chart(&dir.path().join("a.png"), &[vec![(0.0, 1.0), (1.0, 0.5)], vec![]]).unwrap();
        bar_chart(&dir.path().join("b.png"), &[vec![0.1, 0.2], vec![0.3, 0.0]]).unwrap();
        scatter(&dir.path().join("c.png"), &[(0.0, 0.0, 0), (1.0, 2.0, 3)]).unwrap();
        let img = image::open(dir.path().join("a.png")).unwrap();
        assert_eq!((img.width(), img.height()), (W, H));
    }
}
