//! Region pooling over a feature grid.
//!
//! Two views of a region are used. The RoI feature is the plain mean of the
//! cells whose centers fall inside the box. The proposal descriptor is a small
//! class-agnostic summary: how coherent the box content is, how much energy it
//! holds, and how strongly the box's dominant direction continues across each
//! edge, inside and outside.

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::synthworld::SyntheticImage;

/// Length of [`Descriptor`], without the bias term.
pub const DESCRIPTOR_DIM: usize = 11;

pub type Descriptor = [f64; DESCRIPTOR_DIM];

/// Half-open cell rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CellRect {
    pub fn count(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }
}

/// Cells whose centers `(i + 0.5, j + 0.5)` satisfy `x1 <= cx < x2` and
/// `y1 <= cy < y2`.
pub fn cell_rect(b: &BoxXYXY, size: usize) -> Option<CellRect> {
    if !b.is_valid() {
        return None;
    }
    let span = |lo: f64, hi: f64| {
        let a = (lo - 0.5).ceil().clamp(0.0, size as f64) as usize;
        let z = (hi - 0.5).ceil().clamp(0.0, size as f64) as usize;
        (a, z)
    };
    let (x0, x1) = span(b.x1, b.x2);
    let (y0, y1) = span(b.y1, b.y2);
    let r = CellRect { x0, x1, y0, y1 };
    (!r.is_empty()).then_some(r)
}

/// Summed-area tables of the feature vectors and their squared norms.
#[derive(Debug, Clone)]
pub struct FeatureIntegral {
    size: usize,
    dim: usize,
    sum: Vec<f64>,
    energy: Vec<f64>,
}

impl FeatureIntegral {
    pub fn new(img: &SyntheticImage) -> Self {
        let (size, dim) = (img.size, img.dim);
        let stride = size + 1;
        let mut sum = vec![0.0; stride * stride * dim];
        let mut energy = vec![0.0; stride * stride];
        for y in 0..size {
            let mut row = vec![0.0; dim];
            let mut row_e = 0.0;
            for x in 0..size {
                let cell = img.cell(x, y);
                for (r, v) in row.iter_mut().zip(cell) {
                    *r += f64::from(*v);
                }
                row_e += cell.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>();
                let here = (y + 1) * stride + (x + 1);
                let above = y * stride + (x + 1);
                for d in 0..dim {
                    sum[here * dim + d] = sum[above * dim + d] + row[d];
                }
                energy[here] = energy[above] + row_e;
            }
        }
        FeatureIntegral {
            size,
            dim,
            sum,
            energy,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn corners(&self, r: &CellRect) -> [usize; 4] {
        let s = self.size + 1;
        [r.y1 * s + r.x1, r.y0 * s + r.x1, r.y1 * s + r.x0, r.y0 * s + r.x0]
    }

    /// Mean feature vector over a non-empty rectangle.
    pub fn mean(&self, r: &CellRect) -> Vec<f64> {
        let [a, b, c, d] = self.corners(r);
        let n = r.count() as f64;
        let dim = self.dim;
        (0..dim)
            .map(|k| {
                (self.sum[a * dim + k] - self.sum[b * dim + k] - self.sum[c * dim + k]
                    + self.sum[d * dim + k])
                    / n
            })
            .collect()
    }

    /// Mean squared norm over a non-empty rectangle.
    pub fn mean_energy(&self, r: &CellRect) -> f64 {
        let [a, b, c, d] = self.corners(r);
        (self.energy[a] - self.energy[b] - self.energy[c] + self.energy[d]) / r.count() as f64
    }

    pub fn pool(&self, b: &BoxXYXY) -> Result<Vec<f64>> {
        let r = cell_rect(b, self.size).ok_or(Error::EmptyRegion)?;
        Ok(self.mean(&r))
    }

    /// Descriptor and pooled mean of a box, or `None` when the box covers no
    /// cell center.
    pub fn describe(&self, b: &BoxXYXY) -> Option<(Descriptor, Vec<f64>)> {
        let r = cell_rect(b, self.size)?;
        let mean = self.mean(&r);
        let coherence = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = if coherence > 1e-12 {
            mean.iter().map(|v| v / coherence).collect()
        } else {
            vec![0.0; self.dim]
        };
        let project = |s: Option<CellRect>| -> f64 {
            match s {
                Some(s) if !s.is_empty() => {
                    self.mean(&s).iter().zip(&unit).map(|(a, b)| a * b).sum()
                }
                _ => 0.0,
            }
        };

        let w = r.x1 - r.x0;
        let h = r.y1 - r.y0;
        let rx = ((w as f64 / 4.0).round() as usize).max(1).min(w);
        let ry = ((h as f64 / 4.0).round() as usize).max(1).min(h);
        let rect = |x0, x1, y0, y1| Some(CellRect { x0, x1, y0, y1 });

        let in_l = project(rect(r.x0, r.x0 + rx, r.y0, r.y1));
        let in_r = project(rect(r.x1 - rx, r.x1, r.y0, r.y1));
        let in_t = project(rect(r.x0, r.x1, r.y0, r.y0 + ry));
        let in_b = project(rect(r.x0, r.x1, r.y1 - ry, r.y1));
        let out_l = project(rect(r.x0.saturating_sub(rx), r.x0, r.y0, r.y1));
        let out_r = project(rect(r.x1, (r.x1 + rx).min(self.size), r.y0, r.y1));
        let out_t = project(rect(r.x0, r.x1, r.y0.saturating_sub(ry), r.y0));
        let out_b = project(rect(r.x0, r.x1, r.y1, (r.y1 + ry).min(self.size)));

        let full = (self.size * self.size) as f64;
        let scale = (r.count() as f64).ln() / full.ln();

        let desc = [
            coherence,
            self.mean_energy(&r),
            in_l,
            in_r,
            in_t,
            in_b,
            out_l,
            out_r,
            out_t,
            out_b,
            scale,
        ];
        Some((desc, mean))
    }
}

/// Mean of the cells whose centers fall inside `b`.
pub fn pool_feature(image: &SyntheticImage, b: &BoxXYXY) -> Result<Vec<f64>> {
    let r = cell_rect(b, image.size).ok_or(Error::EmptyRegion)?;
    let mut acc = vec![0.0; image.dim];
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            for (a, v) in acc.iter_mut().zip(image.cell(x, y)) {
                *a += f64::from(*v);
            }
        }
    }
    let n = r.count() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}
