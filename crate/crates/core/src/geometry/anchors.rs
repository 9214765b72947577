use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};

pub const NUM_SCALES: usize = 4;
pub const NUM_RATIOS: usize = 3;

/// Anchor layout: `scales × ratios` boxes centred on every feature cell.
///
/// `scales` are side lengths in pixels of the ratio-1 anchor; a ratio `r` is
/// `height / width` and preserves the area `scale²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorGrid {
    pub fn new(stride: f64, scales: Vec<f64>, ratios: Vec<f64>) -> Result<Self> {
        if scales.len() != NUM_SCALES || ratios.len() != NUM_RATIOS {
            return Err(Error::InvalidArgument(format!(
                "anchor grid needs {NUM_SCALES} scales and {NUM_RATIOS} ratios, got {} and {}",
                scales.len(),
                ratios.len()
            )));
        }
        if !(stride > 0.0) || scales.iter().chain(&ratios).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("anchor stride, scales and ratios must be positive".into()));
        }
        Ok(Self { stride, scales, ratios })
    }

    /// Scales given as multiples of the stride.
    pub fn stride_relative(stride: f64, multiples: &[f64], ratios: &[f64]) -> Result<Self> {
        Self::new(stride, multiples.iter().map(|m| m * stride).collect(), ratios.to_vec())
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// The anchors of one cell centred at the origin, scale-major.
    fn cell_template(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.per_cell());
        for &s in &self.scales {
            for &r in &self.ratios {
                out.push((s / r.sqrt(), s * r.sqrt()));
            }
        }
        out
    }
}

impl Default for AnchorGrid {
    fn default() -> Self {
        Self::stride_relative(16.0, &[4.0, 8.0, 16.0, 32.0], &[0.5, 1.0, 2.0]).unwrap()
    }
}

/// `per_cell · feat_h · feat_w` anchors, row-major over cells and
/// scale-major within a cell. Anchors may extend past the image border.
pub fn generate_anchors(grid: &AnchorGrid, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let template = grid.cell_template();
    let mut out = Vec::with_capacity(template.len() * feat_h * feat_w);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * grid.stride;
            let cy = (i as f64 + 0.5) * grid.stride;
            for &(w, h) in &template {
                out.push(
                    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
                        .expect("positive anchor size"),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let g = AnchorGrid::default();
        assert_eq!(generate_anchors(&g, 1, 1).len(), 12);
        assert_eq!(generate_anchors(&g, 3, 4).len(), 144);
    }

    #[test]
    fn ratio_one_is_square_of_scale() {
        let g = AnchorGrid::new(8.0, vec![8.0, 16.0, 24.0, 32.0], vec![0.5, 1.0, 2.0]).unwrap();
        let a = generate_anchors(&g, 1, 1);
        // scale index 1, ratio index 1
        let sq = a[1 * 3 + 1];
        assert!((sq.width() - 16.0).abs() < 1e-12);
        assert!((sq.height() - 16.0).abs() < 1e-12);
        // area preserved across ratios
        for k in 0..3 {
            assert!((a[3 + k].area() - 256.0).abs() < 1e-9);
        }
    }

    #[test]
    fn centers_at_cell_centers() {
        let g = AnchorGrid::default();
        let a = generate_anchors(&g, 2, 3);
        for (idx, b) in a.iter().enumerate() {
            let cell = idx / 12;
            let (i, j) = (cell / 3, cell % 3);
            let (cx, cy) = b.center();
            assert!((cx - (j as f64 + 0.5) * 16.0).abs() < 1e-9);
            assert!((cy - (i as f64 + 0.5) * 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_counts_rejected() {
        assert!(AnchorGrid::new(16.0, vec![1.0; 3], vec![1.0; 3]).is_err());
    }
}
