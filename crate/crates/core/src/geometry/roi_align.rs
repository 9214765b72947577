use super::BBox;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Bilinear samples per bin along each axis (2×2 per bin).
pub const SAMPLES_PER_AXIS: usize = 2;

/// A `P×P×C` pooled region feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature<T> {
    pub pooled: usize,
    pub channels: usize,
    pub values: Tensor<T>,
}

/// Sparse bilinear interpolation taps for a batch of RoIs over one feature map.
///
/// Output cell `o = (roi, py, px)` equals `Σ weight · feature[cell]` over the
/// taps in `offsets[o]..offsets[o+1]`, applied channel-wise. Because pooling
/// is linear in the feature map, the same taps give the backward pass.
///
/// Coordinates: an image point `u` maps to the continuous feature coordinate
/// `u · spatial_scale − 0.5`, so feature value `j` sits at the centre of the
/// pixel span of cell `j`. No rounding is applied anywhere.
#[derive(Debug, Clone)]
pub struct RoiTaps {
    pub num_rois: usize,
    pub pooled: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    offsets: Vec<usize>,
    cells: Vec<usize>,
    weights: Vec<f64>,
}

impl RoiTaps {
    pub fn build(rois: &[BBox], feat_h: usize, feat_w: usize, spatial_scale: f64, pooled: usize) -> Result<Self> {
        if !(spatial_scale > 0.0) {
            return Err(Error::InvalidArgument("spatial_scale must be positive".into()));
        }
        if pooled == 0 || feat_h == 0 || feat_w == 0 {
            return Err(shape_err("roi_align: empty feature map or pooled size"));
        }
        let mut offsets = vec![0];
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        let norm = 1.0 / (SAMPLES_PER_AXIS * SAMPLES_PER_AXIS) as f64;
        for roi in rois {
            if roi.x2() * spatial_scale <= 0.0
                || roi.y2() * spatial_scale <= 0.0
                || roi.x1() * spatial_scale >= feat_w as f64
                || roi.y1() * spatial_scale >= feat_h as f64
            {
                return Err(Error::RoiOutside(roi.to_string()));
            }
            let x0 = roi.x1() * spatial_scale - 0.5;
            let y0 = roi.y1() * spatial_scale - 0.5;
            let bin_w = roi.width() * spatial_scale / pooled as f64;
            let bin_h = roi.height() * spatial_scale / pooled as f64;
            for py in 0..pooled {
                for px in 0..pooled {
                    for sy in 0..SAMPLES_PER_AXIS {
                        let y = y0 + bin_h * (py as f64 + (sy as f64 + 0.5) / SAMPLES_PER_AXIS as f64);
                        for sx in 0..SAMPLES_PER_AXIS {
                            let x = x0 + bin_w * (px as f64 + (sx as f64 + 0.5) / SAMPLES_PER_AXIS as f64);
                            for (cell, w) in bilinear_taps(y, x, feat_h, feat_w) {
                                if w != 0.0 {
                                    cells.push(cell);
                                    weights.push(w * norm);
                                }
                            }
                        }
                    }
                    offsets.push(cells.len());
                }
            }
        }
        Ok(Self { num_rois: rois.len(), pooled, feat_h, feat_w, offsets, cells, weights })
    }

    /// `feature [H·W, C]` → `[R·P·P, C]`
    pub fn apply<T: Real>(&self, feature: &[T], channels: usize) -> Vec<T> {
        let n_out = self.offsets.len() - 1;
        let mut out = vec![T::zero(); n_out * channels];
        for o in 0..n_out {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = T::cast(self.weights[t]);
                let src = &feature[self.cells[t] * channels..(self.cells[t] + 1) * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Accumulates `grad_out [R·P·P, C]` back into `grad_feature [H·W, C]`.
    pub fn scatter<T: Real>(&self, grad_out: &[T], grad_feature: &mut [T], channels: usize) {
        let n_out = self.offsets.len() - 1;
        for o in 0..n_out {
            let src = &grad_out[o * channels..(o + 1) * channels];
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = T::cast(self.weights[t]);
                let dst = &mut grad_feature[self.cells[t] * channels..(self.cells[t] + 1) * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Four-neighbour bilinear weights at continuous feature coordinate `(y, x)`.
/// Points more than one cell outside the map contribute nothing; points just
/// outside are clamped to the border.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return [(0, 0.0); 4];
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut yl, mut xl) = (y.floor() as usize, x.floor() as usize);
    let (mut y, mut x) = (y, x);
    let yh = if yl >= h - 1 {
        yl = h - 1;
        y = yl as f64;
        yl
    } else {
        yl + 1
    };
    let xh = if xl >= w - 1 {
        xl = w - 1;
        x = xl as f64;
        xl
    } else {
        xl + 1
    };
    let ly = y - yl as f64;
    let lx = x - xl as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (yl * w + xl, hy * hx),
        (yl * w + xh, hy * lx),
        (yh * w + xl, ly * hx),
        (yh * w + xh, ly * lx),
    ]
}

/// Pools one RoI (image coordinates) from an `H×W×C` feature map.
pub fn roi_align<T: Real>(feature: &Tensor<T>, roi: &BBox, spatial_scale: f64, pooled: usize) -> Result<PooledFeature<T>> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(shape_err(format!("roi_align expects H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let taps = RoiTaps::build(std::slice::from_ref(roi), h, w, spatial_scale, pooled)?;
    let values = Tensor::from_vec(&[pooled, pooled, c], taps.apply(feature.data(), c))?;
    Ok(PooledFeature { pooled, channels: c, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor::from_vec(&[h, w, c], data).unwrap()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let fm = ramp(6, 8, 3, |_, _, _| 2.5);
        let roi = BBox::new(3.0, 5.0, 28.0, 22.0).unwrap();
        let p = roi_align(&fm, &roi, 0.25, 7).unwrap();
        assert!(p.values.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn linear_ramp_matches_sample_mean() {
        // f(x, y) = x in feature-index units; an interior RoI never clamps.
        let fm = ramp(16, 16, 1, |_, x, _| x as f64);
        let scale = 0.5;
        let roi = BBox::new(6.0, 6.0, 20.0, 18.0).unwrap();
        let pooled = 4;
        let p = roi_align(&fm, &roi, scale, pooled).unwrap();
        let bin_w = roi.width() * scale / pooled as f64;
        for py in 0..pooled {
            for px in 0..pooled {
                let x0 = roi.x1() * scale - 0.5 + bin_w * px as f64;
                let mean_x = x0 + bin_w * 0.5; // mean of the samples at 1/4 and 3/4
                let got = p.values.data()[py * pooled + px];
                assert!((got - mean_x).abs() < 1e-12, "bin ({py},{px}): {got} vs {mean_x}");
            }
        }
    }

    #[test]
    fn cell_aligned_roi_equals_average_pooling() {
        let fm = ramp(8, 8, 2, |y, x, c| (y * 31 + x * 7 + c * 3) as f64 % 11.0);
        // roi covering cells 2..6 at scale 1 with P = 2: each bin spans 2×2 cells
        let roi = BBox::new(2.0, 2.0, 6.0, 6.0).unwrap();
        let p = roi_align(&fm, &roi, 1.0, 2).unwrap();
        for py in 0..2 {
            for px in 0..2 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 + 2 * py + dy, 2 + 2 * px + dx);
                            acc += fm.data()[(y * 8 + x) * 2 + c];
                        }
                    }
                    let got = p.values.data()[(py * 2 + px) * 2 + c];
                    assert!((got - acc / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn roi_outside_is_an_error() {
        let fm = ramp(4, 4, 1, |_, _, _| 1.0);
        let roi = BBox::new(100.0, 100.0, 120.0, 120.0).unwrap();
        assert!(matches!(roi_align(&fm, &roi, 0.125, 2), Err(Error::RoiOutside(_))));
    }
}
