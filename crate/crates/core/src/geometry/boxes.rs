use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips to `[0, w] × [0, h]`; `None` if nothing of positive area remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
        .ok()
    }

    pub fn is_inside(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Box regression target: center offsets relative to the anchor size and
/// log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Deltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Deltas {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { dx: v[0], dy: v[1], dw: v[2], dh: v[3] }
    }

    /// Limits the log-size terms so decoding cannot overflow.
    pub fn clamped(self, max_log: f64) -> Self {
        Self { dw: self.dw.min(max_log), dh: self.dh.min(max_log), ..self }
    }
}

pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> Deltas {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Deltas {
        dx: (gcx - acx) / anchor.width(),
        dy: (gcy - acy) / anchor.height(),
        dw: (gt.width() / anchor.width()).ln(),
        dh: (gt.height() / anchor.height()).ln(),
    }
}

pub fn decode_deltas(anchor: &BBox, d: &Deltas) -> BBox {
    let (acx, acy) = anchor.center();
    let cx = d.dx * anchor.width() + acx;
    let cy = d.dy * anchor.height() + acy;
    let w = anchor.width() * d.dw.exp();
    let h = anchor.height() * d.dh.exp();
    BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
}

/// Decodes and clips to a `width × height` image.
pub fn decode_deltas_clipped(anchor: &BBox, d: &Deltas, width: f64, height: f64) -> Option<BBox> {
    decode_deltas(anchor, d).clip(width, height)
}
