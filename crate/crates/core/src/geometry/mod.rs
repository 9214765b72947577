//! Box algebra: IoU, anchors, box-delta encoding, non-maximum suppression
//! and RoIAlign pooling.
//!
//! Boxes are half-open continuous rectangles `[x1, x2) × [y1, y2)` in pixel
//! units; there is no `+1` pixel convention anywhere. A box with top-left
//! `(x1, y1)` covers pixels `x1..x2`, so `(0,0,10,10)` has area 100.

mod anchors;
mod boxes;
mod nms;
mod roi_align;

pub use anchors::{generate_anchors, AnchorGrid};
pub use boxes::{decode_deltas, decode_deltas_clipped, encode_deltas, iou, BBox, Deltas};
pub use nms::nms;
pub use roi_align::{roi_align, PooledFeature, RoiTaps, SAMPLES_PER_AXIS};
