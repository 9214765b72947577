//! Geometry against brute-force references written independently of the
//! library: quadratic greedy NMS, rasterized IoU and delta round trips.

use got_core::geometry::{decode_deltas, encode_deltas, iou, nms, BBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Checks, Outcome};

pub const INSTANCES: usize = 1000;

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pick the best remaining box (lowest index on ties), drop everything that
/// overlaps it by more than the threshold, repeat.
pub fn brute_force_nms(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && ref_iou(boxes[b], boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    keep
}

/// Pixel-count IoU of integer boxes `[x1, y1, x2)` × `[y1, y2)`.
pub fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in a[1].min(b[1])..a[3].max(b[3]) {
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            let ia = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let ib = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += u32::from(ia && ib);
            union += u32::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.gen_range(0.0..80.0);
    let y = rng.gen_range(0.0..80.0);
    [x, y, x + rng.gen_range(1.0..40.0), y + rng.gen_range(1.0..40.0)]
}

pub fn nms_matches_reference(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let n = rng.gen_range(0..=50);
        let raw: Vec<[f64; 4]> = (0..n).map(|_| random_box(&mut rng)).collect();
        // coarse scores so that ties occur
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let boxes: Vec<BBox> = raw.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()).collect();
        if nms(&boxes, &scores, thr) != brute_force_nms(&raw, &scores, thr) {
            mismatches += 1;
        }
    }
    (INSTANCES, mismatches)
}

pub fn iou_matches_raster(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let mut ib = || {
            let x = rng.gen_range(0..30);
            let y = rng.gen_range(0..30);
            [x, y, x + rng.gen_range(1..20), y + rng.gen_range(1..20)]
        };
        let (a, b) = (ib(), ib());
        let f = |v: [i32; 4]| BBox::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64).unwrap();
        worst = worst.max((iou(&f(a), &f(b)) - raster_iou(a, b)).abs());
    }
    worst
}

pub fn delta_round_trip(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let a = random_box(&mut rng);
        let g = random_box(&mut rng);
        let (a, g) = (BBox::new(a[0], a[1], a[2], a[3]).unwrap(), BBox::new(g[0], g[1], g[2], g[3]).unwrap());
        let back = decode_deltas(&a, &encode_deltas(&a, &g));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn criterion() -> Outcome {
    let mut c = Checks::default();
    let (n, bad) = nms_matches_reference(1);
    c.note(format!("nms {}/{n} equal", n - bad));
    c.check(bad == 0, format!("{bad} NMS mismatches"));
    let iou_err = iou_matches_raster(2);
    c.note(format!("iou max err {iou_err:.1e}"));
    c.check(iou_err <= 1e-6, "IoU differs from raster count");
    let rt = delta_round_trip(3);
    c.note(format!("delta round trip max err {rt:.1e}"));
    c.check(rt < 1e-6, "delta round trip error");
    c.finish()
}
