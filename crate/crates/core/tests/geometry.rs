use got_core::autograd::Graph;
use got_core::geometry::{decode_deltas, encode_deltas, generate_anchors, iou, nms, roi_align, AnchorGrid, BBox};
use got_core::tensor::Tensor;
use proptest::prelude::*;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn raster_iou(a: [i32; 4], c: [i32; 4]) -> f64 {
    let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut i, mut u) = (0, 0);
    for y in -5..60 {
        for x in -5..60 {
            let (p, q) = (inside(a, x, y), inside(c, x, y));
            i += (p && q) as i32;
            u += (p || q) as i32;
        }
    }
    i as f64 / u as f64
}

#[test]
fn iou_examples() {
    let unit = b(0.0, 0.0, 10.0, 10.0);
    assert_eq!(iou(&unit, &unit), 1.0);
    assert!((iou(&unit, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    assert!((raster_iou([0, 0, 10, 10], [5, 0, 15, 10]) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou(&unit, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
}

#[test]
fn delta_examples() {
    let d = encode_deltas(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 20.0, 20.0));
    assert!((d.dw - 2f64.ln()).abs() < 1e-12 && (d.dh - 2f64.ln()).abs() < 1e-12);
    let a = b(3.0, 4.0, 17.0, 9.0);
    assert_eq!(encode_deltas(&a, &a).to_array(), [0.0; 4]);
}

#[test]
fn nms_example() {
    // boxes 0 and 1 overlap at IoU 0.8, box 2 is disjoint
    let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 8.0), b(50.0, 50.0, 60.0, 60.0)];
    assert!((iou(&boxes[0], &boxes[1]) - 0.8).abs() < 1e-12);
    assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
}

#[test]
fn default_grid_has_twelve_anchors_per_cell() {
    let g = AnchorGrid::default();
    assert_eq!(generate_anchors(&g, 1, 1).len(), 12);
    assert_eq!(generate_anchors(&g, 3, 4).len(), 144);
}

#[test]
fn roi_align_on_a_ramp() {
    // f = x on a 6×6 map, image x maps to feature x − 0.5
    let data: Vec<f64> = (0..6).flat_map(|_| (0..6).map(|x| x as f64)).collect();
    let f = Tensor::from_vec(&[6, 6, 1], data).unwrap();
    let out = roi_align(&f, &b(1.0, 1.0, 5.0, 5.0), 1.0, 2).unwrap();
    // bin 0 spans feature x ∈ [0.5, 2.5) with samples at 1 and 2
    let v = out.values.data();
    assert!((v[0] - 1.5).abs() < 1e-12, "{v:?}");
    assert!((v[1] - 3.5).abs() < 1e-12, "{v:?}");
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..80.0f64, 0.0..80.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
        let v = iou(&a, &c);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&c, &a));
    }

    #[test]
    fn iou_matches_raster_on_integer_boxes(
        a in (0..30i32, 0..30i32, 1..20i32, 1..20i32),
        c in (0..30i32, 0..30i32, 1..20i32, 1..20i32),
    ) {
        let ra = [a.0, a.1, a.0 + a.2, a.1 + a.3];
        let rc = [c.0, c.1, c.0 + c.2, c.1 + c.3];
        let f = |r: [i32; 4]| b(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        prop_assert!((iou(&f(ra), &f(rc)) - raster_iou(ra, rc)).abs() < 1e-9);
    }

    #[test]
    fn deltas_round_trip(a in arb_box(), g in arb_box()) {
        let back = decode_deltas(&a, &encode_deltas(&a, &g));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_keeps_a_valid_cover(boxes in prop::collection::vec(arb_box(), 0..30), thr in 0.1..0.9f64, seed in 0u64..1000) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i as u64 * 7919 + seed) % 13) as f64).collect();
        let keep = nms(&boxes, &scores, thr);
        // kept boxes never overlap above the threshold
        for (i, &p) in keep.iter().enumerate() {
            for &q in &keep[i + 1..] {
                prop_assert!(iou(&boxes[p], &boxes[q]) <= thr);
            }
        }
        // every dropped box is covered by a kept box that scores at least as high
        for j in (0..boxes.len()).filter(|j| !keep.contains(j)) {
            prop_assert!(keep.iter().any(|&k| scores[k] >= scores[j] && iou(&boxes[k], &boxes[j]) > thr));
        }
        // kept indices are in non-increasing score order
        prop_assert!(keep.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
    }

    #[test]
    fn roi_align_of_a_constant_is_that_constant(
        c in -5.0..5.0f64,
        roi in (0.0..50.0f64, 0.0..50.0f64, 0.5..45.0f64, 0.5..45.0f64).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h)),
    ) {
        // the 12×12 map at stride 8 covers 96 pixels, so the RoI is inside
        let f = Tensor::full(&[12, 12, 2], c);
        let out = roi_align(&f, &roi, 1.0 / 8.0, 3).unwrap();
        prop_assert!(out.values.data().iter().all(|&v| (v - c).abs() < 1e-12));
    }
}

#[test]
fn graph_roi_align_matches_plain() {
    let data: Vec<f64> = (0..5 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
    let f = Tensor::from_vec(&[5, 5, 2], data).unwrap();
    let roi = b(2.5, 3.0, 30.0, 22.0);
    let plain = roi_align(&f, &roi, 1.0 / 8.0, 2).unwrap();
    let taps = std::sync::Arc::new(got_core::geometry::RoiTaps::build(&[roi], 5, 5, 1.0 / 8.0, 2).unwrap());
    let mut g = Graph::new();
    let x = g.constant(f);
    let y = g.roi_align(x, taps).unwrap();
    assert_eq!(g.value(y).data(), plain.values.data());
}
