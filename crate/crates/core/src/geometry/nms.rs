use super::{iou, BBox};

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (ties: lower input index first) and drops
/// a box iff its IoU with an already-kept box exceeds `iou_threshold`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_box_kept() {
        assert_eq!(nms(&[b(0.0, 0.0, 1.0, 1.0)], &[0.1], 0.5), vec![0]);
    }

    #[test]
    fn overlapping_pair_and_disjoint_box() {
        // IoU(0,1) = 80/100 = 0.8
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 8.0), b(50.0, 50.0, 60.0, 60.0)];
        assert!((iou(&boxes[0], &boxes[1]) - 0.8).abs() < 1e-12);
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
    }

    #[test]
    fn disjoint_all_kept_in_score_order() {
        let boxes = [b(0.0, 0.0, 1.0, 1.0), b(2.0, 2.0, 3.0, 3.0), b(4.0, 4.0, 5.0, 5.0)];
        assert_eq!(nms(&boxes, &[0.1, 0.9, 0.5], 0.0), vec![1, 2, 0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(nms(&boxes, &[0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn threshold_one_keeps_everything() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 10.0), b(1.0, 1.0, 9.0, 9.0)];
        assert_eq!(nms(&boxes, &[0.3, 0.2, 0.1], 1.0).len(), 3);
    }
}
