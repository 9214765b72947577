use got_core::autograd::Graph;
use got_core::detectnet::{
    backbone_forward, detection_head, loss_detection, rpn_forward, sample_rois, BackboneConfig, ClassificationSet, HeadConfig,
    LabeledRoi, RoiSampling, RpnConfig,
};
use got_core::geometry::{encode_deltas, AnchorGrid, BBox, Deltas};
use got_core::params::ParamStore;
use got_core::tensor::{softmax_rows, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn zero_matching(store: &mut ParamStore<f64>, prefix: &str, suffix: &str) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix) && n.ends_with(suffix)).map(String::from).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn full_size_input_gives_38_by_63_map() {
    let cfg = BackboneConfig::preset("small-32ch-s16").unwrap();
    assert_eq!(cfg.stride(), 16);
    assert_eq!(cfg.feature_size(600, 1000), (38, 63));
}

#[test]
fn zero_image_and_zero_biases_give_zero_features() {
    let cfg = BackboneConfig::preset("toy-8ch-s8").unwrap();
    let mut s = ParamStore::<f64>::new();
    cfg.init(&mut s, &mut rng());
    zero_matching(&mut s, "backbone", ".b");
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[24, 40, 3]));
    let f = backbone_forward(&mut g, &s, &cfg, x).unwrap();
    assert_eq!(g.shape(f), &[3, 5, 8]);
    assert!(g.value(f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn image_below_one_stride_cell_is_rejected() {
    let cfg = BackboneConfig::preset("toy-8ch-s8").unwrap();
    let mut s = ParamStore::<f64>::new();
    cfg.init(&mut s, &mut rng());
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[7, 40, 3]));
    assert!(backbone_forward(&mut g, &s, &cfg, x).is_err());
}

#[test]
fn one_cell_map_gives_twelve_proposals_in_anchor_order_when_weights_are_zero() {
    let rpn = RpnConfig::new(4, AnchorGrid::default());
    let mut s = ParamStore::<f64>::new();
    rpn.init(&mut s, &mut rng(), 3);
    zero_matching(&mut s, "rpn.cls", "");
    zero_matching(&mut s, "rpn.bbox", "");
    let mut g = Graph::new();
    let feat = g.constant(Tensor::full(&[1, 1, 3], 0.5));
    let (out, props) = rpn_forward(&mut g, &s, &rpn, feat, 16, 16).unwrap();
    assert_eq!(out.anchors.len(), 12);
    assert_eq!(props.len(), 12);
    let logits = g.value(out.logits).data();
    assert!(logits.iter().all(|&l| l == logits[0]));
    assert_eq!(props.iter().map(|p| p.anchor).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
}

#[test]
fn roi_labels_follow_the_overlap_threshold() {
    let gt = [b(0.0, 0.0, 10.0, 10.0)];
    // IoU 0.6 when the candidate covers 0..10 × 0..6
    let pos = b(0.0, 0.0, 10.0, 6.0);
    let neg = b(0.0, 0.0, 10.0, 3.0);
    let cfg = RoiSampling { n_sample: 10, pos_iou: 0.5, positive_fraction: 0.5 };
    let rois = sample_rois(&[pos, neg, gt[0]], &gt, &[2], &cfg, &mut rng()).unwrap();
    let find = |bb: BBox| rois.iter().find(|r| r.bbox == bb).unwrap().clone();
    assert_eq!(find(pos).label, Some(2));
    assert!((find(pos).iou - 0.6).abs() < 1e-12);
    assert_eq!(find(neg).label, None);
    let exact = find(gt[0]);
    assert_eq!(exact.label, Some(2));
    assert_eq!(exact.regression_target.to_array(), [0.0; 4]);
    assert!(sample_rois(&[], &gt, &[2], &cfg, &mut rng()).is_err());
}

fn head(k: usize) -> (HeadConfig, ParamStore<f64>) {
    let cfg = HeadConfig { pooled: 2, fc: vec![6, 5], num_classes: k };
    let mut s = ParamStore::new();
    cfg.init(&mut s, &mut rng(), 8);
    (cfg, s)
}

#[test]
fn four_superclasses_give_five_scores_and_twenty_deltas() {
    let (cfg, s) = head(4);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 8], 0.3));
    let out = detection_head(&mut g, &s, &cfg, x).unwrap();
    assert_eq!(g.shape(out.cls_logits), &[3, 5]);
    assert_eq!(g.shape(out.bbox), &[3, 20]);
}

#[test]
fn zero_head_scores_uniformly() {
    let (cfg, mut s) = head(4);
    zero_matching(&mut s, "head", "");
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 8], 0.7));
    let out = detection_head(&mut g, &s, &cfg, x).unwrap();
    let p = softmax_rows(g.value(out.cls_logits).data(), 5);
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

fn roi(label: Option<usize>, target: Deltas) -> LabeledRoi {
    LabeledRoi { bbox: b(0.0, 0.0, 4.0, 4.0), label, matched_gt: label, iou: if label.is_some() { 0.7 } else { 0.1 }, regression_target: target }
}

fn detection_loss(cls: Vec<f64>, bbox: Vec<f64>, rois: &[LabeledRoi], set: ClassificationSet) -> (f64, f64, usize) {
    let r = rois.len();
    let mut g = Graph::new();
    let cls = g.constant(Tensor::from_vec(&[r, 5], cls).unwrap());
    let bbox = g.constant(Tensor::from_vec(&[r, 20], bbox).unwrap());
    let out = got_core::detectnet::DetectionOutput { cls_logits: cls, bbox };
    let l = loss_detection(&mut g, &out, rois, set).unwrap();
    (g.value(l.superclass).item(), g.value(l.loc).item(), l.n_positive)
}

#[test]
fn uniform_classes_cost_ln5_per_positive() {
    let rois = [roi(Some(0), Deltas::default()), roi(Some(3), Deltas::default())];
    let (cls, _, n) = detection_loss(vec![0.0; 10], vec![0.0; 40], &rois, ClassificationSet::PositivesOnly);
    assert_eq!(n, 2);
    assert!((cls - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn perfect_predictions_cost_nothing() {
    let t = encode_deltas(&b(0.0, 0.0, 4.0, 4.0), &b(1.0, 0.5, 5.0, 6.0));
    let rois = [roi(Some(1), t), roi(None, Deltas::default())];
    let mut cls = vec![0.0; 10];
    cls[2] = 1e3; // roi 0 → class index 2
    cls[5] = 1e3; // roi 1 → background
    let mut bbox = vec![0.0; 40];
    bbox[8..12].copy_from_slice(&t.to_array());
    let (c, l, _) = detection_loss(cls, bbox, &rois, ClassificationSet::All);
    assert!(c.abs() < 1e-12 && l.abs() < 1e-12, "{c} {l}");
}

#[test]
fn no_positives_give_zero_terms() {
    let rois = [roi(None, Deltas::default())];
    let mut cls = vec![0.0; 5];
    cls[0] = 1e3;
    let (c, l, n) = detection_loss(cls, vec![0.3; 20], &rois, ClassificationSet::PositivesOnly);
    assert_eq!((c, l, n), (0.0, 0.0, 0));
}
