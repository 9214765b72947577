//! Backbone, region proposal network, RoI sampling and the detection head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{decode_deltas, encode_deltas, generate_anchors, iou, nms, AnchorGrid, BBox, Deltas};
use crate::nn::{Conv2d, Dense};
use crate::params::{Init, ParamStore};
use crate::tensor::{sigmoid, Real};

/// Upper bound for decoded log-size deltas, `ln(1000/16)`.
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356;

/// A stack of 3×3, stride-2, padding-1 convolutions with ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: String,
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    pub const PRESETS: [&'static str; 3] = ["toy-8ch-s8", "toy-16ch-s8", "small-32ch-s16"];

    pub fn preset(name: &str) -> Result<Self> {
        let channels = match name {
            "toy-8ch-s8" => vec![8, 8, 8],
            "toy-16ch-s8" => vec![16, 16, 16],
            "small-32ch-s16" => vec![16, 32, 32, 32],
            _ => return Err(Error::Config(format!("unknown backbone preset `{name}`"))),
        };
        Ok(Self { name: name.to_string(), channels })
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }

    pub fn layers(&self) -> Vec<Conv2d> {
        let mut in_ch = 3;
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let l = Conv2d::new(format!("backbone.conv{i}"), in_ch, c, 3, 2, 1);
                in_ch = c;
                l
            })
            .collect()
    }

    /// Spatial size of the feature map: `ceil(dim / stride)`.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.stride();
        (h.div_ceil(s), w.div_ceil(s))
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in self.layers() {
            l.init(store, rng, Init::He);
        }
    }
}

/// `image [H, W, 3]` → feature map `[ceil(H/s), ceil(W/s), C]`.
pub fn backbone_forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &BackboneConfig, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(shape_err(format!("backbone expects H×W×3, got {s:?}")));
    }
    if s[0] < cfg.stride() || s[1] < cfg.stride() {
        return Err(Error::InvalidArgument(format!(
            "{}×{} image is smaller than one {}-pixel stride cell",
            s[0],
            s[1],
            cfg.stride()
        )));
    }
    let mut x = image;
    for layer in cfg.layers() {
        let y = layer.forward(g, store, x)?;
        x = g.relu(y);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    pub conv_channels: usize,
    pub grid: AnchorGrid,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub batch_anchors: usize,
    pub positive_fraction: f64,
    pub pre_nms_top_n: usize,
    pub nms_iou: f64,
    pub train_post_nms_top_n: usize,
    pub test_post_nms_top_n: usize,
}

impl RpnConfig {
    pub fn new(conv_channels: usize, grid: AnchorGrid) -> Self {
        Self {
            conv_channels,
            grid,
            fg_iou: 0.7,
            bg_iou: 0.3,
            batch_anchors: 256,
            positive_fraction: 0.5,
            pre_nms_top_n: 2000,
            nms_iou: 0.7,
            train_post_nms_top_n: 2000,
            test_post_nms_top_n: 300,
        }
    }

    fn conv(&self, in_ch: usize) -> Conv2d {
        Conv2d::new("rpn.conv", in_ch, self.conv_channels, 3, 1, 1)
    }

    fn objectness(&self) -> Dense {
        Dense::new("rpn.cls", self.conv_channels, self.grid.per_cell())
    }

    fn regressor(&self) -> Dense {
        Dense::new("rpn.bbox", self.conv_channels, 4 * self.grid.per_cell())
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, in_ch: usize) {
        self.conv(in_ch).init(store, rng, Init::He);
        self.objectness().init(store, rng, Init::Uniform(0.01));
        self.regressor().init(store, rng, Init::Uniform(0.01));
    }
}

/// Per-anchor RPN outputs; row `i` belongs to anchor `i`.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[N, 1]` objectness logits.
    pub logits: Var,
    /// `[N, 4]` deltas.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
}

pub fn rpn_head<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &RpnConfig, feat: Var) -> Result<RpnOutput> {
    let s = g.shape(feat).to_vec();
    if s.len() != 3 {
        return Err(shape_err(format!("rpn expects h×w×C, got {s:?}")));
    }
    let (fh, fw) = (s[0], s[1]);
    let a = cfg.grid.per_cell();
    let hidden = cfg.conv(s[2]).forward(g, store, feat)?;
    let hidden = g.relu(hidden);
    let flat = g.reshape(hidden, &[fh * fw, cfg.conv_channels])?;
    let logits = cfg.objectness().forward(g, store, flat)?;
    let logits = g.reshape(logits, &[fh * fw * a, 1])?;
    let deltas = cfg.regressor().forward(g, store, flat)?;
    let deltas = g.reshape(deltas, &[fh * fw * a, 4])?;
    Ok(RpnOutput { logits, deltas, anchors: generate_anchors(&cfg.grid, fh, fw) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Objectness probability.
    pub objectness: f64,
    pub anchor: usize,
}

/// Decodes every anchor, clips to the image, drops degenerate boxes and sorts
/// by descending objectness (ties: lower anchor index first).
pub fn decode_proposals<T: Real>(g: &Graph<T>, out: &RpnOutput, image_h: usize, image_w: usize) -> Vec<Proposal> {
    let logits = g.value(out.logits).data();
    let deltas = g.value(out.deltas).data();
    let mut props: Vec<Proposal> = out
        .anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let d: Vec<f64> = deltas[i * 4..i * 4 + 4].iter().map(|v| v.as_f64()).collect();
            let bbox = decode_deltas(a, &Deltas::from_slice(&d).clamped(MAX_LOG_DELTA)).clip(image_w as f64, image_h as f64)?;
            Some(Proposal { bbox, objectness: sigmoid(logits[i].as_f64()), anchor: i })
        })
        .collect();
    props.sort_by(|a, b| b.objectness.total_cmp(&a.objectness).then(a.anchor.cmp(&b.anchor)));
    props
}

/// Runs the RPN and returns its raw outputs plus the sorted, clipped proposals.
pub fn rpn_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RpnConfig,
    feat: Var,
    image_h: usize,
    image_w: usize,
) -> Result<(RpnOutput, Vec<Proposal>)> {
    let out = rpn_head(g, store, cfg, feat)?;
    let props = decode_proposals(g, &out, image_h, image_w);
    Ok((out, props))
}

/// Top `pre_nms` by objectness, NMS, then the first `post_nms` survivors.
pub fn select_proposals(sorted: &[Proposal], pre_nms: usize, nms_iou: f64, post_nms: usize) -> Vec<Proposal> {
    let head = &sorted[..sorted.len().min(pre_nms)];
    let boxes: Vec<BBox> = head.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = head.iter().map(|p| p.objectness).collect();
    nms(&boxes, &scores, nms_iou).into_iter().take(post_nms).map(|i| head[i]).collect()
}

/// Sampled RPN training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    /// `+1` object, `−1` background, per anchor.
    pub labels: Vec<f64>,
    /// Nonzero for sampled anchors.
    pub weights: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Nonzero for sampled positive anchors.
    pub reg_weights: Vec<f64>,
}

/// Labels anchors positive (IoU ≥ `fg_iou`, or the best anchor of some
/// ground-truth box) or negative (max IoU < `bg_iou`), then samples at most
/// `batch_anchors`, of which at most `positive_fraction` are positive.
pub fn anchor_targets<R: Rng>(anchors: &[BBox], gt: &[BBox], cfg: &RpnConfig, rng: &mut R) -> AnchorTargets {
    let n = anchors.len();
    let mut best = vec![(0.0f64, usize::MAX); n];
    let mut gt_best = vec![0.0f64; gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, b) in gt.iter().enumerate() {
            let v = iou(a, b);
            if v > best[i].0 || best[i].1 == usize::MAX {
                best[i] = (v, j);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        let (v, j) = best[i];
        let is_best_for_gt = gt.iter().enumerate().any(|(k, b)| gt_best[k] > 0.0 && iou(&anchors[i], b) == gt_best[k]);
        if j != usize::MAX && (v >= cfg.fg_iou || is_best_for_gt) {
            pos.push(i);
        } else if v < cfg.bg_iou {
            neg.push(i);
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((cfg.batch_anchors as f64 * cfg.positive_fraction) as usize);
    let n_neg = neg.len().min(cfg.batch_anchors - n_pos);
    let mut t = AnchorTargets { labels: vec![-1.0; n], weights: vec![0.0; n], deltas: vec![0.0; 4 * n], reg_weights: vec![0.0; n] };
    for &i in &pos[..n_pos] {
        t.labels[i] = 1.0;
        t.weights[i] = 1.0;
        t.reg_weights[i] = 1.0;
        let d = encode_deltas(&anchors[i], &gt[best[i].1]).to_array();
        t.deltas[4 * i..4 * i + 4].copy_from_slice(&d);
    }
    for &i in &neg[..n_neg] {
        t.weights[i] = 1.0;
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRoi {
    pub bbox: BBox,
    /// Superclass id, or `None` for background.
    pub label: Option<usize>,
    pub matched_gt: Option<usize>,
    pub iou: f64,
    pub regression_target: Deltas,
}

impl LabeledRoi {
    pub fn is_positive(&self) -> bool {
        self.label.is_some()
    }

    /// Head class index: 0 is background, superclass `k` is `k + 1`.
    pub fn class_index(&self) -> usize {
        self.label.map_or(0, |k| k + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSampling {
    pub n_sample: usize,
    pub pos_iou: f64,
    pub positive_fraction: f64,
}

impl Default for RoiSampling {
    fn default() -> Self {
        Self { n_sample: 2000, pos_iou: 0.5, positive_fraction: 0.25 }
    }
}

/// Labels every candidate against the ground truth and samples up to
/// `n_sample` RoIs, positives first. Positives take at most
/// `positive_fraction` of the sample (at least one slot).
pub fn sample_rois<R: Rng>(
    candidates: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    cfg: &RoiSampling,
    rng: &mut R,
) -> Result<Vec<LabeledRoi>> {
    if candidates.is_empty() {
        return Err(Error::NoProposals);
    }
    if !(cfg.pos_iou > 0.0 && cfg.pos_iou < 1.0) || cfg.n_sample == 0 {
        return Err(Error::InvalidArgument("sample_rois needs 0 < pos_iou < 1 and n_sample ≥ 1".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for c in candidates {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gt_boxes.iter().enumerate() {
            let v = iou(c, g);
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        match best {
            Some((v, j)) if v >= cfg.pos_iou => pos.push(LabeledRoi {
                bbox: *c,
                label: Some(gt_labels[j]),
                matched_gt: Some(j),
                iou: v,
                regression_target: encode_deltas(c, &gt_boxes[j]),
            }),
            other => neg.push(LabeledRoi {
                bbox: *c,
                label: None,
                matched_gt: None,
                iou: other.map_or(0.0, |(v, _)| v),
                regression_target: Deltas::default(),
            }),
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let cap = ((cfg.n_sample as f64 * cfg.positive_fraction) as usize).max(1);
    pos.truncate(cap.min(cfg.n_sample));
    neg.truncate(cfg.n_sample - pos.len());
    pos.extend(neg);
    Ok(pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub pooled: usize,
    pub fc: Vec<usize>,
    pub num_classes: usize,
}

impl HeadConfig {
    fn layers(&self, in_dim: usize) -> (Vec<Dense>, Dense, Dense) {
        let mut d = in_dim;
        let fcs = self
            .fc
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Dense::new(format!("head.fc{i}"), d, w);
                d = w;
                l
            })
            .collect();
        let k1 = self.num_classes + 1;
        (fcs, Dense::new("head.cls", d, k1), Dense::new("head.bbox", d, 4 * k1))
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, in_dim: usize) {
        let (fcs, cls, bbox) = self.layers(in_dim);
        for l in fcs {
            l.init(store, rng, Init::He);
        }
        cls.init(store, rng, Init::Uniform(0.01));
        bbox.init(store, rng, Init::Uniform(0.001));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionOutput {
    /// `[R, K+1]` class logits, background first.
    pub cls_logits: Var,
    /// `[R, 4(K+1)]` per-class deltas.
    pub bbox: Var,
}

/// `pooled [R, P·P·C]` → FC stack with ReLU → classifier and regressor.
pub fn detection_head<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &HeadConfig, pooled: Var) -> Result<DetectionOutput> {
    let (fcs, cls, bbox) = cfg.layers(g.value(pooled).rows_cols().1);
    let mut x = pooled;
    for l in &fcs {
        let y = l.forward(g, store, x)?;
        x = g.relu(y);
    }
    let cls_logits = cls.forward(g, store, x)?;
    let bbox = bbox.forward(g, store, x)?;
    Ok(DetectionOutput { cls_logits, bbox })
}

/// Which sampled RoIs contribute to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationSet {
    /// Positives and negatives, negatives labeled background.
    All,
    /// Positives only.
    PositivesOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub loc: Var,
    pub superclass: Var,
    pub n_positive: usize,
}

/// Smooth-L1 localization over positives' matched-class deltas and
/// cross-entropy classification, each averaged over the contributing RoIs.
pub fn loss_detection<T: Real>(
    g: &mut Graph<T>,
    out: &DetectionOutput,
    rois: &[LabeledRoi],
    set: ClassificationSet,
) -> Result<DetectionLoss> {
    let (r, k1) = g.value(out.cls_logits).rows_cols();
    if r != rois.len() {
        return Err(shape_err(format!("loss_detection: {r} outputs for {} RoIs", rois.len())));
    }
    let n_pos = rois.iter().filter(|x| x.is_positive()).count();
    let targets: Vec<usize> = rois.iter().map(|x| x.class_index()).collect();
    if targets.iter().any(|&t| t >= k1) {
        return Err(shape_err("loss_detection: label beyond classifier width"));
    }
    let n_cls = match set {
        ClassificationSet::All => r,
        ClassificationSet::PositivesOnly => n_pos,
    };
    let cls_w: Vec<T> = rois
        .iter()
        .map(|x| match set {
            ClassificationSet::All => T::one() / T::cast(n_cls as f64),
            ClassificationSet::PositivesOnly if x.is_positive() => T::one() / T::cast(n_cls as f64),
            _ => T::zero(),
        })
        .collect();
    let superclass = g.softmax_xent(out.cls_logits, &targets, &cls_w)?;

    let picked = g.select_blocks(out.bbox, 4, &targets)?;
    let mut target = Vec::with_capacity(4 * r);
    let mut reg_w = Vec::with_capacity(r);
    for x in rois {
        target.extend(x.regression_target.to_array().iter().map(|&v| T::cast(v)));
        reg_w.push(if x.is_positive() { T::one() / T::cast(n_pos as f64) } else { T::zero() });
    }
    let loc = g.smooth_l1(picked, &target, &reg_w, T::one())?;
    Ok(DetectionLoss { loc, superclass, n_positive: n_pos })
}

/// RPN objectness (logistic over sampled anchors) and box terms (smooth-L1
/// over sampled positives), each averaged over its contributing anchors.
pub fn loss_rpn<T: Real>(g: &mut Graph<T>, out: &RpnOutput, t: &AnchorTargets) -> Result<(Var, Var)> {
    let n_s = t.weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
    let n_p = t.reg_weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
    let labels: Vec<T> = t.labels.iter().map(|&v| T::cast(v)).collect();
    let w: Vec<T> = t.weights.iter().map(|&v| T::cast(v / n_s)).collect();
    let obj = g.logistic(out.logits, &labels, &w)?;
    let target: Vec<T> = t.deltas.iter().map(|&v| T::cast(v)).collect();
    let rw: Vec<T> = t.reg_weights.iter().map(|&v| T::cast(v / n_p)).collect();
    let loc = g.smooth_l1(out.deltas, &target, &rw, T::one())?;
    Ok((obj, loc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn presets_have_expected_stride() {
        assert_eq!(BackboneConfig::preset("toy-8ch-s8").unwrap().stride(), 8);
        let small = BackboneConfig::preset("small-32ch-s16").unwrap();
        assert_eq!(small.stride(), 16);
        assert_eq!(small.feature_size(600, 1000), (38, 63));
        assert!(BackboneConfig::preset("vgg16").is_err());
    }

    #[test]
    fn sampling_labels() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        // overlap 75, union 125
        let cands = [b(2.5, 0.0, 12.5, 10.0), b(0.0, 0.0, 10.0, 10.0), b(5.0, 5.0, 25.0, 25.0)];
        assert!((iou(&cands[0], &gt[0]) - 0.6).abs() < 1e-12);
        let rois = sample_rois(&cands, &gt, &[3], &RoiSampling { n_sample: 8, pos_iou: 0.5, positive_fraction: 0.5 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for r in &rois {
            if r.bbox == cands[0] || r.bbox == cands[1] {
                assert_eq!(r.label, Some(3));
            } else {
                assert_eq!(r.label, None);
            }
            if r.bbox == cands[1] {
                assert_eq!(r.regression_target, Deltas::default());
            }
        }
        assert!(sample_rois(&[], &gt, &[0], &RoiSampling::default(), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn positive_cap() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let cands: Vec<BBox> = (0..40).map(|i| if i < 20 { gt[0] } else { b(50.0, 50.0, 60.0, 60.0 + i as f64) }).collect();
        let rois = sample_rois(&cands, &gt, &[0], &RoiSampling { n_sample: 16, pos_iou: 0.5, positive_fraction: 0.25 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(rois.len(), 16);
        assert_eq!(rois.iter().filter(|r| r.is_positive()).count(), 4);
    }
}
