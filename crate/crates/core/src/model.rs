//! Whole-network configuration, parameter initialization and the per-image
//! training loss graph shared by the trainer and the gradient checks.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::captionhead::{caption_logits, loss_caption, reduce_roi_feature, reduction_layers, teacher_inputs, CaptionHeadConfig, CaptionMode};
use crate::datasets::{encode_caption, AnnotatedImage, Image, Vocabulary};
use crate::detectnet::{
    anchor_targets, backbone_forward, decode_proposals, detection_head, loss_detection, loss_rpn, rpn_head, sample_rois,
    select_proposals, AnchorTargets, BackboneConfig, ClassificationSet, HeadConfig, LabeledRoi, RoiSampling, RpnConfig,
    RpnOutput,
};
use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, BBox, RoiTaps};
use crate::params::{Init, ParamStore};
use crate::retrievalhead::{build_retrieval_labels, encode_query, loss_retrieval, retrieval_scores, RetrievalHeadConfig, RetrievalLabel};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Caption,
    Retrieval,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Retrieval => "retrieval",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caption" => Ok(Task::Caption),
            "retrieval" => Ok(Task::Retrieval),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that fixes the network's shapes and its inference behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub mode: CaptionMode,
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub head: HeadConfig,
    pub reduce: Vec<usize>,
    pub hidden: usize,
    pub retrieval_fc: usize,
    pub n_steps: usize,
    pub vocab_size: usize,
    pub sampling: RoiSampling,
    pub classification_set: ClassificationSet,
    /// Include background RoIs, labeled irrelevant, in the retrieval loss.
    pub retrieval_negatives: bool,
    /// `(shorter side, longer-side cap)` resize before the backbone.
    pub resize: Option<(usize, usize)>,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Retrieval only scores candidates whose detection score reaches this.
    #[serde(default)]
    pub retrieval_min_score: f64,
    pub lstm_init: f64,
    pub forget_bias: f64,
}

impl ModelConfig {
    /// Full-width layout: 4096-wide head, 4096/2048/512 reduction, 512 LSTM
    /// units, 256-unit retrieval layer, 600×1000 inputs.
    pub fn full(task: Task, num_classes: usize, vocab_size: usize) -> Self {
        let backbone = BackboneConfig::preset("small-32ch-s16").expect("preset");
        let grid = AnchorGrid::default();
        Self {
            task,
            mode: CaptionMode::Ocn2,
            rpn: RpnConfig::new(backbone.out_channels(), grid),
            backbone,
            head: HeadConfig { pooled: 7, fc: vec![4096, 4096], num_classes },
            reduce: vec![4096, 2048, 512],
            hidden: 512,
            retrieval_fc: 256,
            n_steps: 6,
            vocab_size,
            sampling: RoiSampling::default(),
            classification_set: ClassificationSet::All,
            retrieval_negatives: false,
            resize: Some((600, 1000)),
            nms_iou: 0.3,
            score_threshold: 0.5,
            retrieval_min_score: 0.5,
            lstm_init: 0.08,
            forget_bias: 1.0,
        }
    }

    /// Desk-scale layout for 64-pixel synthetic scenes.
    pub fn toy(task: Task, num_classes: usize, vocab_size: usize) -> Self {
        let backbone = BackboneConfig::preset("toy-16ch-s8").expect("preset");
        let grid = AnchorGrid::new(8.0, vec![8.0, 16.0, 24.0, 32.0], vec![0.5, 1.0, 2.0]).expect("valid grid");
        let mut rpn = RpnConfig::new(16, grid);
        rpn.batch_anchors = 128;
        rpn.pre_nms_top_n = 300;
        rpn.train_post_nms_top_n = 100;
        rpn.test_post_nms_top_n = 50;
        Self {
            task,
            mode: CaptionMode::Ocn2,
            backbone,
            rpn,
            head: HeadConfig { pooled: 7, fc: vec![64, 64], num_classes },
            reduce: vec![64, 32, 16],
            hidden: 16,
            retrieval_fc: 64,
            n_steps: 6,
            vocab_size,
            sampling: RoiSampling { n_sample: 32, pos_iou: 0.5, positive_fraction: 0.25 },
            classification_set: ClassificationSet::All,
            retrieval_negatives: false,
            resize: None,
            nms_iou: 0.3,
            score_threshold: 0.5,
            retrieval_min_score: 0.5,
            // a ±0.08 query encoder starts ~40x weaker than the visual input
            lstm_init: if task == Task::Retrieval { 1.0 } else { 0.08 },
            forget_bias: 1.0,
        }
    }

    pub fn preset(name: &str, task: Task, num_classes: usize, vocab_size: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(task, num_classes, vocab_size)),
            "toy" => Ok(Self::toy(task, num_classes, vocab_size)),
            _ => Err(Error::Config(format!("unknown width preset `{name}`"))),
        }
    }

    pub fn pooled_dim(&self) -> usize {
        self.head.pooled * self.head.pooled * self.backbone.out_channels()
    }

    pub fn spatial_scale(&self) -> f64 {
        1.0 / self.backbone.stride() as f64
    }

    pub fn visual_dim(&self) -> usize {
        *self.reduce.last().unwrap_or(&self.pooled_dim())
    }

    pub fn caption_head(&self) -> CaptionHeadConfig {
        CaptionHeadConfig { mode: self.mode, visual_dim: self.visual_dim(), hidden: self.hidden, vocab_size: self.vocab_size, n_steps: self.n_steps }
    }

    pub fn retrieval_head(&self) -> RetrievalHeadConfig {
        RetrievalHeadConfig {
            visual_dim: self.visual_dim(),
            query_hidden: self.hidden,
            fc: self.retrieval_fc,
            vocab_size: self.vocab_size,
            n_steps: self.n_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rpn.grid.stride as usize != self.backbone.stride() {
            return Err(Error::Config(format!(
                "anchor stride {} differs from backbone stride {}",
                self.rpn.grid.stride,
                self.backbone.stride()
            )));
        }
        if self.n_steps == 0 || self.vocab_size < 2 || self.head.num_classes == 0 || self.reduce.is_empty() {
            return Err(Error::Config("n_steps, vocab_size, num_classes and reduce widths must be positive".into()));
        }
        Ok(())
    }

    /// Seeded parameter initialization.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng);
        self.rpn.init(&mut store, &mut rng, self.backbone.out_channels());
        self.head.init(&mut store, &mut rng, self.pooled_dim());
        for l in reduction_layers(self.pooled_dim(), &self.reduce) {
            l.init(&mut store, &mut rng, Init::He);
        }
        match self.task {
            Task::Caption => self.caption_head().init(&mut store, &mut rng, self.lstm_init, self.forget_bias),
            Task::Retrieval => self.retrieval_head().init(&mut store, &mut rng, self.lstm_init, self.forget_bias),
        }
        Ok(store)
    }
}

/// The image after the configured resize, plus the factor back to the
/// original pixel coordinates.
pub fn prepare_image(cfg: &ModelConfig, image: &Image) -> Result<(Image, f64)> {
    match cfg.resize {
        None => Ok((image.clone(), 1.0)),
        Some((short, long)) => {
            let (h, w) = (image.height() as f64, image.width() as f64);
            let mut s = short as f64 / h.min(w);
            if h.max(w) * s > long as f64 {
                s = long as f64 / h.max(w);
            }
            let (nh, nw) = (((h * s).round() as usize).max(1), ((w * s).round() as usize).max(1));
            Ok((image.resized(nh, nw)?, s))
        }
    }
}

/// Backbone and RPN outputs for one image.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub feat: Var,
    pub rpn: RpnOutput,
    pub height: usize,
    pub width: usize,
}

pub fn forward_trunk<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, image: &Image) -> Result<Trunk> {
    let x = g.constant(image.to_tensor());
    let feat = backbone_forward(g, store, &cfg.backbone, x)?;
    let rpn = rpn_head(g, store, &cfg.rpn, feat)?;
    Ok(Trunk { feat, rpn, height: image.height(), width: image.width() })
}

/// Second-branch targets fixed for one iteration.
#[derive(Debug, Clone)]
pub enum BranchPlan {
    Caption {
        /// Indices into the sampled RoIs.
        rows: Vec<usize>,
        /// `[step][row]`
        inputs: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
    },
    Retrieval {
        rows: Vec<usize>,
        query: Vec<usize>,
        query_object: usize,
        labels: Vec<RetrievalLabel>,
    },
}

/// All discrete choices of one training iteration: anchor labels, sampled
/// RoIs and the caption or query targets. Holding a plan fixed makes the
/// loss a smooth function of the parameters.
#[derive(Debug, Clone)]
pub struct Plan {
    pub anchors: AnchorTargets,
    pub rois: Vec<LabeledRoi>,
    pub taps: Arc<RoiTaps>,
    pub branch: BranchPlan,
}

/// Ground truth of an image in the (possibly resized) network frame.
pub fn scaled_ground_truth(sample: &AnnotatedImage, scale: f64) -> (Vec<BBox>, Vec<usize>) {
    sample.objects.iter().map(|o| (o.bbox.scaled(scale), o.superclass_id)).unzip()
}

pub fn make_plan<T: Real, R: Rng>(
    g: &Graph<T>,
    trunk: &Trunk,
    cfg: &ModelConfig,
    sample: &AnnotatedImage,
    scale: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Plan> {
    let (gt, labels) = scaled_ground_truth(sample, scale);
    if gt.is_empty() {
        return Err(Error::Validation { image_id: sample.image_id.clone(), message: "training image has no objects".into() });
    }
    let anchors = anchor_targets(&trunk.rpn.anchors, &gt, &cfg.rpn, rng);
    let props = decode_proposals(g, &trunk.rpn, trunk.height, trunk.width);
    let mut candidates: Vec<BBox> = select_proposals(&props, cfg.rpn.pre_nms_top_n, cfg.rpn.nms_iou, cfg.rpn.train_post_nms_top_n)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    candidates.extend(gt.iter().copied());
    let rois = sample_rois(&candidates, &gt, &labels, &cfg.sampling, rng)?;
    let fs = g.shape(trunk.feat);
    let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
    let taps = Arc::new(RoiTaps::build(&boxes, fs[0], fs[1], cfg.spatial_scale(), cfg.head.pooled)?);
    let positives: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].is_positive()).collect();

    let branch = match cfg.task {
        Task::Caption => {
            let mut inputs = vec![Vec::with_capacity(positives.len()); cfg.n_steps];
            let mut targets = vec![Vec::with_capacity(positives.len()); cfg.n_steps];
            for &i in &positives {
                let obj = &sample.objects[rois[i].matched_gt.expect("positive")];
                let words = obj.captions.choose(rng).expect("captions are non-empty");
                let enc = encode_caption(words, vocab, cfg.n_steps);
                for (t, tok) in teacher_inputs(&enc, vocab.eoc_index()).into_iter().enumerate() {
                    inputs[t].push(tok);
                    targets[t].push(enc.token_ids[t]);
                }
            }
            BranchPlan::Caption { rows: positives, inputs, targets }
        }
        Task::Retrieval => {
            let all: Vec<(usize, &Vec<String>)> =
                sample.objects.iter().enumerate().flat_map(|(j, o)| o.captions.iter().map(move |c| (j, c))).collect();
            let &(query_object, words) = all.choose(rng).expect("objects have captions");
            let query = encode_caption(words, vocab, cfg.n_steps).token_ids;
            let rows: Vec<usize> = if cfg.retrieval_negatives { (0..rois.len()).collect() } else { positives };
            let row_rois: Vec<LabeledRoi> = rows.iter().map(|&i| rois[i].clone()).collect();
            let labels = build_retrieval_labels(&row_rois, query_object, sample.objects.len())?;
            BranchPlan::Retrieval { rows, query, query_object, labels }
        }
    };
    Ok(Plan { anchors, rois, taps, branch })
}

/// Loss terms of one iteration as graph values.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rpn_objectness: Var,
    pub rpn_box: Var,
    pub loc: Var,
    pub superclass: Var,
    /// Caption or retrieval term.
    pub branch: Var,
    pub total: Var,
}

/// Itemized loss values; `total` is the sum of the other five.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub loc: f64,
    pub superclass: f64,
    pub branch: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read<T: Real>(g: &Graph<T>, v: &LossVars) -> Self {
        let f = |x: Var| g.value(x).item().as_f64();
        Self {
            rpn_objectness: f(v.rpn_objectness),
            rpn_box: f(v.rpn_box),
            loc: f(v.loc),
            superclass: f(v.superclass),
            branch: f(v.branch),
            total: f(v.total),
        }
    }

    pub fn items(&self) -> [(&'static str, f64); 5] {
        [
            ("rpn_objectness", self.rpn_objectness),
            ("rpn_box", self.rpn_box),
            ("loc", self.loc),
            ("superclass", self.superclass),
            ("branch", self.branch),
        ]
    }
}

/// Builds every loss term on top of `trunk` for a fixed plan.
pub fn build_losses<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, trunk: &Trunk, plan: &Plan) -> Result<LossVars> {
    let (rpn_objectness, rpn_box) = loss_rpn(g, &trunk.rpn, &plan.anchors)?;
    let pooled = g.roi_align(trunk.feat, plan.taps.clone())?;
    let det = detection_head(g, store, &cfg.head, pooled)?;
    let dl = loss_detection(g, &det, &plan.rois, cfg.classification_set)?;
    let branch = match &plan.branch {
        BranchPlan::Caption { rows, inputs, targets } => {
            if rows.is_empty() {
                g.constant(Tensor::scalar(T::zero()))
            } else {
                let sel = g.gather_rows(pooled, rows)?;
                let visual = reduce_roi_feature(g, store, &cfg.reduce, sel)?;
                let logits = caption_logits(g, store, &cfg.caption_head(), visual, inputs)?;
                loss_caption(g, &logits, targets)?
            }
        }
        BranchPlan::Retrieval { rows, query, labels, .. } => {
            if rows.is_empty() {
                g.constant(Tensor::scalar(T::zero()))
            } else {
                let head = cfg.retrieval_head();
                let sel = g.gather_rows(pooled, rows)?;
                let visual = reduce_roi_feature(g, store, &cfg.reduce, sel)?;
                let q = encode_query(g, store, &head, query)?;
                let scores = retrieval_scores(g, store, &head, visual, q)?;
                loss_retrieval(g, scores, labels, &vec![true; rows.len()])?
            }
        }
    };
    let total = g.add_n(&[rpn_objectness, rpn_box, dl.loc, dl.superclass, branch])?;
    Ok(LossVars { rpn_objectness, rpn_box, loc: dl.loc, superclass: dl.superclass, branch, total })
}

/// A trained network: configuration, vocabulary, superclass names and weights.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub superclasses: Vec<String>,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, superclasses: Vec<String>, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() || config.head.num_classes != superclasses.len() {
            return Err(Error::Config(format!(
                "model expects |D| = {} and K = {}, got {} and {}",
                config.vocab_size,
                config.head.num_classes,
                vocab.len(),
                superclasses.len()
            )));
        }
        let params = config.init_params(seed)?;
        Ok(Self { config, vocab, superclasses, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_vocabulary, generate_synthetic_corpus, TemplateSet};

    #[test]
    fn toy_model_builds_finite_losses() {
        let ds = generate_synthetic_corpus(2, 1, (64, 64), &TemplateSet::default()).unwrap();
        let vocab = build_vocabulary(&ds.all_captions(), 1);
        for task in [Task::Caption, Task::Retrieval] {
            let cfg = ModelConfig::toy(task, 3, vocab.len());
            let store = cfg.init_params::<f32>(5).unwrap();
            let mut g = Graph::new();
            let trunk = forward_trunk(&mut g, &store, &cfg, &ds.images[0].image).unwrap();
            assert_eq!(g.shape(trunk.feat), &[8, 8, 16]);
            let plan = make_plan(&g, &trunk, &cfg, &ds.images[0], 1.0, &vocab, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let l = build_losses(&mut g, &store, &cfg, &trunk, &plan).unwrap();
            let b = LossBreakdown::read(&g, &l);
            let sum: f64 = b.items().iter().map(|(_, v)| v).sum();
            assert!(b.total.is_finite() && (sum - b.total).abs() < 1e-5);
        }
    }
}
