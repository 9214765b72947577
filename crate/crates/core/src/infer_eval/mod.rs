//! Inference pipelines (detect + caption, retrieve) and corpus evaluation.

pub mod metrics;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::captionhead::{greedy_decode_batch, reduce_roi_feature};
use crate::datasets::{decode_caption, encode_caption, Dataset, Image};
use crate::detectnet::{decode_proposals, detection_head, select_proposals};
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, iou, nms, BBox, Deltas, RoiTaps};
use crate::model::{forward_trunk, prepare_image, Model, Task};
use crate::par::{self, ExecMode};
use crate::retrievalhead::{encode_query, retrieval_scores};
use crate::tensor::{sigmoid, softmax_rows, Tensor};

pub use metrics::{bleu_n, bleu_stats, cider, cider_scores, r_at_1, rouge_l, BleuStats};

/// IoU at which a kept box counts as matching a ground-truth object.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    /// Original-image pixels.
    pub bbox: BBox,
    pub superclass_id: usize,
    pub score: f64,
    pub caption: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub objects: Vec<DetectedObject>,
    /// True when nothing cleared the score threshold and the best box was kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub superclass_id: usize,
    pub detection_score: f64,
    /// Raw score `f`.
    pub raw: f64,
    /// `σ(f)`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chosen: usize,
    pub bbox: BBox,
    pub score: f64,
    pub superclass_id: usize,
    pub candidates: Vec<Candidate>,
    /// Every query word mapped to UNK.
    pub all_unknown: bool,
}

/// Refined, class-agnostically suppressed detections of one image, in the
/// network frame, with the rows of the pooled features that produced them.
struct Detections {
    boxes: Vec<BBox>,
    classes: Vec<usize>,
    scores: Vec<f64>,
    /// Pooled RoI features `[R, P·P·C]` of every proposal.
    pooled: Tensor<f32>,
    /// Index into `pooled` per kept detection.
    rows: Vec<usize>,
    scale: f64,
    width: f64,
    height: f64,
}

fn detect(model: &Model, image: &Image) -> Result<Detections> {
    let cfg = &model.config;
    let (img, scale) = prepare_image(cfg, image)?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut g = Graph::new();
    let trunk = forward_trunk(&mut g, &model.params, cfg, &img)?;
    let props = decode_proposals(&g, &trunk.rpn, trunk.height, trunk.width);
    let mut rois: Vec<BBox> =
        select_proposals(&props, cfg.rpn.pre_nms_top_n, cfg.rpn.nms_iou, cfg.rpn.test_post_nms_top_n).into_iter().map(|p| p.bbox).collect();
    if rois.is_empty() {
        rois.push(BBox::new(0.0, 0.0, w, h)?);
    }
    let fs = g.shape(trunk.feat).to_vec();
    let taps = std::sync::Arc::new(RoiTaps::build(&rois, fs[0], fs[1], cfg.spatial_scale(), cfg.head.pooled)?);
    let pooled = g.roi_align(trunk.feat, taps)?;
    let det = detection_head(&mut g, &model.params, &cfg.head, pooled)?;
    let k1 = cfg.head.num_classes + 1;
    let probs = softmax_rows(g.value(det.cls_logits).data(), k1);
    let deltas = g.value(det.bbox).data();
    let mut boxes = Vec::with_capacity(rois.len());
    let mut classes = Vec::with_capacity(rois.len());
    let mut scores = Vec::with_capacity(rois.len());
    for (i, roi) in rois.iter().enumerate() {
        let row = &probs[i * k1..(i + 1) * k1];
        let (c, p) = (1..k1).fold((1, f32::NEG_INFINITY), |acc, j| if row[j] > acc.1 { (j, row[j]) } else { acc });
        let d: Vec<f64> = deltas[i * 4 * k1 + 4 * c..i * 4 * k1 + 4 * c + 4].iter().map(|&v| v as f64).collect();
        let refined = decode_deltas(roi, &Deltas::from_slice(&d).clamped(crate::detectnet::MAX_LOG_DELTA)).clip(w, h).unwrap_or(*roi);
        boxes.push(refined);
        classes.push(c - 1);
        scores.push(p as f64);
    }
    let keep = nms(&boxes, &scores, cfg.nms_iou);
    Ok(Detections {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        classes: keep.iter().map(|&i| classes[i]).collect(),
        scores: keep.iter().map(|&i| scores[i]).collect(),
        pooled: g.value(pooled).clone(),
        rows: keep,
        scale,
        width: w,
        height: h,
    })
}

fn visual_features(model: &Model, pooled: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = g.constant(pooled.clone());
    let sel = g.gather_rows(p, rows)?;
    let v = reduce_roi_feature(&mut g, &model.params, &model.config.reduce, sel)?;
    Ok(g.value(v).clone())
}

fn to_original(b: &BBox, scale: f64, w: f64, h: f64) -> BBox {
    if scale == 1.0 {
        return *b;
    }
    b.scaled(1.0 / scale).clip(w / scale, h / scale).unwrap_or_else(|| b.scaled(1.0 / scale))
}

fn require_task(model: &Model, task: Task) -> Result<()> {
    if model.config.task != task {
        return Err(Error::TaskMismatch { found: model.config.task.to_string(), expected: task.to_string() });
    }
    if model.params.is_empty() {
        return Err(Error::MissingParam("model has no parameters".into()));
    }
    Ok(())
}

/// Proposals → detection head → NMS → boxes scoring above the threshold
/// (or the single best box), each captioned greedily from its RoI feature.
pub fn detect_and_caption(model: &Model, image: &Image) -> Result<DetectionResult> {
    require_task(model, Task::Caption)?;
    let d = detect(model, image)?;
    let mut kept: Vec<usize> = (0..d.boxes.len()).filter(|&i| d.scores[i] > model.config.score_threshold).collect();
    let fallback = kept.is_empty();
    if fallback {
        // nms returns boxes in descending score order
        kept.push(0);
    }
    let rows: Vec<usize> = kept.iter().map(|&i| d.rows[i]).collect();
    let visual = visual_features(model, &d.pooled, &rows)?;
    let caps = greedy_decode_batch(&model.params, &model.config.caption_head(), &visual, model.vocab.eoc_index(), model.config.n_steps)?;
    let objects = kept
        .iter()
        .zip(caps)
        .map(|(&i, c)| DetectedObject {
            bbox: to_original(&d.boxes[i], d.scale, d.width, d.height),
            superclass_id: d.classes[i],
            score: d.scores[i],
            caption: decode_caption(&c.tokens, &model.vocab),
        })
        .collect();
    Ok(DetectionResult { objects, fallback })
}

/// Scores every post-NMS candidate against the query and returns the
/// argmax, lower candidate index on ties.
pub fn retrieve(model: &Model, image: &Image, query: &[String]) -> Result<RetrievalResult> {
    require_task(model, Task::Retrieval)?;
    if query.is_empty() {
        return Err(Error::InvalidArgument("empty query".into()));
    }
    let cfg = &model.config;
    let tokens = encode_caption(query, &model.vocab, cfg.n_steps).token_ids;
    let all_unknown = query.iter().all(|w| model.vocab.index(w).is_none());
    let d = detect(model, image)?;
    let mut rows: Vec<usize> = (0..d.boxes.len()).filter(|&i| d.scores[i] >= cfg.retrieval_min_score).collect();
    if rows.is_empty() {
        rows.push(0);
    }
    let visual = visual_features(model, &d.pooled, &rows.iter().map(|&i| d.rows[i]).collect::<Vec<_>>())?;
    let head = cfg.retrieval_head();
    let mut g = Graph::new();
    let v = g.constant(visual);
    let q = encode_query(&mut g, &model.params, &head, &tokens)?;
    let f = retrieval_scores(&mut g, &model.params, &head, v, q)?;
    let raw: Vec<f64> = g.value(f).data().iter().map(|&x| x as f64).collect();
    let candidates: Vec<Candidate> = rows
        .iter()
        .zip(&raw)
        .map(|(&i, &r)| Candidate {
            bbox: to_original(&d.boxes[i], d.scale, d.width, d.height),
            superclass_id: d.classes[i],
            detection_score: d.scores[i],
            raw: r,
            score: sigmoid(r),
        })
        .collect();
    let chosen = argmax_first(&raw);
    let c = candidates[chosen];
    Ok(RetrievalResult { chosen, bbox: c.bbox, score: c.score, superclass_id: c.superclass_id, candidates, all_unknown })
}

/// Index of the largest value, the first one on ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Table-I/II style report. Caption metrics are absent for retrieval runs and
/// R@1 for caption runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "Bleu_1", skip_serializing_if = "Option::is_none", default)]
    pub bleu_1: Option<f64>,
    #[serde(rename = "Bleu_2", skip_serializing_if = "Option::is_none", default)]
    pub bleu_2: Option<f64>,
    #[serde(rename = "Bleu_3", skip_serializing_if = "Option::is_none", default)]
    pub bleu_3: Option<f64>,
    #[serde(rename = "Bleu_4", skip_serializing_if = "Option::is_none", default)]
    pub bleu_4: Option<f64>,
    #[serde(rename = "ROUGE_L", skip_serializing_if = "Option::is_none", default)]
    pub rouge_l: Option<f64>,
    #[serde(rename = "CIDEr", skip_serializing_if = "Option::is_none", default)]
    pub cider: Option<f64>,
    #[serde(rename = "R@1", skip_serializing_if = "Option::is_none", default)]
    pub r_at_1: Option<f64>,
    pub images: usize,
    /// Scored entries: kept boxes for captioning, queries for retrieval.
    pub entries: usize,
    pub matched: usize,
    pub match_rate: f64,
}

impl MetricReport {
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        [
            ("Bleu_1", self.bleu_1),
            ("Bleu_2", self.bleu_2),
            ("Bleu_3", self.bleu_3),
            ("Bleu_4", self.bleu_4),
            ("ROUGE_L", self.rouge_l),
            ("CIDEr", self.cider),
            ("R@1", self.r_at_1),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.columns();
        let head: Vec<String> = cols.iter().map(|(k, _)| format!("{k:>8}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{v:>8.4}")).collect();
        writeln!(f, "{}", head.join(" "))?;
        writeln!(f, "{}", vals.join(" "))?;
        write!(f, "images {}  entries {}  matched {}  match rate {:.4}", self.images, self.entries, self.matched, self.match_rate)
    }
}

/// One scored caption: the generated words and the references it is judged
/// against (empty when the box matched nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEntry {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Pairs each kept box with its best-IoU ground-truth object at IoU ≥ 0.5.
pub fn caption_entries(result: &DetectionResult, objects: &[crate::datasets::AnnotatedObject]) -> Vec<CaptionEntry> {
    result
        .objects
        .iter()
        .map(|o| {
            let best = objects
                .iter()
                .map(|g| iou(&o.bbox, &g.bbox))
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (j, u)| match acc {
                    Some((_, b)) if b >= u => acc,
                    _ => Some((j, u)),
                });
            let references = match best {
                Some((j, u)) if u >= MATCH_IOU => objects[j].captions.clone(),
                _ => Vec::new(),
            };
            CaptionEntry { candidate: o.caption.clone(), references }
        })
        .collect()
}

pub fn caption_report(entries: &[CaptionEntry], images: usize) -> Result<MetricReport> {
    let cands: Vec<Vec<String>> = entries.iter().map(|e| e.candidate.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = entries.iter().map(|e| e.references.clone()).collect();
    let b = bleu_stats(&cands, &refs)?;
    let matched = entries.iter().filter(|e| !e.references.is_empty()).count();
    Ok(MetricReport {
        bleu_1: Some(b.bleu(1)),
        bleu_2: Some(b.bleu(2)),
        bleu_3: Some(b.bleu(3)),
        bleu_4: Some(b.bleu(4)),
        rouge_l: Some(rouge_l(&cands, &refs)?),
        cider: Some(cider(&cands, &refs)?),
        r_at_1: None,
        images,
        entries: entries.len(),
        matched,
        match_rate: matched as f64 / entries.len() as f64,
    })
}

/// Runs detect_and_caption over every image (fanned out with `mode`) and
/// scores the kept boxes.
pub fn evaluate_captioning(model: &Model, dataset: &Dataset, mode: ExecMode) -> Result<MetricReport> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_image = par::map(mode, &dataset.images, |img| {
        detect_and_caption(model, &img.image).map(|r| caption_entries(&r, &img.objects))
    });
    let mut entries = Vec::new();
    for r in per_image {
        entries.extend(r?);
    }
    caption_report(&entries, dataset.images.len())
}

/// One retrieval query per ground-truth caption; R@1 over all of them.
pub fn evaluate_retrieval(model: &Model, dataset: &Dataset, mode: ExecMode) -> Result<MetricReport> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_image = par::map(mode, &dataset.images, |img| -> Result<Vec<(BBox, BBox)>> {
        let mut out = Vec::new();
        for o in &img.objects {
            for c in &o.captions {
                out.push((retrieve(model, &img.image, c)?.bbox, o.bbox));
            }
        }
        Ok(out)
    });
    let mut pairs = Vec::new();
    for r in per_image {
        pairs.extend(r?);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = pairs.iter().filter(|(c, g)| iou(c, g) >= MATCH_IOU).count();
    Ok(MetricReport {
        r_at_1: Some(r_at_1(&pairs)?),
        images: dataset.images.len(),
        entries: pairs.len(),
        matched: hits,
        match_rate: hits as f64 / pairs.len() as f64,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_vocabulary, generate_synthetic_corpus, TemplateSet};
    use crate::model::ModelConfig;

    fn untrained(task: Task) -> (Model, Dataset) {
        let ds = generate_synthetic_corpus(2, 3, (64, 64), &TemplateSet::default()).unwrap();
        let vocab = build_vocabulary(&ds.all_captions(), 1);
        let cfg = ModelConfig::toy(task, 3, vocab.len());
        (Model::new(cfg, vocab, ds.superclasses.clone(), 1).unwrap(), ds)
    }

    #[test]
    fn untrained_detector_falls_back_to_one_box() {
        let (m, ds) = untrained(Task::Caption);
        let r = detect_and_caption(&m, &ds.images[0].image).unwrap();
        assert!(!r.objects.is_empty());
        for o in &r.objects {
            assert!(o.bbox.is_inside(64.0, 64.0));
            assert!((0.0..=1.0).contains(&o.score));
            assert!(o.caption.len() <= m.config.n_steps);
        }
        assert!(retrieve(&m, &ds.images[0].image, &["a".into()]).is_err());
    }

    #[test]
    fn retrieval_is_deterministic() {
        let (m, ds) = untrained(Task::Retrieval);
        let q: Vec<String> = ds.images[0].objects[0].captions[0].clone();
        let a = retrieve(&m, &ds.images[0].image, &q).unwrap();
        let b = retrieve(&m, &ds.images[0].image, &q).unwrap();
        assert_eq!(a, b);
        assert!(!a.all_unknown);
        assert_eq!(a.chosen, argmax_first(&a.candidates.iter().map(|c| c.raw).collect::<Vec<_>>()));
        assert!(retrieve(&m, &ds.images[0].image, &[]).is_err());
        assert!(retrieve(&m, &ds.images[0].image, &["zebra".into()]).unwrap().all_unknown);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_first(&[5.0]), 0);
    }

    #[test]
    fn report_json_keys() {
        let e = vec![CaptionEntry { candidate: vec!["a".into(), "b".into()], references: vec![vec!["a".into(), "b".into()]] }];
        let r = caption_report(&e, 1).unwrap();
        let j: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["Bleu_1", "Bleu_2", "ROUGE_L", "CIDEr"] {
            assert!(j.get(k).is_some(), "{k}");
        }
        assert!(j.get("R@1").is_none());
        assert!(r.to_string().contains("ROUGE_L"));
    }
}
