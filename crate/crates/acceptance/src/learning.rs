//! Criteria that train networks: single-image overfit, retrieval on
//! same-shape pairs and the OCN1/OCN2 ordering.

use got_core::captionhead::CaptionMode;
use got_core::datasets::{generate_synthetic_corpus, Dataset, SceneLayout, Splits, TemplateSet};
use got_core::error::Result;
use got_core::geometry::iou;
use got_core::infer_eval::{detect_and_caption, evaluate_captioning, evaluate_retrieval, MetricReport};
use got_core::model::Task;
use got_core::par::ExecMode;
use got_core::trainer::{train, TrainConfig, TrainOptions};

use crate::{Checks, Outcome};

pub const OVERFIT_ITERATIONS: usize = 2000;
pub const OVERFIT_LOSS: f64 = 0.05;

pub const RETRIEVAL_SCENES: usize = 400;
pub const RETRIEVAL_ITERATIONS: usize = 20_000;
pub const RETRIEVAL_TARGET: f64 = 0.80;

pub const ORDERING_SCENES: usize = 200;
pub const ORDERING_ITERATIONS: usize = 6000;

fn split(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let s = Splits::random(ds, 0.8, seed);
    let get = |name: &str| s.get(name).map(|ids| ds.subset(ids)).ok_or_else(|| got_core::Error::InvalidArgument(format!("no {name} split")));
    Ok((get("train")?, get("test")?))
}

pub struct Overfit {
    pub final_total: f64,
    pub caption: Vec<String>,
    pub decoded: Option<Vec<String>>,
}

pub fn overfit(seed: u64) -> Result<Overfit> {
    let ts = TemplateSet::new(&["a {size} {color} {shape}"], SceneLayout::Single);
    let ds = generate_synthetic_corpus(1, seed, (64, 64), &ts)?;
    let mut cfg = TrainConfig::toy(Task::Caption);
    cfg.iterations = OVERFIT_ITERATIONS;
    cfg.seed = seed;
    let out = train(&ds, &cfg, TrainOptions::default())?;
    let sample = &ds.images[0];
    let gt = &sample.objects[0];
    let det = detect_and_caption(&out.model, &sample.image)?;
    let decoded = det
        .objects
        .iter()
        .max_by(|a, b| iou(&a.bbox, &gt.bbox).total_cmp(&iou(&b.bbox, &gt.bbox)))
        .filter(|o| iou(&o.bbox, &gt.bbox) >= 0.5)
        .map(|o| o.caption.clone());
    Ok(Overfit { final_total: out.history.last().map_or(f64::NAN, |l| l.total), caption: gt.captions[0].clone(), decoded })
}

pub fn overfit_criterion() -> Outcome {
    let mut c = Checks::default();
    match overfit(0) {
        Ok(o) => {
            c.note(format!("final total loss {:.4}", o.final_total));
            c.check(o.final_total < OVERFIT_LOSS, format!("loss {:.4} ≥ {OVERFIT_LOSS}", o.final_total));
            let shown = o.decoded.as_ref().map_or("<no box on the object>".to_string(), |d| d.join(" "));
            c.note(format!("decoded \"{shown}\""));
            c.check(o.decoded.as_ref() == Some(&o.caption), format!("wanted \"{}\"", o.caption.join(" ")));
        }
        Err(e) => c.check(false, e.to_string()),
    }
    c.finish()
}

pub fn retrieval_run(seed: u64) -> Result<MetricReport> {
    let ts = TemplateSet::new(&["a {color} {shape}"], SceneLayout::SameShapePairs);
    let ds = generate_synthetic_corpus(RETRIEVAL_SCENES, 7, (64, 64), &ts)?;
    let (train_ds, test_ds) = split(&ds, 7)?;
    let mut cfg = TrainConfig::toy(Task::Retrieval);
    cfg.iterations = RETRIEVAL_ITERATIONS;
    cfg.seed = seed;
    let out = train(&train_ds, &cfg, TrainOptions::default())?;
    evaluate_retrieval(&out.model, &test_ds, ExecMode::Parallel)
}

pub fn retrieval_criterion() -> Outcome {
    match retrieval_run(0) {
        Ok(r) => {
            let r1 = r.r_at_1.unwrap_or(0.0);
            Outcome::new(
                r1 >= RETRIEVAL_TARGET,
                format!("held-out R@1 {r1:.4} over {} queries (target {RETRIEVAL_TARGET}, chance 0.5)", r.entries),
            )
        }
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

/// One four-word template: with a second, shorter template greedy decoding
/// settles on whichever length wins the coin flip and Bleu_4 can collapse to 0.
pub fn ordering_templates() -> TemplateSet {
    TemplateSet::new(&["a {size} {color} {shape}"], SceneLayout::Mixed)
}

pub fn caption_run(mode: CaptionMode) -> Result<MetricReport> {
    let ds = generate_synthetic_corpus(ORDERING_SCENES, 5, (64, 64), &ordering_templates())?;
    let (train_ds, test_ds) = split(&ds, 5)?;
    let mut cfg = TrainConfig::toy(Task::Caption);
    cfg.iterations = ORDERING_ITERATIONS;
    cfg.mode = mode;
    let out = train(&train_ds, &cfg, TrainOptions::default())?;
    evaluate_captioning(&out.model, &test_ds, ExecMode::Parallel)
}

pub fn ordering_criterion() -> Outcome {
    match (caption_run(CaptionMode::Ocn1), caption_run(CaptionMode::Ocn2)) {
        (Ok(a), Ok(b)) => {
            let (b1, b2) = (a.bleu_4.unwrap_or(0.0), b.bleu_4.unwrap_or(0.0));
            Outcome::new(b2 > b1, format!("Bleu_4 OCN1 {b1:.4} vs OCN2 {b2:.4}"))
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.to_string()),
    }
}
