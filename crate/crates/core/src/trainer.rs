//! Momentum SGD over single-image iterations, the flat key=value run config
//! and the training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::autograd::Graph;
use crate::captionhead::CaptionMode;
use crate::checkpoint::save_checkpoint;
use crate::datasets::{build_vocabulary, AnnotatedImage, Dataset, Vocabulary};
use crate::detectnet::{BackboneConfig, ClassificationSet};
use crate::error::{Error, Result};
use crate::model::{build_losses, forward_trunk, make_plan, prepare_image, LossBreakdown, Model, ModelConfig, Task};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Run configuration. Serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub mode: CaptionMode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub n_sample_rois: usize,
    pub pos_iou: f64,
    pub seed: u64,
    /// `full` or `toy`.
    pub width: String,
    /// Overrides the preset's backbone when set.
    pub backbone: Option<String>,
    pub n_steps: usize,
    pub min_count: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` iterations (0 = never).
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub classification_set: ClassificationSet,
    pub retrieval_negatives: bool,
    /// Width overrides for the preset's LSTM units and retrieval layer.
    pub hidden: Option<usize>,
    pub retrieval_fc: Option<usize>,
    /// Uniform init range of LSTM weights; the preset's when unset.
    pub lstm_init: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Caption,
            mode: CaptionMode::Ocn2,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            iterations: 200_000,
            n_sample_rois: 2000,
            pos_iou: 0.5,
            seed: 0,
            width: "full".into(),
            backbone: None,
            n_steps: 6,
            min_count: 2,
            clip_norm: Some(10.0),
            checkpoint_every: 1000,
            lr_decay_every: 0,
            lr_decay: 1.0,
            classification_set: ClassificationSet::All,
            retrieval_negatives: false,
            hidden: None,
            retrieval_fc: None,
            lstm_init: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: toy widths, no clipping, short runs.
    pub fn toy(task: Task) -> Self {
        Self {
            task,
            learning_rate: if task == Task::Retrieval { 0.005 } else { 0.01 },
            iterations: 2000,
            n_sample_rois: 32,
            width: "toy".into(),
            min_count: 1,
            clip_norm: None,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let opt = |v: &str| if v.is_empty() || v == "none" { None } else { Some(v.to_string()) };
        match key {
            "task" => self.task = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "momentum" => self.momentum = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "iterations" => self.iterations = p(key, value)?,
            "n_sample_rois" => self.n_sample_rois = p(key, value)?,
            "pos_iou" => self.pos_iou = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "width" => self.width = value.to_string(),
            "backbone" => self.backbone = opt(value),
            "n_steps" => self.n_steps = p(key, value)?,
            "min_count" => self.min_count = p(key, value)?,
            "clip_norm" => self.clip_norm = opt(value).map(|v| p(key, &v)).transpose()?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "lr_decay_every" => self.lr_decay_every = p(key, value)?,
            "lr_decay" => self.lr_decay = p(key, value)?,
            "classification_set" => {
                self.classification_set = match value {
                    "all" => ClassificationSet::All,
                    "positives_only" => ClassificationSet::PositivesOnly,
                    _ => return Err(Error::Config(format!("bad value `{value}` for `{key}`"))),
                }
            }
            "retrieval_negatives" => self.retrieval_negatives = p(key, value)?,
            "hidden" => self.hidden = opt(value).map(|v| p(key, &v)).transpose()?,
            "retrieval_fc" => self.retrieval_fc = opt(value).map(|v| p(key, &v)).transpose()?,
            "lstm_init" => self.lstm_init = opt(value).map(|v| p(key, &v)).transpose()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut width_seen = false;
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected key = value, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            width_seen |= k == "width" && v == "toy";
            lines.push((k.to_string(), v.to_string()));
        }
        // a toy width starts from the toy defaults, explicit keys still win
        if width_seen {
            cfg = Self::toy(cfg.task);
        }
        for (k, v) in lines {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "none".into());
        fn show<T: ToString>(o: &Option<T>) -> String {
            o.as_ref().map_or("none".into(), |v| v.to_string())
        }
        let mode = match self.mode {
            CaptionMode::Ocn1 => "OCN1",
            CaptionMode::Ocn2 => "OCN2",
        };
        let cls = match self.classification_set {
            ClassificationSet::All => "all",
            ClassificationSet::PositivesOnly => "positives_only",
        };
        [
            format!("task = {}", self.task),
            format!("mode = {mode}"),
            format!("learning_rate = {}", self.learning_rate),
            format!("momentum = {}", self.momentum),
            format!("weight_decay = {}", self.weight_decay),
            format!("iterations = {}", self.iterations),
            format!("n_sample_rois = {}", self.n_sample_rois),
            format!("pos_iou = {}", self.pos_iou),
            format!("seed = {}", self.seed),
            format!("width = {}", self.width),
            format!("backbone = {}", opt(&self.backbone)),
            format!("n_steps = {}", self.n_steps),
            format!("min_count = {}", self.min_count),
            format!("clip_norm = {}", show(&self.clip_norm)),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("lr_decay_every = {}", self.lr_decay_every),
            format!("lr_decay = {}", self.lr_decay),
            format!("classification_set = {cls}"),
            format!("retrieval_negatives = {}", self.retrieval_negatives),
            format!("hidden = {}", show(&self.hidden)),
            format!("retrieval_fc = {}", show(&self.retrieval_fc)),
            format!("lstm_init = {}", show(&self.lstm_init)),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("rates must be non-negative".into()));
        }
        if self.iterations == 0 || self.n_sample_rois == 0 || self.n_steps == 0 || self.min_count == 0 {
            return Err(Error::Config("iterations, n_sample_rois, n_steps and min_count must be at least 1".into()));
        }
        if !(self.pos_iou > 0.0 && self.pos_iou < 1.0) {
            return Err(Error::Config("pos_iou must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The network layout this run trains.
    pub fn model_config(&self, num_classes: usize, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.width, self.task, num_classes, vocab_size)?;
        m.mode = self.mode;
        m.n_steps = self.n_steps;
        m.sampling.n_sample = self.n_sample_rois;
        m.sampling.pos_iou = self.pos_iou;
        m.classification_set = self.classification_set;
        m.retrieval_negatives = self.retrieval_negatives;
        if let Some(h) = self.hidden {
            m.hidden = h;
        }
        if let Some(f) = self.retrieval_fc {
            m.retrieval_fc = f;
        }
        if let Some(s) = self.lstm_init {
            m.lstm_init = s;
        }
        if let Some(name) = &self.backbone {
            m.backbone = BackboneConfig::preset(name)?;
            let stride = m.backbone.stride() as f64;
            let ratio = stride / m.rpn.grid.stride;
            m.rpn.grid.scales.iter_mut().for_each(|s| *s *= ratio);
            m.rpn.grid.stride = stride;
        }
        m.validate()?;
        Ok(m)
    }
}

/// Per-parameter momentum buffers.
#[derive(Clone, Default)]
pub struct MomentumState {
    pub velocity: ParamStore<f32>,
}

impl MomentumState {
    pub fn zeros_like<T: Real>(params: &ParamStore<T>) -> MomentumState {
        let mut velocity = ParamStore::new();
        for (n, t) in params.iter() {
            velocity.insert(n, Tensor::zeros(t.shape()));
        }
        MomentumState { velocity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Sgd {
    /// `v ← μv − η(∇L + λθ)`, `θ ← θ + v`, after optionally rescaling the loss
    /// gradients to the clip norm. Returns the pre-clip global gradient norm.
    pub fn step(&self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, state: &mut MomentumState) -> Result<f64> {
        let norm = grads.values().map(|g| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else { continue };
            if !state.velocity.contains(&name) {
                state.velocity.insert(name.clone(), Tensor::zeros(grad.shape()));
            }
            let v = state.velocity.get_mut(&name).expect("inserted");
            let theta = params.get_mut(&name).expect("listed");
            let (lr, mu, wd, clip) = (self.learning_rate as f32, self.momentum as f32, self.weight_decay as f32, clip as f32);
            for ((t, vel), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vel = mu * *vel - lr * (clip * g + wd * *t);
                *t += *vel;
            }
        }
        Ok(norm)
    }
}

impl From<&TrainConfig> for Sgd {
    fn from(c: &TrainConfig) -> Self {
        Sgd { learning_rate: c.learning_rate, momentum: c.momentum, weight_decay: c.weight_decay, clip_norm: c.clip_norm }
    }
}

/// Loss values and parameter gradients of one image, without updating.
pub fn compute_gradients(
    model: &Model,
    sample: &AnnotatedImage,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<f32>>)> {
    let (image, scale) = prepare_image(&model.config, &sample.image)?;
    let mut g = Graph::new();
    let trunk = forward_trunk(&mut g, &model.params, &model.config, &image)?;
    let plan = make_plan(&g, &trunk, &model.config, sample, scale, &model.vocab, rng)?;
    let losses = build_losses(&mut g, &model.params, &model.config, &trunk, &plan)?;
    let grads = g.backward(losses.total);
    Ok((LossBreakdown::read(&g, &losses), g.param_grads(&grads)))
}

/// One forward/backward pass and momentum update on a single image.
pub fn train_step(
    model: &mut Model,
    state: &mut MomentumState,
    sample: &AnnotatedImage,
    sgd: &Sgd,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<LossBreakdown> {
    let (loss, grads) = compute_gradients(model, sample, rng)?;
    let grad_finite = grads.values().all(|g| g.all_finite());
    if !loss.total.is_finite() || !grad_finite {
        let norms: Vec<String> = grads
            .iter()
            .map(|(n, g)| format!("{n}={:.3e}", (g.sq_norm() as f64).sqrt()))
            .collect();
        return Err(Error::NonFinite { iteration, detail: format!("losses {:?}; grad norms [{}]", loss.items(), norms.join(", ")) });
    }
    let norm = sgd.step(&mut model.params, &grads, state)?;
    debug_assert!(model.params.all_finite(), "parameters became non-finite at iteration {iteration}");
    debug!(iteration, total = loss.total, grad_norm = norm, "step");
    Ok(loss)
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub model: Model,
    pub momentum: MomentumState,
    pub history: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Default)]
pub struct TrainOptions {
    /// Use this vocabulary instead of building one from the dataset.
    pub vocab: Option<Vocabulary>,
    /// Where periodic and final checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after every iteration with `(iteration, losses)`.
    pub progress: Option<Box<dyn FnMut(usize, &LossBreakdown)>>,
}

const LOSS_TAIL: usize = 50;

/// Trains from seeded initial weights over a seeded shuffle of the images.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    dataset.validate()?;
    let vocab = match opts.vocab.take() {
        Some(v) => {
            check_coverage(dataset, &v)?;
            v
        }
        None => build_vocabulary(&dataset.all_captions(), cfg.min_count),
    };
    if dataset.images.iter().all(|i| i.objects.is_empty()) {
        return Err(Error::DatasetMismatch("no image has annotated objects".into()));
    }
    let mcfg = cfg.model_config(dataset.num_superclasses(), vocab.len())?;
    let mut model = Model::new(mcfg, vocab, dataset.superclasses.clone(), cfg.seed)?;
    let mut momentum = MomentumState::zeros_like(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let usable: Vec<usize> = (0..dataset.images.len()).filter(|&i| !dataset.images[i].objects.is_empty()).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut sgd = Sgd::from(cfg);
    info!(task = %cfg.task, iterations = cfg.iterations, images = usable.len(), params = model.params.num_values(), "training");
    for it in 1..=cfg.iterations {
        if order.is_empty() {
            order = usable.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled");
        if cfg.lr_decay_every > 0 && it > 1 && (it - 1) % cfg.lr_decay_every == 0 {
            sgd.learning_rate *= cfg.lr_decay;
        }
        let loss = train_step(&mut model, &mut momentum, &dataset.images[idx], &sgd, &mut rng, it)?;
        if let Some(cb) = opts.progress.as_mut() {
            cb(it, &loss);
        }
        history.push(loss);
        let periodic = cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0;
        if let Some(dir) = &opts.checkpoint_dir {
            if periodic || it == cfg.iterations {
                let path = dir.join(format!("{}-{it:07}.ckpt", cfg.task));
                let tail = &history[history.len().saturating_sub(LOSS_TAIL)..];
                save_checkpoint(&path, &model, Some(&momentum.velocity), cfg, it, tail)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { model, momentum, history, checkpoints })
}

/// Fails when most caption words of `dataset` are unknown to `vocab`.
fn check_coverage(dataset: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let (mut known, mut total) = (0usize, 0usize);
    for c in dataset.all_captions() {
        for w in &c {
            total += 1;
            known += usize::from(vocab.index(w).is_some());
        }
    }
    if total > 0 && 2 * known < total {
        return Err(Error::DatasetMismatch(format!("only {known} of {total} caption words are in the vocabulary")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::toy(Task::Retrieval);
        c.mode = CaptionMode::Ocn1;
        c.clip_norm = Some(5.0);
        c.backbone = Some("toy-8ch-s8".into());
        let back = TrainConfig::parse(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(TrainConfig::parse("iterations 5"), Err(Error::Parse { line: 1, .. })));
        assert!(TrainConfig::parse("nonsense = 1").is_err());
        assert!(TrainConfig::parse("iterations = 0").is_err());
        assert_eq!(TrainConfig::default().iterations, 200_000);
    }

    #[test]
    fn momentum_two_steps_on_quadratic() {
        // L = θ²/2, ∇L = θ. θ0 = 1, η = 0.1, μ = 0.9, no decay.
        // v1 = −0.1, θ1 = 0.9; v2 = −0.09 − 0.09 = −0.18, θ2 = 0.72
        let sgd = Sgd { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0, clip_norm: None };
        let mut p = ParamStore::new();
        p.insert("t", Tensor::vector(vec![1.0f32]));
        let mut st = MomentumState::zeros_like(&p);
        for _ in 0..2 {
            let theta = p.get("t").unwrap().clone();
            let grads = BTreeMap::from([("t".to_string(), theta)]);
            sgd.step(&mut p, &grads, &mut st).unwrap();
        }
        assert!((p.get("t").unwrap().data()[0] - 0.72).abs() < 1e-6);
    }

    #[test]
    fn decay_only_scales_parameters() {
        let sgd = Sgd { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.5, clip_norm: None };
        let mut p = ParamStore::new();
        p.insert("t", Tensor::vector(vec![2.0f32, -4.0]));
        let mut st = MomentumState::zeros_like(&p);
        let grads = BTreeMap::from([("t".to_string(), Tensor::zeros(&[2]))]);
        sgd.step(&mut p, &grads, &mut st).unwrap();
        assert_eq!(p.get("t").unwrap().data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }
}
