//! 64-bit finite-difference checks. Every case reduces its outputs to a
//! scalar `Σ r ⊙ out` with fixed random `r`, and keeps its inputs in the
//! parameter store so they are checked too.

use std::sync::Arc;

use got_core::autograd::{Graph, Var};
use got_core::captionhead::reduce_roi_feature;
use got_core::datasets::{build_vocabulary, generate_synthetic_corpus, SceneLayout, TemplateSet};
use got_core::detectnet::{backbone_forward, detection_head, BackboneConfig, HeadConfig};
use got_core::error::Result;
use got_core::geometry::{BBox, RoiTaps};
use got_core::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use got_core::model::{build_losses, BranchPlan, forward_trunk, make_plan, ModelConfig, Task};
use got_core::nn::Dense;
use got_core::params::{init_tensor, Init, ParamStore};
use got_core::seqcore::LstmLayer;
use got_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Checks, Outcome};

pub const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    init_tensor(rng, shape, 1, Init::Uniform(1.0))
}

/// `Σ r ⊙ v` with `r` drawn from a seed tied to the output's position.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = random(&mut ChaCha8Rng::seed_from_u64(seed), g.shape(v));
    let r = g.constant(r);
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

fn probe_all(g: &mut Graph<f64>, vs: &[Var]) -> Result<Var> {
    let parts = vs.iter().enumerate().map(|(i, &v)| probe(g, v, 1000 + i as u64)).collect::<Result<Vec<_>>>()?;
    g.add_n(&parts)
}

fn opts() -> GradCheckOptions {
    GradCheckOptions { per_tensor: 16, ..Default::default() }
}

pub fn lstm_step_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let layer = LstmLayer::new("lstm", 3, 4);
    let mut s = ParamStore::new();
    layer.init(&mut s, &mut rng, 0.5, 1.0);
    s.insert("x", random(&mut rng, &[2, 3]));
    s.insert("h0", random(&mut rng, &[2, 4]));
    s.insert("c0", random(&mut rng, &[2, 4]));
    check_gradients(&s, &opts(), |g, s| {
        let x = g.param(s, "x")?;
        let h = g.param(s, "h0")?;
        let c = g.param(s, "c0")?;
        let next = layer.step(g, s, x, got_core::seqcore::LstmVars { h, c })?;
        probe_all(g, &[next.h, next.c])
    })
}

pub fn lstm_unroll_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = LstmLayer::new("lstm", 3, 4);
    let mut s = ParamStore::new();
    layer.init(&mut s, &mut rng, 0.5, 1.0);
    for t in 0..5 {
        s.insert(format!("x{t}"), random(&mut rng, &[1, 3]));
    }
    check_gradients(&s, &opts(), |g, s| {
        let xs = (0..5).map(|t| g.param(s, &format!("x{t}"))).collect::<Result<Vec<_>>>()?;
        let states = layer.unroll(g, s, &xs, None)?;
        let hs: Vec<Var> = states.iter().map(|st| st.h).collect();
        probe_all(g, &hs)
    })
}

pub fn predict_word_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let proj = Dense::new("proj", 4, 9);
    let mut s = ParamStore::new();
    proj.init(&mut s, &mut rng, Init::Uniform(0.5));
    s.insert("z", random(&mut rng, &[2, 4]));
    check_gradients(&s, &opts(), |g, s| {
        let z = g.param(s, "z")?;
        let logits = proj.forward(g, s, z)?;
        let p = g.softmax(logits);
        probe(g, p, 1)
    })
}

pub fn roi_align_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut s = ParamStore::new();
    s.insert("feature", random(&mut rng, &[6, 7, 2]));
    let rois = [BBox::new(1.3, 2.1, 30.7, 40.2)?, BBox::new(0.0, 0.0, 55.9, 47.5)?, BBox::new(20.2, 8.8, 29.1, 19.3)?];
    let taps = Arc::new(RoiTaps::build(&rois, 6, 7, 1.0 / 8.0, 3)?);
    check_gradients(&s, &opts(), |g, s| {
        let x = g.param(s, "feature")?;
        let y = g.roi_align(x, taps.clone())?;
        probe(g, y, 2)
    })
}

pub fn backbone_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = BackboneConfig::preset("toy-8ch-s8")?;
    let mut s = ParamStore::new();
    cfg.init(&mut s, &mut rng);
    s.insert("image", random(&mut rng, &[16, 16, 3]));
    check_gradients(&s, &opts(), |g, s| {
        let x = g.param(s, "image")?;
        let f = backbone_forward(g, s, &cfg, x)?;
        probe(g, f, 3)
    })
}

pub fn detection_head_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = HeadConfig { pooled: 2, fc: vec![8, 8], num_classes: 3 };
    let mut s = ParamStore::new();
    cfg.init(&mut s, &mut rng, 12);
    // larger output layers than the defaults, so their gradients are not tiny
    for name in ["head.cls.w", "head.bbox.w"] {
        let shape = s.require(name)?.shape().to_vec();
        s.insert(name, random(&mut rng, &shape));
    }
    s.insert("pooled", random(&mut rng, &[3, 12]));
    check_gradients(&s, &opts(), |g, s| {
        let x = g.param(s, "pooled")?;
        let out = detection_head(g, s, &cfg, x)?;
        probe_all(g, &[out.cls_logits, out.bbox])
    })
}

/// The whole training loss of one synthetic image with the sampled anchors,
/// RoIs and targets held fixed.
pub fn full_branch_case(task: Task) -> Result<GradCheckReport> {
    let layout = if task == Task::Retrieval { SceneLayout::SameShapePairs } else { SceneLayout::Mixed };
    let ts = TemplateSet::new(&["a {color} {shape}"], layout);
    let ds = generate_synthetic_corpus(1, 21, (32, 32), &ts)?;
    let vocab = build_vocabulary(&ds.all_captions(), 1);
    let mut cfg = ModelConfig::toy(task, ds.num_superclasses(), vocab.len());
    cfg.sampling.n_sample = 8;
    cfg.lstm_init = 0.5;
    let store = cfg.init_params::<f64>(3)?;
    let image = &ds.images[0];
    let plan = {
        let mut g = Graph::new();
        let trunk = forward_trunk(&mut g, &store, &cfg, &image.image)?;
        make_plan(&g, &trunk, &cfg, image, 1.0, &vocab, &mut ChaCha8Rng::seed_from_u64(4))?
    };
    let rows = match &plan.branch {
        BranchPlan::Caption { rows, .. } | BranchPlan::Retrieval { rows, .. } => rows.len(),
    };
    if rows == 0 {
        return Err(got_core::Error::InvalidArgument("plan has no branch rows".into()));
    }
    check_gradients(&store, &GradCheckOptions { per_tensor: 6, ..Default::default() }, |g, s| {
        let trunk = forward_trunk(g, s, &cfg, &image.image)?;
        Ok(build_losses(g, s, &cfg, &trunk, &plan)?.total)
    })
}

/// The FC/ReLU reduction shared by both branches.
pub fn reduction_case() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let widths = [6, 5];
    let mut s = ParamStore::new();
    for l in got_core::captionhead::reduction_layers(10, &widths) {
        l.init(&mut s, &mut rng, Init::He);
    }
    s.insert("pooled", random(&mut rng, &[3, 10]));
    check_gradients(&s, &opts(), |g, s| {
        let x = g.param(s, "pooled")?;
        let y = reduce_roi_feature(g, s, &widths, x)?;
        probe(g, y, 4)
    })
}

pub type Case = (&'static str, fn() -> Result<GradCheckReport>);

pub const CASES: [Case; 9] = [
    ("lstm_step", lstm_step_case),
    ("lstm_unroll", lstm_unroll_case),
    ("predict_word", predict_word_case),
    ("roi_align", roi_align_case),
    ("backbone_forward", backbone_case),
    ("detection_head", detection_head_case),
    ("roi_reduction", reduction_case),
    ("caption_branch", || full_branch_case(Task::Caption)),
    ("retrieval_branch", || full_branch_case(Task::Retrieval)),
];

pub fn criterion() -> Outcome {
    let mut c = Checks::default();
    let mut worst: f64 = 0.0;
    for (name, case) in CASES {
        match case() {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                c.check(r.max_rel_err < TOLERANCE && r.checked > 0, format!(
                    "{name} {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
                    r.max_rel_err, r.worst, r.analytic, r.numeric
                ));
            }
            Err(e) => c.check(false, format!("{name}: {e}")),
        }
    }
    c.note(format!("{} cases, max rel err {worst:.2e}", CASES.len()));
    c.finish()
}
