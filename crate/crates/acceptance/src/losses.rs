//! Closed-form values of the two branch losses.

use got_core::autograd::Graph;
use got_core::captionhead::{caption_logits, loss_caption, CaptionHeadConfig, CaptionMode};
use got_core::error::Result;
use got_core::params::ParamStore;
use got_core::retrievalhead::{logistic_loss, loss_retrieval, RetrievalLabel};
use got_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Checks, Outcome};

/// Mean per-word caption loss of a head whose parameters are all zero, so
/// every step predicts the uniform distribution over `vocab_size` words.
pub fn uniform_caption_loss(mode: CaptionMode, vocab_size: usize, rois: usize) -> Result<f64> {
    let cfg = CaptionHeadConfig { mode, visual_dim: 5, hidden: 4, vocab_size, n_steps: 6 };
    let mut store = ParamStore::<f64>::new();
    cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(vocab_size as u64);
    let mut g = Graph::new();
    let vis: Vec<f64> = (0..rois * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let visual = g.constant(Tensor::from_vec(&[rois, 5], vis)?);
    let toks = |rng: &mut ChaCha8Rng| (0..6).map(|_| (0..rois).map(|_| rng.gen_range(0..vocab_size)).collect()).collect::<Vec<Vec<usize>>>();
    let inputs = toks(&mut rng);
    let targets = toks(&mut rng);
    let logits = caption_logits(&mut g, &store, &cfg, visual, &inputs)?;
    let l = loss_caption(&mut g, &logits, &targets)?;
    Ok(g.value(l).item())
}

/// Caption loss with logits that put all the mass on each target.
pub fn perfect_caption_loss(vocab_size: usize) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..6 {
        let t: Vec<usize> = (0..3).map(|_| rng.gen_range(0..vocab_size)).collect();
        let mut l = Tensor::zeros(&[3, vocab_size]);
        for (r, &k) in t.iter().enumerate() {
            l.data_mut()[r * vocab_size + k] = 1e3;
        }
        logits.push(g.constant(l));
        targets.push(t);
    }
    let l = loss_caption(&mut g, &logits, &targets)?;
    Ok(g.value(l).item())
}

pub fn retrieval_loss(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::from_vec(&[scores.len(), 1], scores.to_vec())?);
    let labels: Vec<RetrievalLabel> = labels.iter().map(|&relevance| RetrievalLabel { relevance }).collect();
    let l = loss_retrieval(&mut g, f, &labels, &vec![true; scores.len()])?;
    Ok(g.value(l).item())
}

pub fn criterion() -> Outcome {
    let mut c = Checks::default();
    let run = |c: &mut Checks, what: &str, r: Result<f64>, want: f64, tol: f64| match r {
        Ok(v) => c.check((v - want).abs() <= tol, format!("{what} = {v}, want {want}")),
        Err(e) => c.check(false, format!("{what}: {e}")),
    };
    let mut worst: f64 = 0.0;
    for d in [2, 17, 866] {
        for mode in [CaptionMode::Ocn1, CaptionMode::Ocn2] {
            let r = uniform_caption_loss(mode, d, 3);
            if let Ok(v) = r {
                worst = worst.max((v - (d as f64).ln()).abs());
            }
            run(&mut c, &format!("uniform caption loss |D|={d} {mode:?}"), r, (d as f64).ln(), 1e-6);
        }
        run(&mut c, &format!("perfect caption loss |D|={d}"), perfect_caption_loss(d), 0.0, 1e-12);
    }
    c.note(format!("caption |ln|D| err| max {worst:.1e}"));
    let ln2 = std::f64::consts::LN_2;
    run(&mut c, "logistic(+1, 0)", Ok(logistic_loss(1.0, 0.0)), ln2, 1e-9);
    run(&mut c, "retrieval loss (+1, 0)", retrieval_loss(&[1], &[0.0]), ln2, 1e-9);
    run(&mut c, "retrieval loss mixed at 0", retrieval_loss(&[1, 0, 0], &[0.0; 3]), ln2, 1e-9);
    run(&mut c, "perfect retrieval loss", retrieval_loss(&[1, 0, 1, 0], &[1e3, -1e3, 1e3, -1e3]), 0.0, 1e-12);
    c.note("retrieval ln 2 and zero-loss identities checked");
    c.finish()
}
