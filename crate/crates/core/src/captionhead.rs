//! Caption branch: RoI feature reduction, the two-LSTM word generator and the
//! single-LSTM baseline that only sees the visual vector at the first step.
//!
//! Training minimizes the negative log-likelihood of each target word. The
//! per-word term is `−ln P(target | z_t)`; summing raw probabilities instead
//! would not give a loss that decreases as predictions improve.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datasets::TokenizedCaption;
use crate::error::{shape_err, Error, Result};
use crate::nn::Dense;
use crate::params::{Init, ParamStore};
use crate::seqcore::{one_hot_rows, LstmLayer, LstmVars};
use crate::tensor::{softmax_rows, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionMode {
    /// Visual vector at the first step only, one LSTM.
    #[serde(rename = "OCN1")]
    Ocn1,
    /// LSTM over the cloned visual vector feeding a word LSTM at every step.
    #[serde(rename = "OCN2")]
    Ocn2,
}

impl std::str::FromStr for CaptionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "OCN1" => Ok(CaptionMode::Ocn1),
            "OCN2" => Ok(CaptionMode::Ocn2),
            _ => Err(Error::Config(format!("unknown caption mode `{s}`"))),
        }
    }
}

/// Flatten → FC/ReLU stack shared by the caption and retrieval branches.
pub fn reduction_layers(in_dim: usize, widths: &[usize]) -> Vec<Dense> {
    let mut d = in_dim;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let l = Dense::new(format!("reduce.fc{i}"), d, w);
            d = w;
            l
        })
        .collect()
}

/// `pooled [R, P·P·C]` → `[R, widths.last()]`.
pub fn reduce_roi_feature<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, widths: &[usize], pooled: Var) -> Result<Var> {
    let in_dim = g.value(pooled).rows_cols().1;
    let mut x = pooled;
    for l in reduction_layers(in_dim, widths) {
        let y = l.forward(g, store, x)?;
        x = g.relu(y);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionHeadConfig {
    pub mode: CaptionMode,
    pub visual_dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub n_steps: usize,
}

impl CaptionHeadConfig {
    pub fn lstm_roi(&self) -> LstmLayer {
        LstmLayer::new("cap.lstm_roi", self.visual_dim, self.hidden)
    }

    pub fn lstm_word(&self) -> LstmLayer {
        match self.mode {
            CaptionMode::Ocn2 => LstmLayer::new("cap.lstm_word", self.hidden + self.vocab_size, self.hidden),
            CaptionMode::Ocn1 => LstmLayer::new("cap.lstm", self.visual_dim + self.vocab_size, self.hidden),
        }
    }

    pub fn projection(&self) -> Dense {
        Dense::new("cap.proj", self.hidden, self.vocab_size)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, lstm_scale: f64, forget_bias: f64) {
        if self.mode == CaptionMode::Ocn2 {
            self.lstm_roi().init(store, rng, lstm_scale, forget_bias);
        }
        self.lstm_word().init(store, rng, lstm_scale, forget_bias);
        self.projection().init(store, rng, Init::Uniform(lstm_scale));
    }
}

/// Teacher-forcing inputs for a caption: the start symbol (EOC) followed by
/// all but the last token.
pub fn teacher_inputs(caption: &TokenizedCaption, eoc: usize) -> Vec<usize> {
    std::iter::once(eoc).chain(caption.token_ids.iter().copied()).take(caption.token_ids.len()).collect()
}

/// Per-step word logits for a batch of RoIs. `inputs[t][r]` is the input
/// token of RoI `r` at step `t`; returns one `[R, |D|]` value per step.
pub fn caption_logits<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &CaptionHeadConfig,
    visual: Var,
    inputs: &[Vec<usize>],
) -> Result<Vec<Var>> {
    let (r, v) = g.value(visual).rows_cols();
    if v != cfg.visual_dim {
        return Err(shape_err(format!("caption head: visual has {v} features, expected {}", cfg.visual_dim)));
    }
    if inputs.len() != cfg.n_steps || inputs.iter().any(|s| s.len() != r) {
        return Err(shape_err(format!("caption head: need {} steps of {r} tokens", cfg.n_steps)));
    }
    let word = cfg.lstm_word();
    let proj = cfg.projection();
    let mut out = Vec::with_capacity(cfg.n_steps);
    match cfg.mode {
        CaptionMode::Ocn2 => {
            let roi_states = cfg.lstm_roi().unroll(g, store, &vec![visual; cfg.n_steps], None)?;
            let mut state = word.zero_state(g, r);
            for (t, toks) in inputs.iter().enumerate() {
                let oh = g.constant(one_hot_rows(toks, cfg.vocab_size)?);
                let x = g.concat_cols(&[roi_states[t].h, oh])?;
                state = word.step(g, store, x, state)?;
                out.push(proj.forward(g, store, state.h)?);
            }
        }
        CaptionMode::Ocn1 => {
            let blank = g.constant(Tensor::zeros(&[r, cfg.visual_dim]));
            let mut state = word.zero_state(g, r);
            for (t, toks) in inputs.iter().enumerate() {
                let oh = g.constant(one_hot_rows(toks, cfg.vocab_size)?);
                let x = g.concat_cols(&[if t == 0 { visual } else { blank }, oh])?;
                state = word.step(g, store, x, state)?;
                out.push(proj.forward(g, store, state.h)?);
            }
        }
    }
    Ok(out)
}

/// Teacher-forced word distributions for one visual vector and caption.
pub fn caption_forward<T: Real>(
    store: &ParamStore<T>,
    cfg: &CaptionHeadConfig,
    visual: &[T],
    caption: &TokenizedCaption,
    eoc: usize,
) -> Result<Vec<Vec<T>>> {
    if caption.token_ids.len() != cfg.n_steps {
        return Err(shape_err(format!("caption has {} tokens, expected {}", caption.token_ids.len(), cfg.n_steps)));
    }
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(&[1, visual.len()], visual.to_vec())?);
    let inputs: Vec<Vec<usize>> = teacher_inputs(caption, eoc).into_iter().map(|t| vec![t]).collect();
    let logits = caption_logits(&mut g, store, cfg, v, &inputs)?;
    Ok(logits.iter().map(|&l| softmax_rows(g.value(l).data(), cfg.vocab_size)).collect())
}

/// Mean over RoIs and steps of `−ln P(target)`. `targets[t][r]`.
pub fn loss_caption<T: Real>(g: &mut Graph<T>, logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(shape_err("loss_caption: one target row per step"));
    }
    let r = targets[0].len();
    let w = vec![T::one() / T::cast((r * logits.len()) as f64); r];
    let terms = logits
        .iter()
        .zip(targets)
        .map(|(&l, t)| g.softmax_xent(l, t, &w))
        .collect::<Result<Vec<_>>>()?;
    g.add_n(&terms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedCaption {
    /// Generated word ids, without the terminating EOC.
    pub tokens: Vec<usize>,
    /// Probability of each emitted token, the EOC included when produced.
    pub probs: Vec<f64>,
}

/// Greedy decoding for a batch of visual vectors `[R, V]`. Starts from EOC,
/// feeds back the argmax (lowest index on ties) and stops each row at EOC or
/// after `max_steps` words.
pub fn greedy_decode_batch<T: Real>(
    store: &ParamStore<T>,
    cfg: &CaptionHeadConfig,
    visual: &Tensor<T>,
    eoc: usize,
    max_steps: usize,
) -> Result<Vec<DecodedCaption>> {
    let (r, v) = visual.rows_cols();
    if v != cfg.visual_dim {
        return Err(shape_err(format!("greedy_decode: visual has {v} features, expected {}", cfg.visual_dim)));
    }
    let mut out: Vec<DecodedCaption> = (0..r).map(|_| DecodedCaption { tokens: vec![], probs: vec![] }).collect();
    if max_steps == 0 || r == 0 {
        return Ok(out);
    }
    let mut g = Graph::new();
    let vis = g.constant(visual.clone());
    let word = cfg.lstm_word();
    let proj = cfg.projection();
    // the RoI LSTM never sees words, so all of its steps can run up front
    let roi_h: Vec<Var> = match cfg.mode {
        CaptionMode::Ocn2 => cfg.lstm_roi().unroll(&mut g, store, &vec![vis; max_steps], None)?.iter().map(|s| s.h).collect(),
        CaptionMode::Ocn1 => {
            let blank = g.constant(Tensor::zeros(&[r, v]));
            (0..max_steps).map(|t| if t == 0 { vis } else { blank }).collect()
        }
    };
    let mut state: LstmVars = word.zero_state(&mut g, r);
    let mut prev = vec![eoc; r];
    let mut done = vec![false; r];
    for vis_t in roi_h.iter().take(max_steps) {
        let oh = g.constant(one_hot_rows(&prev, cfg.vocab_size)?);
        let x = g.concat_cols(&[*vis_t, oh])?;
        state = word.step(&mut g, store, x, state)?;
        let logits = proj.forward(&mut g, store, state.h)?;
        let probs = softmax_rows(g.value(logits).data(), cfg.vocab_size);
        for i in 0..r {
            if done[i] {
                continue;
            }
            let row = &probs[i * cfg.vocab_size..(i + 1) * cfg.vocab_size];
            let (best, p) = row.iter().enumerate().fold((0, T::neg_infinity()), |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc });
            out[i].probs.push(p.as_f64());
            if best == eoc {
                done[i] = true;
            } else {
                out[i].tokens.push(best);
            }
            prev[i] = best;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

pub fn greedy_decode<T: Real>(store: &ParamStore<T>, cfg: &CaptionHeadConfig, visual: &[T], eoc: usize, max_steps: usize) -> Result<DecodedCaption> {
    let t = Tensor::from_vec(&[1, visual.len()], visual.to_vec())?;
    Ok(greedy_decode_batch(store, cfg, &t, eoc, max_steps)?.remove(0))
}
