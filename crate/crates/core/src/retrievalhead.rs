//! Retrieval branch: a query LSTM, the visual word (RoI feature ⊕ query
//! encoding) and a two-layer scorer trained with the logistic loss.
//!
//! Relevance labels are 1 for RoIs matched to the queried object and 0
//! otherwise. The loss uses the sign form `y = 2·relevance − 1`, since a zero
//! label inside `exp(−y f)` would make the loss independent of the score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::detectnet::LabeledRoi;
use crate::error::{shape_err, Error, Result};
use crate::nn::Dense;
use crate::params::{Init, ParamStore};
use crate::seqcore::{one_hot_rows, LstmLayer};
use crate::tensor::{softplus, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHeadConfig {
    pub visual_dim: usize,
    pub query_hidden: usize,
    pub fc: usize,
    pub vocab_size: usize,
    pub n_steps: usize,
}

impl RetrievalHeadConfig {
    pub fn query_lstm(&self) -> LstmLayer {
        LstmLayer::new("ret.query", self.vocab_size, self.query_hidden)
    }

    pub fn fusion(&self) -> Dense {
        Dense::new("ret.fc", self.visual_dim + self.query_hidden, self.fc)
    }

    pub fn scorer(&self) -> Dense {
        Dense::new("ret.score", self.fc, 1)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, lstm_scale: f64, forget_bias: f64) {
        self.query_lstm().init(store, rng, lstm_scale, forget_bias);
        self.fusion().init(store, rng, Init::He);
        self.scorer().init(store, rng, Init::Uniform(0.01));
    }
}

/// Final hidden state `[1, H_q]` of the query LSTM over the padded query.
pub fn encode_query<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &RetrievalHeadConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty query".into()));
    }
    let xs = tokens
        .iter()
        .map(|&t| one_hot_rows(&[t], cfg.vocab_size).map(|oh| g.constant(oh)))
        .collect::<Result<Vec<_>>>()?;
    let states = cfg.query_lstm().unroll(g, store, &xs, None)?;
    Ok(states.last().expect("non-empty").h)
}

/// Raw scores `f [R, 1]` for `visual [R, V]` against one query `[1, H_q]`.
pub fn retrieval_scores<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &RetrievalHeadConfig, visual: Var, query: Var) -> Result<Var> {
    let (r, v) = g.value(visual).rows_cols();
    if v != cfg.visual_dim || g.value(query).rows_cols() != (1, cfg.query_hidden) {
        return Err(shape_err(format!(
            "retrieval head: visual {v} / query {:?}, expected {} / {}",
            g.shape(query),
            cfg.visual_dim,
            cfg.query_hidden
        )));
    }
    let q = g.gather_rows(query, &vec![0; r])?;
    let word = g.concat_cols(&[visual, q])?;
    let hidden = cfg.fusion().forward(g, store, word)?;
    let hidden = g.relu(hidden);
    cfg.scorer().forward(g, store, hidden)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalLabel {
    pub relevance: u8,
}

impl RetrievalLabel {
    pub fn sign(&self) -> f64 {
        if self.relevance == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Relevance 1 exactly for positive RoIs matched to `query_object`.
pub fn build_retrieval_labels(rois: &[LabeledRoi], query_object: usize, n_objects: usize) -> Result<Vec<RetrievalLabel>> {
    if query_object >= n_objects {
        return Err(Error::InvalidArgument(format!("query object {query_object} of {n_objects}")));
    }
    Ok(rois
        .iter()
        .map(|r| RetrievalLabel { relevance: u8::from(r.matched_gt == Some(query_object)) })
        .collect())
}

/// `ln(1 + exp(−y f))`
pub fn logistic_loss(y: f64, f: f64) -> f64 {
    softplus(-y * f)
}

/// Mean logistic loss over the rows of `scores` with nonzero `mask`.
pub fn loss_retrieval<T: Real>(g: &mut Graph<T>, scores: Var, labels: &[RetrievalLabel], mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count().max(1);
    let y: Vec<T> = labels.iter().map(|l| T::cast(l.sign())).collect();
    let w: Vec<T> = mask.iter().map(|&m| if m { T::one() / T::cast(n as f64) } else { T::zero() }).collect();
    g.logistic(scores, &y, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Deltas};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RetrievalHeadConfig {
        RetrievalHeadConfig { visual_dim: 4, query_hidden: 3, fc: 5, vocab_size: 6, n_steps: 6 }
    }

    #[test]
    fn loss_examples() {
        assert!((logistic_loss(1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logistic_loss(1.0, 1e6) < 1e-300);
        assert!((logistic_loss(-1.0, 2.0) - 2.126_928_011_042_972_5).abs() < 1e-12);
    }

    #[test]
    fn zero_params_score_half() {
        let c = cfg();
        let mut s = ParamStore::<f64>::new();
        c.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0), 0.0, 0.0);
        let names: Vec<String> = s.names().map(String::from).collect();
        for n in names {
            s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let q = encode_query(&mut g, &s, &c, &[2, 3, 0, 0, 0, 0]).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 0.0));
        let vis = g.constant(Tensor::full(&[3, 4], 0.7));
        let f = retrieval_scores(&mut g, &s, &c, vis, q).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_follow_matched_object() {
        let roi = |m: Option<usize>| LabeledRoi {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            label: m.map(|_| 0),
            matched_gt: m,
            iou: 0.0,
            regression_target: Deltas::default(),
        };
        let rois = [roi(Some(0)), roi(Some(1)), roi(None), roi(Some(0))];
        let l = build_retrieval_labels(&rois, 0, 2).unwrap();
        assert_eq!(l.iter().map(|x| x.relevance).collect::<Vec<_>>(), vec![1, 0, 0, 1]);
        assert!(build_retrieval_labels(&rois, 2, 2).is_err());
    }
}
