//! LSTM cell, unrolling, one-hot words and the softmax word predictor.
//!
//! Gate pre-activations are stored stacked: `{name}.w_x [in, 4H]`,
//! `{name}.w_h [H, 4H]` and `{name}.b [4H]`, with column blocks in the
//! order input, forget, output, candidate. Block `k` of the stacked matrices
//! is the per-gate matrix (`W_xi`, `W_xf`, `W_xo`, `W_xg` and so on).

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Dense;
use crate::params::{init_tensor, Init, ParamStore};
use crate::tensor::{softmax_rows, Real, Tensor};

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

/// Binary vector with a single 1 at `index`.
pub fn one_hot<T: Real>(index: usize, size: usize) -> Result<Tensor<T>> {
    if index >= size {
        return Err(Error::InvalidArgument(format!("one_hot index {index} out of range for size {size}")));
    }
    let mut v = vec![T::zero(); size];
    v[index] = T::one();
    Ok(Tensor::vector(v))
}

/// `[B, size]` stacked one-hot rows.
pub fn one_hot_rows<T: Real>(indices: &[usize], size: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); indices.len() * size];
    for (r, &i) in indices.iter().enumerate() {
        if i >= size {
            return Err(Error::InvalidArgument(format!("one_hot index {i} out of range for size {size}")));
        }
        data[r * size + i] = T::one();
    }
    Tensor::from_vec(&[indices.len(), size], data)
}

/// Hidden and cell state of a batch of sequences, as graph values `[B, H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// Plain-value state of a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![T::zero(); hidden], c: vec![T::zero(); hidden] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        Self { name: name.into(), input_dim, hidden }
    }

    pub fn w_x(&self) -> String {
        format!("{}.w_x", self.name)
    }
    pub fn w_h(&self) -> String {
        format!("{}.w_h", self.name)
    }
    pub fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Uniform `[-scale, scale]` weights, zero biases except the forget gate.
    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, scale: f64, forget_bias: f64) {
        let h4 = 4 * self.hidden;
        store.insert(self.w_x(), init_tensor(rng, &[self.input_dim, h4], self.input_dim, Init::Uniform(scale)));
        store.insert(self.w_h(), init_tensor(rng, &[self.hidden, h4], self.hidden, Init::Uniform(scale)));
        let mut b = vec![T::zero(); h4];
        for v in &mut b[GATE_FORGET * self.hidden..(GATE_FORGET + 1) * self.hidden] {
            *v = T::cast(forget_bias);
        }
        store.insert(self.b(), Tensor::vector(b));
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> LstmVars {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = g.constant(Tensor::zeros(&[batch, self.hidden]));
        LstmVars { h, c }
    }

    /// One cell update for a batch: `x [B, in]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, state: LstmVars) -> Result<LstmVars> {
        let (b, d) = g.value(x).rows_cols();
        if d != self.input_dim {
            return Err(shape_err(format!("{}: input has {d} features, expected {}", self.name, self.input_dim)));
        }
        if g.value(state.h).rows_cols() != (b, self.hidden) || g.value(state.c).rows_cols() != (b, self.hidden) {
            return Err(shape_err(format!("{}: state does not match batch {b} × hidden {}", self.name, self.hidden)));
        }
        let w_x = g.param(store, &self.w_x())?;
        let w_h = g.param(store, &self.w_h())?;
        let bias = g.param(store, &self.b())?;
        let from_x = g.linear(x, w_x, Some(bias))?;
        let from_h = g.matmul(state.h, w_h)?;
        let pre = g.add(from_x, from_h)?;
        let block = |g: &mut Graph<T>, k: usize| g.select_blocks(pre, self.hidden, &vec![k; b]);
        let (pi, pf, po, pg) = (block(g, GATE_INPUT)?, block(g, GATE_FORGET)?, block(g, GATE_OUTPUT)?, block(g, GATE_CANDIDATE)?);
        let i = g.sigmoid(pi);
        let f = g.sigmoid(pf);
        let o = g.sigmoid(po);
        let cand = g.tanh(pg);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmVars { h, c })
    }

    /// Unrolls from `initial` (zeros when `None`) and returns every state.
    pub fn unroll<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
        initial: Option<LstmVars>,
    ) -> Result<Vec<LstmVars>> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("lstm_unroll needs a non-empty sequence".into()));
        }
        let batch = g.value(inputs[0]).rows_cols().0;
        let mut state = initial.unwrap_or_else(|| self.zero_state(g, batch));
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.step(g, store, x, state)?;
            out.push(state);
        }
        Ok(out)
    }
}

/// Single-sequence cell update on plain values.
pub fn lstm_step<T: Real>(x: &[T], state: &LstmState<T>, layer: &LstmLayer, store: &ParamStore<T>) -> Result<LstmState<T>> {
    let mut g = Graph::new();
    let s = state_vars(&mut g, state, layer.hidden)?;
    let xv = g.constant(Tensor::from_vec(&[1, x.len()], x.to_vec())?);
    let next = layer.step(&mut g, store, xv, s)?;
    Ok(LstmState { h: g.value(next.h).data().to_vec(), c: g.value(next.c).data().to_vec() })
}

/// Unrolls a single sequence on plain values from `initial` (zeros when `None`).
pub fn lstm_unroll<T: Real>(
    inputs: &[Vec<T>],
    layer: &LstmLayer,
    store: &ParamStore<T>,
    initial: Option<&LstmState<T>>,
) -> Result<Vec<LstmState<T>>> {
    let mut g = Graph::new();
    let xs = inputs
        .iter()
        .map(|x| Tensor::from_vec(&[1, x.len()], x.clone()).map(|t| g.constant(t)))
        .collect::<Result<Vec<_>>>()?;
    let init = initial.map(|s| state_vars(&mut g, s, layer.hidden)).transpose()?;
    let states = layer.unroll(&mut g, store, &xs, init)?;
    Ok(states
        .iter()
        .map(|s| LstmState { h: g.value(s.h).data().to_vec(), c: g.value(s.c).data().to_vec() })
        .collect())
}

fn state_vars<T: Real>(g: &mut Graph<T>, s: &LstmState<T>, hidden: usize) -> Result<LstmVars> {
    if s.h.len() != hidden || s.c.len() != hidden {
        return Err(shape_err(format!("state has {}/{} values, hidden is {hidden}", s.h.len(), s.c.len())));
    }
    let h = g.constant(Tensor::from_vec(&[1, hidden], s.h.clone())?);
    let c = g.constant(Tensor::from_vec(&[1, hidden], s.c.clone())?);
    Ok(LstmVars { h, c })
}

/// `softmax(z·W_z + b_z)` with `W_z [H, |D|]`.
pub fn predict_word<T: Real>(z: &[T], w_z: &Tensor<T>, b_z: &Tensor<T>) -> Result<Vec<T>> {
    let ws = w_z.shape();
    if ws.len() != 2 || ws[0] != z.len() || b_z.len() != ws[1] {
        return Err(shape_err(format!("predict_word: z has {}, W_z {ws:?}, b_z {}", z.len(), b_z.len())));
    }
    let mut logits = crate::tensor::matmul(z, w_z.data(), 1, z.len(), ws[1]);
    for (l, &b) in logits.iter_mut().zip(b_z.data()) {
        *l += b;
    }
    Ok(softmax_rows(&logits, ws[1]))
}

/// Graph form of the word predictor: returns logits `[B, |D|]`.
pub fn word_logits<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, proj: &Dense, z: Var) -> Result<Var> {
    proj.forward(g, store, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(input: usize, hidden: usize) -> (LstmLayer, ParamStore<f64>) {
        let layer = LstmLayer::new("l", input, hidden);
        let mut s = ParamStore::new();
        layer.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0), 0.0, 0.0);
        (layer, s)
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot::<f64>(2, 4).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot::<f64>(0, 1).unwrap().data(), &[1.0]);
        assert!(one_hot::<f64>(4, 4).is_err());
    }

    #[test]
    fn zero_params_give_zero_state() {
        let (layer, s) = zero_layer(3, 4);
        let next = lstm_step(&[0.3, -2.0, 5.0], &LstmState::zeros(4), &layer, &s).unwrap();
        assert!(next.h.iter().chain(&next.c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let (layer, mut s) = zero_layer(2, 3);
        let b = s.get_mut("l.b").unwrap();
        for v in &mut b.data_mut()[3..6] {
            *v = 10.0;
        }
        let state = LstmState { h: vec![0.0; 3], c: vec![1.0; 3] };
        let next = lstm_step(&[0.5, 0.5], &state, &layer, &s).unwrap();
        assert!(next.c.iter().all(|&c| (c - 1.0).abs() < 1e-4));
    }

    #[test]
    fn split_unroll_matches_whole() {
        let layer = LstmLayer::new("l", 3, 5);
        let mut s = ParamStore::<f64>::new();
        layer.init(&mut s, &mut ChaCha8Rng::seed_from_u64(4), 0.5, 1.0);
        let xs: Vec<Vec<f64>> = (0..6).map(|t| (0..3).map(|j| ((t * 3 + j) as f64).sin()).collect()).collect();
        let whole = lstm_unroll(&xs, &layer, &s, None).unwrap();
        let head = lstm_unroll(&xs[..2], &layer, &s, None).unwrap();
        let tail = lstm_unroll(&xs[2..], &layer, &s, head.last()).unwrap();
        assert_eq!(&whole[2..], &tail[..]);
        let single = lstm_step(&xs[0], &LstmState::zeros(5), &layer, &s).unwrap();
        assert_eq!(whole[0], single);
    }

    #[test]
    fn predictor_examples() {
        let w = Tensor::<f64>::zeros(&[4, 866]);
        let b = Tensor::zeros(&[866]);
        let p = predict_word(&[1.0, 2.0, 3.0, 4.0], &w, &b).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 866.0).abs() < 1e-15));
        let w = Tensor::zeros(&[1, 2]);
        let b = Tensor::vector(vec![2f64.ln(), 0.0]);
        let p = predict_word(&[0.0], &w, &b).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }
}
