//! Dense and convolution layers over the autograd graph. A layer is only a
//! name plus its shapes; the tensors live in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{init_tensor, Init, ParamStore};
use crate::tensor::Real;

/// `y = x·W + b` with `W [in, out]` stored as `{name}.w` and `b` as `{name}.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim }
    }

    pub fn w_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, init: Init) {
        store.insert(self.w_name(), init_tensor(rng, &[self.in_dim, self.out_dim], self.in_dim, init));
        store.insert(self.b_name(), init_tensor(rng, &[self.out_dim], self.in_dim, Init::Zeros));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w_name())?;
        let b = g.param(store, &self.b_name())?;
        g.linear(x, w, Some(b))
    }
}

/// Square-kernel convolution over an `H×W×C` map, computed as im2col + matmul.
/// Weight layout `[k·k·C_in, C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub dense: Dense,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { dense: Dense::new(name, kernel * kernel * in_ch, out_ch), in_ch, out_ch, kernel, stride, pad }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, init: Init) {
        self.dense.init(store, rng, init);
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.in_ch {
            return Err(shape_err(format!("{}: expected H×W×{}, got {s:?}", self.dense.name, self.in_ch)));
        }
        let (oh, ow) = self.out_size(s[0], s[1]);
        let cols = g.im2col(x, self.kernel, self.stride, self.pad)?;
        let y = self.dense.forward(g, store, cols)?;
        g.reshape(y, &[oh, ow, self.out_ch])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn conv_matches_direct_sum() {
        let conv = Conv2d::new("c", 2, 1, 3, 1, 1);
        let mut store = ParamStore::<f64>::new();
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        store.insert("c.w", Tensor::from_vec(&[18, 1], w.clone()).unwrap());
        store.insert("c.b", Tensor::vector(vec![0.25]));
        let xs: Vec<f64> = (0..4 * 5 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[4, 5, 2], xs.clone()).unwrap());
        let y = conv.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[4, 5, 1]);
        for oy in 0..4i64 {
            for ox in 0..5i64 {
                let mut acc = 0.25;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if iy < 0 || iy >= 4 || ix < 0 || ix >= 5 {
                            continue;
                        }
                        for c in 0..2 {
                            acc += xs[((iy * 5 + ix) * 2 + c) as usize] * w[((ky * 3 + kx) * 2 + c) as usize];
                        }
                    }
                }
                let got = g.value(y).data()[(oy * 5 + ox) as usize];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}
