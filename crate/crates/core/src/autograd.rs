//! A small tape-based reverse-mode differentiation engine.
//!
//! Every forward pass records its operations on a [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every recorded value. Parameters enter the graph through
//! [`Graph::param`], which binds a named tensor of a [`ParamStore`] once per
//! graph so its gradient can be collected by name.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::geometry::RoiTaps;
use crate::params::ParamStore;
use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, softmax_rows, softplus, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over an `H×W×C` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    SelectBlocks { x: Var, block: usize, index: Vec<usize> },
    Im2Col { x: Var, geom: ConvGeom },
    RoiAlign { x: Var, taps: Arc<RoiTaps> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    SmoothL1 { x: Var, target: Vec<T>, weights: Vec<T>, beta: T },
    Logistic { x: Var, labels: Vec<T>, weights: Vec<T> },
    Sum(Var),
    AddN(Vec<Var>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds (once per graph) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get_arc(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter name → gradient for every parameter bound in this graph.
    /// Parameters that did not influence the output get a zero gradient.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    // ---- forward ops -------------------------------------------------------

    /// `x [m,k] · w [k,n] + b [n]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).rows_cols();
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err(format!(
                "linear: input has {k} features, weight is {ws:?}"
            )));
        }
        let n = ws[1];
        let mut out = matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(shape_err(format!("linear: bias has {} values, need {n}", bv.len())));
            }
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).rows_cols();
        let (k2, n) = self.value(b).rows_cols();
        if k != k2 {
            return Err(shape_err(format!("matmul: {m}x{k} · {k2}x{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        self.push(t, Op::Relu(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (_, c) = v.rows_cols();
        let t = Tensor::from_vec(v.shape(), softmax_rows(v.data(), c)).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Concatenates 2-D values along columns; all inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows_cols().0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(shape_err(format!("concat: {r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_vec(&[rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (n, c) = v.rows_cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(shape_err(format!("gather_rows: row {r} of {n}")));
            }
            data.extend_from_slice(v.row(r));
        }
        let t = Tensor::from_vec(&[rows.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { x: a, rows: rows.to_vec() }))
    }

    /// For each row `r`, selects columns `index[r]*block .. (index[r]+1)*block`.
    pub fn select_blocks(&mut self, a: Var, block: usize, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (n, c) = v.rows_cols();
        if index.len() != n {
            return Err(shape_err(format!("select_blocks: {} indices for {n} rows", index.len())));
        }
        let mut data = Vec::with_capacity(n * block);
        for (r, &i) in index.iter().enumerate() {
            if (i + 1) * block > c {
                return Err(shape_err(format!("select_blocks: block {i} of width {c}")));
            }
            data.extend_from_slice(&v.row(r)[i * block..(i + 1) * block]);
        }
        let t = Tensor::from_vec(&[n, block], data)?;
        Ok(self.push(t, Op::SelectBlocks { x: a, block, index: index.to_vec() }))
    }

    /// Unfolds an `H×W×C` map into `[Ho·Wo, k·k·C]` patches (zero padded).
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err(format!("im2col expects H×W×C, got {s:?}")));
        }
        let geom = ConvGeom { in_h: s[0], in_w: s[1], channels: s[2], kernel, stride, pad };
        if geom.in_h + 2 * pad < kernel || geom.in_w + 2 * pad < kernel {
            return Err(shape_err("im2col: kernel larger than padded input"));
        }
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let src = self.value(x).data();
        let mut cols = vec![T::zero(); oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let s0 = (iy as usize * geom.in_w + ix as usize) * geom.channels;
                        let d0 = (ky * kernel + kx) * geom.channels;
                        dst[d0..d0 + geom.channels].copy_from_slice(&src[s0..s0 + geom.channels]);
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[oh * ow, pl], cols)?;
        Ok(self.push(t, Op::Im2Col { x, geom }))
    }

    /// Pools `x [H,W,C]` through precomputed bilinear taps -> `[R, P·P·C]`.
    pub fn roi_align(&mut self, x: Var, taps: Arc<RoiTaps>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != taps.feat_h || s[1] != taps.feat_w {
            return Err(shape_err(format!(
                "roi_align: map {s:?} vs taps for {}×{}",
                taps.feat_h, taps.feat_w
            )));
        }
        let c = s[2];
        let out = taps.apply(self.value(x).data(), c);
        let t = Tensor::from_vec(&[taps.num_rois, taps.pooled * taps.pooled * c], out)?;
        Ok(self.push(t, Op::RoiAlign { x, taps }))
    }

    /// `Σ_i w_i · (−ln softmax(logits_i)[target_i])`; rows with zero weight are ignored.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let v = self.value(logits);
        let (n, k) = v.rows_cols();
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("softmax_xent: targets/weights must match rows"));
        }
        let probs = softmax_rows(v.data(), k);
        let mut loss = T::zero();
        for i in 0..n {
            if weights[i] == T::zero() {
                continue;
            }
            if targets[i] >= k {
                return Err(shape_err(format!("softmax_xent: target {} of {k}", targets[i])));
            }
            // log-softmax directly from the logits for accuracy
            let row = v.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += weights[i] * (lse - row[targets[i]]);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_i w_i Σ_j smoothL1(x_ij − target_ij)` with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, target: &[T], weights: &[T], beta: T) -> Result<Var> {
        let v = self.value(x);
        let (n, c) = v.rows_cols();
        if target.len() != n * c || weights.len() != n {
            return Err(shape_err("smooth_l1: target/weights shape"));
        }
        let half = T::cast(0.5);
        let mut loss = T::zero();
        for i in 0..n {
            if weights[i] == T::zero() {
                continue;
            }
            let mut row = T::zero();
            for j in 0..c {
                let d = (v.data()[i * c + j] - target[i * c + j]).abs();
                row += if d < beta { half * d * d / beta } else { d - half * beta };
            }
            loss += weights[i] * row;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 { x, target: target.to_vec(), weights: weights.to_vec(), beta },
        ))
    }

    /// `Σ_i w_i ln(1 + exp(−y_i x_i))` for labels `y_i ∈ {−1, +1}`.
    pub fn logistic(&mut self, x: Var, labels: &[T], weights: &[T]) -> Result<Var> {
        let v = self.value(x);
        if labels.len() != v.len() || weights.len() != v.len() {
            return Err(shape_err("logistic: labels/weights must match input length"));
        }
        let mut loss = T::zero();
        for ((&f, &y), &w) in v.data().iter().zip(labels).zip(weights) {
            if w != T::zero() {
                loss += w * softplus(-y * f);
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Logistic { x, labels: labels.to_vec(), weights: weights.to_vec() },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).clone();
        let mut acc = first;
        for &p in &parts[1..] {
            if self.shape(p) != acc.shape() {
                return Err(shape_err("add_n: shape mismatch"));
            }
            acc.add_assign(self.value(p));
        }
        Ok(self.push(acc, Op::AddN(parts.to_vec())))
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, k) = xv.rows_cols();
                let nn = wv.shape()[1];
                let dx = matmul_nt(g.data(), wv.data(), m, nn, k);
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                let dw = matmul_tn(xv.data(), g.data(), m, k, nn);
                acc(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![T::zero(); nn];
                    for row in g.data().chunks(nn) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.rows_cols();
                let (_, nn) = bv.rows_cols();
                let da = matmul_nt(g.data(), bv.data(), m, nn, k);
                acc(grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                let db = matmul_tn(av.data(), g.data(), m, k, nn);
                acc(grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = g.data().iter().zip(bv.data()).map(|(&gg, &y)| gg * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(&gg, &x)| gg * x).collect();
                acc(grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                acc(grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * *s)),
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gg, &y)| gg * y * (T::one() - y)).collect();
                acc(grads, *a, Tensor::from_vec(out.shape(), d).unwrap());
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gg, &y)| gg * (T::one() - y * y)).collect();
                acc(grads, *a, Tensor::from_vec(out.shape(), d).unwrap());
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gg, &y)| if y > T::zero() { gg } else { T::zero() })
                    .collect();
                acc(grads, *a, Tensor::from_vec(out.shape(), d).unwrap());
            }
            Op::Softmax(a) => {
                let (_, c) = out.rows_cols();
                let mut d = Vec::with_capacity(out.len());
                for (grow, prow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let dot: T = grow.iter().zip(prow).map(|(&x, &p)| x * p).sum();
                    d.extend(grow.iter().zip(prow).map(|(&x, &p)| p * (x - dot)));
                }
                acc(grads, *a, Tensor::from_vec(out.shape(), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (_, c) = pv.rows_cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    acc(grads, p, Tensor::from_vec(pv.shape(), d).unwrap());
                    offset += c;
                }
            }
            Op::Reshape(a) => {
                acc(grads, *a, g.reshaped(self.shape(*a)).unwrap());
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let (_, c) = xv.rows_cols();
                let mut d = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut d.data_mut()[r * c..(r + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *o += v;
                    }
                }
                acc(grads, *x, d);
            }
            Op::SelectBlocks { x, block, index } => {
                let xv = self.value(*x);
                let (_, c) = xv.rows_cols();
                let mut d = Tensor::zeros(xv.shape());
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..*block {
                        d.data_mut()[r * c + i * block + j] += g.data()[r * block + j];
                    }
                }
                acc(grads, *x, d);
            }
            Op::Im2Col { x, geom } => {
                let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src = &g.data()[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                        for ky in 0..geom.kernel {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= geom.in_h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= geom.in_w as isize {
                                    continue;
                                }
                                let d0 = (iy as usize * geom.in_w + ix as usize) * geom.channels;
                                let s0 = (ky * geom.kernel + kx) * geom.channels;
                                for ch in 0..geom.channels {
                                    dd[d0 + ch] += src[s0 + ch];
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::RoiAlign { x, taps } => {
                let xs = self.shape(*x);
                let c = xs[2];
                let mut d = Tensor::zeros(xs);
                taps.scatter(g.data(), d.data_mut(), c);
                acc(grads, *x, d);
            }
            Op::SoftmaxXent { logits, targets, weights, probs } => {
                let gs = g.item();
                let lv = self.value(*logits);
                let (n, k) = lv.rows_cols();
                let mut d = vec![T::zero(); n * k];
                for i in 0..n {
                    let w = weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        d[i * k + j] = gs * w * (probs[i * k + j] - onehot);
                    }
                }
                acc(grads, *logits, Tensor::from_vec(lv.shape(), d).unwrap());
            }
            Op::SmoothL1 { x, target, weights, beta } => {
                let gs = g.item();
                let xv = self.value(*x);
                let (n, c) = xv.rows_cols();
                let mut d = vec![T::zero(); n * c];
                for i in 0..n {
                    let w = weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    for j in 0..c {
                        let diff = xv.data()[i * c + j] - target[i * c + j];
                        let dd = if diff.abs() < *beta { diff / *beta } else { diff.signum() };
                        d[i * c + j] = gs * w * dd;
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::Logistic { x, labels, weights } => {
                let gs = g.item();
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&f, &y), &w)| {
                        if w == T::zero() {
                            T::zero()
                        } else {
                            -gs * w * y * sigmoid(-y * f)
                        }
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::Sum(a) => {
                let gs = g.item();
                acc(grads, *a, Tensor::full(self.shape(*a), gs));
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
        }
    }
}
