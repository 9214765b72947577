//! Central finite-difference checks of the autograd gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Elements checked per tensor; tensors smaller than this are checked fully.
    pub per_tensor: usize,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, per_tensor: 12, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `loss` against central
/// differences for every tensor in `store` (inputs included, if stored there).
pub fn check_gradients<F>(store: &ParamStore<f64>, opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, s)?;
        Ok(g.value(v).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = store.clone();
    for (name, t) in store.iter() {
        let n = t.len();
        let picks: Vec<usize> = if n <= opts.per_tensor { (0..n).collect() } else { sample(&mut rng, n, opts.per_tensor).into_vec() };
        let zero = crate::tensor::Tensor::zeros(t.shape());
        let grad = analytic.get(name).unwrap_or(&zero);
        for i in picks {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]");
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
