//! Caption metrics with coco-caption semantics (BLEU with closest reference
//! length, ROUGE-L with β = 1.2, CIDEr-D) and R@1.
//!
//! An entry with an empty reference set scores zero everywhere: it adds its
//! candidate length and n-gram guesses to BLEU, a zero to the ROUGE-L and
//! CIDEr means, and nothing to the CIDEr document frequencies.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const R_AT_1_IOU: f64 = 0.5;

type NGramCounts<'a> = HashMap<&'a [String], usize>;

fn ngrams(words: &[String], n: usize) -> NGramCounts<'_> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::InvalidArgument("empty caption corpus".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} candidates but {} reference sets", cands.len(), refs.len())));
    }
    Ok(())
}

/// Corpus statistics shared by every BLEU order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub test_len: usize,
    pub ref_len: usize,
    pub guess: [usize; MAX_N],
    pub correct: [usize; MAX_N],
}

pub fn bleu_stats(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<BleuStats> {
    check_corpus(cands, refs)?;
    let mut s = BleuStats::default();
    for (c, rs) in cands.iter().zip(refs) {
        let len = c.len();
        s.test_len += len;
        // closest reference length, shorter wins ties
        s.ref_len += rs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(len), l)).unwrap_or(0);
        for k in 1..=MAX_N {
            let cand = ngrams(c, k);
            s.guess[k - 1] += len.saturating_sub(k - 1);
            let mut max_ref: NGramCounts = HashMap::new();
            for r in rs {
                for (g, n) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(n);
                }
            }
            s.correct[k - 1] += cand.iter().map(|(g, &n)| n.min(*max_ref.get(g).unwrap_or(&0))).sum::<usize>();
        }
    }
    Ok(s)
}

impl BleuStats {
    /// Geometric mean of the first `n` modified precisions times the brevity
    /// penalty. Zero when any of those orders has no match.
    pub fn bleu(&self, n: usize) -> f64 {
        assert!((1..=MAX_N).contains(&n), "BLEU order must be 1..=4");
        if self.test_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            if self.correct[k] == 0 {
                return 0.0;
            }
            log_sum += (self.correct[k] as f64 / self.guess[k] as f64).ln();
        }
        let bp = if self.test_len < self.ref_len { 1.0 - self.ref_len as f64 / self.test_len as f64 } else { 0.0 };
        (log_sum / n as f64 + bp).exp()
    }
}

pub fn bleu_n(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if !(1..=MAX_N).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order {n} outside 1..=4")));
    }
    Ok(bleu_stats(cands, refs)?.bleu(n))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L of one candidate: best precision and best recall over the
/// references, combined with β = 1.2.
pub fn rouge_l_single(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in refs.iter().filter(|r| !r.is_empty()) {
        let l = lcs(cand, rf) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rf.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| rouge_l_single(c, r)).sum::<f64>() / cands.len() as f64)
}

struct TfIdf {
    vec: [HashMap<Vec<String>, f64>; MAX_N],
    norm: [f64; MAX_N],
    /// Bigram count, kept from the reference scorer for the length penalty.
    length: f64,
}

fn all_ngrams(words: &[String]) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    for k in 1..=MAX_N {
        for (g, n) in ngrams(words, k) {
            m.insert(g.to_vec(), n);
        }
    }
    m
}

fn tfidf(words: &[String], df: &HashMap<Vec<String>, f64>, log_n: f64) -> TfIdf {
    let mut vec: [HashMap<Vec<String>, f64>; MAX_N] = Default::default();
    let mut norm = [0.0; MAX_N];
    let mut length = 0.0;
    for (g, tf) in all_ngrams(words) {
        let k = g.len() - 1;
        let w = tf as f64 * (log_n - df.get(&g).copied().unwrap_or(0.0).max(1.0).ln());
        norm[k] += w * w;
        if k == 1 {
            length += tf as f64;
        }
        vec[k].insert(g, w);
    }
    TfIdf { vec, norm: norm.map(f64::sqrt), length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for k in 0..MAX_N {
        let mut v: f64 = h.vec[k].iter().map(|(g, &w)| {
            let rw = r.vec[k].get(g).copied().unwrap_or(0.0);
            w.min(rw) * rw
        }).sum();
        if h.norm[k] != 0.0 && r.norm[k] != 0.0 {
            v /= h.norm[k] * r.norm[k];
        }
        total += v * penalty;
    }
    total
}

/// Per-entry CIDEr-D scores (×10) with document frequencies taken from the
/// reference sets themselves.
pub fn cider_scores(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    let mut docs = 0usize;
    for rs in refs.iter().filter(|r| !r.is_empty()) {
        docs += 1;
        let mut seen: Vec<Vec<String>> = rs.iter().flat_map(|r| all_ngrams(r).into_keys()).collect();
        seen.sort();
        seen.dedup();
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    if docs == 0 {
        return Ok(vec![0.0; cands.len()]);
    }
    let log_n = (docs as f64).ln();
    Ok(cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            if rs.is_empty() {
                return 0.0;
            }
            let h = tfidf(c, &df, log_n);
            let sum: f64 = rs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_n))).sum();
            sum / MAX_N as f64 / rs.len() as f64 * 10.0
        })
        .collect())
}

pub fn cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    let s = cider_scores(cands, refs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Fraction of `(chosen, groundtruth)` pairs overlapping at IoU ≥ 0.5.
pub fn r_at_1(results: &[(BBox, BBox)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("R@1 needs at least one query".into()));
    }
    Ok(results.iter().filter(|(c, g)| iou(c, g) >= R_AT_1_IOU).count() as f64 / results.len() as f64)
}
