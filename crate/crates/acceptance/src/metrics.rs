//! Caption metric maxima, frozen reference values and range checks.

use got_core::infer_eval::{bleu_n, cider, cider_scores, rouge_l};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::{Checks, Outcome};

pub const RANDOM_CORPORA: usize = 1000;
pub const GOLDEN_TOLERANCE: f64 = 1e-6;

type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

#[derive(Debug, Deserialize)]
pub struct GoldenPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Scores produced by the reference Python implementation.
#[derive(Debug, Deserialize)]
#[allow(non_snake_case)]
pub struct Golden {
    pub pairs: Vec<GoldenPair>,
    pub Bleu_1: f64,
    pub Bleu_2: f64,
    pub Bleu_3: f64,
    pub Bleu_4: f64,
    pub ROUGE_L: f64,
    pub CIDEr: f64,
    pub CIDEr_per_pair: Vec<f64>,
}

pub fn load_golden() -> Result<Golden, String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/metric_golden.json");
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Distinct captions of at least four words, so that every n-gram order
/// has terms with nonzero idf.
pub fn identical_corpus() -> Corpus {
    let caps: Vec<Vec<String>> = [
        "a large red square at the left",
        "a small blue circle near the top",
        "two green triangles next to one another",
        "the yellow circle is below the red square",
        "a tiny square in the corner of the image",
    ]
    .iter()
    .map(|s| words(s))
    .collect();
    let refs = caps.iter().map(|c| vec![c.clone(), c.clone()]).collect();
    (caps, refs)
}

pub fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    const WORDS: [&str; 10] = ["a", "red", "blue", "square", "circle", "the", "left", "small", "on", "big"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(1..=10);
        (0..n).map(|_| WORDS.choose(rng).expect("non-empty").to_string()).collect()
    };
    let entries = rng.gen_range(1..=6);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..entries {
        cands.push(sentence(rng));
        let k = rng.gen_range(1..=4);
        refs.push((0..k).map(|_| sentence(rng)).collect());
    }
    (cands, refs)
}

fn all_scores(c: &Corpus) -> Result<[f64; 6], String> {
    let e = |r: got_core::Result<f64>| r.map_err(|e| e.to_string());
    Ok([
        e(bleu_n(&c.0, &c.1, 1))?,
        e(bleu_n(&c.0, &c.1, 2))?,
        e(bleu_n(&c.0, &c.1, 3))?,
        e(bleu_n(&c.0, &c.1, 4))?,
        e(rouge_l(&c.0, &c.1))?,
        e(cider(&c.0, &c.1))?,
    ])
}

const NAMES: [&str; 6] = ["Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "ROUGE_L", "CIDEr"];

pub fn criterion() -> Outcome {
    let mut c = Checks::default();
    match all_scores(&identical_corpus()) {
        Ok(s) => {
            for (i, (&v, name)) in s.iter().zip(NAMES).enumerate() {
                let want = if i == 5 { 10.0 } else { 1.0 };
                c.check(v == want, format!("identical corpus {name} = {v:.17}"));
            }
            c.note("identical-corpus maxima exact");
        }
        Err(e) => c.check(false, e),
    }

    match load_golden() {
        Ok(g) => {
            let cands: Vec<Vec<String>> = g.pairs.iter().map(|p| p.candidate.clone()).collect();
            let refs: Vec<Vec<Vec<String>>> = g.pairs.iter().map(|p| p.references.clone()).collect();
            let want = [g.Bleu_1, g.Bleu_2, g.Bleu_3, g.Bleu_4, g.ROUGE_L, g.CIDEr];
            let mut worst: f64 = 0.0;
            match all_scores(&(cands.clone(), refs.clone())) {
                Ok(got) => {
                    for ((v, w), name) in got.iter().zip(want).zip(NAMES) {
                        worst = worst.max((v - w).abs());
                        c.check((v - w).abs() <= GOLDEN_TOLERANCE, format!("golden {name} {v} vs {w}"));
                    }
                }
                Err(e) => c.check(false, e),
            }
            match cider_scores(&cands, &refs) {
                Ok(per) => {
                    for (v, w) in per.iter().zip(&g.CIDEr_per_pair) {
                        worst = worst.max((v - w).abs());
                        c.check((v - w).abs() <= GOLDEN_TOLERANCE, format!("golden per-pair CIDEr {v} vs {w}"));
                    }
                }
                Err(e) => c.check(false, e.to_string()),
            }
            c.note(format!("golden max err {worst:.1e}"));
        }
        Err(e) => c.check(false, format!("golden file: {e}")),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out_of_range = 0;
    for _ in 0..RANDOM_CORPORA {
        let corpus = random_corpus(&mut rng);
        match (all_scores(&corpus), cider_scores(&corpus.0, &corpus.1)) {
            (Ok(s), Ok(per)) => {
                let ok = s[..5].iter().all(|v| (0.0..=1.0).contains(v))
                    && (0.0..=10.0).contains(&s[5])
                    && per.iter().all(|v| (0.0..=10.0).contains(v));
                out_of_range += usize::from(!ok);
            }
            _ => out_of_range += 1,
        }
    }
    c.note(format!("{RANDOM_CORPORA} random corpora, {out_of_range} out of range"));
    c.check(out_of_range == 0, "metric outside its range");
    c.finish()
}
