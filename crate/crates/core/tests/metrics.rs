use got_core::geometry::BBox;
use got_core::infer_eval::{bleu_n, cider, cider_scores, r_at_1, rouge_l};
use proptest::prelude::*;
use serde_json::Value;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn golden() -> Value {
    serde_json::from_str(include_str!("data/metric_golden.json")).unwrap()
}

type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

fn golden_corpus(g: &Value) -> Corpus {
    let pairs = g["pairs"].as_array().unwrap();
    let strs = |v: &Value| v.as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect::<Vec<_>>();
    let cands = pairs.iter().map(|p| strs(&p["candidate"])).collect();
    let refs = pairs.iter().map(|p| p["references"].as_array().unwrap().iter().map(strs).collect()).collect();
    (cands, refs)
}

#[test]
fn golden_corpus_matches_reference_scorer() {
    let g = golden();
    let (c, r) = golden_corpus(&g);
    let close = |name: &str, v: f64| {
        let want = g[name].as_f64().unwrap();
        assert!((v - want).abs() < 1e-6, "{name}: {v} vs {want}");
    };
    for n in 1..=4 {
        close(&format!("Bleu_{n}"), bleu_n(&c, &r, n).unwrap());
    }
    close("ROUGE_L", rouge_l(&c, &r).unwrap());
    close("CIDEr", cider(&c, &r).unwrap());
    let per = cider_scores(&c, &r).unwrap();
    for (v, want) in per.iter().zip(g["CIDEr_per_pair"].as_array().unwrap()) {
        assert!((v - want.as_f64().unwrap()).abs() < 1e-6);
    }
}

#[test]
fn candidate_equal_to_its_only_reference() {
    let c = vec![w("a red square on the left"), w("two blue circles near one another")];
    let r: Vec<Vec<Vec<String>>> = c.iter().map(|x| vec![x.clone()]).collect();
    for n in 1..=4 {
        assert_eq!(bleu_n(&c, &r, n).unwrap(), 1.0);
    }
    assert_eq!(rouge_l(&c, &r).unwrap(), 1.0);
    assert_eq!(cider(&c, &r).unwrap(), 10.0);
}

#[test]
fn no_overlap_scores_zero() {
    let c = vec![w("green triangle"), w("yellow")];
    let r = vec![vec![w("a red square")], vec![w("blue circle here")]];
    assert_eq!(bleu_n(&c, &r, 1).unwrap(), 0.0);
    assert_eq!(rouge_l(&c, &r).unwrap(), 0.0);
    assert_eq!(cider(&c, &r).unwrap(), 0.0);
}

#[test]
fn empty_candidates_score_zero() {
    let c = vec![vec![], vec![]];
    let r = vec![vec![w("a red square")], vec![w("a blue circle")]];
    assert_eq!(bleu_n(&c, &r, 1).unwrap(), 0.0);
}

#[test]
fn empty_or_misaligned_corpus_is_an_error() {
    assert!(bleu_n(&[], &[], 1).is_err());
    assert!(rouge_l(&[], &[]).is_err());
    assert!(cider(&[], &[]).is_err());
    assert!(bleu_n(&[w("a")], &[], 1).is_err());
    assert!(r_at_1(&[]).is_err());
}

#[test]
fn recall_at_one_threshold() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    assert_eq!(r_at_1(&[(gt, gt), (gt, gt)]).unwrap(), 1.0);
    // 0..10 × 0..4 against 0..10 × 0..10 overlaps at IoU 0.4
    let low = BBox::new(0.0, 0.0, 10.0, 4.0).unwrap();
    assert_eq!(r_at_1(&[(low, gt)]).unwrap(), 0.0);
    let half = BBox::new(0.0, 0.0, 10.0, 5.0).unwrap();
    assert_eq!(r_at_1(&[(half, gt), (low, gt)]).unwrap(), 0.5);
}

const WORDS: [&str; 8] = ["a", "red", "blue", "square", "circle", "the", "left", "on"];

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]).prop_map(String::from), 0..9)
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 1..6).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn scores_stay_in_range((c, r) in corpus()) {
        for n in 1..=4 {
            let b = bleu_n(&c, &r, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let l = rouge_l(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        for v in cider_scores(&c, &r).unwrap() {
            prop_assert!((0.0..=10.0).contains(&v));
        }
    }

    #[test]
    fn entry_order_does_not_matter((c, r) in corpus()) {
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.reverse();
        r2.reverse();
        for n in 1..=4 {
            prop_assert!((bleu_n(&c, &r, n).unwrap() - bleu_n(&c2, &r2, n).unwrap()).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&c2, &r2).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r).unwrap() - cider(&c2, &r2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn reference_order_does_not_matter((c, r) in corpus()) {
        let r2: Vec<Vec<Vec<String>>> = r.iter().map(|rs| rs.iter().rev().cloned().collect()).collect();
        for n in 1..=4 {
            prop_assert!((bleu_n(&c, &r, n).unwrap() - bleu_n(&c, &r2, n).unwrap()).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&c, &r2).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r).unwrap() - cider(&c, &r2).unwrap()).abs() < 1e-9);
    }
}
