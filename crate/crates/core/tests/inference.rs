use got_core::datasets::{build_vocabulary, generate_synthetic_corpus, tokenize, Dataset, SceneLayout, TemplateSet};
use got_core::infer_eval::{argmax_first, detect_and_caption, evaluate_captioning, evaluate_retrieval, retrieve};
use got_core::model::{Model, ModelConfig, Task};
use got_core::par::ExecMode;
use got_core::trainer::{train, TrainConfig, TrainOptions};
use got_core::Error;
use proptest::prelude::*;

fn corpus() -> Dataset {
    generate_synthetic_corpus(3, 12, (64, 64), &TemplateSet::default()).unwrap()
}

fn model(ds: &Dataset, task: Task) -> Model {
    let vocab = build_vocabulary(&ds.all_captions(), 1);
    Model::new(ModelConfig::toy(task, ds.num_superclasses(), vocab.len()), vocab, ds.superclasses.clone(), 2).unwrap()
}

#[test]
fn overfit_model_reproduces_its_caption() {
    let ts = TemplateSet::new(&["a {size} {color} {shape}"], SceneLayout::Single);
    let ds = generate_synthetic_corpus(1, 0, (64, 64), &ts).unwrap();
    let mut cfg = TrainConfig::toy(Task::Caption);
    cfg.iterations = 2000;
    let out = train(&ds, &cfg, TrainOptions::default()).unwrap();
    let r = detect_and_caption(&out.model, &ds.images[0].image).unwrap();
    assert_eq!(r.objects.len(), 1, "{r:?}");
    assert_eq!(r.objects[0].caption, ds.images[0].objects[0].captions[0]);
    let report = evaluate_captioning(&out.model, &ds, ExecMode::Sequential).unwrap();
    for b in [report.bleu_1, report.bleu_2, report.bleu_3, report.bleu_4] {
        assert_eq!(b, Some(1.0), "{report}");
    }
}

#[test]
fn nothing_above_threshold_gives_one_fallback_box() {
    let ds = corpus();
    let mut m = model(&ds, Task::Caption);
    m.config.score_threshold = 1.0;
    for img in &ds.images {
        let r = detect_and_caption(&m, &img.image).unwrap();
        assert!(r.fallback);
        assert_eq!(r.objects.len(), 1);
    }
}

#[test]
fn end_symbol_bias_gives_empty_captions_and_zero_bleu() {
    let ds = corpus();
    let mut m = model(&ds, Task::Caption);
    let eoc = m.vocab.eoc_index();
    m.params.get_mut("cap.proj.b").unwrap().data_mut()[eoc] = 1e3;
    let r = detect_and_caption(&m, &ds.images[0].image).unwrap();
    assert!(r.objects.iter().all(|o| o.caption.is_empty()));
    m.config.score_threshold = 0.0;
    let report = evaluate_captioning(&m, &ds, ExecMode::Sequential).unwrap();
    assert_eq!(report.bleu_1, Some(0.0));
}

#[test]
fn single_candidate_is_chosen() {
    let ds = corpus();
    let mut m = model(&ds, Task::Retrieval);
    m.config.retrieval_min_score = 2.0;
    let r = retrieve(&m, &ds.images[0].image, &tokenize("a red square")).unwrap();
    assert_eq!(r.candidates.len(), 1);
    assert_eq!(r.chosen, 0);
}

#[test]
fn unknown_words_are_flagged_not_rejected() {
    let ds = corpus();
    let m = model(&ds, Task::Retrieval);
    let r = retrieve(&m, &ds.images[0].image, &tokenize("zebra wombat")).unwrap();
    assert!(r.all_unknown);
    let r = retrieve(&m, &ds.images[0].image, &tokenize("zebra square")).unwrap();
    assert!(!r.all_unknown);
    assert!(retrieve(&m, &ds.images[0].image, &[]).is_err());
}

#[test]
fn tasks_are_not_interchangeable() {
    let ds = corpus();
    let cap = model(&ds, Task::Caption);
    let ret = model(&ds, Task::Retrieval);
    assert!(matches!(retrieve(&cap, &ds.images[0].image, &tokenize("a")), Err(Error::TaskMismatch { .. })));
    assert!(matches!(detect_and_caption(&ret, &ds.images[0].image), Err(Error::TaskMismatch { .. })));
}

#[test]
fn evaluation_modes_agree_and_empty_splits_fail() {
    let ds = corpus();
    let m = model(&ds, Task::Retrieval);
    let a = evaluate_retrieval(&m, &ds, ExecMode::Sequential).unwrap();
    let b = evaluate_retrieval(&m, &ds, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
    let empty = Dataset { superclasses: ds.superclasses.clone(), images: vec![] };
    assert!(evaluate_retrieval(&m, &empty, ExecMode::Sequential).is_err());
    assert!(evaluate_captioning(&model(&ds, Task::Caption), &empty, ExecMode::Sequential).is_err());
}

proptest! {
    #[test]
    fn argmax_is_the_first_maximum(xs in prop::collection::vec(-3i32..3, 1..20)) {
        let v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        let i = argmax_first(&v);
        prop_assert!(v.iter().all(|&x| x <= v[i]));
        prop_assert!(v[..i].iter().all(|&x| x < v[i]));
    }

    #[test]
    fn argmax_ignores_monotone_rescaling(xs in prop::collection::vec(-10.0..10.0f64, 1..20), a in 0.1..5.0f64, c in -3.0..3.0f64) {
        let scaled: Vec<f64> = xs.iter().map(|x| a * x + c).collect();
        let sig: Vec<f64> = xs.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        prop_assert_eq!(argmax_first(&xs), argmax_first(&scaled));
        prop_assert_eq!(argmax_first(&xs), argmax_first(&sig));
    }
}
