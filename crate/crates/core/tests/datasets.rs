use std::collections::BTreeMap;

use got_core::datasets::{
    build_vocabulary, encode_caption, generate_synthetic_corpus, load_dataset, merge_superclasses, tokenize, write_dataset,
    SceneLayout, Splits, TemplateSet,
};

#[test]
fn superclasses_are_roughly_uniform() {
    let ds = generate_synthetic_corpus(500, 1, (64, 64), &TemplateSet::default()).unwrap();
    let mut counts = vec![0usize; ds.num_superclasses()];
    for o in ds.images.iter().flat_map(|i| &i.objects) {
        counts[o.superclass_id] += 1;
    }
    let uniform = ds.num_objects() as f64 / counts.len() as f64;
    for (k, &c) in counts.iter().enumerate() {
        assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "class {k}: {c} vs {uniform}");
    }
}

#[test]
fn vocabulary_examples() {
    let v = build_vocabulary(&[tokenize("a red dog"), tokenize("a red cat")], 2);
    assert_eq!(v.len(), 4);
    assert!(v.index("a").is_some() && v.index("red").is_some() && v.index("dog").is_none());
    let empty: Vec<Vec<String>> = Vec::new();
    assert_eq!(build_vocabulary(&empty, 2).len(), 2);
}

#[test]
fn encoding_examples() {
    let v = build_vocabulary(&[tokenize("one two three four five six seven eight")], 1);
    let long = encode_caption(&tokenize("one two three four five six seven eight"), &v, 6);
    let want: Vec<usize> = ["one", "two", "three", "four", "five", "six"].iter().map(|w| v.index(w).unwrap()).collect();
    assert_eq!(long.token_ids, want);
    let short = encode_caption(&tokenize("one two three four"), &v, 6);
    assert_eq!(&short.token_ids[4..], &[v.eoc_index(); 2]);
    let unseen = encode_caption(&["zzz-unseen".to_string()], &v, 6);
    assert_eq!(unseen.token_ids, [vec![v.unk_index()], vec![v.eoc_index(); 5]].concat());
}

#[test]
fn generated_captions_are_in_their_own_vocabulary() {
    for layout in [SceneLayout::Single, SceneLayout::Mixed, SceneLayout::SameShapePairs] {
        let ds = generate_synthetic_corpus(30, 4, (64, 64), &TemplateSet::new(&["a {size} {color} {shape}", "{shape}"], layout)).unwrap();
        let v = build_vocabulary(&ds.all_captions(), 1);
        for c in ds.all_captions() {
            assert!(!encode_caption(&c, &v, 6).token_ids.contains(&v.unk_index()));
        }
    }
}

#[test]
fn written_dataset_loads_back() {
    let ds = generate_synthetic_corpus(5, 2, (40, 48), &TemplateSet::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.superclasses, ds.superclasses);
    assert_eq!(back.images.len(), ds.images.len());
    for (a, b) in back.images.iter().zip(&ds.images) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.objects, b.objects);
        // PNG storage quantizes pixels to 8 bits
        assert!(a.image.pixels().iter().zip(b.image.pixels()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
}

#[test]
fn single_superclass_merge() {
    let ds = generate_synthetic_corpus(20, 6, (64, 64), &TemplateSet::default()).unwrap();
    let mapping: BTreeMap<usize, usize> = (0..ds.num_superclasses()).map(|k| (k, 0)).collect();
    let merged = merge_superclasses(&ds, &mapping, &["object".to_string()]).unwrap();
    assert_eq!(merged.num_superclasses(), 1);
    assert_eq!(merged.num_objects(), ds.num_objects());
    assert!(merged.images.iter().flat_map(|i| &i.objects).all(|o| o.superclass_id == 0));
}

#[test]
fn splits_are_seeded_partitions() {
    let ds = generate_synthetic_corpus(50, 6, (64, 64), &TemplateSet::default()).unwrap();
    let a = Splits::random(&ds, 0.8, 7);
    assert_eq!(a, Splits::random(&ds, 0.8, 7));
    let (train, test) = (a.get("train").unwrap(), a.get("test").unwrap());
    assert_eq!(train.len() + test.len(), 50);
    assert!(train.iter().all(|id| !test.contains(id)));
}
