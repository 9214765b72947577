//! Annotated images, vocabulary, caption encoding, the JSON-lines annotation
//! format and a synthetic shapes-and-captions corpus.

mod annotations;
mod image;
mod synth;
mod vocab;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use annotations::{load_annotations, load_dataset, read_records, write_dataset, AnnotationRecord, ObjectRecord, SUPERCLASS_FILE};
pub use image::Image;
pub use synth::{generate_synthetic_corpus, NamedColor, SceneLayout, ShapeKind, SizeClass, TemplateSet};
pub use vocab::{build_vocabulary, decode_caption, encode_caption, tokenize, TokenizedCaption, Vocabulary, EOC_WORD, UNK_WORD};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub bbox: BBox,
    pub superclass_id: usize,
    /// Tokenized captions; never empty.
    pub captions: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub image: Image,
    pub objects: Vec<AnnotatedObject>,
}

impl AnnotatedImage {
    /// Checks the type invariants against a superclass count `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let fail = |message: String| Err(Error::Validation { image_id: self.image_id.clone(), message });
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_inside(w, h) {
                return fail(format!("object {i} box {} exceeds the {w}×{h} image", o.bbox));
            }
            if o.superclass_id >= k {
                return fail(format!("object {i} superclass {} not in 0..{k}", o.superclass_id));
            }
            if o.captions.is_empty() || o.captions.iter().any(|c| c.is_empty()) {
                return fail(format!("object {i} needs at least one non-empty caption"));
            }
        }
        Ok(())
    }
}

/// Images plus the superclass name set they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub superclasses: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn num_superclasses(&self) -> usize {
        self.superclasses.len()
    }

    pub fn num_objects(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }

    pub fn num_captions(&self) -> usize {
        self.images.iter().flat_map(|i| &i.objects).map(|o| o.captions.len()).sum()
    }

    pub fn all_captions(&self) -> Vec<Vec<String>> {
        self.images
            .iter()
            .flat_map(|i| &i.objects)
            .flat_map(|o| o.captions.iter().cloned())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::Validation { image_id: img.image_id.clone(), message: "duplicate image_id".into() });
            }
            img.validate(self.num_superclasses())?;
        }
        Ok(())
    }

    /// Images whose ids appear in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let wanted: HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        Dataset {
            superclasses: self.superclasses.clone(),
            images: self.images.iter().filter(|i| wanted.contains(i.image_id.as_str())).cloned().collect(),
        }
    }
}

/// Remaps superclass ids through `mapping[old] = (new id)`, naming the new
/// classes `new_names`.
pub fn merge_superclasses(dataset: &Dataset, mapping: &BTreeMap<usize, usize>, new_names: &[String]) -> Result<Dataset> {
    for old in 0..dataset.num_superclasses() {
        match mapping.get(&old) {
            None => {
                return Err(Error::InvalidArgument(format!(
                    "superclass mapping does not cover class {old} ({})",
                    dataset.superclasses[old]
                )))
            }
            Some(&new) if new >= new_names.len() => {
                return Err(Error::InvalidArgument(format!("class {old} maps to {new}, only {} targets", new_names.len())))
            }
            _ => {}
        }
    }
    let mut out = dataset.clone();
    out.superclasses = new_names.to_vec();
    for obj in out.images.iter_mut().flat_map(|i| i.objects.iter_mut()) {
        obj.superclass_id = mapping[&obj.superclass_id];
    }
    Ok(out)
}

/// Named lists of image ids, serialized as a JSON object.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Splits(pub BTreeMap<String, Vec<String>>);

impl Splits {
    /// Seeded shuffle, then the first `train_fraction` go to `train` and the rest to `test`.
    pub fn random(dataset: &Dataset, train_fraction: f64, seed: u64) -> Splits {
        let mut ids: Vec<String> = dataset.images.iter().map(|i| i.image_id.clone()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((ids.len() as f64) * train_fraction).round() as usize;
        let test = ids.split_off(n_train.min(ids.len()));
        let mut m = BTreeMap::new();
        m.insert("train".to_string(), ids);
        m.insert("test".to_string(), test);
        Splits(m)
    }

    pub fn get(&self, name: &str) -> Option<&[String]> {
        self.0.get(name).map(|v| v.as_slice())
    }

    pub fn load(path: &std::path::Path) -> Result<Splits> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let img = Image::filled(20, 20, [0.0; 3]).unwrap();
        let obj = |k| AnnotatedObject {
            bbox: BBox::new(1.0, 1.0, 5.0, 5.0).unwrap(),
            superclass_id: k,
            captions: vec![tokenize("a thing")],
        };
        Dataset {
            superclasses: ["people", "instruments", "animals", "vehicles"].map(String::from).to_vec(),
            images: vec![AnnotatedImage { image_id: "x".into(), image: img, objects: (0..4).map(obj).collect() }],
        }
    }

    #[test]
    fn merge_all_into_one() {
        let d = toy();
        let mapping: BTreeMap<usize, usize> = (0..4).map(|k| (k, 0)).collect();
        let m = merge_superclasses(&d, &mapping, &["object".into()]).unwrap();
        assert_eq!(m.num_superclasses(), 1);
        assert!(m.images[0].objects.iter().all(|o| o.superclass_id == 0));
        m.validate().unwrap();
    }

    #[test]
    fn identity_merge_is_noop() {
        let d = toy();
        let mapping: BTreeMap<usize, usize> = (0..4).map(|k| (k, k)).collect();
        assert_eq!(merge_superclasses(&d, &mapping, &d.superclasses).unwrap(), d);
    }

    #[test]
    fn incomplete_mapping_rejected() {
        let d = toy();
        let mapping: BTreeMap<usize, usize> = (0..3).map(|k| (k, 0)).collect();
        assert!(merge_superclasses(&d, &mapping, &["object".into()]).is_err());
    }

    #[test]
    fn box_outside_image_fails_validation() {
        let mut d = toy();
        d.images[0].objects[0].bbox = BBox::new(10.0, 10.0, 25.0, 12.0).unwrap();
        assert!(matches!(d.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn splits_partition_ids() {
        let mut d = toy();
        for i in 0..9 {
            let mut img = d.images[0].clone();
            img.image_id = format!("img{i}");
            d.images.push(img);
        }
        let s = Splits::random(&d, 0.5, 3);
        let (tr, te) = (s.get("train").unwrap(), s.get("test").unwrap());
        assert_eq!(tr.len() + te.len(), 10);
        assert!(tr.iter().all(|id| !te.contains(id)));
    }
}
