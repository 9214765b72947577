use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, AnnotatedImage, AnnotatedObject, Dataset, Image};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Sidecar file, next to the annotation file, declaring the superclass names.
pub const SUPERCLASS_FILE: &str = "superclasses.json";

/// One JSON line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub superclass: String,
    pub captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SuperclassSidecar {
    superclasses: Vec<String>,
}

/// Parses the JSON lines without touching image files. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

fn to_image(rec: &AnnotationRecord, base: &Path, superclasses: &[String]) -> Result<AnnotatedImage> {
    let invalid = |message: String| Error::Validation { image_id: rec.image_id.clone(), message };
    let image = Image::open(&base.join(&rec.image_path))
        .map_err(|e| invalid(format!("cannot read image {}: {e}", rec.image_path)))?;
    if image.width() != rec.width || image.height() != rec.height {
        return Err(invalid(format!(
            "declared {}×{} but image is {}×{}",
            rec.width,
            rec.height,
            image.width(),
            image.height()
        )));
    }
    let mut objects = Vec::with_capacity(rec.objects.len());
    for (i, o) in rec.objects.iter().enumerate() {
        let bbox = BBox::try_from(o.bbox).map_err(|e| invalid(format!("object {i}: {e}")))?;
        let superclass_id = superclasses
            .iter()
            .position(|s| *s == o.superclass)
            .ok_or_else(|| invalid(format!("object {i}: unknown superclass `{}`", o.superclass)))?;
        let captions = o.captions.iter().map(|c| tokenize(c)).collect();
        objects.push(AnnotatedObject { bbox, superclass_id, captions });
    }
    let img = AnnotatedImage { image_id: rec.image_id.clone(), image, objects };
    img.validate(superclasses.len())?;
    Ok(img)
}

/// Loads and validates an annotation file; image paths resolve relative to
/// the file's directory.
pub fn load_annotations(path: &Path, superclasses: &[String]) -> Result<Vec<AnnotatedImage>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_records(path)?.iter().map(|r| to_image(r, base, superclasses)).collect()
}

/// Loads the annotation file together with its superclass sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let sidecar: SuperclassSidecar = serde_json::from_slice(&std::fs::read(base.join(SUPERCLASS_FILE))?)?;
    let images = load_annotations(path, &sidecar.superclasses)?;
    let ds = Dataset { superclasses: sidecar.superclasses, images };
    ds.validate()?;
    Ok(ds)
}

/// Writes `annotations.jsonl`, the superclass sidecar and one PNG per image
/// under `dir/images/`. Returns the annotation file path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let ann_path = dir.join("annotations.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&ann_path)?);
    for img in &dataset.images {
        let rel = format!("images/{}.png", img.image_id);
        img.image.save_png(&dir.join(&rel))?;
        let rec = AnnotationRecord {
            image_id: img.image_id.clone(),
            image_path: rel,
            width: img.image.width(),
            height: img.image.height(),
            objects: img
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    bbox: o.bbox.to_array(),
                    superclass: dataset.superclasses[o.superclass_id].clone(),
                    captions: o.captions.iter().map(|c| c.join(" ")).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    let sidecar = SuperclassSidecar { superclasses: dataset.superclasses.clone() };
    std::fs::write(dir.join(SUPERCLASS_FILE), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(ann_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_corpus, TemplateSet};

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_annotations(&p, &[]).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(&p, "\n{not json}\n").unwrap();
        match read_records(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inverted_box_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(10, 10, [0.5; 3]).unwrap().save_png(&dir.path().join("i.png")).unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(
            &p,
            r#"{"image_id":"bad","image_path":"i.png","width":10,"height":10,"objects":[{"box":[5,1,2,4],"superclass":"animals","captions":["a dog"]}]}"#,
        )
        .unwrap();
        match load_annotations(&p, &["animals".into()]) {
            Err(Error::Validation { image_id, .. }) => assert_eq!(image_id, "bad"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_corpus(6, 11, (48, 48), &TemplateSet::default()).unwrap();
        let p = write_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(&p).unwrap();
        // PNG stores 8-bit intensities
        let mut expected = ds.clone();
        for img in &mut expected.images {
            img.image = img.image.quantized();
        }
        assert_eq!(loaded, expected);
        let dir2 = tempfile::tempdir().unwrap();
        let p2 = write_dataset(dir2.path(), &loaded).unwrap();
        assert_eq!(load_dataset(&p2).unwrap(), loaded);
    }
}
