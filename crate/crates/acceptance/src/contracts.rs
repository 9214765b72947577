//! Inference contracts on untrained and briefly trained models, plus the
//! concurrent-request storm against the HTTP service.

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use got_core::checkpoint::save_checkpoint;
use got_core::datasets::{build_vocabulary, generate_synthetic_corpus, Dataset, Image, TemplateSet};
use got_core::error::Result;
use got_core::infer_eval::{detect_and_caption, retrieve};
use got_core::model::{Model, ModelConfig, Task};
use got_core::trainer::TrainConfig;
use got_serve::{router, ServiceState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use crate::{Checks, Outcome};

pub const RANDOM_IMAGES: usize = 40;
pub const STORM: usize = 100;

fn corpus() -> Result<Dataset> {
    generate_synthetic_corpus(4, 3, (64, 64), &TemplateSet::default())
}

pub fn model(ds: &Dataset, task: Task, seed: u64) -> Result<Model> {
    let vocab = build_vocabulary(&ds.all_captions(), 1);
    let cfg = ModelConfig::toy(task, ds.num_superclasses(), vocab.len());
    Model::new(cfg, vocab, ds.superclasses.clone(), seed)
}

/// Noise, flat colour or stripes at a random size of at least one stride cell.
pub fn random_image(rng: &mut ChaCha8Rng) -> Result<Image> {
    let (h, w) = (rng.gen_range(8..100), rng.gen_range(8..100));
    let kind = rng.gen_range(0..3);
    let flat = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for (ch, &f) in flat.iter().enumerate() {
                px.push(match kind {
                    0 => rng.gen::<f32>(),
                    1 => f,
                    _ => if (x / 4 + y / 4 + ch) % 2 == 0 { 1.0 } else { 0.0 },
                });
            }
        }
    }
    Image::new(h, w, px)
}

fn detection_contracts(c: &mut Checks) -> Result<()> {
    let ds = corpus()?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut min_objects = usize::MAX;
    for seed in 0..4 {
        let m = model(&ds, Task::Caption, seed)?;
        let eoc = got_core::datasets::EOC_WORD;
        for i in 0..RANDOM_IMAGES / 4 {
            let img = if i == 0 { ds.images[seed as usize].image.clone() } else { random_image(&mut rng)? };
            let r = detect_and_caption(&m, &img)?;
            min_objects = min_objects.min(r.objects.len());
            c.check(!r.objects.is_empty(), format!("no detection for model {seed} image {i}"));
            for o in &r.objects {
                c.check(o.caption.len() <= m.config.n_steps, "caption longer than n_steps");
                c.check(o.caption.iter().all(|w| w != eoc), "caption contains the end symbol");
                c.check(o.bbox.x2() <= img.width() as f64 && o.bbox.y2() <= img.height() as f64, "box outside the image");
            }
        }
    }
    c.note(format!("{RANDOM_IMAGES} images, min detections {min_objects}"));
    Ok(())
}

fn retrieval_contracts(c: &mut Checks) -> Result<()> {
    let ds = corpus()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let queries = [["a", "red", "square"].as_slice(), &["blue"], &["zebra", "wombat"], &["the", "small", "green", "triangle", "on", "the", "left"]];
    let mut checked = 0;
    for seed in 0..3 {
        let m = model(&ds, Task::Retrieval, seed)?;
        for i in 0..RANDOM_IMAGES / 4 {
            let img = if i == 0 { ds.images[seed as usize].image.clone() } else { random_image(&mut rng)? };
            let q: Vec<String> = queries[i % queries.len()].iter().map(|s| s.to_string()).collect();
            let a = retrieve(&m, &img, &q)?;
            let b = retrieve(&m, &img, &q)?;
            c.check(a == b, "retrieve differs between identical calls");
            let best = a.candidates.iter().map(|x| x.raw).fold(f64::NEG_INFINITY, f64::max);
            let first = a.candidates.iter().position(|x| x.raw == best);
            c.check(first == Some(a.chosen), "chosen candidate is not the first argmax");
            c.check(a.bbox == a.candidates[a.chosen].bbox && a.score == a.candidates[a.chosen].score, "result disagrees with its candidate");
            checked += 1;
        }
    }
    c.note(format!("{checked} retrievals deterministic and argmax-consistent"));
    Ok(())
}

async fn call(state: &Arc<ServiceState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    match router(state.clone()).oneshot(req).await {
        Ok(resp) => {
            let status = resp.status();
            (status, to_bytes(resp.into_body(), usize::MAX).await.map(|b| b.to_vec()).unwrap_or_default())
        }
        Err(e) => match e {},
    }
}

/// Loads saved checkpoints into a fresh service and fires `STORM` concurrent
/// identical requests per endpoint. Returns the number of distinct bodies per
/// endpoint and the failure count.
pub fn storm() -> Result<(usize, usize, usize)> {
    let ds = corpus()?;
    let dir = std::env::temp_dir().join(format!("got-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let state = ServiceState::new();
    for task in [Task::Caption, Task::Retrieval] {
        let m = model(&ds, task, 5)?;
        let path = dir.join(format!("{task}.ckpt"));
        save_checkpoint(&path, &m, None, &TrainConfig::toy(task), 0, &[])?;
        state.load_checkpoint(task, &path)?;
    }
    let _ = std::fs::remove_dir_all(&dir);
    let png = ds.images[0].image.encode_png()?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let results = rt.block_on(async {
        let mut handles = Vec::new();
        for i in 0..2 * STORM {
            let (s, body) = (state.clone(), png.clone());
            handles.push(tokio::spawn(async move {
                let uri = if i % 2 == 0 { "/v1/caption" } else { "/v1/retrieve?query=a%20red%20square" };
                let req = Request::post(uri).header("content-type", "image/png").body(Body::from(body)).expect("valid request");
                (i % 2, call(&s, req).await)
            }));
        }
        let mut out = Vec::new();
        for h in handles {
            out.push(h.await.ok());
        }
        out
    });
    let mut bodies: [std::collections::BTreeSet<Vec<u8>>; 2] = Default::default();
    let mut failures = 0;
    for r in results {
        match r {
            Some((k, (StatusCode::OK, body))) => {
                bodies[k].insert(body);
            }
            _ => failures += 1,
        }
    }
    Ok((bodies[0].len(), bodies[1].len(), failures))
}

pub fn criterion() -> Outcome {
    let mut c = Checks::default();
    if let Err(e) = detection_contracts(&mut c) {
        c.check(false, format!("detect_and_caption: {e}"));
    }
    if let Err(e) = retrieval_contracts(&mut c) {
        c.check(false, format!("retrieve: {e}"));
    }
    match storm() {
        Ok((cap, ret, failed)) => {
            c.note(format!("storm {STORM}x2: {cap}+{ret} distinct bodies, {failed} failures"));
            c.check(cap == 1 && ret == 1 && failed == 0, "service bodies differ under concurrency");
        }
        Err(e) => c.check(false, format!("storm: {e}")),
    }
    c.finish()
}
