//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Boxes cross the boundary as flat `[cx, cy, w, h, ...]` arrays.

use serde_json::json;
use ssg_core::dataset::generate_sample;
use ssg_core::geometry::BBox;
use ssg_core::isd::refine;
use ssg_core::labels::build_salience_labels;
use ssg_core::matching::solve;
use ssg_core::synthetic::{DetectorStub, SceneConfig, Split, RELATION_NAMES};
use ssg_core::tensor::Tape;
use wasm_bindgen::prelude::*;

fn sample(seed: u64) -> ssg_core::dataset::Sample {
    let cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    generate_sample(&cfg, &DetectorStub::new(&cfg), Split::Test, 0)
}

fn flat(boxes: impl IntoIterator<Item = BBox>) -> Vec<f64> {
    boxes.into_iter().flat_map(|b| [b.cx(), b.cy(), b.w(), b.h()]).collect()
}

/// The scene for `seed` as JSON: GT boxes, classes and triplets, plus the
/// detected boxes and their argmax classes.
#[wasm_bindgen]
pub fn scene(seed: u64) -> String {
    let s = sample(seed);
    let triplets: Vec<_> =
        s.gt.triplets
            .iter()
            .map(|t| json!({"s": t.subject, "o": t.object, "pred": RELATION_NAMES.get(t.predicate).copied().unwrap_or("?")}))
            .collect();
    json!({
        "gt_boxes": flat(s.gt.entities.iter().map(|e| e.bbox)),
        "gt_classes": s.gt.entities.iter().map(|e| e.class).collect::<Vec<_>>(),
        "triplets": triplets,
        "det_boxes": flat(s.det.boxes.iter().copied()),
        "det_classes": (0..s.det.len()).map(|i| s.det.predicted_class(i)).collect::<Vec<_>>(),
    })
    .to_string()
}

/// Row-major `N x N` salience labels of the detections in scene `seed`.
#[wasm_bindgen]
pub fn salience_labels(seed: u64, thresh: f64) -> Vec<u8> {
    let s = sample(seed);
    let labels = build_salience_labels(&s.det.boxes, &s.gt, thresh);
    let n = labels.n();
    (0..n * n).map(|k| labels.get(k / n, k % n) as u8).collect()
}

/// Minimum-cost assignment of a `rows x cols` cost matrix; entry `i` is the
/// column matched to row `i`, or -1.
#[wasm_bindgen]
pub fn assign(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<i32>, JsError> {
    if rows * cols != cost.len() {
        return Err(JsError::new("cost matrix size does not match rows x cols"));
    }
    let matrix: Vec<Vec<f64>> = cost.chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
    let a = solve(&matrix).map_err(|e| JsError::new(&e.to_string()))?;
    Ok((0..rows).map(|i| a.gt_for(i).map_or(-1, |j| j as i32)).collect())
}

/// One refinement step of an `N x N` salience matrix by `N x d` queries.
#[wasm_bindgen]
pub fn refine_step(m: &[f64], q_sub: &[f64], q_obj: &[f64], n: usize, d: usize) -> Result<Vec<f64>, JsError> {
    let tape = Tape::new();
    let err = |e: ssg_core::tensor::TensorError| JsError::new(&e.to_string());
    let m = tape.constant([n, n], m.to_vec()).map_err(err)?;
    let s = tape.constant([n, d], q_sub.to_vec()).map_err(err)?;
    let o = tape.constant([n, d], q_obj.to_vec()).map_err(err)?;
    Ok(refine(m, s, o).map_err(err)?.to_vec())
}
