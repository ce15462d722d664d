//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name with
//! a `_impl` suffix, so the logic is testable without a browser.

use mixformer::attention::{AttentionMode, MamBlock, TokenLayout};
use mixformer::bbox::BoundingBox;
use mixformer::heads::{order_corners, soft_argmax};
use mixformer::losses::{loc_loss, LossConfig};
use mixformer::nn::{Graph, Init, ParamStore};
use mixformer::{Error, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn four(v: &[f64], what: &str) -> Result<BoundingBox> {
    match v {
        [a, b, c, d] => Ok(BoundingBox::new(*a, *b, *c, *d)),
        _ => Err(Error::Usage(format!("{what} needs 4 numbers, got {}", v.len()))),
    }
}

/// `[iou, giou, loc_loss, ex0, ey0, ex1, ey1]` for two `(x0, y0, x1, y1)`
/// boxes; the last four give the smallest enclosing box.
pub fn box_metrics_impl(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = (four(a, "box a")?.ordered(), four(b, "box b")?.ordered());
    Ok(vec![
        a.iou(&b),
        a.giou(&b),
        loc_loss(&a, &b, &LossConfig::default()),
        a.x0.min(b.x0),
        a.y0.min(b.y0),
        a.x1.max(b.x1),
        a.y1.max(b.y1),
    ])
}

#[wasm_bindgen]
pub fn box_metrics(a: &[f64], b: &[f64]) -> std::result::Result<Vec<f64>, JsError> {
    box_metrics_impl(a, b).map_err(js)
}

/// Decodes two `size × size` corner logit maps. Returns the ordered box
/// `(x0, y0, x1, y1)` in `[0, 1]` followed by both probability maps.
pub fn decode_corners_impl(top_left: &[f64], bottom_right: &[f64], size: usize) -> Result<Vec<f64>> {
    let n = size * size;
    if size == 0 || top_left.len() != n || bottom_right.len() != n {
        return Err(Error::Usage(format!("expected two maps of {n} logits")));
    }
    let mut t = Tape::<f64>::inference();
    let tl = t.constant(Tensor::new(&[size, size], top_left.to_vec())?);
    let br = t.constant(Tensor::new(&[size, size], bottom_right.to_vec())?);
    let a = soft_argmax(&mut t, tl)?;
    let b = soft_argmax(&mut t, br)?;
    let raw = t.concat(&[a, b], 1)?;
    let corners = order_corners(&mut t, raw)?;
    let mut out = t.value(corners).data().to_vec();
    for map in [tl, br] {
        let flat = t.reshape(map, &[1, n])?;
        let p = t.softmax_last(flat)?;
        out.extend_from_slice(t.value(p).data());
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn decode_corners(top_left: &[f64], bottom_right: &[f64], size: usize) -> std::result::Result<Vec<f64>, JsError> {
    decode_corners_impl(top_left, bottom_right, size).map_err(js)
}

/// Demo layout: two 4×4 templates and an 8×8 search region, 16 channels.
fn demo_layout() -> Result<TokenLayout> {
    TokenLayout::new(2, 4, 4, 8, 8, 16)
}

/// Head-averaged attention of a randomly initialized block on random
/// tokens. Returns `[rows, cols, template_rows, template_cols, weights…]`
/// where the weights are row-major `rows × cols`.
pub fn attention_map_impl(mode: &str, seed: u32) -> Result<Vec<f32>> {
    let mode = AttentionMode::parse(mode).ok_or_else(|| Error::Usage(format!("unknown mode {mode:?}")))?;
    let layout = demo_layout()?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let block = MamBlock::new(&mut Init::new(&mut store, &mut rng), "demo", layout.dim, 2, 2)?;
    let tokens = Tensor::from_fn(&[layout.total(), layout.dim], |_| rng.random_range(-1.0f32..1.0));
    let mut g = Graph::inference(&store);
    let x = g.constant(tokens);
    let probs = block.attention_probs(&mut g, x, &layout, mode)?;
    let s = probs.probs.shape();
    let mut out = vec![
        s[0] as f32,
        s[1] as f32,
        layout.template_tokens() as f32,
        layout.kv().template_tokens() as f32,
    ];
    out.extend_from_slice(probs.probs.data());
    Ok(out)
}

#[wasm_bindgen]
pub fn attention_map(mode: &str, seed: u32) -> std::result::Result<Vec<f32>, JsError> {
    attention_map_impl(mode, seed).map_err(js)
}
