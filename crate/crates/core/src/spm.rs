//! Score prediction module: a learnable score token attends the search
//! features under the predicted box, then the first template, and an MLP
//! turns it into a confidence.

use crate::attention::map_to_tokens;
use crate::autodiff::Var;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::heads::grid_coord;
use crate::nn::{Graph, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_ROI_GRID: usize = 4;

/// Bilinear sampling weights `[g², h·w]` for a `g × g` grid spanning `roi`
/// (normalized, corners of the grid on the box edges) over an `h × w` map.
/// A zero-area box samples the single cell nearest to its centre.
pub fn roi_sampling_matrix<F: Float>(h: usize, w: usize, roi: &BoundingBox, grid: usize) -> Result<Tensor<F>> {
    if h * w == 0 || grid == 0 {
        return Err(Error::config("roi pooling needs a non-empty map and grid"));
    }
    let b = roi.clamp_unit();
    let mut m = vec![F::zero(); grid * grid * h * w];
    let to_px = |u: f64, n: usize| u * (n.max(1) - 1) as f64;
    if b.area() <= 0.0 {
        let [cx, cy] = b.center();
        let (j, i) = (to_px(cx, w).round() as usize, to_px(cy, h).round() as usize);
        for r in 0..grid * grid {
            m[r * h * w + i * w + j] = F::one();
        }
        return Tensor::new(&[grid * grid, h * w], m);
    }
    for gi in 0..grid {
        let y = to_px(b.y0 + grid_coord(gi, grid) * b.height(), h);
        let (y0, fy) = split(y, h);
        for gj in 0..grid {
            let x = to_px(b.x0 + grid_coord(gj, grid) * b.width(), w);
            let (x0, fx) = split(x, w);
            let row = &mut m[(gi * grid + gj) * h * w..][..h * w];
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    row[yy * w + xx] += F::lit(wy * wx);
                }
            }
        }
    }
    Tensor::new(&[grid * grid, h * w], m)
}

/// Integer cell and fractional offset of a pixel coordinate in `[0, n−1]`.
fn split(p: f64, n: usize) -> (usize, f64) {
    let p = p.clamp(0.0, (n - 1) as f64);
    let i = (p.floor() as usize).min(n - 1);
    (i, p - i as f64)
}

/// `g²` tokens `[g², D]` pooled from a `[D, h, w]` map inside `roi`.
pub fn roi_tokens<F: Float>(g: &mut Graph<'_, F>, map: Var, roi: &BoundingBox, grid: usize) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("roi_tokens", &s, &[0, 0, 0]));
    }
    let sample = g.constant(roi_sampling_matrix(s[1], s[2], roi, grid)?);
    let tokens = map_to_tokens(g, map)?;
    g.matmul(sample, tokens)
}

/// Single-head pre-norm cross-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl CrossBlock {
    fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            norm_q: LayerNorm::new(&mut s, "norm_q", dim),
            norm_kv: LayerNorm::new(&mut s, "norm_kv", dim),
            wq: Linear::new(&mut s, "wq", dim, dim),
            wk: Linear::new(&mut s, "wk", dim, dim),
            wv: Linear::new(&mut s, "wv", dim, dim),
            wo: Linear::new(&mut s, "wo", dim, dim),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, query: Var, context: Var) -> Result<Var> {
        let dim = g.shape(query)[1];
        let qn = self.norm_q.forward(g, query)?;
        let cn = self.norm_kv.forward(g, context)?;
        let q = self.wq.forward(g, qn)?;
        let k = self.wk.forward(g, cn)?;
        let v = self.wv.forward(g, cn)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, F::lit(1.0 / (dim as f64).sqrt()));
        let p = g.softmax_last(logits)?;
        let att = g.matmul(p, v)?;
        let out = self.wo.forward(g, att)?;
        g.add(query, out)
    }
}

#[derive(Clone, Debug)]
pub struct Spm {
    pub grid: usize,
    pub score_token: ParamId,
    pub roi_block: CrossBlock,
    pub template_block: CrossBlock,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl Spm {
    pub fn new<F: Float>(init: &mut Init<'_, F>, dim: usize, grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::config("roi grid must be >= 1"));
        }
        let mut s = init.scope("spm");
        Ok(Self {
            grid,
            score_token: s.normal("score_token", &[1, dim], 0.02),
            roi_block: CrossBlock::new(&mut s, "roi_attn", dim),
            template_block: CrossBlock::new(&mut s, "template_attn", dim),
            fc1: Linear::new(&mut s, "fc1", dim, dim),
            fc2: Linear::new(&mut s, "fc2", dim, dim),
            fc3: Linear::new(&mut s, "fc3", dim, 1),
        })
    }

    /// Confidence `[1, 1]` in `(0, 1)` for the box predicted on `search_map`.
    /// Only the search features and the first template's final tokens are read.
    pub fn predict<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        search_map: Var,
        pred_box: &BoundingBox,
        first_template: Var,
    ) -> Result<Var> {
        let roi = roi_tokens(g, search_map, pred_box, self.grid)?;
        let token = g.param(self.score_token);
        let x = self.roi_block.forward(g, token, roi)?;
        let x = self.template_block.forward(g, x, first_template)?;
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.relu(h);
        let logit = self.fc3.forward(g, h)?;
        Ok(g.sigmoid(logit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_box_square_grid_is_identity() {
        let m = roi_sampling_matrix::<f64>(4, 4, &BoundingBox::new(0.0, 0.0, 1.0, 1.0), 4).unwrap();
        assert!(m.bit_eq(&Tensor::eye(16)));
    }

    #[test]
    fn half_box_on_ramp_matches_hand_samples() {
        // feature value = 10·i + j on a 5×5 grid, box = left-top quarter
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let map = g.constant(Tensor::from_fn(&[1, 5, 5], |k| (10 * (k / 5) + k % 5) as f64));
        let roi = BoundingBox::new(0.0, 0.0, 0.5, 0.5);
        let t = roi_tokens(&mut g, map, &roi, 3).unwrap();
        // samples at pixel offsets 0, 1, 2 on each axis
        let want = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0, 20.0, 21.0, 22.0];
        assert_eq!(g.value(t).data(), &want);

        let roi = BoundingBox::new(0.1, 0.2, 0.6, 0.7);
        let t = roi_tokens(&mut g, map, &roi, 2).unwrap();
        // x ∈ {0.4, 2.4}, y ∈ {0.8, 2.8}; the ramp is linear so bilinear is exact
        let want = [8.4, 10.4, 28.4, 30.4];
        for (a, b) in g.value(t).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_and_zero_area_box() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let map = g.constant(Tensor::full(&[3, 4, 6], 2.5));
        let t = roi_tokens(&mut g, map, &BoundingBox::new(0.2, 0.1, 0.9, 0.6), 4).unwrap();
        assert!(g.value(t).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));

        let ramp = g.constant(Tensor::from_fn(&[1, 3, 3], |k| k as f64));
        let t = roi_tokens(&mut g, ramp, &BoundingBox::new(0.5, 1.0, 0.5, 1.0), 2).unwrap();
        assert_eq!(g.value(t).data(), &[7.0; 4]);
    }

    fn spm(seed: u64) -> (ParamStore<f64>, Spm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Spm::new(&mut Init::new(&mut store, &mut rng), 8, 2).unwrap();
        (store, s)
    }

    fn inputs(g: &mut Graph<'_, f64>, seed: u64) -> (Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = g.constant(Tensor::from_fn(&[8, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let t = g.constant(Tensor::from_fn(&[4, 8], |_| rng.random_range(-1.0..1.0)));
        (m, t)
    }

    #[test]
    fn score_in_open_unit_interval() {
        for seed in 0..100 {
            let (store, s) = spm(seed);
            let mut g = Graph::inference(&store);
            let (m, t) = inputs(&mut g, seed + 1000);
            let p = s.predict(&mut g, m, &BoundingBox::new(0.1, 0.2, 0.8, 0.9), t).unwrap();
            let p = g.value(p).item();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let (mut store, s) = spm(1);
        store.set(s.fc3.weight, Tensor::zeros(&[8, 1])).unwrap();
        let mut g = Graph::inference(&store);
        let (m, t) = inputs(&mut g, 3);
        let p = s.predict(&mut g, m, &BoundingBox::new(0.0, 0.0, 1.0, 1.0), t).unwrap();
        assert_eq!(g.value(p).item(), 0.5);
    }
}
