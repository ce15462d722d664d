//! Mixed attention over a concatenated template/search token sequence.
//!
//! Tokens are laid out as `T` template grids followed by one search grid,
//! each flattened row-major. Queries, keys and values come from a depth-wise
//! 3×3 convolution applied to every region's 2-D map separately (keys and
//! values with stride 2), followed by a linear projection. Spatial structure
//! enters only through these convolutions; there are no positional
//! embeddings.

use std::fmt::Write as _;

use crate::autodiff::kernels::conv_out_extent;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Float, Tensor};

pub const PROJ_KERNEL: usize = 3;
pub const PROJ_PAD: usize = 1;
pub const KV_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub templates: usize,
    pub t_h: usize,
    pub t_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub dim: usize,
}

impl TokenLayout {
    pub fn new(templates: usize, t_h: usize, t_w: usize, s_h: usize, s_w: usize, dim: usize) -> Result<Self> {
        if [templates, t_h, t_w, s_h, s_w, dim].contains(&0) {
            return Err(Error::config("token layout extents must be >= 1"));
        }
        Ok(Self { templates, t_h, t_w, s_h, s_w, dim })
    }

    pub fn template_len(&self) -> usize {
        self.t_h * self.t_w
    }

    pub fn search_len(&self) -> usize {
        self.s_h * self.s_w
    }

    pub fn template_tokens(&self) -> usize {
        self.templates * self.template_len()
    }

    pub fn total(&self) -> usize {
        self.template_tokens() + self.search_len()
    }

    /// Layout of the stride-2 key/value grids.
    pub fn kv(&self) -> Self {
        let half = |n| conv_out_extent(n, PROJ_KERNEL, KV_STRIDE, PROJ_PAD).expect("extent >= 1");
        Self {
            t_h: half(self.t_h),
            t_w: half(self.t_w),
            s_h: half(self.s_h),
            s_w: half(self.s_w),
            ..*self
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.total() {
            return Err(Error::Layout {
                expected: self.total(),
                got: len,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Every query attends to all template and search keys.
    FullMixed,
    /// Template queries attend only template keys; search queries see all.
    Asymmetric,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::FullMixed),
            "asymmetric" => Some(Self::Asymmetric),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FullMixed => "full",
            Self::Asymmetric => "asymmetric",
        }
    }
}

/// `[n, dim]` tokens of an `h × w` grid to a `[dim, h, w]` map.
pub fn tokens_to_map<F: Float>(g: &mut Graph<'_, F>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let dim = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, &[dim, h, w])
}

/// `[dim, h, w]` map to `[h·w, dim]` tokens.
pub fn map_to_tokens<F: Float>(g: &mut Graph<'_, F>, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    let flat = g.reshape(map, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Splits `[L, dim]` tokens into `T` template maps and the search map.
pub fn split_and_reshape<F: Float>(
    g: &mut Graph<'_, F>,
    tokens: Var,
    layout: &TokenLayout,
) -> Result<(Vec<Var>, Var)> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[1] != layout.dim {
        return Err(Error::shape("split_and_reshape", &shape, &[layout.total(), layout.dim]));
    }
    layout.check(shape[0])?;
    let n = layout.template_len();
    let mut templates = Vec::with_capacity(layout.templates);
    for i in 0..layout.templates {
        let rows = g.slice(tokens, 0, i * n, n)?;
        templates.push(tokens_to_map(g, rows, layout.t_h, layout.t_w)?);
    }
    let rows = g.slice(tokens, 0, layout.template_tokens(), layout.search_len())?;
    let search = tokens_to_map(g, rows, layout.s_h, layout.s_w)?;
    Ok((templates, search))
}

/// Inverse of [`split_and_reshape`].
pub fn flatten_and_concat<F: Float>(g: &mut Graph<'_, F>, templates: &[Var], search: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(templates.len() + 1);
    for &m in templates.iter().chain(std::iter::once(&search)) {
        parts.push(map_to_tokens(g, m)?);
    }
    g.concat(&parts, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjRole {
    Query,
    Key,
    Value,
}

impl ProjRole {
    pub fn stride(self) -> usize {
        match self {
            ProjRole::Query => 1,
            ProjRole::Key | ProjRole::Value => KV_STRIDE,
        }
    }
}

/// Depth-wise 3×3 projection of one region's `[dim, h, w]` map.
pub fn conv_projection<F: Float>(g: &mut Graph<'_, F>, map: Var, role: ProjRole, kernel: Var) -> Result<Var> {
    g.depthwise_conv2d(map, kernel, role.stride(), PROJ_PAD)
}

/// `Softmax(q·kᵀ/√d)·v`, returning the output and the probabilities.
fn attend<F: Float>(g: &mut Graph<'_, F>, q: Var, k: Var, v: Var, d: usize) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != d || ks[1] != d {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("attention key/value", &ks, &vs));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, F::one() / F::lit(d as f64).sqrt());
    let probs = g.softmax(logits, 1)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// Full mixed attention: both branches attend the concatenated keys/values.
#[allow(clippy::too_many_arguments)]
pub fn mixed_attention<F: Float>(
    g: &mut Graph<'_, F>,
    q_t: Var,
    k_t: Var,
    v_t: Var,
    q_s: Var,
    k_s: Var,
    v_s: Var,
    d: usize,
) -> Result<(Var, Var)> {
    let k_m = g.concat(&[k_t, k_s], 0)?;
    let v_m = g.concat(&[v_t, v_s], 0)?;
    let (att_t, _) = attend(g, q_t, k_m, v_m, d)?;
    let (att_s, _) = attend(g, q_s, k_m, v_m, d)?;
    Ok((att_t, att_s))
}

/// Asymmetric mixed attention: template queries see only template keys.
#[allow(clippy::too_many_arguments)]
pub fn asymmetric_attention<F: Float>(
    g: &mut Graph<'_, F>,
    q_t: Var,
    k_t: Var,
    v_t: Var,
    q_s: Var,
    k_s: Var,
    v_s: Var,
    d: usize,
) -> Result<(Var, Var)> {
    let (att_t, _) = attend(g, q_t, k_t, v_t, d)?;
    let k_m = g.concat(&[k_t, k_s], 0)?;
    let v_m = g.concat(&[v_t, v_s], 0)?;
    let (att_s, _) = attend(g, q_s, k_m, v_m, d)?;
    Ok((att_t, att_s))
}

/// Projected queries, keys and values of one group of regions, all heads.
#[derive(Clone, Copy)]
struct Qkv {
    q: Var,
    k: Var,
    v: Var,
}

/// Cached template keys/values of one block, used to run search tokens
/// against fixed templates in asymmetric mode.
#[derive(Clone, Debug)]
pub struct TemplateKv<F: Float> {
    pub k: Tensor<F>,
    pub v: Tensor<F>,
}

/// One mixed-attention block followed by an MLP, both pre-norm residual.
#[derive(Clone, Debug)]
pub struct MamBlock {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub norm1: LayerNorm,
    pub dw_q: ParamId,
    pub dw_k: ParamId,
    pub dw_v: ParamId,
    pub proj_q: Linear,
    pub proj_k: Linear,
    pub proj_v: Linear,
    pub proj_o: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Head-averaged softmax weights from one block.
pub struct AttentionProbs<F: Float> {
    pub layout: TokenLayout,
    pub mode: AttentionMode,
    /// `[L, L_kv]`; columns are template keys then search keys. In
    /// asymmetric mode template rows are zero over search columns.
    pub probs: Tensor<F>,
}

impl MamBlock {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let mut s = init.scope(name);
        let k = PROJ_KERNEL;
        let dw_std = 1.0 / (k * k) as f64;
        let hidden = dim * mlp_ratio;
        Ok(Self {
            dim,
            heads,
            mlp_hidden: hidden,
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            dw_q: s.normal("attn.dw_q", &[dim, k, k], dw_std),
            dw_k: s.normal("attn.dw_k", &[dim, k, k], dw_std),
            dw_v: s.normal("attn.dw_v", &[dim, k, k], dw_std),
            proj_q: Linear::new(&mut s, "attn.wq", dim, dim),
            proj_k: Linear::new(&mut s, "attn.wk", dim, dim),
            proj_v: Linear::new(&mut s, "attn.wv", dim, dim),
            proj_o: Linear::new(&mut s, "attn.wo", dim, dim),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            fc1: Linear::new(&mut s, "mlp.fc1", dim, hidden),
            fc2: Linear::new(&mut s, "mlp.fc2", hidden, dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Depth-wise conv of every map per role, flattened and concatenated,
    /// then linearly projected.
    fn project_group<F: Float>(&self, g: &mut Graph<'_, F>, maps: &[Var]) -> Result<Qkv> {
        let mut out = Vec::with_capacity(3);
        for (role, kernel, lin) in [
            (ProjRole::Query, self.dw_q, &self.proj_q),
            (ProjRole::Key, self.dw_k, &self.proj_k),
            (ProjRole::Value, self.dw_v, &self.proj_v),
        ] {
            let kernel = g.param(kernel);
            let mut rows = Vec::with_capacity(maps.len());
            for &m in maps {
                let p = conv_projection(g, m, role, kernel)?;
                rows.push(map_to_tokens(g, p)?);
            }
            let cat = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
            out.push(lin.forward(g, cat)?);
        }
        Ok(Qkv {
            q: out[0],
            k: out[1],
            v: out[2],
        })
    }

    fn head<F: Float>(&self, g: &mut Graph<'_, F>, x: Var, h: usize) -> Result<Var> {
        if self.heads == 1 {
            return Ok(x);
        }
        let d = self.head_dim();
        g.slice(x, 1, h * d, d)
    }

    /// Output projection, residual, then the MLP residual.
    fn finish<F: Float>(&self, g: &mut Graph<'_, F>, input: Var, heads: Vec<Var>) -> Result<Var> {
        let attn = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        let attn = self.proj_o.forward(g, attn)?;
        let y = g.add(input, attn)?;
        let h = self.norm2.forward(g, y)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(y, h)
    }

    /// Block forward over `[L, dim]` tokens. `extra` rows (e.g. a regression
    /// token) are appended as queries that see all keys but contribute none.
    pub fn forward_with_extra<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: Var,
        layout: &TokenLayout,
        mode: AttentionMode,
        extra: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let (out, _) = self.run(g, tokens, layout, mode, extra, false)?;
        let l = layout.total();
        match extra {
            None => Ok((out, None)),
            Some(e) => {
                let n_extra = g.shape(e)[0];
                let body = g.slice(out, 0, 0, l)?;
                let tail = g.slice(out, 0, l, n_extra)?;
                Ok((body, Some(tail)))
            }
        }
    }

    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: Var,
        layout: &TokenLayout,
        mode: AttentionMode,
    ) -> Result<Var> {
        Ok(self.forward_with_extra(g, tokens, layout, mode, None)?.0)
    }

    fn run<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: Var,
        layout: &TokenLayout,
        mode: AttentionMode,
        extra: Option<Var>,
        record: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if layout.dim != self.dim {
            return Err(Error::shape("mam_block", &[layout.dim], &[self.dim]));
        }
        let input = match extra {
            Some(e) => g.concat(&[tokens, e], 0)?,
            None => tokens,
        };
        let normed = self.norm1.forward(g, input)?;
        let l = layout.total();
        let body = if extra.is_some() { g.slice(normed, 0, 0, l)? } else { normed };
        let (template_maps, search_map) = split_and_reshape(g, body, layout)?;
        let t = self.project_group(g, &template_maps)?;
        let mut s = self.project_group(g, &[search_map])?;
        if extra.is_some() {
            let n_extra = g.shape(input)[0] - l;
            let e = g.slice(normed, 0, l, n_extra)?;
            let eq = self.proj_q.forward(g, e)?;
            s.q = g.concat(&[s.q, eq], 0)?;
        }

        let d = self.head_dim();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::new();
        for h in 0..self.heads {
            let (qt, kt, vt) = (self.head(g, t.q, h)?, self.head(g, t.k, h)?, self.head(g, t.v, h)?);
            let (qs, ks, vs) = (self.head(g, s.q, h)?, self.head(g, s.k, h)?, self.head(g, s.v, h)?);
            let k_m = g.concat(&[kt, ks], 0)?;
            let v_m = g.concat(&[vt, vs], 0)?;
            let (att_t, p_t) = match mode {
                AttentionMode::FullMixed => attend(g, qt, k_m, v_m, d)?,
                AttentionMode::Asymmetric => attend(g, qt, kt, vt, d)?,
            };
            let (att_s, p_s) = attend(g, qs, k_m, v_m, d)?;
            if record {
                probs.push(p_t);
                probs.push(p_s);
            }
            heads.push(g.concat(&[att_t, att_s], 0)?);
        }
        Ok((self.finish(g, input, heads)?, probs))
    }

    /// Template-only pass in asymmetric mode. Returns the updated template
    /// tokens and this block's projected template keys/values.
    pub fn template_pass<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        template_tokens: Var,
        layout: &TokenLayout,
    ) -> Result<(Var, TemplateKv<F>)> {
        let normed = self.norm1.forward(g, template_tokens)?;
        let n = layout.template_len();
        let mut maps = Vec::with_capacity(layout.templates);
        for i in 0..layout.templates {
            let rows = g.slice(normed, 0, i * n, n)?;
            maps.push(tokens_to_map(g, rows, layout.t_h, layout.t_w)?);
        }
        let t = self.project_group(g, &maps)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qt, kt, vt) = (self.head(g, t.q, h)?, self.head(g, t.k, h)?, self.head(g, t.v, h)?);
            heads.push(attend(g, qt, kt, vt, self.head_dim())?.0);
        }
        let out = self.finish(g, template_tokens, heads)?;
        let kv = TemplateKv {
            k: g.value(t.k).clone(),
            v: g.value(t.v).clone(),
        };
        Ok((out, kv))
    }

    /// Search-only pass in asymmetric mode against cached template keys/values.
    pub fn search_pass<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        search_tokens: Var,
        layout: &TokenLayout,
        kv: &TemplateKv<F>,
        extra: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let input = match extra {
            Some(e) => g.concat(&[search_tokens, e], 0)?,
            None => search_tokens,
        };
        let normed = self.norm1.forward(g, input)?;
        let ls = layout.search_len();
        let body = if extra.is_some() { g.slice(normed, 0, 0, ls)? } else { normed };
        let map = tokens_to_map(g, body, layout.s_h, layout.s_w)?;
        let mut s = self.project_group(g, &[map])?;
        if extra.is_some() {
            let n_extra = g.shape(input)[0] - ls;
            let e = g.slice(normed, 0, ls, n_extra)?;
            let eq = self.proj_q.forward(g, e)?;
            s.q = g.concat(&[s.q, eq], 0)?;
        }
        let (kt_all, vt_all) = (g.constant(kv.k.clone()), g.constant(kv.v.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (kt, vt) = (self.head(g, kt_all, h)?, self.head(g, vt_all, h)?);
            let (qs, ks, vs) = (self.head(g, s.q, h)?, self.head(g, s.k, h)?, self.head(g, s.v, h)?);
            let k_m = g.concat(&[kt, ks], 0)?;
            let v_m = g.concat(&[vt, vs], 0)?;
            heads.push(attend(g, qs, k_m, v_m, self.head_dim())?.0);
        }
        let out = self.finish(g, input, heads)?;
        match extra {
            None => Ok((out, None)),
            Some(e) => {
                let n_extra = g.shape(e)[0];
                let body = g.slice(out, 0, 0, ls)?;
                let tail = g.slice(out, 0, ls, n_extra)?;
                Ok((body, Some(tail)))
            }
        }
    }

    /// Head-averaged attention weights for every query over every key.
    pub fn attention_probs<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: Var,
        layout: &TokenLayout,
        mode: AttentionMode,
    ) -> Result<AttentionProbs<F>> {
        let (_, probs) = self.run(g, tokens, layout, mode, None, true)?;
        let kv = layout.kv();
        let (nt, l, lkv) = (layout.template_tokens(), layout.total(), kv.total());
        let mut acc = vec![F::zero(); l * lkv];
        let inv_h = F::one() / F::lit(self.heads as f64);
        for pair in probs.chunks(2) {
            let (pt, ps) = (g.value(pair[0]).data(), g.value(pair[1]).data());
            let t_cols = pt.len() / nt;
            for r in 0..nt {
                for c in 0..t_cols {
                    acc[r * lkv + c] += pt[r * t_cols + c] * inv_h;
                }
            }
            for r in 0..layout.search_len() {
                for c in 0..lkv {
                    acc[(nt + r) * lkv + c] += ps[r * lkv + c] * inv_h;
                }
            }
        }
        Ok(AttentionProbs {
            layout: *layout,
            mode,
            probs: Tensor::new(&[l, lkv], acc)?,
        })
    }
}

/// The attention-weight views exported for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMapKind {
    SearchToTemplate,
    SearchToOnlineTemplate,
    SearchToSearch,
    OnlineTemplateToTemplate,
}

impl AttentionMapKind {
    pub const ALL: [AttentionMapKind; 4] = [
        Self::SearchToTemplate,
        Self::SearchToOnlineTemplate,
        Self::SearchToSearch,
        Self::OnlineTemplateToTemplate,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            Self::SearchToTemplate => "search_to_template",
            Self::SearchToOnlineTemplate => "search_to_online_template",
            Self::SearchToSearch => "search_to_search",
            Self::OnlineTemplateToTemplate => "online_template_to_template",
        }
    }
}

/// One slice of an attention matrix: rows are queries of one region,
/// columns the keys of another, with the key grid extents for reshaping.
#[derive(Clone, Debug)]
pub struct AttentionMap<F: Float> {
    pub kind: AttentionMapKind,
    pub weights: Tensor<F>,
    pub key_grid: (usize, usize),
}

impl<F: Float> AttentionProbs<F> {
    /// Row range of query region `r` (`0..T` templates, `T` search).
    fn query_rows(&self, region: usize) -> std::ops::Range<usize> {
        let n = self.layout.template_len();
        if region < self.layout.templates {
            region * n..(region + 1) * n
        } else {
            let nt = self.layout.template_tokens();
            nt..nt + self.layout.search_len()
        }
    }

    fn key_cols(&self, region: usize) -> (std::ops::Range<usize>, (usize, usize)) {
        let kv = self.layout.kv();
        let n = kv.template_len();
        if region < kv.templates {
            (region * n..(region + 1) * n, (kv.t_h, kv.t_w))
        } else {
            let nt = kv.template_tokens();
            (nt..nt + kv.search_len(), (kv.s_h, kv.s_w))
        }
    }

    pub fn region_slice(&self, query_region: usize, key_region: usize) -> Tensor<F> {
        let rows = self.query_rows(query_region);
        let (cols, _) = self.key_cols(key_region);
        let lkv = self.probs.shape()[1];
        let src = self.probs.data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&src[r * lkv + cols.start..r * lkv + cols.end]);
        }
        Tensor::new(&[rows.len(), cols.len()], data).expect("slice shape")
    }

    pub fn map(&self, kind: AttentionMapKind) -> Result<AttentionMap<F>> {
        let t = self.layout.templates;
        let search = t;
        let (q, k) = match kind {
            AttentionMapKind::SearchToTemplate => (search, 0),
            AttentionMapKind::SearchToSearch => (search, search),
            AttentionMapKind::SearchToOnlineTemplate | AttentionMapKind::OnlineTemplateToTemplate if t < 2 => {
                return Err(Error::Unavailable(format!(
                    "{} (needs an online template, layout has T={t})",
                    kind.file_stem()
                )))
            }
            AttentionMapKind::SearchToOnlineTemplate => (search, 1),
            AttentionMapKind::OnlineTemplateToTemplate => (1, 0),
        };
        Ok(AttentionMap {
            kind,
            weights: self.region_slice(q, k),
            key_grid: self.key_cols(k).1,
        })
    }

    /// Every map applicable to this layout.
    pub fn dump(&self) -> Vec<AttentionMap<F>> {
        AttentionMapKind::ALL.iter().filter_map(|&k| self.map(k).ok()).collect()
    }
}

impl<F: Float> AttentionMap<F> {
    /// CSV with one row per query and one column per key.
    pub fn to_csv(&self) -> String {
        let s = self.weights.shape();
        let (rows, cols) = (s[0], s[1]);
        let mut out = String::new();
        out.push_str("query");
        for c in 0..cols {
            let _ = write!(out, ",k{c}");
        }
        out.push('\n');
        for r in 0..rows {
            let _ = write!(out, "{r}");
            for c in 0..cols {
                let _ = write!(out, ",{:e}", self.weights.data()[r * cols + c].as_f64());
            }
            out.push('\n');
        }
        out
    }
}
