//! Three-stage mixed-attention backbone.
//!
//! Each stage embeds every region (templates and search) with an
//! overlapping strided convolution, layer-normalizes per token, concatenates
//! the regions and runs `N_i` mixed-attention blocks. Regions are split back
//! into rectangular maps at each stage boundary.

use crate::attention::{
    map_to_tokens, split_and_reshape, tokens_to_map, AttentionMode, AttentionProbs, MamBlock, TemplateKv, TokenLayout,
};
use crate::autodiff::kernels::conv_out_extent;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, LayerNorm};
use crate::tensor::{Float, Tensor};

pub const TOTAL_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub embed_kernel: usize,
    pub embed_stride: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl StageConfig {
    pub const fn new(embed_kernel: usize, embed_stride: usize, dim: usize, blocks: usize, heads: usize) -> Self {
        Self {
            embed_kernel,
            embed_stride,
            dim,
            blocks,
            heads,
            mlp_ratio: 4,
        }
    }

    pub fn embed_pad(&self) -> usize {
        self.embed_kernel / 2
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        conv_out_extent(n, self.embed_kernel, self.embed_stride, self.embed_pad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    MixFormer,
    MixFormerL,
    Tiny,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mixformer" => Some(Self::MixFormer),
            "mixformer_l" => Some(Self::MixFormerL),
            "tiny" => Some(Self::Tiny),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MixFormer => "mixformer",
            Self::MixFormerL => "mixformer_l",
            Self::Tiny => "tiny",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: [StageConfig; 3],
    pub template_size: (usize, usize),
    pub search_size: (usize, usize),
    pub templates: usize,
    pub mode: AttentionMode,
}

impl BackboneConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::MixFormer => Self {
                stages: [
                    StageConfig::new(7, 4, 64, 1, 1),
                    StageConfig::new(3, 2, 192, 4, 3),
                    StageConfig::new(3, 2, 384, 16, 6),
                ],
                template_size: (128, 128),
                search_size: (320, 320),
                templates: 2,
                mode: AttentionMode::Asymmetric,
            },
            Preset::MixFormerL => Self {
                stages: [
                    StageConfig::new(7, 4, 192, 2, 3),
                    StageConfig::new(3, 2, 768, 2, 12),
                    StageConfig::new(3, 2, 1024, 12, 16),
                ],
                template_size: (128, 128),
                search_size: (320, 320),
                templates: 2,
                mode: AttentionMode::Asymmetric,
            },
            Preset::Tiny => Self {
                stages: [
                    StageConfig::new(7, 4, 16, 1, 1),
                    StageConfig::new(3, 2, 32, 1, 2),
                    StageConfig::new(3, 2, 64, 2, 4),
                ],
                template_size: (32, 32),
                search_size: (64, 64),
                templates: 2,
                mode: AttentionMode::Asymmetric,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (th, tw) = self.template_size;
        let (sh, sw) = self.search_size;
        for (what, n) in [("template height", th), ("template width", tw), ("search height", sh), ("search width", sw)] {
            if n == 0 || n % TOTAL_STRIDE != 0 {
                return Err(Error::config(format!("{what} {n} must be a positive multiple of {TOTAL_STRIDE}")));
            }
        }
        if self.templates == 0 {
            return Err(Error::config("need at least one template"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let (k, st) = if i == 0 { (7, 4) } else { (3, 2) };
            if s.embed_kernel != k || s.embed_stride != st {
                return Err(Error::config(format!(
                    "stage {} embedding must be kernel {k} stride {st}, got {} / {}",
                    i + 1,
                    s.embed_kernel,
                    s.embed_stride
                )));
            }
            if s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::config(format!("stage {}: dim {} not divisible by {} heads", i + 1, s.dim, s.heads)));
            }
            if s.mlp_ratio == 0 || s.blocks == 0 {
                return Err(Error::config(format!("stage {}: blocks and mlp ratio must be >= 1", i + 1)));
            }
        }
        Ok(())
    }

    pub fn final_dim(&self) -> usize {
        self.stages[2].dim
    }

    /// Token layout at the entry of each stage.
    pub fn stage_layouts(&self) -> Result<[TokenLayout; 3]> {
        self.validate()?;
        let (mut th, mut tw) = self.template_size;
        let (mut sh, mut sw) = self.search_size;
        let mut out = Vec::with_capacity(3);
        for s in &self.stages {
            let ext = |n: usize| s.out_extent(n).ok_or_else(|| Error::config("embedding extent < 1"));
            (th, tw, sh, sw) = (ext(th)?, ext(tw)?, ext(sh)?, ext(sw)?);
            out.push(TokenLayout::new(self.templates, th, tw, sh, sw, s.dim)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// `(h, w)` of the final search feature map.
    pub fn search_feature_size(&self) -> Result<(usize, usize)> {
        let l = self.stage_layouts()?[2];
        Ok((l.s_h, l.s_w))
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, c_in: usize, stage: &StageConfig) -> Self {
        let mut s = init.scope(name);
        Self {
            conv: Conv2d::new(&mut s, "conv", c_in, stage.dim, stage.embed_kernel, stage.embed_stride, true),
            norm: LayerNorm::new(&mut s, "norm", stage.dim),
        }
    }

    /// `[c, h, w]` map to layer-normalized `[h'·w', dim]` tokens and the new extents.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, map: Var) -> Result<(Var, (usize, usize))> {
        let y = self.conv.forward(g, map)?;
        let s = g.shape(y).to_vec();
        let t = map_to_tokens(g, y)?;
        Ok((self.norm.forward(g, t)?, (s[1], s[2])))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<MamBlock>,
}

pub struct BackboneOutput {
    /// `[D3, h, w]` final search feature map.
    pub search_map: Var,
    /// `[T·n, D3]` final template tokens, template order preserved.
    pub template_tokens: Var,
    pub extra: Option<Var>,
    pub layouts: [TokenLayout; 3],
}

/// Per-block template keys/values and final template tokens for a fixed
/// template set (asymmetric mode only).
#[derive(Clone, Debug)]
pub struct TemplateCache<F: Float> {
    pub kv: Vec<Vec<TemplateKv<F>>>,
    pub template_tokens: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub final_norm: LayerNorm,
}

impl Backbone {
    pub fn new<F: Float>(init: &mut Init<'_, F>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut s = init.scope("backbone");
        let mut stages = Vec::with_capacity(3);
        let mut c_in = 3;
        for (i, sc) in config.stages.iter().enumerate() {
            let mut st = s.scope(&format!("stage{}", i + 1));
            let embed = PatchEmbed::new(&mut st, "embed", c_in, sc);
            let blocks = (0..sc.blocks)
                .map(|b| MamBlock::new(&mut st, &format!("block{b}"), sc.dim, sc.heads, sc.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { embed, blocks });
            c_in = sc.dim;
        }
        let final_norm = LayerNorm::new(&mut s, "final_norm", config.final_dim());
        Ok(Self {
            config,
            stages,
            final_norm,
        })
    }

    fn check_inputs<F: Float>(&self, g: &Graph<'_, F>, templates: &[Var], search: Option<Var>) -> Result<()> {
        let (th, tw) = self.config.template_size;
        let (sh, sw) = self.config.search_size;
        if templates.len() != self.config.templates {
            return Err(Error::config(format!(
                "model expects {} templates, got {}",
                self.config.templates,
                templates.len()
            )));
        }
        for &t in templates {
            if g.shape(t) != [3, th, tw] {
                return Err(Error::shape("template input", g.shape(t), &[3, th, tw]));
            }
        }
        if let Some(s) = search {
            if g.shape(s) != [3, sh, sw] {
                return Err(Error::shape("search input", g.shape(s), &[3, sh, sw]));
            }
        }
        Ok(())
    }

    /// Runs all stages on `T` templates `[3, Ht, Wt]` and a search crop
    /// `[3, Hs, Ws]`. `extra` rows join the final stage as query-only tokens.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        templates: &[Var],
        search: Var,
        extra: Option<Var>,
    ) -> Result<BackboneOutput> {
        self.check_inputs(g, templates, Some(search))?;
        let layouts = self.config.stage_layouts()?;
        let mut t_maps = templates.to_vec();
        let mut s_map = search;
        let mut extra_out = None;
        let mut tokens = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let layout = &layouts[i];
            let mut parts = Vec::with_capacity(t_maps.len() + 1);
            for &m in t_maps.iter().chain(std::iter::once(&s_map)) {
                parts.push(stage.embed.forward(g, m)?.0);
            }
            let mut x = g.concat(&parts, 0)?;
            let last = i == self.stages.len() - 1;
            let mut e = if last { extra } else { None };
            for block in &stage.blocks {
                let (y, ye) = block.forward_with_extra(g, x, layout, self.config.mode, e)?;
                x = y;
                e = ye;
            }
            if last {
                extra_out = e;
                tokens = Some(x);
            } else {
                let (tm, sm) = split_and_reshape(g, x, layout)?;
                t_maps = tm;
                s_map = sm;
            }
        }
        let last = &layouts[2];
        let x = self.final_norm.forward(g, tokens.expect("three stages"))?;
        let template_tokens = g.slice(x, 0, 0, last.template_tokens())?;
        let search_tokens = g.slice(x, 0, last.template_tokens(), last.search_len())?;
        let search_map = tokens_to_map(g, search_tokens, last.s_h, last.s_w)?;
        let extra = match extra_out {
            Some(e) => Some(self.final_norm.forward(g, e)?),
            None => None,
        };
        Ok(BackboneOutput {
            search_map,
            template_tokens,
            extra,
            layouts,
        })
    }

    /// Attention weights of block `block` in stage `stage` (both 0-based)
    /// for the given inputs.
    pub fn attention_probs<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        templates: &[Var],
        search: Var,
        stage: usize,
        block: usize,
    ) -> Result<AttentionProbs<F>> {
        self.check_inputs(g, templates, Some(search))?;
        let blocks = self.stages.get(stage).map_or(0, |s| s.blocks.len());
        if block >= blocks {
            return Err(Error::config(format!(
                "no block {block} in stage {stage} (stages: {:?} blocks)",
                self.stages.iter().map(|s| s.blocks.len()).collect::<Vec<_>>()
            )));
        }
        let layouts = self.config.stage_layouts()?;
        let mut t_maps = templates.to_vec();
        let mut s_map = search;
        for (i, st) in self.stages.iter().enumerate().take(stage + 1) {
            let layout = &layouts[i];
            let mut parts = Vec::with_capacity(t_maps.len() + 1);
            for &m in t_maps.iter().chain(std::iter::once(&s_map)) {
                parts.push(st.embed.forward(g, m)?.0);
            }
            let mut x = g.concat(&parts, 0)?;
            for (k, b) in st.blocks.iter().enumerate() {
                if i == stage && k == block {
                    return b.attention_probs(g, x, layout, self.config.mode);
                }
                x = b.forward(g, x, layout, self.config.mode)?;
            }
            let (tm, sm) = split_and_reshape(g, x, layout)?;
            t_maps = tm;
            s_map = sm;
        }
        unreachable!("target block lies within the loop range")
    }

    fn require_asymmetric(&self) -> Result<()> {
        if self.config.mode != AttentionMode::Asymmetric {
            return Err(Error::config("template caching needs asymmetric attention"));
        }
        Ok(())
    }

    /// Template-only pass; the result is independent of any search input.
    pub fn encode_templates<F: Float>(&self, g: &mut Graph<'_, F>, templates: &[Var]) -> Result<TemplateCache<F>> {
        self.require_asymmetric()?;
        self.check_inputs(g, templates, None)?;
        let layouts = self.config.stage_layouts()?;
        let mut maps = templates.to_vec();
        let mut kv = Vec::with_capacity(3);
        let mut tokens = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let layout = &layouts[i];
            let mut parts = Vec::with_capacity(maps.len());
            for &m in &maps {
                parts.push(stage.embed.forward(g, m)?.0);
            }
            let mut x = g.concat(&parts, 0)?;
            let mut stage_kv = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, block_kv) = block.template_pass(g, x, layout)?;
                x = y;
                stage_kv.push(block_kv);
            }
            kv.push(stage_kv);
            if i + 1 < self.stages.len() {
                let n = layout.template_len();
                maps = (0..layout.templates)
                    .map(|t| {
                        let rows = g.slice(x, 0, t * n, n)?;
                        tokens_to_map(g, rows, layout.t_h, layout.t_w)
                    })
                    .collect::<Result<_>>()?;
            } else {
                tokens = Some(x);
            }
        }
        let x = self.final_norm.forward(g, tokens.expect("three stages"))?;
        Ok(TemplateCache {
            kv,
            template_tokens: g.value(x).clone(),
        })
    }

    /// Search pass against cached templates. Bit-identical to [`Backbone::forward`]
    /// in asymmetric mode.
    pub fn forward_cached<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        cache: &TemplateCache<F>,
        search: Var,
        extra: Option<Var>,
    ) -> Result<BackboneOutput> {
        self.require_asymmetric()?;
        let (sh, sw) = self.config.search_size;
        if g.shape(search) != [3, sh, sw] {
            return Err(Error::shape("search input", g.shape(search), &[3, sh, sw]));
        }
        let layouts = self.config.stage_layouts()?;
        let mut s_map = search;
        let mut extra_out = None;
        let mut tokens = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let layout = &layouts[i];
            let mut x = stage.embed.forward(g, s_map)?.0;
            let last = i == self.stages.len() - 1;
            let mut e = if last { extra } else { None };
            for (block, kv) in stage.blocks.iter().zip(&cache.kv[i]) {
                let (y, ye) = block.search_pass(g, x, layout, kv, e)?;
                x = y;
                e = ye;
            }
            if last {
                extra_out = e;
                tokens = Some(x);
            } else {
                s_map = tokens_to_map(g, x, layout.s_h, layout.s_w)?;
            }
        }
        let last = &layouts[2];
        let x = self.final_norm.forward(g, tokens.expect("three stages"))?;
        let search_map = tokens_to_map(g, x, last.s_h, last.s_w)?;
        let template_tokens = g.constant(cache.template_tokens.clone());
        let extra = match extra_out {
            Some(e) => Some(self.final_norm.forward(g, e)?),
            None => None,
        };
        Ok(BackboneOutput {
            search_map,
            template_tokens,
            extra,
            layouts,
        })
    }
}
