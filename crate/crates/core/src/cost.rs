//! Analytic parameter and multiply-accumulate counts.
//!
//! `flops` follows the usual convention in tracking benchmarks of reporting one
//! multiply-accumulate as one FLOP. Layer norms, softmax and activations
//! are not counted.

use std::fmt::Write as _;

use crate::attention::{AttentionMode, TokenLayout, PROJ_KERNEL};
use crate::backbone::StageConfig;
use crate::error::Result;
use crate::heads::{HeadKind, CORNER_LAYERS};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub tokens: usize,
    pub embed_macs: u64,
    pub block_macs: u64,
    pub params: u64,
}

impl StageCost {
    pub fn macs(&self) -> u64 {
        self.embed_macs + self.block_macs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub head_macs: u64,
    pub head_params: u64,
    pub spm_macs: u64,
    pub spm_params: u64,
    /// Backbone plus head, score module excluded.
    pub params: u64,
    pub flops: u64,
}

/// MACs of one mixed-attention block, excluding any extra query tokens.
pub fn block_macs(layout: &TokenLayout, mode: AttentionMode, mlp_ratio: usize) -> u64 {
    let d = layout.dim as u64;
    let kv = layout.kv();
    let n = layout.total() as u64;
    let n_kv = kv.total() as u64;
    let k2 = (PROJ_KERNEL * PROJ_KERNEL) as u64;
    let depthwise = (n + 2 * n_kv) * d * k2;
    let linear = (2 * n + 2 * n_kv) * d * d;
    let pairs = match mode {
        AttentionMode::FullMixed => n * n_kv,
        AttentionMode::Asymmetric => {
            (layout.template_tokens() * kv.template_tokens()) as u64 + layout.search_len() as u64 * n_kv
        }
    };
    let attention = 2 * pairs * d;
    let mlp = 2 * n * d * d * mlp_ratio as u64;
    depthwise + linear + attention + mlp
}

/// MACs added to one block by a query-only extra token.
fn extra_token_macs(layout: &TokenLayout, mlp_ratio: usize) -> u64 {
    let d = layout.dim as u64;
    2 * d * d + 2 * layout.kv().total() as u64 * d + 2 * d * d * mlp_ratio as u64
}

pub fn block_params(dim: usize, mlp_ratio: usize) -> u64 {
    let d = dim as u64;
    let h = d * mlp_ratio as u64;
    let norms = 4 * d;
    let depthwise = 3 * d * (PROJ_KERNEL * PROJ_KERNEL) as u64;
    let proj = 4 * (d * d + d);
    let mlp = d * h + h + h * d + d;
    norms + depthwise + proj + mlp
}

fn embed_params(c_in: usize, s: &StageConfig) -> u64 {
    let (c, d, k) = (c_in as u64, s.dim as u64, s.embed_kernel as u64);
    c * k * k * d + d + 2 * d
}

fn corner_head(dim: usize, h: usize, w: usize) -> (u64, u64) {
    let (mut macs, mut params) = (0u64, 0u64);
    let mut c = dim as u64;
    for _ in 0..CORNER_LAYERS {
        let o = c / 2;
        macs += c * o * 9;
        params += c * o * 9 + 2 * o;
        c = o;
    }
    macs += c;
    params += c + 1;
    (2 * macs * (h * w) as u64, 2 * params)
}

/// Counts for a full model configuration.
pub fn count_params_flops(config: &ModelConfig) -> Result<CostReport> {
    let bb = &config.backbone;
    let layouts = bb.stage_layouts()?;
    let mut stages = Vec::with_capacity(3);
    let mut c_in = 3;
    for (i, (s, layout)) in bb.stages.iter().zip(&layouts).enumerate() {
        let k = s.embed_kernel as u64;
        let embed_macs = layout.total() as u64 * c_in as u64 * k * k * s.dim as u64;
        let mut per_block = block_macs(layout, bb.mode, s.mlp_ratio);
        if i == 2 && config.head == HeadKind::Query {
            per_block += extra_token_macs(layout, s.mlp_ratio);
        }
        let mut params = embed_params(c_in, s) + s.blocks as u64 * block_params(s.dim, s.mlp_ratio);
        if i == 2 {
            params += 2 * s.dim as u64;
        }
        stages.push(StageCost {
            tokens: layout.total(),
            embed_macs,
            block_macs: per_block * s.blocks as u64,
            params,
        });
        c_in = s.dim;
    }
    let last = &layouts[2];
    let d = last.dim as u64;
    let (head_macs, head_params) = match config.head {
        HeadKind::Corner => corner_head(last.dim, last.s_h, last.s_w),
        HeadKind::Query => (2 * d * d + 4 * d, d + 2 * (d * d + d) + 4 * d + 4),
    };
    let g2 = (config.roi_grid * config.roi_grid) as u64;
    let n_t = last.template_len() as u64;
    let spm_macs = g2 * (last.s_h * last.s_w) as u64 * d
        + (2 * d * d + 2 * g2 * d * d + 2 * g2 * d)
        + (2 * d * d + 2 * n_t * d * d + 2 * n_t * d)
        + 2 * d * d
        + d;
    let cross = 4 * d + 4 * (d * d + d);
    let spm_params = d + 2 * cross + 2 * (d * d + d) + d + 1;
    let backbone_params: u64 = stages.iter().map(|s| s.params).sum();
    let backbone_macs: u64 = stages.iter().map(StageCost::macs).sum();
    Ok(CostReport {
        stages,
        head_macs,
        head_params,
        spm_macs,
        spm_params,
        params: backbone_params + head_params,
        flops: backbone_macs + head_macs,
    })
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>14} {:>14}", "part", "tokens", "params", "flops");
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>14} {:>14}",
                format!("stage{}", i + 1),
                st.tokens,
                st.params,
                st.macs()
            );
        }
        let _ = writeln!(s, "{:<10} {:>8} {:>14} {:>14}", "head", "", self.head_params, self.head_macs);
        let _ = writeln!(s, "{:<10} {:>8} {:>14} {:>14}", "total", "", self.params, self.flops);
        let _ = writeln!(s, "{:<10} {:>8} {:>14} {:>14}", "spm", "", self.spm_params, self.spm_macs);
        let _ = writeln!(
            s,
            "params {:.2} M, flops {:.2} G (1 multiply-accumulate = 1 flop)",
            self.params as f64 / 1e6,
            self.flops as f64 / 1e9
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;
    use crate::model::MixFormer;
    use crate::nn::ParamStore;

    #[test]
    fn tiny_block_matches_hand_count() {
        // TINY stage 3: T=2 templates 2×2, search 4×4, D=64; k/v grids 1×1 and 2×2
        let layout = TokenLayout::new(2, 2, 2, 4, 4, 64).unwrap();
        let (n, nkv, d) = (24u64, 6u64, 64u64);
        let dw = (24 + 12) * 64 * 9;
        let lin = (48 + 12) * 64 * 64;
        let full = 2 * 24 * 6 * 64;
        let mlp = 2 * 24 * 64 * 256;
        assert_eq!(n * d * 9 + 2 * nkv * d * 9, dw);
        assert_eq!(block_macs(&layout, AttentionMode::FullMixed, 4), dw + lin + full + mlp);
        // asymmetric: 8 template queries × 2 template keys + 16 search queries × 6 keys
        let asym = 2 * (8 * 2 + 16 * 6) * 64;
        assert_eq!(block_macs(&layout, AttentionMode::Asymmetric, 4), dw + lin + asym + mlp);
    }

    #[test]
    fn mixformer_within_tolerance_of_table() {
        let r = count_params_flops(&ModelConfig::preset(Preset::MixFormer, HeadKind::Corner)).unwrap();
        let g = r.flops as f64 / 1e9;
        assert!((g / 23.04 - 1.0).abs() < 0.2, "{g}");
        assert_eq!(r.stages.iter().map(|s| s.tokens).collect::<Vec<_>>(), [8448, 2112, 528]);
    }

    #[test]
    fn more_blocks_cost_more() {
        let base = ModelConfig::preset(Preset::MixFormer, HeadKind::Corner);
        let mut more = base;
        more.backbone.stages[2].blocks *= 2;
        assert!(count_params_flops(&more).unwrap().flops > count_params_flops(&base).unwrap().flops);
    }

    #[test]
    fn analytic_params_match_instantiated_model() {
        for head in [HeadKind::Corner, HeadKind::Query] {
            let cfg = ModelConfig::preset(Preset::Tiny, head);
            let r = count_params_flops(&cfg).unwrap();
            let (_, store): (_, ParamStore<f32>) = MixFormer::init(cfg, 0).unwrap();
            let count = |pred: &dyn Fn(&str) -> bool| -> u64 {
                store
                    .iter()
                    .filter(|(_, p)| p.trainable && pred(&p.name))
                    .map(|(_, p)| p.value.numel() as u64)
                    .sum()
            };
            assert_eq!(count(&|n| !n.starts_with("spm.")), r.params, "{head:?}");
            assert_eq!(count(&|n| n.starts_with("spm.")), r.spm_params);
            assert_eq!(count(&|n| n.starts_with("head.")), r.head_params);
        }
    }
}
