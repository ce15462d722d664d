//! Backbone, localization head and score module assembled into one tracker
//! network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, Preset, TemplateCache};
use crate::bbox::BoundingBox;
use crate::error::Result;
use crate::heads::{box_from_var, Head, HeadKind};
use crate::nn::{Graph, Init, ParamStore};
use crate::spm::{Spm, DEFAULT_ROI_GRID};
use crate::tensor::Float;

/// Parameter-name prefix of the score module.
pub const SPM_PREFIX: &str = "spm.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub roi_grid: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset, head: HeadKind) -> Self {
        Self {
            backbone: BackboneConfig::preset(p),
            head,
            roi_grid: DEFAULT_ROI_GRID,
        }
    }
}

/// Output of one forward pass.
pub struct Prediction {
    /// `[1, 4]` normalized corners in the search crop.
    pub corners: Var,
    pub search_map: Var,
    /// Final-stage tokens of the first template, `[n, D3]`.
    pub first_template: Var,
}

#[derive(Clone, Debug)]
pub struct MixFormer {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
    pub spm: Spm,
}

impl MixFormer {
    /// Builds the network and a freshly initialized parameter store.
    pub fn init<F: Float>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut init, config.backbone)?;
        let dim = config.backbone.final_dim();
        let head = Head::new(&mut init, config.head, dim)?;
        let spm = Spm::new(&mut init, dim, config.roi_grid)?;
        Ok((
            Self {
                config,
                backbone,
                head,
                spm,
            },
            store,
        ))
    }

    fn finish<F: Float>(&self, g: &mut Graph<'_, F>, out: BackboneOutput) -> Result<Prediction> {
        let corners = match &self.head {
            Head::Corner(c) => c.forward(g, out.search_map)?,
            Head::Query(q) => {
                let token = out.extra.expect("query head passes its token through the backbone");
                q.forward(g, token)?
            }
        };
        let n = out.layouts[2].template_len();
        let first_template = g.slice(out.template_tokens, 0, 0, n)?;
        Ok(Prediction {
            corners,
            search_map: out.search_map,
            first_template,
        })
    }

    fn extra<F: Float>(&self, g: &mut Graph<'_, F>) -> Option<Var> {
        match &self.head {
            Head::Query(q) => Some(q.token(g)),
            Head::Corner(_) => None,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, templates: &[Var], search: Var) -> Result<Prediction> {
        let extra = self.extra(g);
        let out = self.backbone.forward(g, templates, search, extra)?;
        self.finish(g, out)
    }

    pub fn encode_templates<F: Float>(&self, g: &mut Graph<'_, F>, templates: &[Var]) -> Result<TemplateCache<F>> {
        self.backbone.encode_templates(g, templates)
    }

    pub fn forward_cached<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        cache: &TemplateCache<F>,
        search: Var,
    ) -> Result<Prediction> {
        let extra = self.extra(g);
        let out = self.backbone.forward_cached(g, cache, search, extra)?;
        self.finish(g, out)
    }

    /// Score of the prediction's own (clamped) box.
    pub fn score<F: Float>(&self, g: &mut Graph<'_, F>, pred: &Prediction) -> Result<Var> {
        let b = box_from_var(g, pred.corners).clamp_unit();
        self.score_box(g, pred, &b)
    }

    pub fn score_box<F: Float>(&self, g: &mut Graph<'_, F>, pred: &Prediction, b: &BoundingBox) -> Result<Var> {
        self.spm.predict(g, pred.search_map, b, pred.first_template)
    }
}

pub fn is_spm_param(name: &str) -> bool {
    name.starts_with(SPM_PREFIX)
}
