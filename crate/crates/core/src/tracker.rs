//! Online tracking: search-region cropping around the previous box, a
//! static first template plus online templates, and interval-gated
//! template replacement driven by the predicted score.

use crate::backbone::TemplateCache;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::heads::box_from_var;
use crate::imaging::{crop_around, normalize, CropTransform, Frame};
use crate::model::MixFormer;
use crate::nn::{Graph, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    pub search_factor: f64,
    pub template_factor: f64,
    pub update_interval: usize,
    pub score_threshold: f64,
    pub online_templates: usize,
    /// Reuse template features across frames (asymmetric attention only).
    pub cache_templates: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_factor: 5.0,
            template_factor: 2.0,
            update_interval: 200,
            score_threshold: 0.5,
            online_templates: 1,
            cache_templates: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.search_factor > 1.0 && self.template_factor > 1.0) {
            return Err(Error::config("crop factors must be > 1"));
        }
        if self.update_interval == 0 {
            return Err(Error::config("update_interval must be >= 1"));
        }
        if self.online_templates == 0 {
            return Err(Error::config("online_templates must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T> {
    pub template: T,
    pub score: f64,
    pub frame: usize,
}

/// The interval/score state machine over template slots, independent of
/// how templates are produced.
#[derive(Clone, Debug)]
pub struct TemplateSlots<T> {
    pub first: T,
    pub online: Vec<T>,
    pub interval: usize,
    pub threshold: f64,
    pub best: Option<Candidate<T>>,
    pub interval_counter: usize,
    /// Next slot to replace; slots are filled round-robin, so this is the oldest.
    oldest: usize,
    /// Frames at which a slot was replaced.
    pub mutations: Vec<usize>,
}

impl<T: Clone> TemplateSlots<T> {
    pub fn new(first: T, online: usize, interval: usize, threshold: f64) -> Self {
        Self {
            online: vec![first.clone(); online],
            first,
            interval,
            threshold,
            best: None,
            interval_counter: 0,
            oldest: 0,
            mutations: Vec::new(),
        }
    }

    /// Records the score of `frame` and applies the update rule at interval
    /// boundaries. `template` is only evaluated for a new best candidate.
    /// Returns true if a slot changed.
    pub fn observe(&mut self, frame: usize, score: f64, template: impl FnOnce() -> Result<T>) -> Result<bool> {
        if self.best.as_ref().is_none_or(|b| score > b.score) {
            self.best = Some(Candidate {
                template: template()?,
                score,
                frame,
            });
        }
        self.interval_counter += 1;
        if frame % self.interval == 0 {
            return Ok(self.maybe_update(frame));
        }
        Ok(false)
    }

    /// Installs the interval's best candidate into the oldest slot if its
    /// score reaches the threshold, then starts a new interval.
    pub fn maybe_update(&mut self, frame: usize) -> bool {
        let best = self.best.take();
        self.interval_counter = 0;
        match best {
            Some(c) if c.score >= self.threshold => {
                self.online[self.oldest] = c.template;
                self.oldest = (self.oldest + 1) % self.online.len();
                self.mutations.push(frame);
                true
            }
            _ => false,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &T> {
        std::iter::once(&self.first).chain(&self.online)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Box in frame pixels.
    pub bbox: BoundingBox,
    pub score: f64,
}

pub struct Tracker<'m> {
    model: &'m MixFormer,
    params: &'m ParamStore<f32>,
    pub config: TrackerConfig,
    pub slots: TemplateSlots<Tensor<f32>>,
    pub frame_index: usize,
    pub prev_box: BoundingBox,
    cache: Option<TemplateCache<f32>>,
}

impl<'m> Tracker<'m> {
    /// Starts tracking `init_box` (frame pixels) in `frame`.
    pub fn init(
        model: &'m MixFormer,
        params: &'m ParamStore<f32>,
        config: TrackerConfig,
        frame: &Frame,
        init_box: BoundingBox,
    ) -> Result<Self> {
        config.validate()?;
        if model.backbone.config.templates != 1 + config.online_templates {
            return Err(Error::config(format!(
                "model takes {} templates but tracker is configured for 1 + {}",
                model.backbone.config.templates, config.online_templates
            )));
        }
        if !init_box.is_finite() || init_box.width() <= 0.0 || init_box.height() <= 0.0 {
            return Err(Error::Init(format!("empty initial box {init_box:?}")));
        }
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let b = init_box.clamp(0.0, 0.0, fw, fh);
        if b.area() <= 0.0 {
            return Err(Error::Init(format!("initial box {init_box:?} lies outside the frame")));
        }
        let template = Self::template_crop(model, &config, frame, &b)?;
        let slots = TemplateSlots::new(template, config.online_templates, config.update_interval, config.score_threshold);
        let mut t = Self {
            model,
            params,
            config,
            slots,
            frame_index: 0,
            prev_box: b,
            cache: None,
        };
        t.refresh_cache()?;
        Ok(t)
    }

    fn template_crop(model: &MixFormer, cfg: &TrackerConfig, frame: &Frame, b: &BoundingBox) -> Result<Tensor<f32>> {
        let (raw, _) = crop_around(frame, b, cfg.template_factor, model.backbone.config.template_size)?;
        Ok(normalize(&raw))
    }

    fn refresh_cache(&mut self) -> Result<()> {
        if !self.config.cache_templates {
            return Ok(());
        }
        let mut g = Graph::inference(self.params);
        let t: Vec<_> = self.slots.all().map(|x| g.constant(x.clone())).collect();
        self.cache = Some(self.model.encode_templates(&mut g, &t)?);
        Ok(())
    }

    /// Search crop around the previous box.
    pub fn crop_search(&self, frame: &Frame) -> Result<(Tensor<f32>, CropTransform)> {
        let (raw, t) = crop_around(frame, &self.prev_box, self.config.search_factor, self.model.backbone.config.search_size)?;
        Ok((normalize(&raw), t))
    }

    pub fn step(&mut self, frame: &Frame) -> Result<StepResult> {
        self.frame_index += 1;
        let (patch, transform) = self.crop_search(frame)?;
        let mut g = Graph::inference(self.params);
        let s = g.constant(patch);
        let pred = match &self.cache {
            Some(c) => self.model.forward_cached(&mut g, c, s)?,
            None => {
                let t: Vec<_> = self.slots.all().map(|x| g.constant(x.clone())).collect();
                self.model.forward(&mut g, &t, s)?
            }
        };
        let unit = box_from_var(&g, pred.corners).clamp_unit();
        let score_var = self.model.score_box(&mut g, &pred, &unit)?;
        let score = g.value(score_var).item() as f64;
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let bbox = transform.box_to_frame(&unit).clamp(0.0, 0.0, fw, fh);

        let (model, cfg) = (self.model, self.config);
        let changed = self
            .slots
            .observe(self.frame_index, score, || Self::template_crop(model, &cfg, frame, &bbox))?;
        if changed {
            self.refresh_cache()?;
        }
        if bbox.area() > 0.0 {
            self.prev_box = bbox;
        }
        Ok(StepResult { bbox, score })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots() -> TemplateSlots<u32> {
        TemplateSlots::new(0, 1, 3, 0.5)
    }

    fn feed(s: &mut TemplateSlots<u32>, scores: &[f64]) {
        for (i, &sc) in scores.iter().enumerate() {
            let f = i + 1;
            s.observe(f, sc, || Ok(f as u32)).unwrap();
        }
    }

    #[test]
    fn highest_score_in_interval_is_installed() {
        let mut s = slots();
        feed(&mut s, &[0.3, 0.9, 0.7]);
        assert_eq!(s.online, vec![2]);
        assert_eq!(s.mutations, vec![3]);
        assert_eq!(s.first, 0);
        assert!(s.best.is_none());
    }

    #[test]
    fn low_scores_never_replace() {
        let mut s = slots();
        feed(&mut s, &[0.1, 0.49, 0.2, 0.3, 0.0, 0.4999]);
        assert_eq!(s.online, vec![0]);
        assert!(s.mutations.is_empty());
    }

    #[test]
    fn ties_go_to_the_earliest_frame() {
        let mut s = slots();
        feed(&mut s, &[0.8, 0.8, 0.1]);
        assert_eq!(s.online, vec![1]);
    }

    #[test]
    fn oldest_slot_is_replaced() {
        let mut s = TemplateSlots::new(0u32, 2, 1, 0.5);
        for f in 1..=3 {
            s.observe(f, 0.9, || Ok(f as u32)).unwrap();
        }
        assert_eq!(s.online, vec![3, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(TrackerConfig::default().validate().is_ok());
        let c = TrackerConfig {
            search_factor: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
