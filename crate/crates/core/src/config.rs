//! Run configuration as `key = value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and
//! repeated keys are errors, as are values that fail to parse or validate.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AttentionMode;
use crate::backbone::Preset;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub head: HeadKind,
    pub attention: AttentionMode,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    /// Synthetic sequences generated for training when no data directory is given.
    pub train_sequences: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            head: HeadKind::Corner,
            attention: AttentionMode::Asymmetric,
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            train_sequences: 24,
            seed: 0,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid value {v:?} for {key}"),
    })
}

impl RunConfig {
    /// Settings for the single-core desk-scale run. The tiny preset's 4×4
    /// output grid needs the object to fill more of the search crop, and a
    /// few hundred thousand parameters need more varied scenes and larger
    /// steps than the defaults give.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.set_search_factor(2.0);
        c.train.center_jitter = 0.3;
        c.train.batch_size = 16;
        c.train.lr = 1e-3;
        c.train.spm_lr = 1e-3;
        c.train_sequences = 128;
        c
    }

    fn set_search_factor(&mut self, v: f64) {
        self.tracker.search_factor = v;
        self.train.search_factor = v;
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| Error::Parse {
            line,
            msg: format!("unknown {what} {v:?}"),
        };
        match key {
            "preset" => self.preset = Preset::parse(v).ok_or_else(|| bad("preset"))?,
            "head" => self.head = HeadKind::parse(v).ok_or_else(|| bad("head"))?,
            "attention" => self.attention = AttentionMode::parse(v).ok_or_else(|| bad("attention mode"))?,
            "seed" => self.seed = value(line, key, v)?,
            "train_sequences" => self.train_sequences = value(line, key, v)?,
            "search_factor" => self.set_search_factor(value(line, key, v)?),
            "template_factor" => {
                let f = value(line, key, v)?;
                self.tracker.template_factor = f;
                self.train.template_factor = f;
            }
            "update_interval" => self.tracker.update_interval = value(line, key, v)?,
            "score_threshold" => self.tracker.score_threshold = value(line, key, v)?,
            "online_templates" => self.tracker.online_templates = value(line, key, v)?,
            "cache_templates" => self.tracker.cache_templates = value(line, key, v)?,
            "stage1_iters" => self.train.stage1_iters = value(line, key, v)?,
            "stage2_iters" => self.train.stage2_iters = value(line, key, v)?,
            "batch_size" => self.train.batch_size = value(line, key, v)?,
            "lr" => self.train.lr = value(line, key, v)?,
            "spm_lr" => self.train.spm_lr = value(line, key, v)?,
            "lr_decay_at" => self.train.lr_decay_at = value(line, key, v)?,
            "weight_decay" => self.train.weight_decay = value(line, key, v)?,
            "clip_norm" => self.train.clip_norm = value(line, key, v)?,
            "flip" => self.train.flip = value(line, key, v)?,
            "brightness" => self.train.brightness = value(line, key, v)?,
            "center_jitter" => self.train.center_jitter = value(line, key, v)?,
            "scale_jitter" => self.train.scale_jitter = value(line, key, v)?,
            "max_gap" => self.train.max_gap = value(line, key, v)?,
            "l1_weight" => self.train.loss.l1_weight = value(line, key, v)?,
            "giou_weight" => self.train.loss.giou_weight = value(line, key, v)?,
            "synth_width" => self.synthetic.width = value(line, key, v)?,
            "synth_height" => self.synthetic.height = value(line, key, v)?,
            "synth_frames" => self.synthetic.frames = value(line, key, v)?,
            "synth_object_min" => self.synthetic.object_min = value(line, key, v)?,
            "synth_object_max" => self.synthetic.object_max = value(line, key, v)?,
            "synth_motion" => self.synthetic.motion = value(line, key, v)?,
            "synth_scale_jitter" => self.synthetic.scale_jitter = value(line, key, v)?,
            "synth_brightness_jitter" => self.synthetic.brightness_jitter = value(line, key, v)?,
            "synth_noise" => self.synthetic.noise = value(line, key, v)?,
            "synth_distractors" => self.synthetic.distractors = value(line, key, v)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Parses `text` on top of [`RunConfig::desk`] and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected key = value, got {l:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {k:?}"),
                });
            }
            cfg.set(line, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.train_sequences == 0 {
            return Err(Error::config("train_sequences must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.tracker.score_threshold) {
            return Err(Error::config("score_threshold must lie in [0, 1]"));
        }
        self.model().backbone.validate()
    }

    pub fn model(&self) -> ModelConfig {
        let mut m = ModelConfig::preset(self.preset, self.head);
        m.backbone.mode = self.attention;
        m.backbone.templates = 1 + self.tracker.online_templates;
        m
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let (t, r, s) = (&self.train, &self.tracker, &self.synthetic);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("preset", self.preset.as_str().into());
        kv("head", self.head.as_str().into());
        kv("attention", self.attention.as_str().into());
        kv("seed", self.seed.to_string());
        kv("train_sequences", self.train_sequences.to_string());
        kv("search_factor", r.search_factor.to_string());
        kv("template_factor", r.template_factor.to_string());
        kv("update_interval", r.update_interval.to_string());
        kv("score_threshold", r.score_threshold.to_string());
        kv("online_templates", r.online_templates.to_string());
        kv("cache_templates", r.cache_templates.to_string());
        kv("stage1_iters", t.stage1_iters.to_string());
        kv("stage2_iters", t.stage2_iters.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("spm_lr", t.spm_lr.to_string());
        kv("lr_decay_at", t.lr_decay_at.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("flip", t.flip.to_string());
        kv("brightness", t.brightness.to_string());
        kv("center_jitter", t.center_jitter.to_string());
        kv("scale_jitter", t.scale_jitter.to_string());
        kv("max_gap", t.max_gap.to_string());
        kv("l1_weight", t.loss.l1_weight.to_string());
        kv("giou_weight", t.loss.giou_weight.to_string());
        kv("synth_width", s.width.to_string());
        kv("synth_height", s.height.to_string());
        kv("synth_frames", s.frames.to_string());
        kv("synth_object_min", s.object_min.to_string());
        kv("synth_object_max", s.object_max.to_string());
        kv("synth_motion", s.motion.to_string());
        kv("synth_scale_jitter", s.scale_jitter.to_string());
        kv("synth_brightness_jitter", s.brightness_jitter.to_string());
        kv("synth_noise", s.noise.to_string());
        kv("synth_distractors", s.distractors.to_string());
        out
    }
}
