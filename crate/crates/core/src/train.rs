//! Two-stage training. Stage 1 fits backbone and head on the localization
//! loss; stage 2 freezes them and fits the score module on crops labelled
//! as target or background.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BoundingBox;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::heads::box_from_var;
use crate::imaging::{adjust_brightness, crop, crop_around, crop_side, flip_horizontal, normalize, Frame};
use crate::losses::{loc_loss_var, score_loss_var, LossConfig};
use crate::model::{is_spm_param, MixFormer};
use crate::nn::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

/// IoU below which a scored crop counts as background.
pub const NEGATIVE_IOU: f64 = 0.3;
/// IoU a positive crop's predicted box needs before it is used for pooling.
pub const POSITIVE_IOU: f64 = 0.5;
const MAX_RESAMPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub spm_lr: f64,
    /// Fraction of stage-1 iterations after which the rate drops ×0.1.
    pub lr_decay_at: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub flip: bool,
    /// Brightness factors are drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
    /// Search-crop centre offset, in units of the target's mean side.
    pub center_jitter: f64,
    /// Search-crop log-scale jitter.
    pub scale_jitter: f64,
    /// Largest frame distance between a template and the search frame.
    pub max_gap: usize,
    pub search_factor: f64,
    pub template_factor: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 500,
            batch_size: 8,
            lr: 1e-4,
            spm_lr: 1e-4,
            lr_decay_at: 0.8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            flip: true,
            brightness: 0.2,
            center_jitter: 0.5,
            scale_jitter: 0.15,
            max_gap: 20,
            search_factor: 5.0,
            template_factor: 2.0,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_gap == 0 {
            return Err(Error::config("batch_size and max_gap must be positive"));
        }
        if !(self.lr > 0.0 && self.spm_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::config("learning rates and clip norm must be positive"));
        }
        if !(self.lr_decay_at > 0.0 && self.lr_decay_at < 1.0) {
            return Err(Error::config("lr_decay_at must lie strictly between 0 and 1"));
        }
        if self.weight_decay < 0.0 || self.brightness < 0.0 || self.center_jitter < 0.0 || self.scale_jitter < 0.0 {
            return Err(Error::config("decay and jitter amplitudes must be non-negative"));
        }
        if !(self.search_factor > 1.0 && self.template_factor > 1.0) {
            return Err(Error::config("crop factors must be > 1"));
        }
        self.loss.validate()
    }

    /// Stage-1 learning rate at `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let decay = (self.lr_decay_at * self.stage1_iters as f64).floor() as usize;
        if iter >= decay {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Adam with decoupled weight decay over a subset of parameters.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(*id).data_mut();
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] as f64 / c1;
                let vh = v[k] as f64 / c2;
                let upd = mh / (vh.sqrt() + self.eps) + weight_decay * p[k] as f64;
                p[k] -= (lr * upd) as f32;
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norms before and after.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f32>)], max_norm: f64) -> (f64, f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    let after = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt();
    (norm, after)
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    /// Normalized template inputs, first template first.
    pub templates: Vec<Tensor<f32>>,
    pub search: Tensor<f32>,
    /// Target in normalized search-crop coordinates.
    pub gt: BoundingBox,
}

#[derive(Clone, Copy, Debug, Default)]
struct Augment {
    flip: bool,
}

fn usable(seq: &Sequence) -> Result<()> {
    if seq.len() < 2 || !seq.has_full_groundtruth() {
        return Err(Error::Usage(format!(
            "sequence {} needs at least 2 frames with ground truth",
            seq.name
        )));
    }
    Ok(())
}

fn pick_near(rng: &mut ChaCha8Rng, n: usize, center: usize, gap: usize) -> usize {
    let lo = center.saturating_sub(gap);
    let hi = (center + gap).min(n - 1);
    rng.random_range(lo..=hi)
}

fn finish_crop(raw: Tensor<f32>, aug: Augment, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let raw = if aug.flip { flip_horizontal(&raw) } else { raw };
    let raw = if cfg.brightness > 0.0 {
        let f = rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness);
        adjust_brightness(&raw, f as f32)
    } else {
        raw
    };
    normalize(&raw)
}

fn templates_for(
    seq: &Sequence,
    model: &MixFormer,
    cfg: &TrainConfig,
    search_idx: usize,
    aug: Augment,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor<f32>>> {
    let bb = &model.backbone.config;
    (0..bb.templates)
        .map(|_| {
            let i = pick_near(rng, seq.len(), search_idx, cfg.max_gap);
            let (raw, _) = crop_around(&seq.frames[i], &seq.boxes[i], cfg.template_factor, bb.template_size)?;
            Ok(finish_crop(raw, aug, cfg, rng))
        })
        .collect()
}

fn jittered_search(
    frame: &Frame,
    target: &BoundingBox,
    model: &MixFormer,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, BoundingBox)> {
    let size = (target.width() * target.height()).sqrt();
    let [cx, cy] = target.center();
    let j = cfg.center_jitter * size;
    let center = [cx + rng.random_range(-j..=j), cy + rng.random_range(-j..=j)];
    let s = cfg.scale_jitter;
    let side = crop_side(target, cfg.search_factor) * rng.random_range(-s..=s).exp();
    let (raw, t) = crop(frame, center, side, model.backbone.config.search_size)?;
    Ok((raw, t.box_to_patch(target)))
}

/// Samples templates and a jittered search crop from one sequence, with
/// flip and brightness augmentation applied consistently to images and box.
pub fn make_training_pair(seq: &Sequence, model: &MixFormer, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
    usable(seq)?;
    for _ in 0..MAX_RESAMPLE {
        let s = rng.random_range(0..seq.len());
        let (raw, gt) = jittered_search(&seq.frames[s], &seq.boxes[s], model, cfg, rng)?;
        let inside = gt.clamp_unit().area();
        if !(gt.area() > 0.0 && inside >= 0.9 * gt.area()) {
            continue;
        }
        let aug = Augment {
            flip: cfg.flip && rng.random_bool(0.5),
        };
        let gt = if aug.flip { gt.mirror_x() } else { gt };
        let search = finish_crop(raw, aug, cfg, rng);
        let templates = templates_for(seq, model, cfg, s, aug, rng)?;
        return Ok(TrainingPair { templates, search, gt });
    }
    Err(Error::Usage(format!("could not sample a valid training pair from {}", seq.name)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iter,loss,grad_norm\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.iter, r.loss, r.grad_norm);
    }
    s
}

fn iteration_rng(seed: u64, stage: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 32) | iter as u64);
    rng
}

fn accumulate(acc: &mut Vec<(ParamId, Vec<f32>)>, grads: Vec<(ParamId, Vec<f32>)>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for ((ia, a), (ib, b)) in acc.iter_mut().zip(grads) {
        debug_assert_eq!(*ia, ib);
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn inputs(g: &mut Graph<'_, f32>, templates: &[Tensor<f32>], search: &Tensor<f32>) -> (Vec<crate::Var>, crate::Var) {
    let t = templates.iter().map(|x| g.constant(x.clone())).collect();
    let s = g.constant(search.clone());
    (t, s)
}

/// Localization loss of one pair, with gradients for every non-score
/// parameter.
pub fn pair_loss(model: &MixFormer, store: &ParamStore<f32>, pair: &TrainingPair, cfg: &LossConfig) -> Result<(f64, Vec<(ParamId, Vec<f32>)>)> {
    let mut g = Graph::with_filter(store, |n| !is_spm_param(n));
    let (t, s) = inputs(&mut g, &pair.templates, &pair.search);
    let pred = model.forward(&mut g, &t, s)?;
    let loss = loc_loss_var(&mut g, pred.corners, &pair.gt, cfg)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, g.param_grads(&grads)))
}

fn check_data(data: &[Sequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Usage("no training sequences".into()));
    }
    data.iter().try_for_each(usable)
}

/// Stage 1: backbone and head on the localization loss.
pub fn train_stage1(
    model: &MixFormer,
    store: &mut ParamStore<f32>,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(data)?;
    let mut opt = AdamW::new(store);
    let mut curve = Vec::with_capacity(cfg.stage1_iters);
    for iter in 0..cfg.stage1_iters {
        let mut rng = iteration_rng(cfg.seed, 1, iter);
        let mut acc = Vec::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = &data[rng.random_range(0..data.len())];
            let pair = make_training_pair(seq, model, cfg, &mut rng)?;
            let (loss, grads) = pair_loss(model, store, &pair, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: iter });
            }
            total += loss;
            accumulate(&mut acc, grads);
        }
        let inv = 1.0 / cfg.batch_size as f32;
        acc.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= inv));
        let (_, grad_norm) = clip_grad_norm(&mut acc, cfg.clip_norm);
        opt.step(store, &acc, cfg.lr_at(iter), cfg.weight_decay);
        let rec = LossRecord {
            iter,
            loss: total / cfg.batch_size as f64,
            grad_norm,
        };
        progress(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

/// One crop for score training, with the box the score module pools from.
#[derive(Clone, Debug)]
pub struct ScoreSample {
    pub templates: Vec<Tensor<f32>>,
    pub search: Tensor<f32>,
    pub roi: BoundingBox,
    pub label: bool,
}

/// Predicted box on a search crop, clamped to the unit square.
pub fn predict_box(model: &MixFormer, store: &ParamStore<f32>, templates: &[Tensor<f32>], search: &Tensor<f32>) -> Result<BoundingBox> {
    let mut g = Graph::inference(store);
    let (t, s) = inputs(&mut g, templates, search);
    let p = model.forward(&mut g, &t, s)?;
    Ok(box_from_var(&g, p.corners).clamp_unit())
}

/// Positive: the target is in the crop and the model finds it (pooling
/// falls back to the true box otherwise). Negative: the crop shows
/// background or a distractor and the predicted box misses the target.
pub fn make_score_sample(
    data: &[Sequence],
    seq_idx: usize,
    model: &MixFormer,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    label: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ScoreSample> {
    let seq = &data[seq_idx];
    usable(seq)?;
    if label {
        let pair = make_training_pair(seq, model, cfg, rng)?;
        let pred = predict_box(model, store, &pair.templates, &pair.search)?;
        let roi = if pred.iou(&pair.gt) >= POSITIVE_IOU { pred } else { pair.gt };
        return Ok(ScoreSample {
            templates: pair.templates,
            search: pair.search,
            roi,
            label,
        });
    }
    let search_size = model.backbone.config.search_size;
    for _ in 0..MAX_RESAMPLE {
        let s = rng.random_range(0..seq.len());
        let other = data.len() > 1 && rng.random_bool(0.3);
        let (frame, target) = if other {
            let j = (seq_idx + rng.random_range(1..data.len())) % data.len();
            let o = &data[j];
            let k = rng.random_range(0..o.len());
            (&o.frames[k], None)
        } else {
            (&seq.frames[s], Some(seq.boxes[s]))
        };
        let side = crop_side(&seq.boxes[s], cfg.search_factor) * rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter).exp();
        let center = [
            rng.random_range(0.0..frame.width() as f64),
            rng.random_range(0.0..frame.height() as f64),
        ];
        let (raw, t) = crop(frame, center, side, search_size)?;
        let gt = target.map(|b| t.box_to_patch(&b));
        if gt.is_some_and(|g| g.clamp_unit().area() > 0.0) {
            continue;
        }
        let aug = Augment {
            flip: cfg.flip && rng.random_bool(0.5),
        };
        let search = finish_crop(raw, aug, cfg, rng);
        let templates = templates_for(seq, model, cfg, s, aug, rng)?;
        let roi = predict_box(model, store, &templates, &search)?;
        if let Some(g) = gt {
            if roi.iou(&g) >= NEGATIVE_IOU {
                continue;
            }
        }
        return Ok(ScoreSample {
            templates,
            search,
            roi,
            label,
        });
    }
    Err(Error::Usage(format!("could not sample a background crop from {}", seq.name)))
}

/// Score-module probability for a sample.
pub fn score_sample(model: &MixFormer, store: &ParamStore<f32>, sample: &ScoreSample) -> Result<f64> {
    let mut g = Graph::inference(store);
    let (t, s) = inputs(&mut g, &sample.templates, &sample.search);
    let pred = model.forward(&mut g, &t, s)?;
    let p = model.score_box(&mut g, &pred, &sample.roi)?;
    Ok(g.value(p).item() as f64)
}

/// Stage 2: only the score module trains; everything else is frozen.
/// `flip_labels` inverts every label (a sanity control).
pub fn train_stage2_spm(
    model: &MixFormer,
    store: &mut ParamStore<f32>,
    data: &[Sequence],
    cfg: &TrainConfig,
    flip_labels: bool,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(data)?;
    let mut opt = AdamW::new(store);
    let mut curve = Vec::with_capacity(cfg.stage2_iters);
    for iter in 0..cfg.stage2_iters {
        let mut rng = iteration_rng(cfg.seed, 2, iter);
        let mut acc = Vec::new();
        let mut total = 0.0;
        for b in 0..cfg.batch_size {
            let label = b % 2 == 0;
            let seq_idx = rng.random_range(0..data.len());
            let sample = make_score_sample(data, seq_idx, model, store, cfg, label, &mut rng)?;
            let mut g = Graph::with_filter(store, is_spm_param);
            let (t, s) = inputs(&mut g, &sample.templates, &sample.search);
            let pred = model.forward(&mut g, &t, s)?;
            let p = model.score_box(&mut g, &pred, &sample.roi)?;
            let loss = score_loss_var(&mut g, p, label != flip_labels)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { iteration: iter });
            }
            total += value;
            let grads = g.backward(loss)?;
            accumulate(&mut acc, g.param_grads(&grads));
        }
        let inv = 1.0 / cfg.batch_size as f32;
        acc.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= inv));
        let (_, grad_norm) = clip_grad_norm(&mut acc, cfg.clip_norm);
        opt.step(store, &acc, cfg.spm_lr, cfg.weight_decay);
        let rec = LossRecord {
            iter,
            loss: total / cfg.batch_size as f64,
            grad_norm,
        };
        progress(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

/// Balanced held-out score samples: `n` positives and `n` negatives.
pub fn score_eval_set(
    model: &MixFormer,
    store: &ParamStore<f32>,
    data: &[Sequence],
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<ScoreSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let idx = rng.random_range(0..data.len());
        out.push(make_score_sample(data, idx, model, store, cfg, i % 2 == 0, &mut rng)?);
    }
    Ok(out)
}

/// Fraction of samples classified correctly at threshold 0.5.
pub fn score_accuracy(model: &MixFormer, store: &ParamStore<f32>, samples: &[ScoreSample]) -> Result<f64> {
    let mut hits = 0;
    for s in samples {
        let p = score_sample(model, store, s)?;
        if (p >= 0.5) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![(ParamId::from_index(0), vec![3.0f32, 4.0])];
        let (before, after) = clip_grad_norm(&mut g, 0.1);
        assert!((before - 5.0).abs() < 1e-6);
        assert!(after <= 0.1 + 1e-6);
        let mut small = vec![(ParamId::from_index(0), vec![0.01f32])];
        let (_, after) = clip_grad_norm(&mut small, 0.1);
        assert!((after - 0.01).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule_drops_at_eighty_percent() {
        let c = TrainConfig {
            stage1_iters: 100,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(79), 1e-3);
        assert!((c.lr_at(80) - 1e-4).abs() < 1e-12);
    }
}
