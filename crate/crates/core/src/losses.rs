//! Localization and score losses, both as plain functions on boxes and as
//! differentiable graph expressions.

use crate::autodiff::{Tape, Var};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const SCORE_EPS: f64 = 1e-7;
/// Added to the union and enclosing areas in the differentiable GIoU so
/// that degenerate predictions keep finite gradients.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l1_weight: 5.0,
            giou_weight: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_weight >= 0.0 && self.giou_weight >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.giou(b)
}

/// `λ_L1 · mean|pred − gt| + λ_giou · (1 − giou)`.
pub fn loc_loss(pred: &BoundingBox, gt: &BoundingBox, cfg: &LossConfig) -> f64 {
    let l1 = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 4.0;
    cfg.l1_weight * l1 + cfg.giou_weight * (1.0 - pred.giou(gt))
}

/// Binary cross-entropy with `p` clamped to `[ε, 1 − ε]`.
pub fn score_loss(p: f64, label: bool) -> f64 {
    let p = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn col<F: Float>(g: &mut Tape<F>, v: Var, i: usize) -> Result<Var> {
    g.slice(v, 1, i, 1)
}

fn lit<F: Float>(g: &mut Tape<F>, v: f64) -> Var {
    g.constant(Tensor::full(&[1, 1], F::lit(v)))
}

/// Differentiable GIoU between a `[1, 4]` predicted corner row and a fixed
/// target. Returns a `[1, 1]` value.
pub fn giou_var<F: Float>(g: &mut Tape<F>, pred: Var, gt: &BoundingBox) -> Result<Var> {
    if g.shape(pred) != [1, 4] {
        return Err(Error::shape("giou", g.shape(pred), &[1, 4]));
    }
    let [px0, py0, px1, py1] = [0, 1, 2, 3].map(|i| col(g, pred, i));
    let (px0, py0, px1, py1) = (px0?, py0?, px1?, py1?);
    let [gx0, gy0, gx1, gy1] = gt.to_array().map(|v| lit(g, v));

    let ix0 = g.maximum(px0, gx0)?;
    let iy0 = g.maximum(py0, gy0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let pw = g.sub(px1, px0)?;
    let ph = g.sub(py1, py0)?;
    let p_area = g.mul(pw, ph)?;
    let u = g.offset(p_area, F::lit(gt.area()));
    let union = g.sub(u, inter)?;
    let union_safe = g.offset(union, F::lit(AREA_EPS));
    let iou = g.div(inter, union_safe)?;

    let cx0 = g.minimum(px0, gx0)?;
    let cy0 = g.minimum(py0, gy0)?;
    let cx1 = g.maximum(px1, gx1)?;
    let cy1 = g.maximum(py1, gy1)?;
    let cw = g.sub(cx1, cx0)?;
    let ch = g.sub(cy1, cy0)?;
    let c_area = g.mul(cw, ch)?;
    let gap = g.sub(c_area, union)?;
    let c_safe = g.offset(c_area, F::lit(AREA_EPS));
    let penalty = g.div(gap, c_safe)?;
    g.sub(iou, penalty)
}

/// Differentiable localization loss on a `[1, 4]` corner row; scalar output.
pub fn loc_loss_var<F: Float>(g: &mut Tape<F>, pred: Var, gt: &BoundingBox, cfg: &LossConfig) -> Result<Var> {
    let target = g.constant(Tensor::from_f64(&[1, 4], &gt.to_array())?);
    let d = g.sub(pred, target)?;
    let d = g.abs(d);
    let l1 = g.mean(d);
    let gi = giou_var(g, pred, gt)?;
    let one_minus = g.neg(gi);
    let one_minus = g.offset(one_minus, F::one());
    let l_giou = g.sum(one_minus);
    let a = g.scale(l1, F::lit(cfg.l1_weight));
    let b = g.scale(l_giou, F::lit(cfg.giou_weight));
    g.add(a, b)
}

/// Differentiable binary cross-entropy on a probability `p` (any shape with
/// one element); scalar output.
pub fn score_loss_var<F: Float>(g: &mut Tape<F>, p: Var, label: bool) -> Result<Var> {
    let p = g.clamp(p, F::lit(SCORE_EPS), F::lit(1.0 - SCORE_EPS));
    let q = if label {
        p
    } else {
        let n = g.neg(p);
        g.offset(n, F::one())
    };
    let l = g.log(q);
    let l = g.sum(l);
    Ok(g.neg(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;

    #[test]
    fn hand_values() {
        let cfg = LossConfig::default();
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(loc_loss(&a, &a, &cfg), 0.0);
        assert!((loc_loss(&a, &b, &cfg) - (10.0 + 32.0 / 9.0)).abs() < 1e-12);
        assert!((score_loss(0.5, true) - 2f64.ln()).abs() < 1e-15);
        assert!((score_loss(0.5, false) - 2f64.ln()).abs() < 1e-15);
        assert!((score_loss(0.9, false) - 2.302585092994046).abs() < 1e-9);
        assert!(score_loss(1.0 - 1e-12, true) < 1e-6);
        assert!(score_loss(0.0, true).is_finite());
    }

    #[test]
    fn graph_matches_plain_functions() {
        let cfg = LossConfig::default();
        let cases = [
            (BoundingBox::new(0.0, 0.0, 1.0, 1.0), BoundingBox::new(2.0, 2.0, 3.0, 3.0)),
            (BoundingBox::new(0.1, 0.2, 0.5, 0.7), BoundingBox::new(0.3, 0.1, 0.9, 0.6)),
            (BoundingBox::new(0.2, 0.2, 0.4, 0.4), BoundingBox::new(0.2, 0.2, 0.4, 0.4)),
        ];
        for (p, t) in cases {
            let mut g = Tape::<f64>::new();
            let v = g.constant(Tensor::from_f64(&[1, 4], &p.to_array()).unwrap());
            let gi = giou_var(&mut g, v, &t).unwrap();
            assert!((g.value(gi).item() - p.giou(&t)).abs() < 1e-8);
            let l = loc_loss_var(&mut g, v, &t, &cfg).unwrap();
            assert!((g.value(l).item() - loc_loss(&p, &t, &cfg)).abs() < 1e-7);
        }
        let mut g = Tape::<f64>::new();
        let p = g.constant(Tensor::full(&[1, 1], 0.9));
        let l = score_loss_var(&mut g, p, false).unwrap();
        assert!((g.value(l).item() - score_loss(0.9, false)).abs() < 1e-12);
    }

    #[test]
    fn loc_loss_gradient_matches_finite_differences() {
        let gt = BoundingBox::new(0.25, 0.3, 0.7, 0.8);
        let pred = Tensor::from_f64(&[1, 4], &[0.2, 0.35, 0.6, 0.9]).unwrap();
        let report = grad_check(
            |t, p| loc_loss_var(t, p[0], &gt, &LossConfig::default()),
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn score_loss_is_convex_in_logit() {
        let f = |z: f64, y: bool| score_loss(1.0 / (1.0 + (-z).exp()), y);
        for y in [false, true] {
            for k in -40..40 {
                let z = k as f64 * 0.2;
                let h = 1e-3;
                assert!(f(z + h, y) - 2.0 * f(z, y) + f(z - h, y) > 0.0);
            }
        }
    }
}
