//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this (in ∞-norm) sit at the level of
/// finite-difference round-off and are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_abs_err: f64,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`; the absolute
    /// error when both norms are below [`ABS_FLOOR`].
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares analytic gradients of the scalar `f(params)` with central
/// differences of step `h`. `f` records its computation on the given tape,
/// with each parameter already registered as a leaf.
pub fn grad_check<G>(f: G, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        tape.set_check_finite(true);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let loss = f(&mut tape, &vars)?;
        if let Some(op) = tape.first_non_finite() {
            return Err(Error::NonFinite { op });
        }
        let value = tape.value(loss).item();
        let grads = if grad {
            let g = tape.backward(loss)?;
            vars.iter().map(|&v| g.wrt(&tape, v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut working = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = params[index].data()[e];
            working[index].data_mut()[e] = orig + h;
            let (plus, _) = eval(&working, false)?;
            working[index].data_mut()[e] = orig - h;
            let (minus, _) = eval(&working, false)?;
            working[index].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let mut max_abs_err = 0.0f64;
        let mut scale = 0.0f64;
        for (&a, &n) in grad.data().iter().zip(&numeric) {
            max_abs_err = max_abs_err.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
        let rel_err = if scale < ABS_FLOOR { max_abs_err } else { max_abs_err / scale };
        report.push(ParamCheck {
            index,
            max_abs_err,
            rel_err,
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        // small LCG so this module stays independent of the model initializers
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matmul_sum_matches_central_difference() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[4, 2], 2);
        let report = grad_check(
            |t, p| {
                let y = t.matmul(p[0], p[1])?;
                Ok(t.sum(y))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn linear_layer_passes() {
        let x = rand_tensor(&[5, 3], 3);
        let w = rand_tensor(&[3, 4], 4);
        let b = rand_tensor(&[4], 5);
        let report = grad_check(
            |t, p| {
                let y = t.linear(p[0], p[1], Some(p[2]))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn attention_core_passes() {
        let q = rand_tensor(&[4, 3], 6);
        let k = rand_tensor(&[5, 3], 7);
        let v = rand_tensor(&[5, 2], 8);
        let probe = rand_tensor(&[4, 2], 9);
        let report = grad_check(
            |t, p| {
                let kt = t.transpose(p[1])?;
                let logits = t.matmul(p[0], kt)?;
                let logits = t.scale(logits, 1.0 / 3f64.sqrt());
                let attn = t.softmax_last(logits)?;
                let out = t.matmul(attn, p[2])?;
                let w = t.constant(probe.clone());
                let y = t.mul(out, w)?;
                Ok(t.sum(y))
            },
            &[q, k, v],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        // forward x², backward claims 3x
        let x = rand_tensor(&[4], 10);
        let report = grad_check(
            |t, p| {
                let out = t.value(p[0]).map(|v| v * v);
                let y = t.custom(
                    &[p[0]],
                    out,
                    Box::new(|inputs, _, g| {
                        let x = inputs[0].data();
                        vec![Some(x.iter().zip(g).map(|(&x, &g)| 3.0 * x * g).collect())]
                    }),
                );
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(!report.passes(1e-4));
        assert!(report.max_rel_err() > 0.3);
    }

    #[test]
    fn non_finite_intermediate_names_the_op() {
        let x = Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, p| {
                let y = t.log(p[0]);
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log" }), "{err}");
    }
}
