//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order on a [`Tape`]. Every node only
//! references earlier nodes, so walking the tape from the end visits nodes in
//! reverse topological order. Gradients are accumulated, never overwritten.

pub mod gradcheck;
pub mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product supplied by a [`Tape::custom`] op: receives the
/// input values, the output value and the upstream gradient, and returns one
/// optional gradient per input.
pub type CustomVjp<F> =
    Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &[F]) -> Vec<Option<Vec<F>>> + Send + Sync>;

pub(crate) enum Op<F: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale(Var, F),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: F, hi: F },
    Reshape(Var),
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Matmul { a: Var, b: Var, batch: usize, a_step: usize, b_step: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F>, dim: usize },
    BatchNorm { x: Var, mean: Var, var: Var, gain: Var, bias: Var, eps: F, plane: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, k: Var, geom: ConvGeom },
    Concat { parts: Vec<Var>, outer: usize, lens: Vec<usize>, inner: usize },
    Slice { x: Var, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    Custom { inputs: Vec<Var>, vjp: CustomVjp<F> },
}

impl<F: Float> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(..) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Matmul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm_frozen",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of operations. A tape is single-threaded; independent
/// tapes may run concurrently.
pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    check_finite: bool,
    non_finite: Option<&'static str>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: false,
            non_finite: None,
        }
    }

    /// A tape that records values only. Leaves never require grad and no
    /// backward state is kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// When enabled, the first op producing a NaN or infinity is remembered
    /// and reported by [`Tape::first_non_finite`].
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a derived value. The node tracks gradients only if one of
    /// its parents does; otherwise saved state is dropped.
    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if self.check_finite && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op with a caller-provided backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, vjp: CustomVjp<F>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            inputs,
        )
    }

    /// Propagates `d loss / d node` to every node that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]);
        f(slot);
    }

    fn val(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.val(*a), self.val(*b));
                // Ties route the gradient to the first operand.
                let pick_a = |i: usize| if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if pick_a(i) {
                            ga[i] += g[i];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        if !pick_a(i) {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *row, |gr| {
                    let n = gr.len();
                    for (i, &v) in g.iter().enumerate() {
                        gr[i % n] += v;
                    }
                });
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (self.val(*x), self.val(*row));
                let n = rv.len();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * rv[i % n];
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for i in 0..g.len() {
                        gr[i % n] += g[i] * xv[i];
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += *c * g[i];
                }
            }),
            Op::Offset(x) | Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::Sum(x) => self.accumulate(grads, *x, |gx| {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean(x) => self.accumulate(grads, *x, |gx| {
                let s = g[0] / F::lit(gx.len() as f64);
                for v in gx.iter_mut() {
                    *v += s;
                }
            }),
            Op::Abs(x) => {
                let xv = self.val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > F::zero() {
                            gx[i] += g[i];
                        } else if xv[i] < F::zero() {
                            gx[i] -= g[i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > F::zero() {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i] * (F::one() - out[i]);
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i];
                }
            }),
            Op::Log(x) => {
                let xv = self.val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Transpose { x, batch, rows, cols } => self.accumulate(grads, *x, |gx| {
                let (r, c) = (*rows, *cols);
                for bi in 0..*batch {
                    let base = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[base + i * c + j] += g[base + j * r + i];
                        }
                    }
                }
            }),
            Op::Matmul { a, b, batch, a_step, b_step, m, k, n } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (*m, *k, *n);
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..*batch {
                        let (ao, bo) = (bi * a_step, bi * b_step);
                        kernels::matmul_grad_a(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..*batch {
                        let (ao, bo) = (bi * a_step, bi * b_step);
                        kernels::matmul_grad_b(
                            &av[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => self.accumulate(grads, *x, |gx| {
                let (len, inner) = (*len, *inner);
                for o in 0..*outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut dot = F::zero();
                        for l in 0..len {
                            dot += g[idx(l)] * out[idx(l)];
                        }
                        for l in 0..len {
                            gx[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, rstd, dim } => {
                let d = *dim;
                let gamma = self.val(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for i in 0..g.len() {
                        gb[i % d] += g[i];
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let inv_d = F::one() / F::lit(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_g = F::zero();
                        let mut mean_gx = F::zero();
                        for j in 0..d {
                            let gh = gr[j] * gamma[j];
                            mean_g += gh;
                            mean_gx += gh * xr[j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for j in 0..d {
                            let gh = gr[j] * gamma[j];
                            gx[r * d + j] += rs * (gh - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::BatchNorm { x, mean, var, gain, bias, eps, plane } => {
                let (xv, mv, vv, gv) = (self.val(*x), self.val(*mean), self.val(*var), self.val(*gain));
                let p = *plane;
                let channels = mv.len();
                let rs: Vec<F> = vv.iter().map(|&v| F::one() / (v + *eps).sqrt()).collect();
                self.accumulate(grads, *x, |gx| {
                    for c in 0..channels {
                        for i in c * p..(c + 1) * p {
                            gx[i] += g[i] * gv[c] * rs[c];
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for c in 0..channels {
                        for i in c * p..(c + 1) * p {
                            gg[c] += g[i] * (xv[i] - mv[c]) * rs[c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for c in 0..channels {
                        gb[c] += g[c * p..(c + 1) * p].iter().copied().sum::<F>();
                    }
                });
                self.accumulate(grads, *mean, |gm| {
                    for c in 0..channels {
                        let s: F = g[c * p..(c + 1) * p].iter().copied().sum();
                        gm[c] -= s * gv[c] * rs[c];
                    }
                });
                self.accumulate(grads, *var, |gvar| {
                    let half = F::lit(0.5);
                    for c in 0..channels {
                        let mut s = F::zero();
                        for i in c * p..(c + 1) * p {
                            s += g[i] * (xv[i] - mv[c]);
                        }
                        gvar[c] -= half * s * gv[c] * rs[c] * rs[c] * rs[c];
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let mut gx = self.nodes[x.0].requires_grad.then(|| vec![F::zero(); xv.len()]);
                let mut gw = self.nodes[w.0].requires_grad.then(|| vec![F::zero(); wv.len()]);
                let mut gb = b
                    .filter(|b| self.nodes[b.0].requires_grad)
                    .map(|_| vec![F::zero(); geom.c_out]);
                kernels::conv2d_backward(xv, wv, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut(), geom);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, |t| add_into(t, &gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, |t| add_into(t, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, |t| add_into(t, &gb));
                }
            }
            Op::Depthwise { x, k, geom } => {
                let (xv, kv) = (self.val(*x), self.val(*k));
                let mut gx = self.nodes[x.0].requires_grad.then(|| vec![F::zero(); xv.len()]);
                let mut gk = self.nodes[k.0].requires_grad.then(|| vec![F::zero(); kv.len()]);
                kernels::depthwise_backward(xv, kv, g, gx.as_deref_mut(), gk.as_deref_mut(), geom);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, |t| add_into(t, &gx));
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *k, |t| add_into(t, &gk));
                }
            }
            Op::Concat { parts, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(lens) {
                    self.accumulate(grads, *p, |gp| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, len_in, start, len, inner } => self.accumulate(grads, *x, |gx| {
                for o in 0..*outer {
                    let dst = (o * len_in + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            }),
            Op::Custom { inputs, vjp } => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let contributions = vjp(&values, &node.value, g);
                for (v, c) in inputs.iter().zip(contributions) {
                    if let Some(c) = c {
                        self.accumulate(grads, *v, |t| add_into(t, &c));
                    }
                }
            }
        }
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    x * half * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `Φ(x) + x·φ(x)` for the exact Gaussian-CDF GELU.
pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let cdf = half * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Result of [`Tape::backward`].
pub struct Gradients<F: Float> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value, zeros if nothing reached it.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        let shape = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
