//! Localization heads: a fully-convolutional corner head decoded by
//! soft-argmax, and a regression-token head decoded by a small FFN.

use crate::autodiff::{Tape, Var};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FrozenBatchNorm, Graph, Init, Linear, ParamId};
use crate::tensor::{Float, Tensor};

pub const CORNER_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Corner,
    Query,
}

impl HeadKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "corner" => Some(Self::Corner),
            "query" => Some(Self::Query),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Corner => "corner",
            Self::Query => "query",
        }
    }
}

/// Normalized grid coordinate of index `i` along an axis of length `n`.
/// A single-cell axis maps to the centre.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Expected `(x, y)` under the softmax of an `[h, w]` logit map, returned as
/// a `[1, 2]` row.
pub fn soft_argmax<F: Float>(g: &mut Tape<F>, map: Var) -> Result<Var> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 2 || shape[0] * shape[1] == 0 {
        return Err(Error::config(format!("soft_argmax needs a non-empty [h, w] map, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let flat = g.reshape(map, &[1, h * w])?;
    let p = g.softmax_last(flat)?;
    let coords = Tensor::from_fn(&[h * w, 2], |k| {
        let (cell, axis) = (k / 2, k % 2);
        F::lit(if axis == 0 { grid_coord(cell % w, w) } else { grid_coord(cell / w, h) })
    });
    let c = g.constant(coords);
    g.matmul(p, c)
}

/// Reorders a `[1, 4]` corner row so that `x0 ≤ x1` and `y0 ≤ y1`.
pub fn order_corners<F: Float>(g: &mut Tape<F>, corners: Var) -> Result<Var> {
    let a = g.slice(corners, 1, 0, 2)?;
    let b = g.slice(corners, 1, 2, 2)?;
    let lo = g.minimum(a, b)?;
    let hi = g.maximum(a, b)?;
    g.concat(&[lo, hi], 1)
}

/// `[n, 4]` rows of `(cx, cy, w, h)` to corner form.
pub fn cxcywh_to_corners<F: Float>(g: &mut Tape<F>, v: Var) -> Result<Var> {
    #[rustfmt::skip]
    let m = [
        1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 1.0,
        -0.5, 0.0, 0.5, 0.0,
        0.0, -0.5, 0.0, 0.5,
    ];
    let m = g.constant(Tensor::from_f64(&[4, 4], &m)?);
    g.matmul(v, m)
}

/// Reads a `[1, 4]` corner row back as a box.
pub fn box_from_var<F: Float>(g: &Tape<F>, v: Var) -> BoundingBox {
    let d = g.value(v).data();
    BoundingBox::new(d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64())
}

#[derive(Clone, Debug)]
pub struct CornerBranch {
    pub layers: Vec<(Conv2d, FrozenBatchNorm)>,
    pub out: Conv2d,
}

impl CornerBranch {
    fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        let mut c = dim;
        let layers = (0..CORNER_LAYERS)
            .map(|i| {
                let conv = Conv2d::new(&mut s, &format!("conv{i}"), c, c / 2, 3, 1, false);
                let bn = FrozenBatchNorm::new(&mut s, &format!("bn{i}"), c / 2);
                c /= 2;
                (conv, bn)
            })
            .collect();
        let out = Conv2d::new(&mut s, "out", c, 1, 1, 1, true);
        Self { layers, out }
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, feat: Var) -> Result<Var> {
        let mut x = feat;
        for (conv, bn) in &self.layers {
            x = conv.forward(g, x)?;
            x = bn.forward(g, x)?;
            x = g.relu(x);
        }
        let y = self.out.forward(g, x)?;
        let s = g.shape(y).to_vec();
        let map = g.reshape(y, &[s[1], s[2]])?;
        soft_argmax(g, map)
    }
}

#[derive(Clone, Debug)]
pub struct CornerHead {
    pub top_left: CornerBranch,
    pub bottom_right: CornerBranch,
}

impl CornerHead {
    pub fn new<F: Float>(init: &mut Init<'_, F>, dim: usize) -> Result<Self> {
        if dim % (1 << CORNER_LAYERS) != 0 {
            return Err(Error::config(format!(
                "corner head needs a feature dim divisible by {}, got {dim}",
                1 << CORNER_LAYERS
            )));
        }
        Ok(Self {
            top_left: CornerBranch::new(init, "tl", dim),
            bottom_right: CornerBranch::new(init, "br", dim),
        })
    }

    /// `[D, h, w]` feature map to an ordered `[1, 4]` corner row.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, feat: Var) -> Result<Var> {
        let tl = self.top_left.forward(g, feat)?;
        let br = self.bottom_right.forward(g, feat)?;
        let raw = g.concat(&[tl, br], 1)?;
        order_corners(g, raw)
    }
}

#[derive(Clone, Debug)]
pub struct QueryHead {
    pub token: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl QueryHead {
    pub fn new<F: Float>(init: &mut Init<'_, F>, dim: usize) -> Self {
        Self {
            token: init.normal("reg_token", &[1, dim], 0.02),
            fc1: Linear::new(init, "fc1", dim, dim),
            fc2: Linear::new(init, "fc2", dim, dim),
            fc3: Linear::new(init, "fc3", dim, 4),
        }
    }

    /// The learnable token, `[1, D]`, to be appended to the final stage.
    pub fn token<F: Float>(&self, g: &mut Graph<'_, F>) -> Var {
        g.param(self.token)
    }

    /// Decodes the processed token into a `[1, 4]` corner row.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, token: Var) -> Result<Var> {
        let h = self.fc1.forward(g, token)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.relu(h);
        let h = self.fc3.forward(g, h)?;
        let c = g.sigmoid(h);
        cxcywh_to_corners(g, c)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Corner(CornerHead),
    Query(QueryHead),
}

impl Head {
    pub fn new<F: Float>(init: &mut Init<'_, F>, kind: HeadKind, dim: usize) -> Result<Self> {
        let mut s = init.scope("head");
        Ok(match kind {
            HeadKind::Corner => Head::Corner(CornerHead::new(&mut s, dim)?),
            HeadKind::Query => Head::Query(QueryHead::new(&mut s, dim)),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Corner(_) => HeadKind::Corner,
            Head::Query(_) => HeadKind::Query,
        }
    }
}
