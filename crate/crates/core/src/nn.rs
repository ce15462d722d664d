//! Named parameters and the small layers built on them.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a [`Graph`] binds the
//! store to a tape for one forward/backward pass.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F: Float> {
    pub name: String,
    pub value: Tensor<F>,
    /// Statistics buffers (frozen batch-norm mean/var) are not trainable.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Float = f32> {
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Bit-identical contents, names and order.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

type ParamFilter = Box<dyn Fn(&str) -> bool>;

/// A tape bound to a parameter store. Parameters become leaves on first use.
pub struct Graph<'s, F: Float = f32> {
    tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: Vec<Option<Var>>,
    filter: Option<ParamFilter>,
}

impl<'s, F: Float> Graph<'s, F> {
    /// Training graph: every trainable parameter requires grad.
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            filter: None,
        }
    }

    /// No gradients are tracked.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self {
            tape: Tape::inference(),
            ..Self::new(store)
        }
    }

    /// Only trainable parameters whose name satisfies `filter` require grad.
    pub fn with_filter(store: &'s ParamStore<F>, filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            filter: Some(Box::new(filter)),
            ..Self::new(store)
        }
    }

    /// Continues recording on an existing tape.
    pub fn on_tape(store: &'s ParamStore<F>, tape: Tape<F>) -> Self {
        Self { tape, ..Self::new(store) }
    }

    /// Uses `v` in place of parameter `id` for the rest of this graph.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let wants = p.trainable && self.filter.as_ref().is_none_or(|f| f(&p.name));
        let v = self.tape.leaf(p.value.clone(), wants);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter that required grad.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Vec<F>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.tape.requires_grad(v) {
                    return None;
                }
                let g = grads
                    .get(v)
                    .map(<[F]>::to_vec)
                    .unwrap_or_else(|| vec![F::zero(); self.store.entries[i].value.numel()]);
                Some((ParamId(i), g))
            })
            .collect()
    }

    pub fn into_tape(self) -> Tape<F> {
        self.tape
    }
}

impl<F: Float> Deref for Graph<'_, F> {
    type Target = Tape<F>;
    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<F: Float> DerefMut for Graph<'_, F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        &mut self.tape
    }
}

/// Finite-difference check of `f` with respect to the listed parameters,
/// all other parameters held at their stored values.
pub fn check_param_grads<G>(store: &ParamStore<f64>, ids: &[ParamId], f: G, h: f64) -> Result<GradCheckReport>
where
    G: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let values: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    grad_check(
        |t, vars| {
            let mut g = Graph::on_tape(store, std::mem::replace(t, Tape::new()));
            for (&id, &v) in ids.iter().zip(vars) {
                g.bind(id, v);
            }
            let out = f(&mut g);
            *t = g.into_tape();
            out
        },
        &values,
        h,
    )
}

/// Registers freshly initialized parameters under a dotted name prefix.
pub struct Init<'a, F: Float> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Float> Init<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, F> {
        let prefix = self.path(name);
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let path = self.path(name);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.sample::<f64, _>(StandardNormal) * std));
        self.store.add(path, t, true)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> ParamId {
        let path = self.path(name);
        self.store.add(path, Tensor::full(shape, F::lit(v)), trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.fill(name, shape, 0.0, true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.fill(name, shape, 1.0, true)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            weight: s.normal("weight", &[d_in, d_out], (1.0 / d_in as f64).sqrt()),
            bias: s.zeros("bias", &[d_out]),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            gain: s.ones("gain", &[dim]),
            bias: s.zeros("bias", &[dim]),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, F::lit(LN_EPS))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<F: Float>(
        init: &mut Init<'_, F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let mut s = init.scope(name);
        let fan_in = (c_in * kernel * kernel) as f64;
        Self {
            weight: s.normal("weight", &[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt()),
            bias: bias.then(|| s.zeros("bias", &[c_out])),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch norm with fixed running statistics; only gain and bias train.
#[derive(Clone, Copy, Debug)]
pub struct FrozenBatchNorm {
    pub mean: ParamId,
    pub var: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl FrozenBatchNorm {
    pub fn new<F: Float>(init: &mut Init<'_, F>, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            mean: s.fill("running_mean", &[channels], 0.0, false),
            var: s.fill("running_var", &[channels], 1.0, false),
            gain: s.ones("gain", &[channels]),
            bias: s.zeros("bias", &[channels]),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (m, v) = (g.param(self.mean), g.param(self.var));
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.batch_norm_frozen(x, m, v, gain, bias, F::lit(BN_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn filtered_graph_only_tracks_selected_params() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let a = Linear::new(&mut init, "backbone.proj", 2, 2);
        let b = Linear::new(&mut init, "spm.proj", 2, 1);

        let mut g = Graph::with_filter(&store, |n| n.starts_with("spm."));
        let x = g.constant(Tensor::ones(&[1, 2]));
        let h = a.forward(&mut g, x).unwrap();
        let y = b.forward(&mut g, h).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let names: Vec<_> = g
            .param_grads(&grads)
            .into_iter()
            .map(|(id, _)| store.param(id).name.clone())
            .collect();
        assert_eq!(names, ["spm.proj.weight", "spm.proj.bias"]);
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut init = Init::new(&mut store, &mut rng);
            Conv2d::new(&mut init, "c", 3, 4, 3, 1, true);
            store
        };
        assert!(build().bit_eq(&build()));
    }
}
