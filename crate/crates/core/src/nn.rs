//! Parameter storage, binding onto a tape, and the basic layers.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to an entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, receives weight decay.
    Weight,
    /// Learnable, exempt from weight decay (biases, norm affine terms,
    /// attention tables, gates).
    NoDecay,
    /// Running statistic; never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies every value from `other`, which must have the same names and
    /// shapes in the same order.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        let n = self.entries.len().max(other.len());
        for i in 0..n {
            let mine = self.entries.get(i).map(|e| (e.name.as_str(), e.value.shape()));
            let theirs = other.get(i).map(|(name, t)| (name.as_str(), t.shape()));
            if mine != theirs {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: model has {mine:?}, checkpoint has {theirs:?} ({} vs {} tensors)",
                    self.entries.len(),
                    other.len()
                )));
            }
        }
        for (e, (_, t)) in self.entries.iter_mut().zip(other) {
            e.value = t.clone();
        }
        Ok(())
    }

    /// Copies the tensors of `other` whose name and shape match an entry;
    /// returns how many were copied.
    pub fn load_matching(&mut self, other: &[(String, Tensor<T>)]) -> usize {
        let mut n = 0;
        for (name, t) in other {
            if let Some(e) = self.entries.iter_mut().find(|e| &e.name == name && e.value.shape() == t.shape()) {
                e.value = t.clone();
                n += 1;
            }
        }
        n
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

/// A forward pass in flight: the tape, the store's tensors bound as leaves,
/// and the batch-norm statistics collected along the way.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    vars: Vec<Var>,
    pub train: bool,
    pub bn_updates: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Binds every learnable tensor as a leaf. Gradients are tracked when the
    /// graph has them enabled.
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.kind != ParamKind::Buffer))
            .collect();
        Self {
            g,
            store,
            vars,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::from_f64_lossy(z * std)
}

/// He-normal initialization for ReLU convolutions.
pub fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| normal(rng, std))
}

/// Normal with standard deviation `std`, redrawn outside ±2σ.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64_lossy(z * std);
        }
    })
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            trunc_normal(rng, &[dout, din], 0.02),
            ParamKind::Weight,
        );
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[dout]), ParamKind::NoDecay));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = self.b.map(|b| ctx.var(b));
        let w = ctx.var(self.w);
        ctx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            kaiming(rng, &[cout, cin, k, k], cin * k * k),
            ParamKind::Weight,
        );
        let b = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::NoDecay));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = self.b.map(|b| ctx.var(b));
        let w = ctx.var(self.w);
        ctx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Layer normalization over the channel (last) axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.weight"), Tensor::full(&[dim], T::one()), ParamKind::NoDecay),
            beta: store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]), ParamKind::NoDecay),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        ctx.g.layer_norm(x, g, b)
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.weight"), Tensor::full(&[c], T::one()), ParamKind::NoDecay),
            beta: store.add(&format!("{name}.bias"), Tensor::zeros(&[c]), ParamKind::NoDecay),
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            running_var: store.add(&format!("{name}.running_var"), Tensor::full(&[c], T::one()), ParamKind::Buffer),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        if ctx.train {
            let (y, stats) = ctx.g.batch_norm(x, g, b, None)?;
            if let Some(stats) = stats {
                ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            }
            Ok(y)
        } else {
            let rm = ctx.store.get(self.running_mean).data();
            let rv = ctx.store.get(self.running_var).data();
            Ok(ctx.g.batch_norm(x, g, b, Some((rm, rv)))?.0)
        }
    }
}

/// Folds collected batch statistics into the running estimates.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, ParamId, BatchStats<T>)>) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    for (mean_id, var_id, stats) in updates {
        for (r, &s) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * s;
        }
        for (r, &s) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * s;
        }
    }
}

/// NCHW → NHWC.
pub fn to_nhwc<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.permute(x, &[0, 2, 3, 1])
}

/// NHWC → NCHW.
pub fn to_nchw<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.permute(x, &[0, 3, 1, 2])
}

/// Central `h/2 × w/2` crop of an NCHW map. When `h/4` is fractional the
/// crop starts at its floor.
pub fn center_crop_half<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::Shape(format!("center crop needs even NCHW sizes, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let y = g.narrow(x, 2, h / 4, h / 2)?;
    g.narrow(y, 3, w / 4, w / 2)
}
