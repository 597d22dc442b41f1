//! The full two-branch model: context branch, target branch, hooks and
//! auxiliary heads.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::context::{ContextBranch, ContextConfig, ShapeTrace};
use crate::error::{Error, Result};
use crate::hooks::{Hook, HookShape, HookType};
use crate::losses::{cds_loss, ds_loss, LossWeights, Supervision};
use crate::nn::{rng_from_seed, Conv2d, Ctx, Linear, ParamStore};
use crate::target::{TargetBranch, TargetConfig, TargetOut};
use crate::tensor::{Scalar, Tensor};

/// Dimension of the contrastive embedding space.
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Patch size `r_t` of both branch inputs.
    pub input_size: usize,
    /// Context branch width `C`.
    pub context_dim: usize,
    /// Target branch base width `C'`.
    pub target_base: usize,
    pub window: usize,
    /// `None` builds the target branch alone (a plain U-Net).
    pub hook: Option<HookType>,
    pub supervision: Supervision,
    pub num_classes: usize,
}

impl ModelConfig {
    /// `r_t = 224`, `C = 96`, `C' = 32`, window 7.
    pub fn paper() -> Self {
        Self {
            input_size: 224,
            context_dim: 96,
            target_base: 32,
            window: 7,
            hook: Some(HookType::Esca),
            supervision: Supervision::Cds,
            num_classes: 4,
        }
    }

    /// `r_t = 112`, `C = 24`, `C' = 8`, window 7.
    pub fn tiny() -> Self {
        Self {
            input_size: 112,
            context_dim: 24,
            target_base: 8,
            ..Self::paper()
        }
    }

    pub fn context_config(&self) -> Result<ContextConfig> {
        let mut c = ContextConfig::fitted(self.input_size, self.context_dim, self.window)?;
        c.num_classes = self.num_classes;
        Ok(c)
    }

    pub fn target_config(&self) -> TargetConfig {
        let mut t = TargetConfig::new(self.input_size, self.target_base);
        t.num_classes = self.num_classes;
        t
    }

    /// Geometry of the two hooks: depth 1 joins the `(r/8, 2C)` context map
    /// with block 5, depth 2 joins the `(r/4, C)` map with block 6.
    pub fn hook_shapes(&self) -> [HookShape; 2] {
        let (r, c, t) = (self.input_size, self.context_dim, self.target_base);
        [
            HookShape {
                context_channels: 2 * c,
                target_channels: 10 * t,
                height: r / 16,
                width: r / 16,
                out_channels: 10 * t,
            },
            HookShape {
                context_channels: c,
                target_channels: 8 * t,
                height: r / 8,
                width: r / 8,
                out_channels: 8 * t,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.hook.is_none() && self.supervision != Supervision::None {
            return Err(Error::Config("auxiliary supervision needs hooks".into()));
        }
        self.target_config().validate()?;
        if self.hook.is_some() {
            self.context_config()?.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum AuxHeads {
    None,
    Ds([Conv2d; 2]),
    Cds([Linear; 2]),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub context: Option<ContextBranch>,
    pub target: TargetBranch,
    pub hooks: Vec<Hook>,
    pub aux: AuxHeads,
}

/// Activations of one forward pass (all NCHW).
pub struct ForwardOut {
    pub target_logits: Var,
    pub context_logits: Option<Var>,
    /// Hook outputs as injected into the target decoder, depth 1 then 2.
    pub hook_out: Vec<Var>,
    pub target_taps: [Var; 2],
    pub context_hooks: Option<[Var; 2]>,
    pub context_trace: ShapeTrace,
    pub target_trace: ShapeTrace,
}

/// Scalar loss plus its unweighted addends.
pub struct LossOut {
    pub total: Var,
    pub target: Var,
    pub context: Option<Var>,
    pub aux: Option<Var>,
    /// Contrastive supervision found no anchor with a positive.
    pub nce_degenerate: bool,
}

impl Model {
    /// Builds the model and its parameters, initialized from `seed`.
    pub fn new<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let model = Self::build(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn build<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let context = match cfg.hook {
            Some(_) => Some(ContextBranch::new(store, rng, cfg.context_config()?)?),
            None => None,
        };
        let target = TargetBranch::new(store, rng, cfg.target_config())?;
        let shapes = cfg.hook_shapes();
        let hooks = match cfg.hook {
            Some(kind) => (0..2)
                .map(|d| Hook::new(store, rng, kind, &format!("hooks.{d}"), shapes[d]))
                .collect(),
            None => Vec::new(),
        };
        let aux = match cfg.supervision {
            Supervision::None => AuxHeads::None,
            Supervision::Ds => AuxHeads::Ds([0, 1].map(|d| {
                Conv2d::new(store, rng, &format!("aux.ds.{d}"), shapes[d].out_channels, cfg.num_classes, 1, 1, 0, true)
            })),
            Supervision::Cds => AuxHeads::Cds([0, 1].map(|d| {
                Linear::new(store, rng, &format!("aux.cds.{d}"), shapes[d].out_channels, EMBED_DIM, true)
            })),
        };
        Ok(Self {
            cfg,
            context,
            target,
            hooks,
            aux,
        })
    }

    /// `context_img` and `target_img` are `[N, 3, r, r]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, context_img: Var, target_img: Var) -> Result<ForwardOut> {
        let mut context_trace = ShapeTrace::new();
        let mut target_trace = ShapeTrace::new();
        let Some(context) = &self.context else {
            let TargetOut { logits, taps } = self.target.forward(ctx, target_img, None, &mut target_trace)?;
            return Ok(ForwardOut {
                target_logits: logits,
                context_logits: None,
                hook_out: Vec::new(),
                target_taps: taps,
                context_hooks: None,
                context_trace,
                target_trace,
            });
        };
        let cout = context.forward(ctx, context_img, &mut context_trace)?;
        let mut hook_out = Vec::with_capacity(2);
        let hooks = &self.hooks;
        let fc = cout.hooks;
        let out = {
            let mut inject = |ctx: &mut Ctx<'_, T>, depth: usize, tap: Var| -> Result<Var> {
                let y = hooks[depth].forward(ctx, fc[depth], tap)?;
                hook_out.push(y);
                Ok(y)
            };
            self.target.forward(ctx, target_img, Some(&mut inject), &mut target_trace)?
        };
        Ok(ForwardOut {
            target_logits: out.logits,
            context_logits: Some(cout.logits),
            hook_out,
            target_taps: out.taps,
            context_hooks: Some(fc),
            context_trace,
            target_trace,
        })
    }

    /// `λ1·(CE+Dice)(p_t, y_t) + λ2·(CE+Dice)(p_c, y_c) + λ3·aux`.
    pub fn loss<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        out: &ForwardOut,
        y_t: &[u8],
        y_c: &[u8],
        w: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossOut> {
        w.validate()?;
        let lt = ctx.g.ce_dice(out.target_logits, Rc::new(y_t.to_vec()))?;
        let mut terms = alloc::vec![(lt, T::from_f64_lossy(w.lambda1))];
        let context = match out.context_logits {
            Some(pc) => {
                let lc = ctx.g.ce_dice(pc, Rc::new(y_c.to_vec()))?;
                terms.push((lc, T::from_f64_lossy(w.lambda2)));
                Some(lc)
            }
            None => None,
        };
        let mut nce_degenerate = false;
        let aux = match &self.aux {
            AuxHeads::None => None,
            AuxHeads::Ds(heads) => Some(ds_loss(ctx, &out.hook_out, heads, y_t, self.cfg.input_size)?),
            AuxHeads::Cds(proj) => {
                let (l, degenerate) = cds_loss(ctx, &out.hook_out, proj, y_t, self.cfg.input_size, w, rng)?;
                nce_degenerate = degenerate;
                Some(l)
            }
        };
        if let Some(a) = aux {
            terms.push((a, T::from_f64_lossy(w.lambda3)));
        }
        let total = ctx.g.weighted_sum(&terms)?;
        Ok(LossOut {
            total,
            target: lt,
            context,
            aux,
            nce_degenerate,
        })
    }

    /// Inference-mode target logits for a batch of image pairs.
    pub fn predict_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        context_img: Tensor<T>,
        target_img: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, store, false);
        let c = ctx.g.constant(context_img);
        let t = ctx.g.constant(target_img);
        let out = self.forward(&mut ctx, c, t)?;
        Ok(g.value(out.target_logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, r: usize) -> (Tensor<f32>, Vec<u8>) {
        let img = Tensor::from_fn(&[n, 3, r, r], |i| ((i * 7919) % 255) as f32 / 255.0 - 0.5);
        let lab = (0..n * r * r).map(|i| ((i % r) * 4 / r) as u8).collect();
        (img, lab)
    }

    #[test]
    fn tiny_model_traces_and_backprops() {
        let cfg = ModelConfig::tiny();
        let (model, store) = Model::new::<f32>(cfg.clone(), 3).unwrap();
        let (img, lab) = batch(2, cfg.input_size);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, true);
        let c = ctx.g.constant(img.clone());
        let t = ctx.g.constant(img);
        let out = model.forward(&mut ctx, c, t).unwrap();
        assert_eq!(out.context_trace.len(), 8);
        assert_eq!(out.target_trace.len(), 10);
        assert_eq!(out.hook_out.len(), 2);
        assert_eq!(ctx.g.shape(out.target_logits), [2, 4, 112, 112]);
        let mut rng = rng_from_seed(0);
        let loss = model.loss(&mut ctx, &out, &lab, &lab, &LossWeights::default(), &mut rng).unwrap();
        assert!(!loss.nce_degenerate);
        let vars = ctx.vars().to_vec();
        let total = loss.total;
        g.backward(total);
        assert!(g.value(total).data()[0].is_finite());
        let proj = store.find("aux.cds.0.weight").unwrap();
        assert!(g.grad(vars[proj.0]).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn baseline_rejects_auxiliary_supervision() {
        let mut cfg = ModelConfig::tiny();
        cfg.hook = None;
        assert!(Model::new::<f32>(cfg.clone(), 0).is_err());
        cfg.supervision = Supervision::None;
        let (m, _) = Model::new::<f32>(cfg, 0).unwrap();
        assert!(m.context.is_none());
    }
}
