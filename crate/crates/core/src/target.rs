//! Convolutional U-shaped target branch.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::context::ShapeTrace;
use crate::error::{Error, Result};
use crate::nn::{kaiming, BatchNorm2d, Conv2d, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Encoder width multipliers of the base channel count.
pub const ENCODER_MULT: [usize; 5] = [1, 2, 4, 8, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct TargetConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Width of the first block (`C'`).
    pub base: usize,
    pub num_classes: usize,
}

impl TargetConfig {
    pub fn new(input_size: usize, base: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            base,
            num_classes: 4,
        }
    }

    pub fn channels(&self) -> [usize; 5] {
        ENCODER_MULT.map(|m| m * self.base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 16 != 0 || self.base == 0 {
            return Err(Error::Config(format!(
                "target input {} must be divisible by 16 with a nonzero base width",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// 3×3 convolution (no bias) → BatchNorm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvUnit {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
            relu: true,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.g.relu(y) } else { y })
    }
}

/// Two conv units.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub units: [ConvUnit; 2],
}

impl ConvBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            units: [
                ConvUnit::new(store, rng, &format!("{name}.0"), cin, cout),
                ConvUnit::new(store, rng, &format!("{name}.1"), cout, cout),
            ],
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.units[0].forward(ctx, x)?;
        self.units[1].forward(ctx, y)
    }
}

/// 2×2 stride-2 transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), kaiming(rng, &[cin, cout, 2, 2], cin), ParamKind::Weight),
            b: store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::NoDecay),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), ctx.var(self.b));
        ctx.g.conv_transpose2x2(x, w, Some(b))
    }
}

/// Feature taps exposed to the hooks: block 5 (`[N, 10C', r/16, r/16]`) and
/// block 6 (`[N, 8C', r/8, r/8]`).
pub struct TargetOut {
    pub logits: Var,
    pub taps: [Var; 2],
}

/// Replaces the input of decoder block 6 (`depth = 0`) or 7 (`depth = 1`)
/// given the tap that would otherwise feed it.
pub type HookFn<'f, 'a, T> = dyn FnMut(&mut Ctx<'a, T>, usize, Var) -> Result<Var> + 'f;

#[derive(Clone, Debug)]
pub struct TargetBranch {
    pub cfg: TargetConfig,
    pub encoder: Vec<ConvBlock>,
    pub up: Vec<Deconv>,
    pub decoder: Vec<ConvBlock>,
    pub head: Conv2d,
}

impl TargetBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: TargetConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let mut encoder = Vec::new();
        let mut cin = cfg.in_channels;
        for (k, &c) in ch.iter().enumerate() {
            encoder.push(ConvBlock::new(store, rng, &format!("target.block{}", k + 1), cin, c));
            cin = c;
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for k in 0..4 {
            let skip = ch[3 - k];
            up.push(Deconv::new(store, rng, &format!("target.block{}.up", k + 6), cin, skip));
            decoder.push(ConvBlock::new(store, rng, &format!("target.block{}", k + 6), 2 * skip, skip));
            cin = skip;
        }
        let head = Conv2d::new(store, rng, "target.head", ch[0], cfg.num_classes, 1, 1, 0, true);
        Ok(Self {
            cfg,
            encoder,
            up,
            decoder,
            head,
        })
    }

    /// `image` is `[N, 3, r, r]`. `hook`, when given, maps the block-5 tap to
    /// the block-6 input and the block-6 tap to the block-7 input.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &mut Ctx<'a, T>,
        image: Var,
        mut hook: Option<&mut HookFn<'_, 'a, T>>,
        trace: &mut ShapeTrace,
    ) -> Result<TargetOut> {
        let s = ctx.g.shape(image).to_vec();
        let r = self.cfg.input_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!(
                "target branch expects [N, {}, {r}, {r}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let shape = |ctx: &Ctx<'a, T>, v: Var| {
            let s = ctx.g.shape(v);
            [s[2], s[3], s[1]]
        };
        let mut skips = Vec::with_capacity(4);
        let mut x = image;
        for (k, block) in self.encoder.iter().enumerate() {
            if k > 0 {
                x = ctx.g.max_pool2x2(x)?;
            }
            x = block.forward(ctx, x)?;
            trace.push((format!("Convolution Block {}", k + 1), shape(ctx, x)));
            if k < 4 {
                skips.push(x);
            }
        }
        let enc5 = x;
        let mut dec6 = x;
        for k in 0..4 {
            if k < 2 {
                if let Some(h) = hook.as_mut() {
                    let want = ctx.g.shape(x).to_vec();
                    x = h(ctx, k, x)?;
                    if ctx.g.shape(x) != want.as_slice() {
                        return Err(Error::Shape(format!(
                            "hook {} returned {:?}, block {} expects {want:?}",
                            k + 1,
                            ctx.g.shape(x),
                            k + 6
                        )));
                    }
                }
            }
            x = self.up[k].forward(ctx, x)?;
            x = ctx.g.concat(&[x, skips[3 - k]], 1)?;
            x = self.decoder[k].forward(ctx, x)?;
            trace.push((format!("Convolution Block {}", k + 6), shape(ctx, x)));
            if k == 0 {
                dec6 = x;
            }
        }
        let logits = self.head.forward(ctx, x)?;
        trace.push(("Prediction Head".into(), shape(ctx, logits)));
        Ok(TargetOut {
            logits,
            taps: [enc5, dec6],
        })
    }
}
