//! Feature fusion modules joining the context branch to the target branch.
//!
//! Every hook takes a context map `F_c` (twice the spatial size of the target
//! map), center-crops it, concatenates it with the target map `F_t` along
//! channels into `M` (`C''` channels), refines `M`, and projects it with a
//! bias-free 1×1 convolution to the width the target decoder expects.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Reduce, Var};
use crate::error::{Error, Result};
use crate::nn::{center_crop_half, kaiming, Conv2d, Ctx, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HookType {
    Esca,
    Sa,
    Senet,
    Cbam,
}

impl HookType {
    pub const ALL: [HookType; 4] = [HookType::Esca, HookType::Sa, HookType::Senet, HookType::Cbam];

    pub fn name(self) -> &'static str {
        match self {
            HookType::Esca => "esca",
            HookType::Sa => "sa",
            HookType::Senet => "senet",
            HookType::Cbam => "cbam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }
}

/// Geometry of one hook: channel counts and the target map's spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HookShape {
    pub context_channels: usize,
    pub target_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
}

impl HookShape {
    pub fn merged(&self) -> usize {
        self.context_channels + self.target_channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// `M = concat(CenterCrop(F_c), F_t)` along channels (NCHW).
pub fn concat_hook<T: Scalar>(g: &mut Graph<T>, f_c: Var, f_t: Var) -> Result<Var> {
    let (cs, ts) = (g.shape(f_c).to_vec(), g.shape(f_t).to_vec());
    if cs.len() != 4 || ts.len() != 4 || cs[0] != ts[0] || cs[2] != 2 * ts[2] || cs[3] != 2 * ts[3] {
        return Err(Error::Shape(format!(
            "context map {cs:?} must be twice the spatial size of target map {ts:?}"
        )));
    }
    let crop = center_crop_half(g, f_c)?;
    g.concat(&[crop, f_t], 1)
}

/// Bias-free 1×1 projection stored as a `[out, in, 1, 1]` kernel.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), kaiming(rng, &[cout, cin, 1, 1], cin), ParamKind::Weight),
            cin,
            cout,
        }
    }

    /// Applies the projection to `[N, L, C]` rows, returning `[N, L, out]`.
    pub fn forward_rows<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.w);
        let w = ctx.g.reshape(w, &[self.cout, self.cin])?;
        ctx.g.linear(x, w, None)
    }

    /// Applies the projection to an NCHW map.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.w);
        ctx.g.conv2d(x, w, None, 1, 0)
    }
}

/// Per-channel spatial self-attention with a learnable skip weight θ, a
/// softmax channel gate `U'` and a 1×1 fusion.
#[derive(Clone, Debug)]
pub struct Esca {
    pub shape: HookShape,
    pub theta: ParamId,
    pub dw: [(ParamId, ParamId); 3],
    pub u: ParamId,
    pub fuse: Pointwise,
}

/// Intermediate values of an ESCA pass, for inspection.
pub struct EscaTrace {
    pub m: Var,
    /// `SelfAttention(q, k, v)` before the skip connection, `[N, C'', L]`.
    pub attention: Var,
    pub s: Var,
    /// Softmax-normalized gate `U'`, `[L, C'']`.
    pub gate: Var,
    /// Gated features `A`, `[N, L, C'']`.
    pub a: Var,
    pub out: Var,
}

impl Esca {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: HookShape) -> Self {
        let c = shape.merged();
        let theta = store.add(&format!("{name}.theta"), Tensor::zeros(&[1]), ParamKind::NoDecay);
        let dw = ["q", "k", "v"].map(|which| {
            (
                store.add(&format!("{name}.dw_{which}.weight"), kaiming(rng, &[c, 1, 3, 3], 9), ParamKind::Weight),
                store.add(&format!("{name}.dw_{which}.bias"), Tensor::zeros(&[c]), ParamKind::NoDecay),
            )
        });
        let u = store.add(&format!("{name}.u"), Tensor::zeros(&[shape.positions(), c]), ParamKind::NoDecay);
        let fuse = Pointwise::new(store, rng, &format!("{name}.fuse"), c, shape.out_channels);
        Self { shape, theta, dw, u, fuse }
    }

    /// `S = M + θ·SelfAttention(q, k, v)` with per-channel attention over the
    /// spatial positions; returns `(S, attention)` as `[N, C'', L]`.
    pub fn spatial_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, m: Var) -> Result<(Var, Var)> {
        let s = ctx.g.shape(m).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let mut qkv = [m; 3];
        for (i, (w, b)) in self.dw.iter().enumerate() {
            let (w, b) = (ctx.var(*w), ctx.var(*b));
            let y = ctx.g.depthwise3x3(m, w, b)?;
            qkv[i] = ctx.g.reshape(y, &[n, c, l])?;
        }
        let scale = T::one() / T::from_usize_lossy(c).sqrt();
        let att = ctx.g.scalar_attention(qkv[0], qkv[1], qkv[2], scale)?;
        let theta = ctx.var(self.theta);
        let theta = ctx.g.reshape(theta, &[1, 1, 1])?;
        let scaled = ctx.g.mul_bcast(att, theta)?;
        let flat = ctx.g.reshape(m, &[n, c, l])?;
        let out = ctx.g.add(flat, scaled)?;
        Ok((out, att))
    }

    /// `U' = softmax_channels(U)`, `A = U' ⊙ Reshape(S)` with `S` given as
    /// `[N, C'', L]`; returns `(A as [N, L, C''], U')`.
    pub fn channel_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, s: Var) -> Result<(Var, Var)> {
        let u = ctx.var(self.u);
        let gate = ctx.g.softmax_last(u);
        let rows = ctx.g.permute(s, &[0, 2, 1])?;
        let (l, c) = (self.shape.positions(), self.shape.merged());
        let g3 = ctx.g.reshape(gate, &[1, l, c])?;
        let a = ctx.g.mul_bcast(rows, g3)?;
        Ok((a, gate))
    }

    /// Reshapes `A` (`[N, L, C'']`) back to a map and applies the 1×1 fusion.
    pub fn fuse<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, a: Var) -> Result<Var> {
        let n = ctx.g.shape(a)[0];
        let y = self.fuse.forward_rows(ctx, a)?;
        let y = ctx.g.permute(y, &[0, 2, 1])?;
        ctx.g.reshape(y, &[n, self.shape.out_channels, self.shape.height, self.shape.width])
    }

    pub fn forward_traced<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_c: Var, f_t: Var) -> Result<EscaTrace> {
        let m = concat_hook(ctx.g, f_c, f_t)?;
        check_merged(ctx.g, m, &self.shape)?;
        let (s, attention) = self.spatial_attention(ctx, m)?;
        let (a, gate) = self.channel_attention(ctx, s)?;
        let out = self.fuse(ctx, a)?;
        Ok(EscaTrace {
            m,
            attention,
            s,
            gate,
            a,
            out,
        })
    }
}

fn check_merged<T: Scalar>(g: &Graph<T>, m: Var, shape: &HookShape) -> Result<()> {
    let s = g.shape(m);
    if s[1] != shape.merged() || s[2] != shape.height || s[3] != shape.width {
        return Err(Error::Shape(format!(
            "hook built for {}×{}×{}, got merged map {s:?}",
            shape.height,
            shape.width,
            shape.merged()
        )));
    }
    Ok(())
}

/// Single spatial self-attention over all positions of `M` (queries/keys
/// reduced to `C''/8` channels) with a zero-initialized residual weight.
#[derive(Clone, Debug)]
pub struct SaHook {
    pub shape: HookShape,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub gamma: ParamId,
    pub fuse: Pointwise,
}

impl SaHook {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: HookShape) -> Self {
        let c = shape.merged();
        let dk = (c / 8).max(1);
        Self {
            shape,
            q: Conv2d::new(store, rng, &format!("{name}.query"), c, dk, 1, 1, 0, true),
            k: Conv2d::new(store, rng, &format!("{name}.key"), c, dk, 1, 1, 0, true),
            v: Conv2d::new(store, rng, &format!("{name}.value"), c, c, 1, 1, 0, true),
            gamma: store.add(&format!("{name}.gamma"), Tensor::zeros(&[1]), ParamKind::NoDecay),
            fuse: Pointwise::new(store, rng, &format!("{name}.fuse"), c, shape.out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_c: Var, f_t: Var) -> Result<Var> {
        let m = concat_hook(ctx.g, f_c, f_t)?;
        check_merged(ctx.g, m, &self.shape)?;
        let s = ctx.g.shape(m).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let rows = |ctx: &mut Ctx<'_, T>, conv: &Conv2d| -> Result<Var> {
            let y = conv.forward(ctx, m)?;
            let ch = ctx.g.shape(y)[1];
            let y = ctx.g.reshape(y, &[n, ch, l])?;
            ctx.g.permute(y, &[0, 2, 1])
        };
        let (q, k, v) = (rows(ctx, &self.q)?, rows(ctx, &self.k)?, rows(ctx, &self.v)?);
        let dk = ctx.g.shape(q)[2];
        let scale = T::one() / T::from_usize_lossy(dk).sqrt();
        let att = ctx.g.attention(q, k, v, None, None, scale)?;
        let gamma = ctx.var(self.gamma);
        let gamma = ctx.g.reshape(gamma, &[1, 1, 1])?;
        let att = ctx.g.mul_bcast(att, gamma)?;
        let mrows = ctx.g.reshape(m, &[n, c, l])?;
        let mrows = ctx.g.permute(mrows, &[0, 2, 1])?;
        let y = ctx.g.add(mrows, att)?;
        let y = self.fuse.forward_rows(ctx, y)?;
        let y = ctx.g.permute(y, &[0, 2, 1])?;
        ctx.g.reshape(y, &[n, self.shape.out_channels, s[2], s[3]])
    }
}

/// Squeeze (global average pool) and excitation (two-layer gate) per channel.
#[derive(Clone, Debug)]
pub struct SenetHook {
    pub shape: HookShape,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fuse: Pointwise,
}

/// Channel reduction ratio of the SE and CBAM gates.
pub const GATE_REDUCTION: usize = 16;

impl SenetHook {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: HookShape) -> Self {
        let c = shape.merged();
        let hidden = (c / GATE_REDUCTION).max(1);
        Self {
            shape,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), c, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, c, true),
            fuse: Pointwise::new(store, rng, &format!("{name}.fuse"), c, shape.out_channels),
        }
    }

    /// Returns `(output, gate [N, C'', 1, 1])`.
    pub fn forward_gated<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_c: Var, f_t: Var) -> Result<(Var, Var)> {
        let m = concat_hook(ctx.g, f_c, f_t)?;
        check_merged(ctx.g, m, &self.shape)?;
        let s = ctx.g.shape(m).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let flat = ctx.g.reshape(m, &[n, c, l])?;
        let z = ctx.g.reduce_axis(flat, 2, Reduce::Mean)?;
        let z = ctx.g.reshape(z, &[n, c])?;
        let h = self.fc1.forward(ctx, z)?;
        let h = ctx.g.relu(h);
        let e = self.fc2.forward(ctx, h)?;
        let gate = ctx.g.sigmoid(e);
        let gate = ctx.g.reshape(gate, &[n, c, 1, 1])?;
        let y = ctx.g.mul_bcast(m, gate)?;
        Ok((self.fuse.forward(ctx, y)?, gate))
    }
}

/// Channel gate from average- and max-pooled descriptors through a shared
/// MLP, then a spatial gate from a 7×7 convolution over the channel-wise mean
/// and max maps.
#[derive(Clone, Debug)]
pub struct CbamHook {
    pub shape: HookShape,
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
    pub fuse: Pointwise,
}

impl CbamHook {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: HookShape) -> Self {
        let c = shape.merged();
        let hidden = (c / GATE_REDUCTION).max(1);
        Self {
            shape,
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), c, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, c, true),
            spatial: Conv2d::new(store, rng, &format!("{name}.spatial"), 2, 1, 7, 1, 3, false),
            fuse: Pointwise::new(store, rng, &format!("{name}.fuse"), c, shape.out_channels),
        }
    }

    /// Spatial gate `sigmoid(conv7×7([mean_c x, max_c x]))`, `[N, 1, H, W]`.
    pub fn spatial_gate<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let avg = ctx.g.reduce_axis(x, 1, Reduce::Mean)?;
        let max = ctx.g.reduce_axis(x, 1, Reduce::Max)?;
        let both = ctx.g.concat(&[avg, max], 1)?;
        let y = self.spatial.forward(ctx, both)?;
        Ok(ctx.g.sigmoid(y))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_c: Var, f_t: Var) -> Result<Var> {
        let m = concat_hook(ctx.g, f_c, f_t)?;
        check_merged(ctx.g, m, &self.shape)?;
        let s = ctx.g.shape(m).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let flat = ctx.g.reshape(m, &[n, c, l])?;
        let mut pooled = Vec::with_capacity(2);
        for kind in [Reduce::Mean, Reduce::Max] {
            let z = ctx.g.reduce_axis(flat, 2, kind)?;
            let z = ctx.g.reshape(z, &[n, c])?;
            let h = self.fc1.forward(ctx, z)?;
            let h = ctx.g.relu(h);
            pooled.push(self.fc2.forward(ctx, h)?);
        }
        let e = ctx.g.add(pooled[0], pooled[1])?;
        let gate = ctx.g.sigmoid(e);
        let gate = ctx.g.reshape(gate, &[n, c, 1, 1])?;
        let x = ctx.g.mul_bcast(m, gate)?;
        let sg = self.spatial_gate(ctx, x)?;
        let x = ctx.g.mul_bcast(x, sg)?;
        self.fuse.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub enum Hook {
    Esca(Esca),
    Sa(SaHook),
    Senet(SenetHook),
    Cbam(CbamHook),
}

impl Hook {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        kind: HookType,
        name: &str,
        shape: HookShape,
    ) -> Self {
        match kind {
            HookType::Esca => Hook::Esca(Esca::new(store, rng, name, shape)),
            HookType::Sa => Hook::Sa(SaHook::new(store, rng, name, shape)),
            HookType::Senet => Hook::Senet(SenetHook::new(store, rng, name, shape)),
            HookType::Cbam => Hook::Cbam(CbamHook::new(store, rng, name, shape)),
        }
    }

    pub fn kind(&self) -> HookType {
        match self {
            Hook::Esca(_) => HookType::Esca,
            Hook::Sa(_) => HookType::Sa,
            Hook::Senet(_) => HookType::Senet,
            Hook::Cbam(_) => HookType::Cbam,
        }
    }

    pub fn shape(&self) -> HookShape {
        match self {
            Hook::Esca(h) => h.shape,
            Hook::Sa(h) => h.shape,
            Hook::Senet(h) => h.shape,
            Hook::Cbam(h) => h.shape,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_c: Var, f_t: Var) -> Result<Var> {
        match self {
            Hook::Esca(h) => Ok(h.forward_traced(ctx, f_c, f_t)?.out),
            Hook::Sa(h) => h.forward(ctx, f_c, f_t),
            Hook::Senet(h) => Ok(h.forward_gated(ctx, f_c, f_t)?.0),
            Hook::Cbam(h) => h.forward(ctx, f_c, f_t),
        }
    }
}
