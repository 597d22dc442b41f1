//! Windowed-attention U-shaped context branch.
//!
//! Tokens flow as NHWC tensors `[N, H, W, C]`; the branch input and outputs
//! are NCHW like the rest of the model.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{to_nchw, to_nhwc, Conv2d, Ctx, LayerNorm, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Layout of the context branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub window: usize,
    /// Channels after patch embedding (`C`).
    pub dim: usize,
    /// Blocks per encoder stage; the decoder mirrors them.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl ContextConfig {
    /// Four stages of two blocks with 3/6/12/24 heads.
    pub fn new(input_size: usize, dim: usize, window: usize) -> Self {
        Self::with_stages(input_size, dim, window, 4)
    }

    pub fn with_stages(input_size: usize, dim: usize, window: usize, stages: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            patch_size: 4,
            window,
            dim,
            depths: vec![2; stages],
            heads: (0..stages).map(|i| 3 << i).collect(),
            num_classes: 4,
            mlp_ratio: 4,
        }
    }

    /// The deepest schedule (at most four stages) whose token grids all stay
    /// integral and divisible by the window.
    pub fn fitted(input_size: usize, dim: usize, window: usize) -> Result<Self> {
        let mut stages = 0;
        if input_size % 4 == 0 {
            let mut grid = input_size / 4;
            while stages < 4 && grid > 0 && grid % window == 0 {
                stages += 1;
                if grid % 2 != 0 {
                    break;
                }
                grid /= 2;
            }
        }
        if stages < 2 {
            return Err(Error::Config(format!(
                "input {input_size} with window {window} allows fewer than two attention stages"
            )));
        }
        Ok(Self::with_stages(input_size, dim, window, stages))
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn grid(&self, stage: usize) -> usize {
        self.input_size / self.patch_size >> stage
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s < 2 || self.heads.len() != s {
            return Err(Error::Config("context branch needs ≥2 stages with one head count each".into()));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {} not divisible by patch {}",
                self.input_size, self.patch_size
            )));
        }
        for st in 0..s {
            let grid = (self.input_size / self.patch_size) as f64 / (1u64 << st) as f64;
            let g = self.grid(st);
            if grid != g as f64 || g % self.window != 0 {
                return Err(Error::Config(format!(
                    "stage {} grid {grid} not divisible by window {}",
                    st + 1,
                    self.window
                )));
            }
            let d = self.dim << st;
            if self.depths[st] % 2 != 0 || d % self.heads[st] != 0 {
                return Err(Error::Config(format!(
                    "stage {}: depth {} must be even and dim {d} divisible by {} heads",
                    st + 1,
                    self.depths[st],
                    self.heads[st]
                )));
            }
        }
        Ok(())
    }
}

/// Records `(row label, [H, W, C])` as the forward pass proceeds.
pub type ShapeTrace = Vec<(String, [usize; 3])>;

fn nhwc_shape<T: Scalar>(g: &Graph<T>, x: Var) -> [usize; 3] {
    let s = g.shape(x);
    [s[1], s[2], s[3]]
}

/// Relative-position index for an `n×n` window, flattened `[T, T]`.
pub fn relative_position_index(n: usize) -> Vec<usize> {
    let t = n * n;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dy = (a / n) as isize - (b / n) as isize + n as isize - 1;
            let dx = (a % n) as isize - (b % n) as isize + n as isize - 1;
            idx.push(dy as usize * (2 * n - 1) + dx as usize);
        }
    }
    idx
}

/// Attention mask of the shifted pass on an `h×w` grid, `[nW, T, T]` with
/// `true` marking pairs that come from different regions before the shift.
pub fn shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<bool> {
    let region = |i: usize, len: usize| {
        if i < len - window {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    let mut mask = Vec::with_capacity(nh * nw * t * t);
    for wi in 0..nh {
        for wj in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|k| {
                    let (i, j) = (wi * window + k / window, wj * window + k % window);
                    region(i, h) * 3 + region(j, w)
                })
                .collect();
            for a in 0..t {
                for b in 0..t {
                    mask.push(labels[a] != labels[b]);
                }
            }
        }
    }
    mask
}

/// Multi-head attention inside (shifted) windows.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub table: ParamId,
    pub heads: usize,
    pub window: usize,
    index: Rc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Self {
        let qkv = Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true);
        let table = store.add(
            &format!("{name}.relative_position_bias_table"),
            Tensor::zeros(&[(2 * window - 1) * (2 * window - 1), heads]),
            ParamKind::NoDecay,
        );
        let proj = Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true);
        let t = window * window;
        let rpi = relative_position_index(window);
        let mut index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            index.extend(rpi.iter().map(|&r| r * heads + h));
        }
        Self {
            qkv,
            proj,
            table,
            heads,
            window,
            index: Rc::new(index),
        }
    }

    /// `x` is `[B·nW, T, C]` window tokens; `mask` covers `nW` windows.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask: Option<AttnMask>) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (bw, t, c) = (s[0], s[1], s[2]);
        let (h, hd) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, x)?;
        let qkv = ctx.g.reshape(qkv, &[bw, t, 3, h, hd])?;
        let qkv = ctx.g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let v = ctx.g.narrow(qkv, 0, i, 1)?;
            *p = ctx.g.reshape(v, &[bw * h, t, hd])?;
        }
        let table = ctx.var(self.table);
        let bias = ctx.g.take(table, self.index.clone(), &[h, t, t])?;
        let scale = T::one() / T::from_usize_lossy(hd).sqrt();
        let o = ctx.g.attention(parts[0], parts[1], parts[2], Some(bias), mask, scale)?;
        let o = ctx.g.reshape(o, &[bw, h, t, hd])?;
        let o = ctx.g.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.g.reshape(o, &[bw, t, c])?;
        self.proj.forward(ctx, o)
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub window: usize,
    pub shift: usize,
    mask: Option<Rc<Vec<bool>>>,
    grid: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        grid: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: usize,
    ) -> Self {
        let (window, shift) = if grid <= window {
            (grid, 0)
        } else {
            (window, if shifted { window / 2 } else { 0 })
        };
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(store, rng, &format!("{name}.attn"), dim, heads, window);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let fc1 = Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, true);
        let mask = (shift > 0).then(|| Rc::new(shift_mask(grid, grid, window, shift)));
        Self {
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            window,
            shift,
            mask,
            grid,
        }
    }

    /// `x` is `[N, H, W, C]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h != self.grid || w != self.grid || h % self.window != 0 {
            return Err(Error::Shape(format!(
                "swin block built for {0}×{0} with window {1}, got {h}×{w}",
                self.grid, self.window
            )));
        }
        let win = self.window;
        let (nh, nw) = (h / win, w / win);
        let y = self.norm1.forward(ctx, x)?;
        let y = if self.shift > 0 {
            ctx.g.roll2d(y, -(self.shift as isize), -(self.shift as isize))?
        } else {
            y
        };
        let y = ctx.g.reshape(y, &[n, nh, win, nw, win, c])?;
        let y = ctx.g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = ctx.g.reshape(y, &[n * nh * nw, win * win, c])?;
        let mask = self.mask.as_ref().map(|m| AttnMask {
            mask: m.clone(),
            slabs: nh * nw,
            stride: self.attn.heads,
        });
        let y = self.attn.forward(ctx, y, mask)?;
        let y = ctx.g.reshape(y, &[n, nh, nw, win, win, c])?;
        let y = ctx.g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = ctx.g.reshape(y, &[n, h, w, c])?;
        let y = if self.shift > 0 {
            ctx.g.roll2d(y, self.shift as isize, self.shift as isize)?
        } else {
            y
        };
        let x = ctx.g.add(x, y)?;
        let y = self.norm2.forward(ctx, x)?;
        let y = self.fc1.forward(ctx, y)?;
        let y = ctx.g.gelu(y);
        let y = self.fc2.forward(ctx, y)?;
        ctx.g.add(x, y)
    }
}

/// 2×2 neighborhood concatenation, LayerNorm, then a linear map `4d → 2d`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("patch merging needs even grid, got {h}×{w}")));
        }
        // channel blocks ordered (row, col) parity = (0,0), (1,0), (0,1), (1,1)
        let y = ctx.g.reshape(x, &[n, h / 2, 2, w / 2, 2, c])?;
        let y = ctx.g.permute(y, &[0, 1, 3, 4, 2, 5])?;
        let y = ctx.g.reshape(y, &[n, h / 2, w / 2, 4 * c])?;
        let y = self.norm.forward(ctx, y)?;
        self.reduction.forward(ctx, y)
    }
}

/// Linear channel expansion followed by a pixel shuffle that grows the grid
/// by `scale` and a LayerNorm on the resulting channels.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub scale: usize,
    pub out_dim: usize,
}

impl PatchExpand {
    /// `scale = 2` maps `d → d/2` channels; `scale = 4` keeps `d`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize, scale: usize) -> Self {
        let (grow, out_dim) = if scale == 2 { (2 * dim, dim / 2) } else { (scale * scale * dim, dim) };
        Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), dim, grow, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_dim),
            scale,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (n, h, w) = (s[0], s[1], s[2]);
        let (p, c) = (self.scale, self.out_dim);
        let y = self.expand.forward(ctx, x)?;
        let y = ctx.g.reshape(y, &[n, h, w, p, p, c])?;
        let y = ctx.g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = ctx.g.reshape(y, &[n, h * p, w * p, c])?;
        self.norm.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let s = ctx.g.shape(image).to_vec();
        if s.len() != 4 || s[2] % self.patch != 0 || s[3] % self.patch != 0 {
            return Err(Error::Shape(format!(
                "patch embedding needs spatial size divisible by {}, got {s:?}",
                self.patch
            )));
        }
        let y = self.proj.forward(ctx, image)?;
        let y = to_nhwc(ctx.g, y)?;
        self.norm.forward(ctx, y)
    }
}

/// Output of the context branch: NCHW logits and the two hook feature maps
/// (`[N, 2C, r/8, r/8]` and `[N, C, r/4, r/4]`).
pub struct ContextOut {
    pub logits: Var,
    pub hooks: [Var; 2],
}

#[derive(Clone, Debug)]
pub struct ContextBranch {
    pub cfg: ContextConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerging>,
    pub norm: LayerNorm,
    pub up_first: PatchExpand,
    pub concat_back: Vec<Linear>,
    pub up_stages: Vec<Vec<SwinBlock>>,
    pub up_expand: Vec<PatchExpand>,
    pub norm_up: LayerNorm,
    pub final_expand: PatchExpand,
    pub projection: Linear,
}

impl ContextBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: ContextConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stages();
        let c = cfg.dim;
        let embed = PatchEmbed {
            proj: Conv2d::new(store, rng, "context.patch_embed.proj", cfg.in_channels, c, cfg.patch_size, cfg.patch_size, 0, true),
            norm: LayerNorm::new(store, "context.patch_embed.norm", c),
            patch: cfg.patch_size,
        };
        let blocks = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, st: usize| -> Vec<SwinBlock> {
            (0..cfg.depths[st])
                .map(|j| {
                    SwinBlock::new(
                        store,
                        rng,
                        &format!("{prefix}.blocks.{j}"),
                        c << st,
                        cfg.heads[st],
                        cfg.grid(st),
                        cfg.window,
                        j % 2 == 1,
                        cfg.mlp_ratio,
                    )
                })
                .collect()
        };
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for st in 0..s {
            stages.push(blocks(store, rng, &format!("context.layers.{st}"), st));
            if st + 1 < s {
                merges.push(PatchMerging::new(store, rng, &format!("context.layers.{st}.downsample"), c << st));
            }
        }
        let norm = LayerNorm::new(store, "context.norm", c << (s - 1));
        let up_first = PatchExpand::new(store, rng, "context.layers_up.0", c << (s - 1), 2);
        let mut concat_back = Vec::new();
        let mut up_stages = Vec::new();
        let mut up_expand = Vec::new();
        for i in 1..s {
            let st = s - 1 - i;
            let d = c << st;
            concat_back.push(Linear::new(store, rng, &format!("context.concat_back_dim.{i}"), 2 * d, d, true));
            up_stages.push(blocks(store, rng, &format!("context.layers_up.{i}"), st));
            if i + 1 < s {
                up_expand.push(PatchExpand::new(store, rng, &format!("context.layers_up.{i}.upsample"), d, 2));
            }
        }
        let norm_up = LayerNorm::new(store, "context.norm_up", c);
        let final_expand = PatchExpand::new(store, rng, "context.up", c, 4);
        let projection = Linear::new(store, rng, "context.output", c, cfg.num_classes, false);
        Ok(Self {
            cfg,
            embed,
            stages,
            merges,
            norm,
            up_first,
            concat_back,
            up_stages,
            up_expand,
            norm_up,
            final_expand,
            projection,
        })
    }

    /// `image` is `[N, 3, r, r]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, trace: &mut ShapeTrace) -> Result<ContextOut> {
        let s = ctx.g.shape(image).to_vec();
        let r = self.cfg.input_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!(
                "context branch expects [N, {}, {r}, {r}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let stages = self.cfg.stages();
        let mut x = self.embed.forward(ctx, image)?;
        trace.push(("Patch Embedding".into(), nhwc_shape(ctx.g, x)));
        let mut skips = Vec::with_capacity(stages);
        for st in 0..stages {
            if st > 0 {
                x = self.merges[st - 1].forward(ctx, x)?;
            }
            skips.push(x);
            for b in &self.stages[st] {
                x = b.forward(ctx, x)?;
            }
            if st + 1 == stages {
                x = self.norm.forward(ctx, x)?;
            }
            trace.push((format!("Stage {}", st + 1), nhwc_shape(ctx.g, x)));
        }
        let mut taps = vec![x];
        x = self.up_first.forward(ctx, x)?;
        for i in 1..stages {
            let skip = skips[stages - 1 - i];
            x = ctx.g.concat(&[x, skip], 3)?;
            x = self.concat_back[i - 1].forward(ctx, x)?;
            for b in &self.up_stages[i - 1] {
                x = b.forward(ctx, x)?;
            }
            trace.push((format!("Stage {}", stages + i), nhwc_shape(ctx.g, x)));
            taps.push(x);
            if i + 1 < stages {
                x = self.up_expand[i - 1].forward(ctx, x)?;
            }
        }
        let x = self.norm_up.forward(ctx, x)?;
        let x = self.final_expand.forward(ctx, x)?;
        trace.push(("Patch Expanding".into(), nhwc_shape(ctx.g, x)));
        let x = self.projection.forward(ctx, x)?;
        trace.push(("Patch Projection".into(), nhwc_shape(ctx.g, x)));
        let logits = to_nchw(ctx.g, x)?;
        let n = taps.len();
        let h1 = to_nchw(ctx.g, taps[n - 2])?;
        let h2 = to_nchw(ctx.g, taps[n - 1])?;
        Ok(ContextOut {
            logits,
            hooks: [h1, h2],
        })
    }
}
