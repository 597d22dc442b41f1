//! Dense, convolutional, pooling, resampling and normalization ops.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{BackArgs, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Reduction used by [`Graph::reduce_axis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// Batch statistics produced by a training-mode batch norm, for the caller to
/// fold into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `y = x·wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::Shape(format!("linear: input {xs:?} weight {ws:?}")));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape(format!("linear bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let m = self.value(x).len() / din.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = dout;
        let mut out = Tensor::zeros(&out_shape);
        gemm(
            Trans::No,
            Trans::Yes,
            m,
            dout,
            din,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.data_mut().chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            &inputs,
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (xv, wv) = (args.inputs[0], args.inputs[1]);
                let gx = args.needs[0].then(|| {
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm(Trans::No, Trans::No, m, din, dout, T::one(), g, wv.data(), T::zero(), gx.data_mut());
                    gx
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm(Trans::Yes, Trans::No, dout, din, m, T::one(), g, xv.data(), T::zero(), gw.data_mut());
                    gw
                });
                let mut grads = vec![gx, gw];
                if args.inputs.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        let mut gb = Tensor::zeros(&[dout]);
                        let bd = gb.data_mut();
                        for row in g.chunks(dout) {
                            for (acc, &v) in bd.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// 2-D convolution on NCHW input with a square `[O, I, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Shape(format!("conv2d: input {xs:?} weight {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d: kernel {k} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let hw = ho * wo;
        let ckk = c * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let od = out.data_mut();
            let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw] };
            for bi in 0..n {
                let xi = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
                let src: &[T] = if pointwise {
                    xi
                } else {
                    im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(Trans::No, Trans::No, o, hw, ckk, T::one(), wdat, src, T::zero(), &mut od[bi * o * hw..(bi + 1) * o * hw]);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (idx, chunk) in od.chunks_mut(hw).enumerate() {
                    let bb = bd[idx % o];
                    chunk.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            &inputs,
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (xv, wv) = (args.inputs[0], args.inputs[1]);
                let mut gx = args.needs[0].then(|| Tensor::zeros(xv.shape()));
                let mut gw = args.needs[1].then(|| Tensor::zeros(wv.shape()));
                let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw] };
                let mut gcols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw] };
                for bi in 0..n {
                    let xi = &xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
                    let gi = &g[bi * o * hw..(bi + 1) * o * hw];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[T] = if pointwise {
                            xi
                        } else {
                            im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                            &cols
                        };
                        gemm(Trans::No, Trans::Yes, o, ckk, hw, T::one(), gi, src, T::one(), gw.data_mut());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxi = &mut gx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd];
                        if pointwise {
                            gemm(Trans::Yes, Trans::No, ckk, hw, o, T::one(), wv.data(), gi, T::zero(), gxi);
                        } else {
                            gemm(Trans::Yes, Trans::No, ckk, hw, o, T::one(), wv.data(), gi, T::zero(), &mut gcols);
                            col2im(&gcols, c, h, wd, k, stride, pad, ho, wo, gxi);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if args.inputs.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        let mut gb = Tensor::zeros(&[o]);
                        let bd = gb.data_mut();
                        for (idx, chunk) in g.chunks(hw).enumerate() {
                            bd[idx % o] += chunk.iter().copied().sum::<T>();
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// Depth-wise 3×3 convolution (padding 1) with per-channel bias;
    /// `w` is `[C, 1, 3, 3]`, `b` is `[C]`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(w) != [xs[1], 1, 3, 3] || self.shape(b) != [xs[1]] {
            return Err(Error::Shape(format!(
                "depthwise3x3: input {xs:?} weight {:?} bias {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(&xs);
        {
            let (xd, wdat, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            let od = out.data_mut();
            for plane in 0..n * c {
                let ch = plane % c;
                let kern = &wdat[ch * 9..ch * 9 + 9];
                let src = &xd[plane * h * wd..(plane + 1) * h * wd];
                let dst = &mut od[plane * h * wd..(plane + 1) * h * wd];
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = bd[ch];
                        for ky in 0..3 {
                            let y = i as isize + ky as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = j as isize + kx as isize - 1;
                                if xx >= 0 && xx < wd as isize {
                                    acc += kern[ky * 3 + kx] * src[y as usize * wd + xx as usize];
                                }
                            }
                        }
                        dst[i * wd + j] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            &[x, w, b],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (xd, wdat) = (args.inputs[0].data(), args.inputs[1].data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut gw = vec![T::zero(); c * 9];
                let mut gb = vec![T::zero(); c];
                for plane in 0..n * c {
                    let ch = plane % c;
                    let base = plane * h * wd;
                    for i in 0..h {
                        for j in 0..wd {
                            let gv = g[base + i * wd + j];
                            gb[ch] += gv;
                            for ky in 0..3 {
                                let y = i as isize + ky as isize - 1;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let xx = j as isize + kx as isize - 1;
                                    if xx >= 0 && xx < wd as isize {
                                        let si = base + y as usize * wd + xx as usize;
                                        gw[ch * 9 + ky * 3 + kx] += gv * xd[si];
                                        gx[si] += gv * wdat[ch * 9 + ky * 3 + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::from_vec(&[n, c, h, wd], gx).expect("dw gx")),
                    args.needs[1].then(|| Tensor::from_vec(&[c, 1, 3, 3], gw).expect("dw gw")),
                    args.needs[2].then(|| Tensor::from_vec(&[c], gb).expect("dw gb")),
                ]
            }),
        ))
    }

    /// Transposed 2×2 convolution with stride 2; `w` is `[I, O, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::Shape(format!("conv_transpose2x2: input {xs:?} weight {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!("conv_transpose2x2 bias {:?}", self.shape(b))));
            }
        }
        let hw = h * wd;
        let o4 = o * 4;
        let mut out = Tensor::zeros(&[n, o, 2 * h, 2 * wd]);
        {
            let mut tmp = vec![T::zero(); o4 * hw];
            let (xd, wdat) = (self.value(x).data(), self.value(w).data());
            let bias = b.map(|b| self.value(b).data().to_vec());
            let od = out.data_mut();
            for bi in 0..n {
                gemm(Trans::Yes, Trans::No, o4, hw, ci, T::one(), wdat, &xd[bi * ci * hw..(bi + 1) * ci * hw], T::zero(), &mut tmp);
                for oc in 0..o {
                    let bb = bias.as_ref().map_or(T::zero(), |b| b[oc]);
                    for a in 0..2 {
                        for bcol in 0..2 {
                            let src = &tmp[((oc * 2 + a) * 2 + bcol) * hw..][..hw];
                            for i in 0..h {
                                let row = ((bi * o + oc) * 2 * h + 2 * i + a) * 2 * wd;
                                for j in 0..wd {
                                    od[row + 2 * j + bcol] = src[i * wd + j] + bb;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            &inputs,
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (xv, wv) = (args.inputs[0], args.inputs[1]);
                let mut gx = args.needs[0].then(|| Tensor::zeros(xv.shape()));
                let mut gw = args.needs[1].then(|| Tensor::zeros(wv.shape()));
                let mut gb = vec![T::zero(); o];
                let mut tmp = vec![T::zero(); o4 * hw];
                for bi in 0..n {
                    for oc in 0..o {
                        for a in 0..2 {
                            for bcol in 0..2 {
                                let dst = &mut tmp[((oc * 2 + a) * 2 + bcol) * hw..][..hw];
                                for i in 0..h {
                                    let row = ((bi * o + oc) * 2 * h + 2 * i + a) * 2 * wd;
                                    for j in 0..wd {
                                        let v = g[row + 2 * j + bcol];
                                        dst[i * wd + j] = v;
                                        gb[oc] += v;
                                    }
                                }
                            }
                        }
                    }
                    let xi = &xv.data()[bi * ci * hw..(bi + 1) * ci * hw];
                    if let Some(gx) = gx.as_mut() {
                        gemm(Trans::No, Trans::No, ci, hw, o4, T::one(), wv.data(), &tmp, T::zero(), &mut gx.data_mut()[bi * ci * hw..(bi + 1) * ci * hw]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(Trans::No, Trans::Yes, ci, o4, hw, T::one(), xi, &tmp, T::one(), gw.data_mut());
                    }
                }
                let mut grads = vec![gx, gw];
                if args.inputs.len() == 3 {
                    grads.push(args.needs[2].then(|| Tensor::from_vec(&[o], gb).expect("deconv gb")));
                }
                grads
            }),
        ))
    }

    /// 2×2 max pooling with stride 2 on NCHW input (even sizes).
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2x2 needs even NCHW, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + dy) * w + 2 * j + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    arg.push(best);
                }
            }
        }
        let arg = self.branch(arg);
        let xd = self.value(x).data();
        let out = arg.iter().map(|&i| xd[i]).collect();
        let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |args: &BackArgs<'_, T>| {
                let mut gx = Tensor::zeros(args.inputs[0].shape());
                let gd = gx.data_mut();
                for (&src, &g) in arg.iter().zip(args.grad.data()) {
                    gd[src] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Bilinear ×2 upsampling of NCHW input with half-pixel centers
    /// (`align_corners = false`).
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("upsample expects NCHW, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ys = Rc::new(bilinear_taps(h));
        let xt = Rc::new(bilinear_taps(w));
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oi, &(y0, y1, ly)) in ys.iter().enumerate() {
                let ly = T::from_f64_lossy(ly);
                for (oj, &(x0, x1, lx)) in xt.iter().enumerate() {
                    let lx = T::from_f64_lossy(lx);
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oi * wo + oj] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oi, &(y0, y1, ly)) in ys.iter().enumerate() {
                        let ly = T::from_f64_lossy(ly);
                        for (oj, &(x0, x1, lx)) in xt.iter().enumerate() {
                            let lx = T::from_f64_lossy(lx);
                            let v = src[oi * wo + oj];
                            dst[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                            dst[y0 * w + x1] += v * (T::one() - ly) * lx;
                            dst[y1 * w + x0] += v * ly * (T::one() - lx);
                            dst[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("upsample grad"))]
            }),
        ))
    }

    /// Layer normalization over the last axis (ε = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {d} with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::from_f64_lossy(1e-5);
        let dn = T::from_usize_lossy(d);
        let xv = self.value(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d.max(1);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let out = Tensor::from_fn(xv.shape(), |i| xhat[i] * gd[i % d] + bd[i % d]);
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let gam = args.inputs[1].data();
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for k in 0..d {
                        let dxh = gr[k] * gam[k];
                        s1 += dxh;
                        s2 += dxh * xr[k];
                        gg[k] += gr[k] * xr[k];
                        gb[k] += gr[k];
                    }
                    for k in 0..d {
                        let dxh = gr[k] * gam[k];
                        gx[r * d + k] = inv[r] * (dxh - s1 / dn - xr[k] * s2 / dn);
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::from_vec(args.grad.shape(), gx).expect("ln gx")),
                    args.needs[1].then(|| Tensor::from_vec(&[d], gg).expect("ln gg")),
                    args.needs[2].then(|| Tensor::from_vec(&[d], gb).expect("ln gb")),
                ]
            }),
        ))
    }

    /// Batch normalization over the N, H, W axes of an NCHW tensor
    /// (ε = 1e-5). With `running = Some((mean, var))` the given statistics are
    /// used as constants (inference); otherwise batch statistics are used and
    /// returned for the running-average update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::Shape(format!("batch_norm: input {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = n * hw;
        let eps = T::from_f64_lossy(1e-5);
        let mn = T::from_usize_lossy(m);
        let xd = self.value(x).data();
        let (mean, var_b, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::Shape("batch_norm running stats".into()));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::Input("batch_norm needs more than one value per channel in training".into()));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let s = &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        mean[ch] += s.iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= mn);
                for bi in 0..n {
                    for ch in 0..c {
                        let s = &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                let unbiased: Vec<T> = var.iter().map(|&v| v / (mn - T::one())).collect();
                var.iter_mut().for_each(|v| *v /= mn);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (idx, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (idx / hw) % c;
            *xh = (xd[idx] - mean[ch]) * inv[ch];
            *o = *xh * gd[ch] + bd[ch];
        }
        let out = Tensor::from_vec(&xs, out)?;
        let training = stats.is_some();
        let var = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let gam = args.inputs[1].data();
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (idx, &gv) in g.iter().enumerate() {
                    let ch = (idx / hw) % c;
                    gg[ch] += gv * xhat[idx];
                    gb[ch] += gv;
                }
                let gx = args.needs[0].then(|| {
                    let gx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| {
                            let ch = (idx / hw) % c;
                            if training {
                                gam[ch] * inv[ch] * (gv - gb[ch] / mn - xhat[idx] * gg[ch] / mn)
                            } else {
                                gv * gam[ch] * inv[ch]
                            }
                        })
                        .collect();
                    Tensor::from_vec(args.grad.shape(), gx).expect("bn gx")
                });
                vec![
                    gx,
                    args.needs[1].then(|| Tensor::from_vec(&[c], gg).expect("bn gg")),
                    args.needs[2].then(|| Tensor::from_vec(&[c], gb).expect("bn gb")),
                ]
            }),
        );
        Ok((var, stats))
    }

    /// `out[i] = a.flat[index[i]]`, shaped `shape`.
    pub fn take(&mut self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let len = self.value(a).len();
        if index.iter().any(|&i| i >= len) {
            return Err(Error::Input("take: index out of range".into()));
        }
        let ad = self.value(a).data();
        let out = Tensor::from_vec(shape, index.iter().map(|&i| ad[i]).collect())?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let mut ga = Tensor::zeros(args.inputs[0].shape());
                let gd = ga.data_mut();
                for (&i, &g) in index.iter().zip(args.grad.data()) {
                    gd[i] += g;
                }
                vec![Some(ga)]
            }),
        ))
    }

    /// Mean or max over one axis, keeping it with size 1.
    pub fn reduce_axis(&mut self, a: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Shape(format!("reduce axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let dim = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let ad = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; if kind == Reduce::Max { outer * inner } else { 0 }];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                match kind {
                    Reduce::Mean => {
                        let sum: T = (0..dim).map(|k| ad[at(k)]).sum();
                        out[o * inner + i] = sum / T::from_usize_lossy(dim);
                    }
                    Reduce::Max => {
                        let mut best = at(0);
                        for k in 1..dim {
                            if ad[at(k)] > ad[best] {
                                best = at(k);
                            }
                        }
                        arg[o * inner + i] = best;
                    }
                }
            }
        }
        if kind == Reduce::Max {
            arg = self.branch(arg);
            let ad = self.value(a).data();
            out = arg.iter().map(|&j| ad[j]).collect();
        }
        let mut out_shape = s.clone();
        out_shape[axis] = 1;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let mut ga = Tensor::zeros(&s);
                let gd = ga.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        match kind {
                            Reduce::Mean => {
                                let share = gv / T::from_usize_lossy(dim);
                                for k in 0..dim {
                                    gd[(o * dim + k) * inner + i] += share;
                                }
                            }
                            Reduce::Max => gd[arg[o * inner + i]] += gv,
                        }
                    }
                }
                vec![Some(ga)]
            }),
        ))
    }
}

/// Source rows `(i0, i1, weight of i1)` for ×2 bilinear upsampling.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
