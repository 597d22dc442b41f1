//! Elementwise, broadcasting and layout ops.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{one, BackArgs, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};

/// Calls `f(a_index, b_index)` for every element of `a_shape`, where `b_shape`
/// broadcasts against it (same rank, every dim equal or 1).
pub(crate) fn for_each_bcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let bs = strides(b_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|i| if b_shape[i] == 1 { 0 } else { bs[i] })
        .collect();
    let inner = a_shape[rank - 1];
    let inner_stride = eff[rank - 1];
    let outer = numel(&a_shape[..rank - 1]);
    let mut counter = vec![0usize; rank.saturating_sub(1)];
    let mut b_base = 0usize;
    let mut ai = 0usize;
    for _ in 0..outer {
        let mut bi = b_base;
        for _ in 0..inner {
            f(ai, bi);
            ai += 1;
            bi += inner_stride;
        }
        // advance the odometer over the outer dims
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            b_base += eff[d];
            if counter[d] < a_shape[d] {
                break;
            }
            b_base -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
}

fn check_bcast(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != 1 && y != x) {
        return Err(Error::Shape(format!("{b:?} does not broadcast to {a:?}")));
    }
    Ok(())
}

/// Sums `g` (shaped like `a_shape`) down to `b_shape`.
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, b_shape: &[usize]) -> Tensor<T> {
    if g.shape() == b_shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(b_shape);
    let gd = g.data();
    let od = out.data_mut();
    for_each_bcast(g.shape(), b_shape, |ai, bi| od[bi] += gd[ai]);
    out
}

pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let xd = x.data();
    if rank == 0 || x.is_empty() {
        return Tensor::from_vec(&out_shape, xd.to_vec()).expect("permute shape");
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = numel(&out_shape[..rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        let mut s = base;
        for _ in 0..inner {
            out.push(xd[s]);
            s += inner_stride;
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            base += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out).expect("permute shape")
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args: &BackArgs<'_, T>| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| args.grad.clone()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            Tensor::from_fn(x.shape(), |i| x.data()[i] - y.data()[i])
        };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args: &BackArgs<'_, T>| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| args.grad.map(|v| -v)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i])
        };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (x, y) = (args.inputs[0], args.inputs[1]);
                vec![
                    args.needs[0]
                        .then(|| Tensor::from_fn(x.shape(), |i| g[i] * y.data()[i])),
                    args.needs[1]
                        .then(|| Tensor::from_fn(y.shape(), |i| g[i] * x.data()[i])),
                ]
            }),
        ))
    }

    /// `a + b` with `b` broadcast along its size-1 dims.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        check_bcast(self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        {
            let bd = self.value(b).data();
            let od = out.data_mut();
            for_each_bcast(self.shape(a), self.shape(b), |ai, bi| od[ai] += bd[bi]);
        }
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args: &BackArgs<'_, T>| {
                vec![
                    args.needs[0].then(|| args.grad.clone()),
                    args.needs[1].then(|| reduce_to(args.grad, args.inputs[1].shape())),
                ]
            }),
        ))
    }

    /// `a * b` with `b` broadcast along its size-1 dims.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        check_bcast(self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        {
            let bd = self.value(b).data();
            let od = out.data_mut();
            for_each_bcast(self.shape(a), self.shape(b), |ai, bi| od[ai] *= bd[bi]);
        }
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args: &BackArgs<'_, T>| {
                let (x, y) = (args.inputs[0], args.inputs[1]);
                let g = args.grad.data();
                let ga = args.needs[0].then(|| {
                    let mut ga = args.grad.clone();
                    let yd = y.data();
                    let gd = ga.data_mut();
                    for_each_bcast(x.shape(), y.shape(), |ai, bi| gd[ai] *= yd[bi]);
                    ga
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = Tensor::zeros(y.shape());
                    let xd = x.data();
                    let bd = gb.data_mut();
                    for_each_bcast(x.shape(), y.shape(), |ai, bi| bd[bi] += g[ai] * xd[ai]);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| one(Some(args.grad.map(|v| v * s)))),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let own = self.value(a).data().iter().map(|&v| (v > T::zero()) as usize).collect();
        let on = Rc::new(self.branch(own));
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape(), |i| if on[i] == 1 { x.data()[i] } else { T::zero() });
        self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                one(Some(Tensor::from_fn(args.out.shape(), |i| if on[i] == 1 { g[i] } else { T::zero() })))
            }),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(core::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(a)
            .map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
                let x = args.inputs[0].data();
                let g = args.grad.data();
                one(Some(Tensor::from_fn(args.out.shape(), |i| {
                    let v = x[i];
                    let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    g[i] * (cdf + v * pdf)
                })))
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(
            out,
            &[a],
            Box::new(|args: &BackArgs<'_, T>| {
                let y = args.out.data();
                let g = args.grad.data();
                one(Some(Tensor::from_fn(args.out.shape(), |i| {
                    g[i] * y[i] * (T::one() - y[i])
                })))
            }),
        )
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            out,
            &[a],
            Box::new(|args: &BackArgs<'_, T>| {
                one(Some(Tensor::full(args.inputs[0].shape(), args.grad.data()[0])))
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len().max(1));
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// `Σ w_i · x_i` over `[1]`-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum expects scalars, got {:?}",
                    self.shape(v)
                )));
            }
            total += w * self.value(v).data()[0];
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(total),
            &vars,
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data()[0];
                weights
                    .iter()
                    .zip(&args.needs)
                    .map(|(&w, &need)| need.then(|| Tensor::scalar(g * w)))
                    .collect()
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(|args: &BackArgs<'_, T>| {
                one(Some(
                    args.grad
                        .clone()
                        .reshaped(args.inputs[0].shape())
                        .expect("reshape backward"),
                ))
            }),
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let out = permute_tensor(self.value(a), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                one(Some(permute_tensor(args.grad, &inverse)))
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xd = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let mut gx = Tensor::zeros(&shape);
                let gd = args.grad.data();
                let xd = gx.data_mut();
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    xd[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                one(Some(gx))
            }),
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {first:?}")));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            dims.push(s[axis]);
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = dims.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (k, &p) in parts.iter().enumerate() {
                let chunk = dims[k] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |args: &BackArgs<'_, T>| {
                let gd = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(dims.len());
                for (k, &d) in dims.iter().enumerate() {
                    if args.needs[k] {
                        let mut g = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&gd[base..base + d * inner]);
                        }
                        grads.push(Some(
                            Tensor::from_vec(args.inputs[k].shape(), g).expect("concat grad"),
                        ));
                    } else {
                        grads.push(None);
                    }
                    offset += d;
                }
                grads
            }),
        ))
    }

    /// Cyclic shift of a `[N, H, W, C]` grid: `out[(i+dy) mod H, (j+dx) mod W] = x[i, j]`.
    pub fn roll2d(&mut self, a: Var, dy: isize, dx: isize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::Shape(format!("roll2d expects NHWC, got {s:?}")));
        }
        let out = roll_tensor(self.value(a), dy, dx);
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| one(Some(roll_tensor(args.grad, -dy, -dx)))),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = *x.shape().last().unwrap_or(&1);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let mut gx = args.grad.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(args.out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (g, &y) in grow.iter_mut().zip(yrow) {
                        *g = y * (*g - dot);
                    }
                }
                one(Some(gx))
            }),
        )
    }

    /// Scales each row of a `[m, d]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("l2_normalize_rows expects [m, d], got {s:?}")));
        }
        let d = s[1];
        let eps = T::from_f64_lossy(1e-12);
        let x = self.value(a);
        let norms: Vec<T> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let mut out = x.clone();
        for (row, &n) in out.data_mut().chunks_mut(d).zip(&norms) {
            for v in row {
                *v /= n;
            }
        }
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let mut gx = args.grad.clone();
                for ((grow, yrow), &n) in gx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(args.out.data().chunks(d))
                    .zip(&norms)
                {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for (g, &y) in grow.iter_mut().zip(yrow) {
                        *g = (*g - y * dot) / n;
                    }
                }
                one(Some(gx))
            }),
        ))
    }

    /// Picks feature vectors out of an `[N, C, H, W]` map at `(n, y, x)`
    /// locations, producing `[m, C]`.
    pub fn gather_pixels(&mut self, a: Var, at: &[(usize, usize, usize)]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("gather_pixels expects NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if at.iter().any(|&(b, y, x)| b >= n || y >= h || x >= w) {
            return Err(Error::Input("gather_pixels index out of range".into()));
        }
        let at: Rc<Vec<(usize, usize, usize)>> = Rc::new(at.to_vec());
        let xd = self.value(a).data();
        let mut out = Vec::with_capacity(at.len() * c);
        for &(b, y, x) in at.iter() {
            for ch in 0..c {
                out.push(xd[((b * c + ch) * h + y) * w + x]);
            }
        }
        let out = Tensor::from_vec(&[at.len(), c], out)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |args: &BackArgs<'_, T>| {
                let mut gx = Tensor::zeros(&s);
                let gd = args.grad.data();
                let xd = gx.data_mut();
                for (m, &(b, y, x)) in at.iter().enumerate() {
                    for ch in 0..c {
                        xd[((b * c + ch) * h + y) * w + x] += gd[m * c + ch];
                    }
                }
                one(Some(gx))
            }),
        ))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn roll_tensor<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for i in 0..h {
            let oi = (i as isize + dy).rem_euclid(h as isize) as usize;
            for j in 0..w {
                let oj = (j as isize + dx).rem_euclid(w as isize) as usize;
                let src = ((b * h + i) * w + j) * c;
                let dst = ((b * h + oi) * w + oj) * c;
                od[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bcast_reduce_matches_manual() {
        let g = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let r = reduce_to(&g, &[1, 3, 1]);
        for c in 0..3 {
            let want: f64 = (0..2)
                .flat_map(|n| (0..4).map(move |k| ((n * 3 + c) * 4 + k) as f64))
                .sum();
            assert_eq!(r.data()[c], want);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        let p = permute_tensor(&x, &[0, 2, 3, 1]);
        assert_eq!(p.shape(), &[2, 4, 5, 3]);
        assert_eq!(p.data()[1], x.data()[20]); // (0,0,0,1) <- (0,1,0,0)
        let back = permute_tensor(&p, &[0, 3, 1, 2]);
        assert_eq!(back, x);
    }

    #[test]
    fn roll_wraps_both_axes() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 3, 1], |i| i as f32);
        let r = roll_tensor(&x, -1, -1);
        // out[i][j] = x[i+1][j+1]
        assert_eq!(r.data()[0], 4.0);
        assert_eq!(r.data()[8], 0.0);
        assert_eq!(roll_tensor(&r, 1, 1), x);
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 5, 3], |i| i as f64), true);
        let a = g.narrow(x, 1, 0, 2).unwrap();
        let b = g.narrow(x, 1, 2, 3).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let s = g.sum_all(y);
        g.backward(s);
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
