//! Fused scaled dot-product attention kernels.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{BackArgs, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Boolean attention mask shared by groups of batch entries: batch entry `b`
/// uses slab `(b / stride) % slabs` of a `[slabs, T, S]` mask where `true`
/// forbids the pair.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub mask: Rc<Vec<bool>>,
    pub slabs: usize,
    pub stride: usize,
}

impl<T: Scalar> Graph<T> {
    /// `softmax(q·kᵀ·scale + bias)·v` for every batch entry.
    ///
    /// `q` is `[B, T, dk]`, `k` is `[B, S, dk]`, `v` is `[B, S, dv]`. The
    /// optional bias is `[G, T, S]` with batch entry `b` using slab `b % G`.
    /// Masked pairs get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<AttnMask>,
        scale: T,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(Error::Shape(format!("attention: q {qs:?} k {ks:?} v {vs:?}")));
        }
        if qs[2] != ks[2] {
            return Err(Error::Shape(format!("attention: d_k mismatch, q {qs:?} k {ks:?}")));
        }
        if qs[0] != ks[0] || ks[0] != vs[0] || ks[1] != vs[1] {
            return Err(Error::Shape(format!("attention: q {qs:?} k {ks:?} v {vs:?}")));
        }
        let (b, t, dk) = (qs[0], qs[1], qs[2]);
        let (s, dv) = (ks[1], vs[2]);
        let groups = match bias {
            Some(bv) => {
                let bs = self.shape(bv);
                if bs.len() != 3 || bs[1] != t || bs[2] != s || bs[0] == 0 {
                    return Err(Error::Shape(format!("attention bias {bs:?} for {t}×{s}")));
                }
                bs[0]
            }
            None => 1,
        };
        if let Some(m) = &mask {
            if m.mask.len() != m.slabs * t * s || m.stride == 0 {
                return Err(Error::Shape("attention mask size".into()));
            }
        }
        let ts = t * s;
        let mut probs = vec![T::zero(); b * ts];
        let mut out = vec![T::zero(); b * t * dv];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let bd = bias.map(|bv| self.value(bv).data());
            for bi in 0..b {
                let p = &mut probs[bi * ts..(bi + 1) * ts];
                gemm(Trans::No, Trans::Yes, t, s, dk, scale, &qd[bi * t * dk..], &kd[bi * s * dk..], T::zero(), p);
                if let Some(bd) = bd {
                    let slab = &bd[(bi % groups) * ts..(bi % groups + 1) * ts];
                    p.iter_mut().zip(slab).for_each(|(x, &y)| *x += y);
                }
                let m = mask.as_ref().map(|m| &m.mask[((bi / m.stride) % m.slabs) * ts..][..ts]);
                for (r, row) in p.chunks_mut(s).enumerate() {
                    masked_softmax(row, m.map(|m| &m[r * s..(r + 1) * s]));
                }
                gemm(Trans::No, Trans::No, t, dv, s, T::one(), p, &vd[bi * s * dv..], T::zero(), &mut out[bi * t * dv..(bi + 1) * t * dv]);
            }
        }
        let out = Tensor::from_vec(&[b, t, dv], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.push(
            out,
            &inputs,
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
                let mut gq = vec![T::zero(); b * t * dk];
                let mut gk = vec![T::zero(); b * s * dk];
                let mut gv = vec![T::zero(); b * s * dv];
                let mut gbias = vec![T::zero(); groups * ts];
                let mut dp = vec![T::zero(); ts];
                for bi in 0..b {
                    let p = &probs[bi * ts..(bi + 1) * ts];
                    let gi = &g[bi * t * dv..(bi + 1) * t * dv];
                    gemm(Trans::Yes, Trans::No, s, dv, t, T::one(), p, gi, T::zero(), &mut gv[bi * s * dv..(bi + 1) * s * dv]);
                    gemm(Trans::No, Trans::Yes, t, s, dv, T::one(), gi, &vd[bi * s * dv..], T::zero(), &mut dp);
                    for (drow, prow) in dp.chunks_mut(s).zip(p.chunks(s)) {
                        let dot: T = drow.iter().zip(prow).map(|(&d, &pp)| d * pp).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot);
                        }
                    }
                    let slab = &mut gbias[(bi % groups) * ts..(bi % groups + 1) * ts];
                    slab.iter_mut().zip(&dp).for_each(|(acc, &d)| *acc += d);
                    gemm(Trans::No, Trans::No, t, dk, s, scale, &dp, &kd[bi * s * dk..], T::zero(), &mut gq[bi * t * dk..(bi + 1) * t * dk]);
                    gemm(Trans::Yes, Trans::No, s, dk, t, scale, &dp, &qd[bi * t * dk..], T::zero(), &mut gk[bi * s * dk..(bi + 1) * s * dk]);
                }
                let mut grads = vec![
                    args.needs[0].then(|| Tensor::from_vec(&[b, t, dk], gq).expect("attn gq")),
                    args.needs[1].then(|| Tensor::from_vec(&[b, s, dk], gk).expect("attn gk")),
                    args.needs[2].then(|| Tensor::from_vec(&[b, s, dv], gv).expect("attn gv")),
                ];
                if args.inputs.len() == 4 {
                    grads.push(args.needs[3].then(|| Tensor::from_vec(&[groups, t, s], gbias).expect("attn gbias")));
                }
                grads
            }),
        ))
    }

    /// Independent scalar attention per row of `[B, L]` inputs:
    /// `o_i = Σ_j softmax_j(q_i·k_j·scale)·v_j`.
    ///
    /// This is [`Graph::attention`] with `d_k = d_v = 1`, evaluated without
    /// materializing the `L×L` weight matrix; the backward pass recomputes the
    /// weights row by row.
    pub fn scalar_attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() || shape.is_empty() {
            return Err(Error::Shape(format!(
                "scalar_attention: q {shape:?} k {:?} v {:?}",
                self.shape(k),
                self.shape(v)
            )));
        }
        let l = *shape.last().expect("nonempty");
        let rows = self.value(q).len() / l.max(1);
        let mut out = vec![T::zero(); rows * l];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let mut w = vec![T::zero(); l];
            for r in 0..rows {
                let (qr, kr, vr) = (&qd[r * l..(r + 1) * l], &kd[r * l..(r + 1) * l], &vd[r * l..(r + 1) * l]);
                let (kmin, kmax) = min_max(kr);
                for i in 0..l {
                    out[r * l + i] = scalar_row(qr[i] * scale, kr, vr, kmin, kmax, &mut w).0;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Box::new(move |args: &BackArgs<'_, T>| {
                let g = args.grad.data();
                let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
                let od = args.out.data();
                let mut gq = vec![T::zero(); rows * l];
                let mut gk = vec![T::zero(); rows * l];
                let mut gv = vec![T::zero(); rows * l];
                let mut w = vec![T::zero(); l];
                for r in 0..rows {
                    let base = r * l;
                    let (qr, kr, vr) = (&qd[base..base + l], &kd[base..base + l], &vd[base..base + l]);
                    let (kmin, kmax) = min_max(kr);
                    for i in 0..l {
                        let gi = g[base + i];
                        if gi == T::zero() {
                            continue;
                        }
                        let qi = qr[i] * scale;
                        scalar_row(qi, kr, vr, kmin, kmax, &mut w);
                        let oi = od[base + i];
                        let mut dq = T::zero();
                        for j in 0..l {
                            gv[base + j] += w[j] * gi;
                            let ds = w[j] * gi * (vr[j] - oi);
                            dq += ds * kr[j];
                            gk[base + j] += ds * qi;
                        }
                        gq[base + i] += dq * scale;
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::from_vec(&shape, gq).expect("sa gq")),
                    args.needs[1].then(|| Tensor::from_vec(&shape, gk).expect("sa gk")),
                    args.needs[2].then(|| Tensor::from_vec(&shape, gv).expect("sa gv")),
                ]
            }),
        ))
    }
}

fn min_max<T: Scalar>(v: &[T]) -> (T, T) {
    v.iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Fills `w` with the softmax weights of logits `qi·k_j` and returns
/// `(Σ w_j v_j, Σ exp)`.
fn scalar_row<T: Scalar>(qi: T, k: &[T], v: &[T], kmin: T, kmax: T, w: &mut [T]) -> (T, T) {
    let max = if qi >= T::zero() { qi * kmax } else { qi * kmin };
    let mut sum = T::zero();
    for (wj, &kj) in w.iter_mut().zip(k) {
        *wj = (qi * kj - max).exp();
        sum += *wj;
    }
    let mut acc = T::zero();
    for (wj, &vj) in w.iter_mut().zip(v) {
        *wj /= sum;
        acc += *wj * vj;
    }
    (acc, sum)
}

fn masked_softmax<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let allowed = |j: usize| mask.is_none_or(|m| !m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if allowed(j) { (*v - max).exp() } else { T::zero() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_attention_matches_general_kernel() {
        let l = 5;
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_fn(&[2, l], |i| (i as f64 * 0.37).sin()), true);
        let k = g.leaf(Tensor::from_fn(&[2, l], |i| (i as f64 * 0.71).cos()), true);
        let v = g.leaf(Tensor::from_fn(&[2, l], |i| i as f64 * 0.1), true);
        let fast = g.scalar_attention(q, k, v, 0.5).unwrap();
        let q3 = g.reshape(q, &[2, l, 1]).unwrap();
        let k3 = g.reshape(k, &[2, l, 1]).unwrap();
        let v3 = g.reshape(v, &[2, l, 1]).unwrap();
        let slow = g.attention(q3, k3, v3, None, None, 0.5).unwrap();
        for (a, b) in g.value(fast).data().iter().zip(g.value(slow).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_pairs_get_zero_weight() {
        let mut row = [1.0f64, 5.0, 2.0];
        masked_softmax(&mut row, Some(&[false, true, false]));
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-15);
    }
}
