//! Fused loss kernels with analytic backward passes.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::basic::softmax_in_place;
use super::graph::{one, BackArgs, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Which anchor/positive/negative rows enter the contrastive loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NcePlan {
    pub anchors: Vec<NceAnchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NceAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl NcePlan {
    /// Every row is an anchor; positives are all other rows with the same
    /// label and negatives are all rows with a different label.
    pub fn exhaustive(labels: &[u8]) -> Self {
        let anchors = (0..labels.len())
            .map(|a| NceAnchor {
                anchor: a,
                positives: (0..labels.len())
                    .filter(|&j| j != a && labels[j] == labels[a])
                    .collect(),
                negatives: (0..labels.len()).filter(|&j| labels[j] != labels[a]).collect(),
            })
            .collect();
        Self { anchors }
    }

    /// Anchors that contribute (at least one positive).
    pub fn active(&self) -> usize {
        self.anchors.iter().filter(|a| !a.positives.is_empty()).count()
    }
}

/// Per-class softmax probabilities and one-hot statistics of the Dice term.
struct DiceSums<T> {
    inter: Vec<T>,
    denom: Vec<T>,
}

/// Cross-entropy and Dice addends of `ce_dice`, plus the probabilities and
/// Dice sums the backward pass reuses.
fn ce_dice_terms<T: Scalar>(ld: &[T], labels: &[u8], n: usize, kc: usize, hw: usize) -> (T, T, Vec<T>, DiceSums<T>) {
    let mf = T::from_usize_lossy(n * hw);
    let kf = T::from_usize_lossy(kc);
    let eps = T::from_f64_lossy(DICE_EPS);
    let two = T::one() + T::one();
    let mut probs = vec![T::zero(); n * kc * hw];
    let mut ce = T::zero();
    let mut row = vec![T::zero(); kc];
    for b in 0..n {
        for px in 0..hw {
            for c in 0..kc {
                row[c] = ld[(b * kc + c) * hw + px];
            }
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            ce += lse - row[labels[b * hw + px] as usize];
            softmax_in_place(&mut row);
            for c in 0..kc {
                probs[(b * kc + c) * hw + px] = row[c];
            }
        }
    }
    ce /= mf;
    let mut sums = DiceSums {
        inter: vec![T::zero(); kc],
        denom: vec![eps; kc],
    };
    for b in 0..n {
        for c in 0..kc {
            for px in 0..hw {
                let p = probs[(b * kc + c) * hw + px];
                sums.denom[c] += p;
                if labels[b * hw + px] as usize == c {
                    sums.inter[c] += p;
                    sums.denom[c] += T::one();
                }
            }
        }
    }
    let dice: T = (0..kc)
        .map(|c| T::one() - (two * sums.inter[c] + eps) / sums.denom[c])
        .sum::<T>()
        / kf;
    (ce, dice, probs, sums)
}

/// `(CE, Dice)` of `ce_dice` evaluated without a tape.
pub fn ce_dice_parts<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, T)> {
    let s = logits.shape();
    if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
        return Err(Error::Shape(format!("ce_dice_parts: {} labels for logits {s:?}", labels.len())));
    }
    if labels.iter().any(|&l| l as usize >= s[1]) {
        return Err(Error::Input("label out of range".into()));
    }
    let (ce, dice, _, _) = ce_dice_terms(logits.data(), labels, s[0], s[1], s[2] * s[3]);
    Ok((ce, dice))
}

impl<T: Scalar> Graph<T> {
    /// Mean pixel-wise cross-entropy plus the mean over classes of the soft
    /// Dice loss `1 − (2·Σp·g + ε)/(Σp + Σg + ε)`, with sums taken over the
    /// whole batch. `logits` is `[N, K, H, W]`; `labels` holds `N·H·W` class
    /// indices.
    pub fn ce_dice(&mut self, logits: Var, labels: Rc<Vec<u8>>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("ce_dice expects NKHW logits, got {s:?}")));
        }
        let (n, kc, hw) = (s[0], s[1], s[2] * s[3]);
        if labels.len() != n * hw {
            return Err(Error::Shape(format!("ce_dice: {} labels for logits {s:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= kc) {
            return Err(Error::Input(format!("label {bad} out of range for {kc} classes")));
        }
        let m = n * hw;
        let mf = T::from_usize_lossy(m);
        let kf = T::from_usize_lossy(kc);
        let eps = T::from_f64_lossy(DICE_EPS);
        let two = T::one() + T::one();
        let (ce, dice, probs, sums) = ce_dice_terms(self.value(logits).data(), &labels, n, kc, hw);
        let out = Tensor::scalar(ce + dice);
        Ok(self.push(
            out,
            &[logits],
            Box::new(move |args: &BackArgs<'_, T>| {
                let gscale = args.grad.data()[0];
                let mut gz = vec![T::zero(); probs.len()];
                let mut dp = vec![T::zero(); kc];
                for b in 0..n {
                    for px in 0..hw {
                        let lab = labels[b * hw + px] as usize;
                        for c in 0..kc {
                            let g = if lab == c { T::one() } else { T::zero() };
                            let num = two * sums.inter[c] + eps;
                            let den = sums.denom[c];
                            dp[c] = -(two * g * den - num) / (den * den * kf);
                        }
                        let mut dot = T::zero();
                        for c in 0..kc {
                            dot += dp[c] * probs[(b * kc + c) * hw + px];
                        }
                        for c in 0..kc {
                            let idx = (b * kc + c) * hw + px;
                            let p = probs[idx];
                            let onehot = if lab == c { T::one() } else { T::zero() };
                            gz[idx] = gscale * ((p - onehot) / mf + p * (dp[c] - dot));
                        }
                    }
                }
                one(Some(Tensor::from_vec(args.inputs[0].shape(), gz).expect("ce_dice grad")))
            }),
        ))
    }

    /// Supervised pixel-to-pixel InfoNCE over rows of `emb` (`[m, d]`, rows
    /// expected unit-norm). For each anchor `a` and positive `p`:
    /// `−log(e^{a·p/τ} / (e^{a·p/τ} + Σ_n e^{a·n/τ}))`, averaged over the
    /// anchor's positives and then over anchors that have positives.
    ///
    /// Returns the loss and whether every anchor lacked positives (in which
    /// case the loss is defined as 0).
    pub fn pixel_nce(&mut self, emb: Var, plan: Rc<NcePlan>, tau: T) -> Result<(Var, bool)> {
        let s = self.shape(emb).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("pixel_nce expects [m, d], got {s:?}")));
        }
        if tau <= T::zero() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let (m, d) = (s[0], s[1]);
        let in_range = |r: &usize| *r < m;
        if !plan.anchors.iter().all(|a| {
            in_range(&a.anchor) && a.positives.iter().all(in_range) && a.negatives.iter().all(in_range)
        }) {
            return Err(Error::Input("pixel_nce plan references a missing row".into()));
        }
        let active = plan.active();
        // similarity matrix S = E·Eᵀ/τ
        let mut sim = vec![T::zero(); m * m];
        gemm(Trans::No, Trans::Yes, m, m, d, T::one() / tau, self.value(emb).data(), self.value(emb).data(), T::zero(), &mut sim);
        let mut total = T::zero();
        for a in plan.anchors.iter().filter(|a| !a.positives.is_empty()) {
            let row = &sim[a.anchor * m..(a.anchor + 1) * m];
            let (mx, negsum) = anchor_stats(row, a);
            let mut acc = T::zero();
            let ln_neg = negsum.ln();
            for &p in &a.positives {
                // softplus(ln Σ_n e^{s_n − s_p})
                let x = ln_neg - (row[p] - mx);
                acc += x.max(T::zero()) + (-x.abs()).exp().ln_1p();
            }
            total += acc / T::from_usize_lossy(a.positives.len());
        }
        let loss = if active == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(active)
        };
        let var = self.push(
            Tensor::scalar(loss),
            &[emb],
            Box::new(move |args: &BackArgs<'_, T>| {
                let ed = args.inputs[0].data();
                let mut ge = vec![T::zero(); m * d];
                if active == 0 {
                    return one(Some(Tensor::from_vec(&[m, d], ge).expect("nce grad")));
                }
                // coefficients of dL/dS, symmetrized below
                let mut coef = vec![T::zero(); m * m];
                let g0 = args.grad.data()[0] / T::from_usize_lossy(active);
                for a in plan.anchors.iter().filter(|a| !a.positives.is_empty()) {
                    let w = g0 / T::from_usize_lossy(a.positives.len());
                    let row = &sim[a.anchor * m..(a.anchor + 1) * m];
                    let (mx, negsum) = anchor_stats(row, a);
                    let crow = &mut coef[a.anchor * m..(a.anchor + 1) * m];
                    let mut inv_z = T::zero();
                    for &p in &a.positives {
                        let ep = (row[p] - mx).exp();
                        let z = ep + negsum;
                        crow[p] += w * (ep / z - T::one());
                        inv_z += T::one() / z;
                    }
                    for &nj in &a.negatives {
                        crow[nj] += w * (row[nj] - mx).exp() * inv_z;
                    }
                }
                let mut sym = coef.clone();
                for i in 0..m {
                    for j in 0..m {
                        sym[i * m + j] += coef[j * m + i];
                    }
                }
                gemm(Trans::No, Trans::No, m, d, m, T::one() / tau, &sym, ed, T::zero(), &mut ge);
                one(Some(Tensor::from_vec(&[m, d], ge).expect("nce grad")))
            }),
        );
        Ok((var, active == 0))
    }
}

/// Shift used for stable exponentials of one anchor row, and the shifted sum
/// of its negative exponentials.
fn anchor_stats<T: Scalar>(row: &[T], a: &NceAnchor) -> (T, T) {
    let mx = a
        .positives
        .iter()
        .chain(&a.negatives)
        .fold(T::neg_infinity(), |x, &j| x.max(row[j]));
    let negsum = a.negatives.iter().map(|&j| (row[j] - mx).exp()).sum::<T>();
    (mx, negsum)
}
