//! Training objectives built on the fused loss kernels.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NceAnchor, NcePlan, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear};
use crate::tensor::Scalar;

/// Relative weights and contrastive sampling settings of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub anchors_per_class: usize,
    pub max_negatives: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
            tau: 0.1,
            anchors_per_class: 64,
            max_negatives: 512,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.anchors_per_class == 0 || self.max_negatives == 0 {
            return Err(Error::Config("anchor and negative counts must be positive".into()));
        }
        Ok(())
    }
}

/// Auxiliary supervision applied to the hook outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Supervision {
    None,
    /// 1×1 classifier per hook depth with CE + Dice.
    Ds,
    /// Pixel-to-pixel contrastive loss per hook depth.
    Cds,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::None => "none",
            Supervision::Ds => "ds",
            Supervision::Cds => "cds",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Supervision::None, Supervision::Ds, Supervision::Cds]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// Nearest-neighbor downsampling of `[N, size, size]` labels by `factor`,
/// sampling source index `factor·i + factor/2`.
pub fn downsample_labels(labels: &[u8], n: usize, size: usize, factor: usize) -> Vec<u8> {
    let out = size / factor;
    let mut y = Vec::with_capacity(n * out * out);
    for b in 0..n {
        for i in 0..out {
            for j in 0..out {
                let (si, sj) = (factor * i + factor / 2, factor * j + factor / 2);
                y.push(labels[(b * size + si) * size + sj]);
            }
        }
    }
    y
}

/// Samples up to `k` pixels per class of one `h×w` label map (uniformly,
/// without replacement) and builds the contrastive plan over them: every
/// sampled pixel is an anchor, its positives are the other samples of its
/// class and its negatives are up to `max_negatives` samples of other classes.
pub fn sample_plan(
    labels: &[u8],
    k: usize,
    max_negatives: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<u8>, NcePlan) {
    let mut rows = Vec::new();
    let top = labels.iter().copied().max().unwrap_or(0);
    for class in 0..=top {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(rng);
        idx.truncate(k);
        idx.sort_unstable();
        rows.extend(idx);
    }
    let row_labels: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
    let m = rows.len();
    let anchors = (0..m)
        .map(|a| {
            let mut negatives: Vec<usize> = (0..m).filter(|&j| row_labels[j] != row_labels[a]).collect();
            if negatives.len() > max_negatives {
                negatives.shuffle(rng);
                negatives.truncate(max_negatives);
                negatives.sort_unstable();
            }
            NceAnchor {
                anchor: a,
                positives: (0..m).filter(|&j| j != a && row_labels[j] == row_labels[a]).collect(),
                negatives,
            }
        })
        .collect();
    (rows, row_labels, NcePlan { anchors })
}

/// `pixel_nce` over an explicit embedding batch, every row an anchor.
pub fn pixel_nce_batch<T: Scalar>(g: &mut Graph<T>, emb: Var, labels: &[u8], tau: T) -> Result<(Var, bool)> {
    if g.shape(emb).first() != Some(&labels.len()) {
        return Err(Error::Shape(format!(
            "{} labels for embeddings {:?}",
            labels.len(),
            g.shape(emb)
        )));
    }
    g.pixel_nce(emb, Rc::new(NcePlan::exhaustive(labels)), tau)
}

/// Contrastive deep supervision: for each hook depth, upsample ×2, project
/// sampled pixels to the embedding space, ℓ2-normalize and apply `pixel_nce`
/// per image against the nearest-downsampled target labels. Returns the sum
/// over depths of the per-image mean, and whether every image/depth was
/// degenerate (no anchor with a positive).
pub fn cds_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    feats: &[Var],
    proj: &[Linear],
    y_t: &[u8],
    input_size: usize,
    w: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, bool)> {
    let tau = T::from_f64_lossy(w.tau);
    let mut terms = Vec::new();
    let mut all_degenerate = true;
    for (f, head) in feats.iter().zip(proj) {
        let up = ctx.g.upsample_bilinear2x(*f)?;
        let s = ctx.g.shape(up).to_vec();
        let (n, size) = (s[0], s[2]);
        if input_size % size != 0 || y_t.len() != n * input_size * input_size {
            return Err(Error::Shape(format!("hook map {s:?} vs labels for {n}×{input_size}²")));
        }
        let y = downsample_labels(y_t, n, input_size, input_size / size);
        let mut per_image = Vec::new();
        for b in 0..n {
            let lab = &y[b * size * size..(b + 1) * size * size];
            let (rows, _, plan) = sample_plan(lab, w.anchors_per_class, w.max_negatives, rng);
            if plan.active() == 0 {
                continue;
            }
            let at: Vec<(usize, usize, usize)> = rows.iter().map(|&i| (b, i / size, i % size)).collect();
            let px = ctx.g.gather_pixels(up, &at)?;
            let e = head.forward(ctx, px)?;
            let e = ctx.g.l2_normalize_rows(e)?;
            let (l, _) = ctx.g.pixel_nce(e, Rc::new(plan), tau)?;
            per_image.push(l);
        }
        if per_image.is_empty() {
            continue;
        }
        all_degenerate = false;
        let inv = T::one() / T::from_usize_lossy(per_image.len());
        let weighted: Vec<(Var, T)> = per_image.into_iter().map(|v| (v, inv)).collect();
        terms.push((ctx.g.weighted_sum(&weighted)?, T::one()));
    }
    if terms.is_empty() {
        let zero = ctx.g.constant(crate::tensor::Tensor::scalar(T::zero()));
        return Ok((zero, true));
    }
    Ok((ctx.g.weighted_sum(&terms)?, all_degenerate))
}

/// Plain deep supervision: upsample ×2, 1×1 classifier, CE + Dice against the
/// downsampled labels, summed over depths.
pub fn ds_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    feats: &[Var],
    heads: &[Conv2d],
    y_t: &[u8],
    input_size: usize,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (f, head) in feats.iter().zip(heads) {
        let up = ctx.g.upsample_bilinear2x(*f)?;
        let logits = head.forward(ctx, up)?;
        let s = ctx.g.shape(logits).to_vec();
        let (n, size) = (s[0], s[2]);
        if input_size % size != 0 || y_t.len() != n * input_size * input_size {
            return Err(Error::Shape(format!("hook map {s:?} vs labels for {n}×{input_size}²")));
        }
        let y = downsample_labels(y_t, n, input_size, input_size / size);
        terms.push((ctx.g.ce_dice(logits, Rc::new(y))?, T::one()));
    }
    ctx.g.weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_from_seed;

    #[test]
    fn nearest_downsample_uses_block_centre() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        // 4×4 → 2×2, picks columns 1 and 3 of rows 1 and 3
        assert_eq!(downsample_labels(&labels, 1, 4, 2), [1, 3, 1, 3]);
    }

    #[test]
    fn sampling_caps_anchors_and_negatives() {
        let labels: Vec<u8> = (0..400).map(|i| (i % 3) as u8).collect();
        let mut rng = rng_from_seed(1);
        let (rows, lab, plan) = sample_plan(&labels, 10, 7, &mut rng);
        assert_eq!(rows.len(), 30);
        assert!(plan.anchors.iter().all(|a| a.negatives.len() == 7 && a.positives.len() == 9));
        assert!(plan.anchors.iter().all(|a| a.negatives.iter().all(|&j| lab[j] != lab[a.anchor])));
    }
}
