//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::Model;
use crate::nn::{rng_from_seed, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::autodiff::Graph;
use crate::train::{forward_backward_on, total_loss_on};

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub probes: Vec<Probe>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().fold(0.0, |m, p| m.max(p.rel_err))
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Whether some probe touched a parameter whose name contains `needle`.
    pub fn covers(&self, needle: &str) -> bool {
        self.probes.iter().any(|p| p.param.contains(needle))
    }
}

/// Name fragments every full-model check should reach: the hook's gate
/// scalar, depth-wise kernels and fusion weights, both branches and every
/// loss head.
pub const MODEL_COVERAGE: [&str; 10] = [
    "theta",
    "dw_",
    "hooks.0.u",
    "hooks.1.u",
    "fuse",
    "context.",
    "target.",
    "context.output",
    "target.head",
    "aux.",
];

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Moves every trainable tensor off its initial value by `U(−amp, amp)` so
/// zero-initialized gates do not hide gradients behind them.
pub fn jitter(store: &mut ParamStore<f64>, amp: f64, rng: &mut ChaCha8Rng) {
    for i in 0..store.len() {
        let id = ParamId(i);
        if store.kind(id) == ParamKind::Buffer {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

/// `n` coordinates of distinct trainable tensors where possible. For each
/// needle in `cover`, one tensor whose name contains it comes first; the rest
/// are drawn at random, then elements of random tensors fill up to `n`.
pub fn sample_coordinates(store: &ParamStore<f64>, n: usize, cover: &[&str], rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let mut ids: Vec<ParamId> = (0..store.len())
        .map(ParamId)
        .filter(|&id| store.kind(id) != ParamKind::Buffer)
        .collect();
    ids.shuffle(rng);
    let mut order: Vec<ParamId> = Vec::with_capacity(ids.len());
    for needle in cover {
        if let Some(&id) = ids.iter().find(|&&id| !order.contains(&id) && store.name(id).contains(needle)) {
            order.push(id);
        }
    }
    order.extend(ids.iter().filter(|&&id| !order.contains(&id)).copied().collect::<Vec<_>>());
    let mut picks: Vec<(ParamId, usize)> = order
        .iter()
        .take(n)
        .map(|&id| (id, rng.random_range(0..store.get(id).len())))
        .collect();
    while picks.len() < n && !ids.is_empty() {
        let id = ids[rng.random_range(0..ids.len())];
        picks.push((id, rng.random_range(0..store.get(id).len())));
    }
    picks
}

/// Compares `grads` (one optional tensor per store entry, from a single
/// backward pass of `loss`) against Ridders' extrapolation of central
/// differences at `picks`: steps shrink from `h` by 1.4 while a Neville
/// tableau extrapolates them to zero step, and the entry with the smallest
/// estimated error is kept.
pub fn check(
    store: &mut ParamStore<f64>,
    picks: &[(ParamId, usize)],
    grads: &[Option<Tensor<f64>>],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradReport> {
    const STEPS: usize = 6;
    const SHRINK: f64 = 1.4;
    let mut probes = Vec::with_capacity(picks.len());
    for &(id, index) in picks {
        let orig = store.get(id).data()[index];
        let mut central = |step: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[index] = orig + step;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[index] = orig - step;
            let down = loss(store)?;
            Ok((up - down) / (2.0 * step))
        };
        let mut table = [[0.0f64; STEPS]; STEPS];
        let mut step = h;
        table[0][0] = central(step)?;
        let (mut numeric, mut err) = (table[0][0], f64::INFINITY);
        for i in 1..STEPS {
            step /= SHRINK;
            table[0][i] = central(step)?;
            let mut fac = SHRINK * SHRINK;
            for j in 1..=i {
                table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
                fac *= SHRINK * SHRINK;
                let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
                if e <= err {
                    err = e;
                    numeric = table[j][i];
                }
            }
            if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
                break;
            }
        }
        store.get_mut(id).data_mut()[index] = orig;
        let analytic = grads[id.0].as_ref().map_or(0.0, |g| g.data()[index]);
        probes.push(Probe {
            param: store.name(id).into(),
            index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, floor),
        });
    }
    Ok(GradReport { probes })
}

/// Jitters `store`, then checks `n` sampled coordinates (see
/// [`sample_coordinates`]) of the gradient of
/// the model's total loss on `batch`. Sampling inside the loss reuses
/// `seed`, so every evaluation sees the same anchors. The perturbed
/// evaluations replay the ReLU and max-pool decisions of the unperturbed
/// pass: differences then measure the derivative of the piece backprop
/// differentiates, and a kink within `h` of some unit cannot bias them.
#[allow(clippy::too_many_arguments)]
pub fn check_model(
    model: &Model,
    store: &mut ParamStore<f64>,
    batch: &Batch<f64>,
    w: &LossWeights,
    n: usize,
    cover: &[&str],
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = rng_from_seed(seed);
    jitter(store, 0.05, &mut rng);
    let mut g = Graph::new();
    g.record_branches();
    let out = forward_backward_on(&mut g, model, store, batch, w, seed)?;
    let branches = g.take_branches();
    let picks = sample_coordinates(store, n, cover, &mut rng);
    check(store, &picks, &out.grads, h, floor, |s| {
        let mut g = Graph::inference();
        g.replay_branches(branches.clone());
        total_loss_on(&mut g, model, s, batch, w, seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;

    #[test]
    fn quadratic_gradient_matches() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[3], alloc::vec![1.0, -2.0, 0.5]).unwrap(), ParamKind::Weight);
        let f = |s: &ParamStore<f64>| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
            let mut g = Graph::new();
            let ctx = Ctx::new(&mut g, s, true);
            let w = ctx.var(id);
            let sq = g.mul(w, w)?;
            let l = g.sum_all(sq);
            g.backward(l);
            let v = g.value(l).data()[0];
            Ok((v, alloc::vec![g.take_grad(w)]))
        };
        let (_, grads) = f(&store).unwrap();
        let picks = sample_coordinates(&store, 3, &[], &mut rng_from_seed(0));
        let rep = check(&mut store, &picks, &grads, 0.1, 1e-8, |s| f(s).map(|r| r.0)).unwrap();
        assert!(rep.max_rel_err() < 1e-8, "{:?}", rep.worst());
    }
}
