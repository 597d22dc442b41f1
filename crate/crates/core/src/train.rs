//! Optimization, the training loop, scene-level prediction, evaluation and
//! the ablation grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{BatchStats, Graph};
use crate::data::{augment, make_batch, make_pair, stitch, tile_scene, Batch, PatchPair, Raster, Scene};
use crate::error::{Error, Result};
use crate::eval::{enhance_ocean, extract_front, grouped_report, seg_metrics, FrontSet, GroupKey, ImageResult, MetricsReport, Summary};
use crate::hooks::HookType;
use crate::losses::{LossWeights, Supervision};
use crate::model::{Model, ModelConfig};
use crate::nn::{apply_bn_updates, rng_from_seed, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// `lr0 · decay^e`.
    Exponential,
    /// `lr0 · (1 − e/E)^decay`.
    Poly,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Exponential => "exponential",
            Schedule::Poly => "poly",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exponential" => Some(Schedule::Exponential),
            "poly" => Some(Schedule::Poly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random training windows drawn from every scene per epoch.
    pub patches_per_scene: usize,
    /// Windows per validation scene used for checkpoint selection.
    pub val_patches_per_scene: usize,
    /// Share of training scenes held out for checkpoint selection.
    pub val_fraction: f64,
    pub augment: bool,
}

impl TrainConfig {
    /// 130 epochs, batch 170, `r_t = 224`.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            loss: LossWeights::default(),
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay: 0.9,
            schedule: Schedule::Exponential,
            epochs: 130,
            batch_size: 170,
            seed: 0,
            patches_per_scene: 1,
            val_patches_per_scene: 4,
            val_fraction: 0.1,
            augment: true,
        }
    }

    /// 20 epochs, batch 8, `r_t = 112`.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            epochs: 20,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_scene == 0 {
            return Err(Error::Config("epochs, batch_size and patches_per_scene must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(self.weight_decay >= 0.0) || !(self.decay > 0.0) {
            return Err(Error::Config("val_fraction in [0, 1), weight_decay ≥ 0 and decay > 0 required".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Exponential => self.lr0 * libm::pow(self.decay, epoch as f64),
            Schedule::Poly => self.lr0 * libm::pow(1.0 - epoch as f64 / self.epochs as f64, self.decay),
        }
    }
}

/// SGD with heavy-ball momentum; weight decay applies to `Weight` entries.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            velocity: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, momentum: f64, wd: f64) {
        let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(wd));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let decay = store.kind(id) == ParamKind::Weight;
            let p = store.get_mut(id);
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = if decay { gv + wd * *pv } else { gv };
                *vv = mu * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Loss values and gradients of one forward/backward pass.
pub struct StepOut<T> {
    pub l_t: f64,
    pub l_c: f64,
    pub aux: f64,
    pub total: f64,
    pub nce_degenerate: bool,
    /// One entry per store tensor.
    pub grads: Vec<Option<Tensor<T>>>,
    pub bn: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

/// Training-mode forward pass, total loss and backward pass.
pub fn forward_backward<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    w: &LossWeights,
    sample_seed: u64,
) -> Result<StepOut<T>> {
    forward_backward_on(&mut Graph::new(), model, store, batch, w, sample_seed)
}

/// [`forward_backward`] on a caller-provided (fresh) tape.
pub fn forward_backward_on<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    w: &LossWeights,
    sample_seed: u64,
) -> Result<StepOut<T>> {
    let (vars, loss, bn) = training_loss(g, model, store, batch, w, sample_seed)?;
    let val = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let (l_t, l_c, aux, total) = (val(Some(loss.target)), val(loss.context), val(loss.aux), val(Some(loss.total)));
    g.backward(loss.total);
    let grads = vars.iter().map(|&v| g.take_grad(v)).collect();
    Ok(StepOut {
        l_t,
        l_c,
        aux,
        total,
        nce_degenerate: loss.nce_degenerate,
        grads,
        bn,
    })
}

/// Training-mode total loss without a backward pass.
pub fn total_loss_on<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    w: &LossWeights,
    sample_seed: u64,
) -> Result<f64> {
    let (_, loss, _) = training_loss(g, model, store, batch, w, sample_seed)?;
    Ok(g.value(loss.total).data()[0].as_f64())
}

#[allow(clippy::type_complexity)]
fn training_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    w: &LossWeights,
    sample_seed: u64,
) -> Result<(Vec<crate::autodiff::Var>, crate::model::LossOut, Vec<(ParamId, ParamId, BatchStats<T>)>)> {
    let mut rng = rng_from_seed(sample_seed);
    let mut ctx = Ctx::new(g, store, true);
    let c = ctx.g.constant(batch.context.clone());
    let t = ctx.g.constant(batch.target.clone());
    let out = model.forward(&mut ctx, c, t)?;
    let loss = model.loss(&mut ctx, &out, &batch.y_t, &batch.y_c, w, &mut rng)?;
    Ok((ctx.vars().to_vec(), loss, core::mem::take(&mut ctx.bn_updates)))
}

/// Mixes a run seed with stream indices into an independent seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Seeded split of scene indices into (train, validation).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, &[0x5b11])));
    let n_val = if fraction > 0.0 { ((n as f64 * fraction) as usize).max(1).min(n.saturating_sub(1)) } else { 0 };
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Uniform random target window inside the scene.
pub fn random_pair(scene: &Scene, r: usize, seed: u64) -> Result<PatchPair> {
    let (h, w) = scene.shape();
    let mut rng = rng_from_seed(seed);
    let origin = (rng.random_range(0..=h - r), rng.random_range(0..=w - r));
    make_pair(scene, origin, r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_t: f64,
    pub l_c: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_t: f64,
    pub l_c: f64,
    pub aux: f64,
    pub total: f64,
    pub val_macro_iou: f64,
    /// Steps whose contrastive term had no anchor with a positive.
    pub degenerate_steps: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub train_scenes: Vec<usize>,
    pub val_scenes: Vec<usize>,
}

/// Argmax over the channel axis of `[N, K, H, W]` logits.
pub fn argmax_maps<T: Scalar>(logits: &Tensor<T>) -> Vec<Raster<u8>> {
    let s = logits.shape();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let d = logits.data();
    (0..n)
        .map(|b| {
            Raster::from_fn(h, w, |r, c| {
                let px = r * w + c;
                let mut best = 0;
                for ch in 1..k {
                    if d[(b * k + ch) * h * w + px] > d[(b * k + best) * h * w + px] {
                        best = ch;
                    }
                }
                best as u8
            })
        })
        .collect()
}

/// Inference-mode argmax maps for a list of pairs, `chunk` at a time.
pub fn predict_pairs<T: Scalar>(model: &Model, store: &ParamStore<T>, pairs: &[PatchPair], chunk: usize) -> Result<Vec<Raster<u8>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for part in pairs.chunks(chunk.max(1)) {
        let refs: Vec<&PatchPair> = part.iter().collect();
        let batch = make_batch::<T>(&refs)?;
        let logits = model.predict_logits(store, batch.context, batch.target)?;
        out.extend(argmax_maps(&logits));
    }
    Ok(out)
}

/// Mean macro-IoU of patch predictions against their target labels.
pub fn patch_macro_iou<T: Scalar>(model: &Model, store: &ParamStore<T>, pairs: &[PatchPair], chunk: usize) -> Result<f64> {
    let maps = predict_pairs(model, store, pairs, chunk)?;
    let mut sum = 0.0;
    for (m, p) in maps.iter().zip(pairs) {
        sum += seg_metrics(m, &p.target_labels)?.macro_avg.iou;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Trains on `scenes`, holding out a seeded `val_fraction` of them for
/// best-epoch selection, optionally starting from pretrained tensors matched
/// by name. `on_epoch` sees every epoch's log and the current
/// parameters (e.g. to write checkpoints).
pub fn train(
    cfg: &TrainConfig,
    scenes: &[Scene],
    init: Option<&[(String, Tensor<f32>)]>,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let r = cfg.model.input_size;
    let (model, mut store) = Model::new::<f32>(cfg.model.clone(), derive_seed(cfg.seed, &[1]))?;
    if let Some(init) = init {
        if store.load_matching(init) == 0 {
            return Err(Error::Checkpoint("pretrained weights match no model tensor".into()));
        }
    }
    let (train_idx, val_idx) = split_indices(scenes.len(), cfg.val_fraction, cfg.seed);
    let mut val_pairs = Vec::new();
    for &i in &val_idx {
        for j in 0..cfg.val_patches_per_scene {
            val_pairs.push(random_pair(&scenes[i], r, derive_seed(cfg.seed, &[2, i as u64, j as u64]))?);
        }
    }
    let mut sgd = Sgd::new(&store);
    let mut best = store.clone();
    let (mut best_epoch, mut best_iou) = (0, f64::NEG_INFINITY);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<(usize, usize)> = train_idx
            .iter()
            .flat_map(|&i| (0..cfg.patches_per_scene).map(move |j| (i, j)))
            .collect();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, &[3, epoch as u64])));
        let (mut sums, mut n_steps, mut degenerate) = ([0.0f64; 4], 0usize, 0usize);
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut pairs = Vec::with_capacity(chunk.len());
            for &(i, j) in chunk {
                let key = [4, epoch as u64, i as u64, j as u64];
                let p = random_pair(&scenes[i], r, derive_seed(cfg.seed, &key))?;
                pairs.push(if cfg.augment { augment(&p, derive_seed(cfg.seed, &[5, epoch as u64, i as u64, j as u64])) } else { p });
            }
            let refs: Vec<&PatchPair> = pairs.iter().collect();
            let batch = make_batch::<f32>(&refs)?;
            let out = forward_backward(&model, &store, &batch, &cfg.loss, derive_seed(cfg.seed, &[6, epoch as u64, s as u64]))?;
            if !out.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: s,
                    detail: format!("L_t={} L_c={} aux={}", out.l_t, out.l_c, out.aux),
                });
            }
            sgd.step(&mut store, &out.grads, lr, cfg.momentum, cfg.weight_decay);
            apply_bn_updates(&mut store, out.bn);
            degenerate += out.nce_degenerate as usize;
            for (acc, v) in sums.iter_mut().zip([out.l_t, out.l_c, out.aux, out.total]) {
                *acc += v;
            }
            n_steps += 1;
            steps.push(StepLog {
                epoch,
                step: steps.len(),
                l_t: out.l_t,
                l_c: out.l_c,
                aux: out.aux,
                total: out.total,
                lr,
            });
        }
        let val_macro_iou = if val_pairs.is_empty() {
            f64::NAN
        } else {
            patch_macro_iou(&model, &store, &val_pairs, cfg.batch_size)?
        };
        let mean = |v: f64| v / n_steps.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            l_t: mean(sums[0]),
            l_c: mean(sums[1]),
            aux: mean(sums[2]),
            total: mean(sums[3]),
            val_macro_iou,
            degenerate_steps: degenerate,
        };
        // without a validation split the last epoch wins
        if val_pairs.is_empty() || val_macro_iou > best_iou {
            best_iou = val_macro_iou;
            best_epoch = epoch;
            best = store.clone();
        }
        on_epoch(&log, &store)?;
        epochs.push(log);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        epochs,
        steps,
        train_scenes: train_idx,
        val_scenes: val_idx,
    })
}

/// Stitched zone map and front of a whole scene.
pub struct Prediction {
    pub zones: Raster<u8>,
    pub front: FrontSet,
}

/// Tile, predict every pair, stitch, clean up the ocean and extract the front.
pub fn predict_scene<T: Scalar>(model: &Model, store: &ParamStore<T>, scene: &Scene, chunk: usize) -> Result<Prediction> {
    let (layout, pairs) = tile_scene(scene, model.cfg.input_size)?;
    let maps = predict_pairs(model, store, &pairs, chunk)?;
    let zones = enhance_ocean(&stitch(&layout, &maps)?);
    let front = extract_front(&zones, scene.meters_per_pixel);
    Ok(Prediction { zones, front })
}

/// Per-scene results and the grouped report.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    scenes: &[(String, &Scene)],
    chunk: usize,
) -> Result<(Vec<ImageResult>, MetricsReport)> {
    let mut results = Vec::with_capacity(scenes.len());
    for (name, scene) in scenes {
        let pred = predict_scene(model, store, scene, chunk)?;
        results.push(ImageResult::new(
            name.clone(),
            scene.meta.clone(),
            &pred.zones,
            &scene.zones,
            scene.meters_per_pixel,
        )?);
    }
    let report = grouped_report(&results, &GroupKey::ALL);
    Ok((results, report))
}

/// One (hook, supervision) arm across seeds.
#[derive(Clone, Debug)]
pub struct AblationArm {
    pub hook: Option<HookType>,
    pub supervision: Supervision,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<Summary>,
}

/// Sample mean and standard deviation (n − 1).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, libm::sqrt(var))
}

impl AblationArm {
    pub fn label(&self) -> String {
        format!(
            "{}+{}",
            self.hook.map_or("none", HookType::name),
            self.supervision.name()
        )
    }

    /// `(mean, std)` of macro IoU, MDE and HD95 over seeds (runs with an
    /// undefined distance metric are left out of that metric).
    pub fn stats(&self) -> [(f64, f64); 3] {
        let iou: Vec<f64> = self.runs.iter().map(|s| s.seg.macro_avg.iou).collect();
        let mde: Vec<f64> = self.runs.iter().filter_map(|s| s.mde_m).collect();
        let hd: Vec<f64> = self.runs.iter().filter_map(|s| s.hd95_m).collect();
        [mean_std(&iou), mean_std(&mde), mean_std(&hd)]
    }
}

/// Trains and evaluates every `hooks × supervisions` arm for every seed.
/// A `None` hook is the plain U-Net, which only pairs with no supervision.
pub fn ablate(
    base: &TrainConfig,
    hooks: &[Option<HookType>],
    supervisions: &[Supervision],
    seeds: &[u64],
    train_scenes: &[Scene],
    test_scenes: &[(String, &Scene)],
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationArm>> {
    let mut arms = Vec::new();
    for &hook in hooks {
        for &supervision in supervisions {
            if hook.is_none() && supervision != Supervision::None {
                continue;
            }
            let mut config = base.clone();
            config.model.hook = hook;
            config.model.supervision = supervision;
            let mut arm = AblationArm {
                hook,
                supervision,
                config: config.clone(),
                seeds: seeds.to_vec(),
                runs: Vec::new(),
            };
            for &seed in seeds {
                let mut c = config.clone();
                c.seed = seed;
                progress(&arm.label(), seed);
                let out = train(&c, train_scenes, None, |_, _| Ok(()))?;
                let (_, report) = evaluate(&out.model, &out.best, test_scenes, c.batch_size)?;
                arm.runs.push(report.overall);
            }
            arms.push(arm);
        }
    }
    Ok(arms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_schedule_closed_form() {
        let c = TrainConfig::tiny();
        assert!((c.lr_at(10) - 0.01 * 0.9f64.powi(10)).abs() < 1e-15);
        assert!((c.lr_at(10) - 0.003487).abs() < 1e-6);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_indices(200, 0.1, 0);
        assert_eq!((a.len(), b.len()), (180, 20));
        assert!(b.iter().all(|i| !a.contains(i)));
        assert_eq!(split_indices(200, 0.1, 0), (a, b));
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec(&[1], alloc::vec![1.0]).unwrap(), ParamKind::Weight);
        let mut sgd = Sgd::new(&store);
        let g = alloc::vec![Some(Tensor::from_vec(&[1], alloc::vec![0.5]).unwrap())];
        sgd.step(&mut store, &g, 0.1, 0.9, 0.01);
        // v = 0.5 + 0.01·1 = 0.51, w = 1 − 0.051
        assert!((store.get(ParamId(0)).data()[0] - 0.949).abs() < 1e-12);
        sgd.step(&mut store, &g, 0.1, 0.9, 0.01);
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((store.get(ParamId(0)).data()[0] - (0.949 - 0.1 * v2)).abs() < 1e-12);
    }
}
