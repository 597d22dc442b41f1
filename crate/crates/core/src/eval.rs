//! Front post-processing and evaluation metrics.

use alloc::collections::BTreeMap;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Raster, SceneMeta, GLACIER, NUM_CLASSES, OCEAN};

/// Pixel coordinates `(row, col)` of a delineated front.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontSet {
    pub pixels: Vec<(usize, usize)>,
    pub meters_per_pixel: f64,
}

impl FrontSet {
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(h: usize, w: usize, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then(|| (nr as usize, nc as usize))
    })
}

/// 4-connected components of pixels equal to `class`; returns per-pixel
/// component ids (`usize::MAX` elsewhere) and component sizes.
pub fn components(map: &Raster<u8>, class: u8) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = map.shape();
    let mut id = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if map.data[start] != class || id[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        id[start] = label;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            for (nr, nc) in neighbors(h, w, p / w, p % w) {
                let q = nr * w + nc;
                if map.data[q] == class && id[q] == usize::MAX {
                    id[q] = label;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    (id, sizes)
}

/// Keeps the largest 4-connected ocean component (the first in raster order
/// on ties) and relabels every other ocean pixel as glacier.
pub fn enhance_ocean(map: &Raster<u8>) -> Raster<u8> {
    let (id, sizes) = components(map, OCEAN);
    let Some(keep) = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))) else {
        return map.clone();
    };
    let mut out = map.clone();
    for (v, &c) in out.data.iter_mut().zip(&id) {
        if c != usize::MAX && c != keep {
            *v = GLACIER;
        }
    }
    out
}

/// Glacier pixels with at least one ocean 4-neighbor.
pub fn extract_front(map: &Raster<u8>, meters_per_pixel: f64) -> FrontSet {
    let (h, w) = map.shape();
    let mut pixels = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) == GLACIER && neighbors(h, w, r, c).any(|(nr, nc)| map.get(nr, nc) == OCEAN) {
                pixels.push((r, c));
            }
        }
    }
    FrontSet { pixels, meters_per_pixel }
}

/// One-vs-rest confusion counts per class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl ClassScores {
    /// Ratios from counts; a class absent from both rasters scores 1 on all
    /// four, an empty denominator otherwise scores 0.
    pub fn from_confusion(c: Confusion) -> Self {
        if c.tp + c.fp + c.fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                iou: 1.0,
            };
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        }
    }

    fn mean(items: &[ClassScores]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Self::default();
        for s in items {
            m.precision += s.precision / n;
            m.recall += s.recall / n;
            m.f1 += s.f1 / n;
            m.iou += s.iou / n;
        }
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegMetrics {
    pub per_class: [ClassScores; NUM_CLASSES],
    pub macro_avg: ClassScores,
}

pub fn confusion(pred: &Raster<u8>, gt: &Raster<u8>) -> crate::Result<[Confusion; NUM_CLASSES]> {
    if pred.shape() != gt.shape() {
        return Err(crate::Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut out = [Confusion::default(); NUM_CLASSES];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        for (k, c) in out.iter_mut().enumerate() {
            let (pk, gk) = (p as usize == k, g as usize == k);
            match (pk, gk) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(out)
}

pub fn seg_metrics(pred: &Raster<u8>, gt: &Raster<u8>) -> crate::Result<SegMetrics> {
    let conf = confusion(pred, gt)?;
    let per_class = conf.map(ClassScores::from_confusion);
    Ok(SegMetrics {
        per_class,
        macro_avg: ClassScores::mean(&per_class),
    })
}

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[v[k]] == f64::INFINITY {
            v[k] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if f[v[0]] == f64::INFINITY {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared distance from every cell of an `h×w` grid to the nearest site.
pub fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// `min_{q∈Q} ‖p − q‖₂` in pixels for every `p ∈ P` (empty if `Q` is empty).
pub fn directed_distances(p: &[(usize, usize)], q: &[(usize, usize)]) -> Vec<f64> {
    if p.is_empty() || q.is_empty() {
        return Vec::new();
    }
    let all = p.iter().chain(q);
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &(r, c) in all {
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let local: Vec<(usize, usize)> = q.iter().map(|&(r, c)| (r - r0, c - c0)).collect();
    let d2 = squared_edt(h, w, &local);
    p.iter().map(|&(r, c)| libm::sqrt(d2[(r - r0) * w + (c - c0)])).collect()
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Variants of the per-image Hausdorff statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdMode {
    /// Max of the two directed 95th percentiles.
    Directed95,
    /// 95th percentile of both directions pooled into one multiset.
    Pooled95,
    /// Max of all directed distances.
    Exact,
}

/// Distances of one ground-truth/prediction front pair in both directions.
pub struct PairDistances {
    pub p_to_q: Vec<f64>,
    pub q_to_p: Vec<f64>,
    pub meters_per_pixel: f64,
}

impl PairDistances {
    pub fn new(p: &FrontSet, q: &FrontSet) -> Self {
        Self {
            p_to_q: directed_distances(&p.pixels, &q.pixels),
            q_to_p: directed_distances(&q.pixels, &p.pixels),
            meters_per_pixel: p.meters_per_pixel,
        }
    }

    /// In meters.
    pub fn hausdorff(&self, mode: HdMode) -> f64 {
        let px = match mode {
            HdMode::Directed95 => percentile(&self.p_to_q, 95.0).max(percentile(&self.q_to_p, 95.0)),
            HdMode::Pooled95 => {
                let all: Vec<f64> = self.p_to_q.iter().chain(&self.q_to_p).copied().collect();
                percentile(&all, 95.0)
            }
            HdMode::Exact => self.p_to_q.iter().chain(&self.q_to_p).fold(0.0f64, |m, &d| m.max(d)),
        };
        px * self.meters_per_pixel
    }
}

fn valid(pairs: &[(FrontSet, FrontSet)]) -> impl Iterator<Item = &(FrontSet, FrontSet)> {
    pairs.iter().filter(|(p, q)| !p.is_empty() && !q.is_empty())
}

/// Global mean distance error in meters: summed symmetric nearest-point
/// distances over all images divided by the total point count. Pairs with an
/// empty front are skipped; `None` when none remain.
pub fn mde(pairs: &[(FrontSet, FrontSet)]) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, q) in valid(pairs) {
        let d = PairDistances::new(p, q);
        sum += (d.p_to_q.iter().sum::<f64>() + d.q_to_p.iter().sum::<f64>()) * d.meters_per_pixel;
        count += p.len() + q.len();
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean over images of the per-image Hausdorff statistic, in meters.
pub fn hausdorff(pairs: &[(FrontSet, FrontSet)], mode: HdMode) -> Option<f64> {
    let v: Vec<f64> = valid(pairs).map(|(p, q)| PairDistances::new(p, q).hausdorff(mode)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn hd95(pairs: &[(FrontSet, FrontSet)]) -> Option<f64> {
    hausdorff(pairs, HdMode::Directed95)
}

/// Everything measured on one evaluated scene.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub name: String,
    pub meta: SceneMeta,
    pub seg: SegMetrics,
    pub gt_front: FrontSet,
    pub pred_front: FrontSet,
}

impl ImageResult {
    pub fn new(name: String, meta: SceneMeta, pred: &Raster<u8>, gt: &Raster<u8>, mpp: f64) -> crate::Result<Self> {
        Ok(Self {
            name,
            meta,
            seg: seg_metrics(pred, gt)?,
            gt_front: extract_front(&enhance_ocean(gt), mpp),
            pred_front: extract_front(pred, mpp),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupKey {
    Glacier,
    Season,
    Satellite,
    Resolution,
}

impl GroupKey {
    pub const ALL: [GroupKey; 4] = [GroupKey::Glacier, GroupKey::Season, GroupKey::Satellite, GroupKey::Resolution];

    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Glacier => "glacier",
            GroupKey::Season => "season",
            GroupKey::Satellite => "satellite",
            GroupKey::Resolution => "resolution",
        }
    }

    pub fn value(self, meta: &SceneMeta) -> String {
        match self {
            GroupKey::Glacier => meta.glacier_id.clone(),
            GroupKey::Season => meta.season.name().into(),
            GroupKey::Satellite => meta.satellite.clone(),
            GroupKey::Resolution => format!("{}", meta.resolution_class),
        }
    }
}

/// Aggregate of a set of images. Segmentation scores are per-image means;
/// MDE is pooled and HD95 is a per-image mean over images with both fronts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub images: usize,
    pub seg: SegMetrics,
    pub mde_m: Option<f64>,
    pub hd95_m: Option<f64>,
    pub hd_m: Option<f64>,
    /// Images with an empty predicted front.
    pub no_front: usize,
    /// Images whose ground truth has no front (excluded from distances).
    pub no_gt_front: usize,
}

pub fn summarize(results: &[&ImageResult]) -> Summary {
    let n = results.len();
    let mut seg = SegMetrics::default();
    for k in 0..NUM_CLASSES {
        let items: Vec<ClassScores> = results.iter().map(|r| r.seg.per_class[k]).collect();
        seg.per_class[k] = ClassScores::mean(&items);
    }
    let macros: Vec<ClassScores> = results.iter().map(|r| r.seg.macro_avg).collect();
    seg.macro_avg = ClassScores::mean(&macros);
    let pairs: Vec<(FrontSet, FrontSet)> = results
        .iter()
        .map(|r| (r.gt_front.clone(), r.pred_front.clone()))
        .collect();
    Summary {
        images: n,
        seg,
        mde_m: mde(&pairs),
        hd95_m: hd95(&pairs),
        hd_m: hausdorff(&pairs, HdMode::Exact),
        no_front: results.iter().filter(|r| r.pred_front.is_empty()).count(),
        no_gt_front: results.iter().filter(|r| r.gt_front.is_empty()).count(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub overall: Summary,
    /// `(key, value) → summary` restricted to that group.
    pub groups: BTreeMap<(GroupKey, String), Summary>,
}

pub fn grouped_report(results: &[ImageResult], keys: &[GroupKey]) -> MetricsReport {
    let all: Vec<&ImageResult> = results.iter().collect();
    let mut groups = BTreeMap::new();
    for &key in keys {
        let mut members: BTreeMap<String, Vec<&ImageResult>> = BTreeMap::new();
        for r in results {
            members.entry(key.value(&r.meta)).or_default().push(r);
        }
        for (value, rs) in members {
            groups.insert((key, value), summarize(&rs));
        }
    }
    MetricsReport {
        overall: summarize(&all),
        groups,
    }
}
