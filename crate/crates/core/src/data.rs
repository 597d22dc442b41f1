//! Scenes, synthetic scene generation, context/target patch pairing, tiling,
//! stitching and paired augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::rng_from_seed;
use crate::tensor::{Scalar, Tensor};

pub const NA: u8 = 0;
pub const ROCK: u8 = 1;
pub const GLACIER: u8 = 2;
pub const OCEAN: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}×{width} raster", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |r, c| self.get(row + r, col + c))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Symmetric mirror padding (`…, 1, 0 | 0, 1, …`) by `pad` on every side.
    pub fn mirror_pad(&self, pad: usize) -> Self {
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let period = 2 * n;
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        };
        Self::from_fn(self.height + 2 * pad, self.width + 2 * pad, |r, c| {
            let sr = reflect(r as isize - pad as isize, self.height);
            let sc = reflect(c as isize - pad as isize, self.width);
            self.get(sr, sc)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Season {
    Summer,
    Winter,
}

impl Season {
    pub fn name(self) -> &'static str {
        match self {
            Season::Summer => "summer",
            Season::Winter => "winter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "summer" => Some(Season::Summer),
            "winter" => Some(Season::Winter),
            _ => None,
        }
    }

    /// April–September is summer in the northern hemisphere; the rule is
    /// inverted in the southern one.
    pub fn from_month(month: u32, southern: bool) -> Self {
        let north_summer = (4..=9).contains(&month);
        if north_summer != southern {
            Season::Summer
        } else {
            Season::Winter
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub glacier_id: String,
    pub season: Season,
    pub satellite: String,
    /// Nominal resolution class in m/px, used as a grouping key.
    pub resolution_class: f64,
    /// `YYYY-MM-DD` when known.
    pub date: Option<String>,
}

/// A full grayscale raster with per-pixel zone labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Raster<u8>,
    pub zones: Raster<u8>,
    pub meters_per_pixel: f64,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn new(image: Raster<u8>, zones: Raster<u8>, meters_per_pixel: f64, meta: SceneMeta) -> Result<Self> {
        if image.shape() != zones.shape() {
            return Err(Error::Shape(format!(
                "image {:?} and zones {:?} differ",
                image.shape(),
                zones.shape()
            )));
        }
        if let Some(&bad) = zones.data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Input(format!("zone value {bad} outside 0..=3")));
        }
        if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
            return Err(Error::Input(format!("meters_per_pixel must be > 0, got {meters_per_pixel}")));
        }
        Ok(Self {
            image,
            zones,
            meters_per_pixel,
            meta,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

/// Glacier ids of the benchmark located in the southern hemisphere.
pub const SOUTHERN_GLACIERS: [&str; 5] = ["Crane", "DBE", "Jorum", "Mapple", "SI"];

/// Fields encoded in a benchmark file stem
/// `<glacier>_<YYYY-MM-DD>_<satellite>_<resolution>_<quality>[_<suffix>]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaffeName {
    pub glacier: String,
    pub date: String,
    pub month: u32,
    pub satellite: String,
    pub resolution: f64,
}

pub fn parse_caffe_name(stem: &str) -> Option<CaffeName> {
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() < 4 || parts[0].is_empty() {
        return None;
    }
    let date: Vec<&str> = parts[1].split('-').collect();
    if date.len() != 3 || date[0].len() != 4 {
        return None;
    }
    let _year: u32 = date[0].parse().ok()?;
    let month: u32 = date[1].parse().ok()?;
    let day: u32 = date[2].parse().ok()?;
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) || parts[2].is_empty() {
        return None;
    }
    let resolution: f64 = parts[3].parse().ok()?;
    if !(resolution > 0.0) {
        return None;
    }
    Some(CaffeName {
        glacier: parts[0].into(),
        date: parts[1].into(),
        month,
        satellite: parts[2].into(),
        resolution,
    })
}

impl CaffeName {
    pub fn meta(&self) -> SceneMeta {
        let southern = SOUTHERN_GLACIERS.contains(&self.glacier.as_str());
        SceneMeta {
            glacier_id: self.glacier.clone(),
            season: Season::from_month(self.month, southern),
            satellite: self.satellite.clone(),
            resolution_class: self.resolution,
            date: Some(self.date.clone()),
        }
    }
}

const SATELLITES: [&str; 5] = ["ERS", "ENVISAT", "RSAT-1", "TSX", "S1"];

/// Smooth unit-variance noise: Gaussian values on a coarse lattice with
/// spacing `cell`, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = r as f64 / cell as f64;
        let y0 = fy as usize;
        let ty = fy - y0 as f64;
        for c in 0..w {
            let fx = c as f64 / cell as f64;
            let x0 = fx as usize;
            let tx = fx - x0 as f64;
            let at = |y: usize, x: usize| lattice[y * gw + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Procedural scene: land on one side of a meandering calving front, ocean
/// (with brighter ice melange near the front) on the other, rock outcrops
/// inside the glacier and a no-data band along the land-side border.
/// Requires both sides to be at least `4·patch`.
pub fn generate_scene(seed: u64, height: usize, width: usize, meters_per_pixel: f64, patch: usize) -> Result<Scene> {
    let min = 4 * patch;
    if height < min || width < min {
        return Err(Error::SceneTooSmall { height, width, min });
    }
    if !(meters_per_pixel > 0.0) {
        return Err(Error::Input(format!("meters_per_pixel must be > 0, got {meters_per_pixel}")));
    }
    let mut rng = rng_from_seed(seed ^ 0x5ce7_e5ce_7e5c_e7e5);
    // Canonical layout: front runs top to bottom, ocean to the right. A
    // random flip/transposition is applied at the end.
    let transpose = height == width && rng.random_bool(0.5);
    let (h, w) = if transpose { (width, height) } else { (height, width) };
    let tau = core::f64::consts::TAU;
    let (f1, f2) = (rng.random_range(0.5..1.5), rng.random_range(2.0..4.0));
    let (p1, p2) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let (a1, a2) = (rng.random_range(0.06..0.14), rng.random_range(0.02..0.05));
    let centre = rng.random_range(0.5..0.65);
    let jag = value_noise(&mut rng, h, 1, 6);
    let front: Vec<f64> = (0..h)
        .map(|r| {
            let t = r as f64 / h as f64;
            w as f64 * (centre + a1 * libm::sin(tau * f1 * t + p1) + a2 * libm::sin(tau * f2 * t + p2)) + 3.0 * jag[r]
        })
        .collect();
    let na_base = rng.random_range(0.03..0.08) * w as f64;
    let na_wave = value_noise(&mut rng, h, 1, 40);
    let na_edge: Vec<f64> = (0..h).map(|r| na_base + 0.02 * w as f64 * na_wave[r]).collect();
    let n_rocks = rng.random_range(2..=4);
    let rocks: Vec<(f64, f64, f64, f64)> = (0..n_rocks)
        .map(|_| {
            let cy = rng.random_range(0.1..0.9) * h as f64;
            let lo = na_base + 0.05 * w as f64;
            let hi = (front[cy as usize] - 0.12 * w as f64).max(lo + 1.0);
            let cx = rng.random_range(lo..hi);
            let ry = rng.random_range(0.03..0.08) * h as f64;
            let rx = rng.random_range(0.03..0.08) * w as f64;
            (cy, cx, ry, rx)
        })
        .collect();
    let mut zones = Raster::filled(h, w, GLACIER);
    for r in 0..h {
        for c in 0..w {
            let x = c as f64;
            let z = if x >= front[r] {
                OCEAN
            } else if x < na_edge[r] {
                NA
            } else if x < front[r] - 8.0
                && rocks.iter().any(|&(cy, cx, ry, rx)| {
                    let (dy, dx) = ((r as f64 - cy) / ry, (x - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                })
            {
                ROCK
            } else {
                GLACIER
            };
            zones.set(r, c, z);
        }
    }
    let smooth = value_noise(&mut rng, h, w, 12);
    let fine = value_noise(&mut rng, h, w, 3);
    let mut image = Raster::filled(h, w, 0u8);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let white: f64 = StandardNormal.sample(&mut rng);
            let v = match zones.get(r, c) {
                NA => 0.0,
                ROCK => 135.0 + 30.0 * smooth[i] + 25.0 * fine[i] + 12.0 * white,
                GLACIER => 190.0 + 12.0 * smooth[i] + 6.0 * fine[i] + 8.0 * white,
                _ => {
                    let dist = c as f64 - front[r];
                    let melange = 70.0 * libm::exp(-dist / 14.0) * (0.6 + 0.25 * fine[i]);
                    60.0 + 12.0 * smooth[i] + melange + 14.0 * white
                }
            };
            let v = if zones.get(r, c) == NA { 0.0 } else { v.clamp(1.0, 255.0) };
            image.set(r, c, libm::round(v) as u8);
        }
    }
    let (flip_r, flip_c) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let orient = |src: &Raster<u8>| {
        Raster::from_fn(height, width, |r, c| {
            let (r, c) = if transpose { (c, r) } else { (r, c) };
            let r = if flip_r { h - 1 - r } else { r };
            let c = if flip_c { w - 1 - c } else { c };
            src.get(r, c)
        })
    };
    let season = if rng.random_bool(0.5) { Season::Summer } else { Season::Winter };
    let meta = SceneMeta {
        glacier_id: format!("synthetic-{}", seed % 4),
        season,
        satellite: SATELLITES[rng.random_range(0..SATELLITES.len())].into(),
        resolution_class: meters_per_pixel,
        date: None,
    };
    Scene::new(orient(&image), orient(&zones), meters_per_pixel, meta)
}

/// Aligned context/target inputs and labels. All rasters are `r×r`; the
/// context ones cover the `2r×2r` window centered on the target window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub target_image: Raster<f32>,
    pub context_image: Raster<f32>,
    pub target_labels: Raster<u8>,
    pub context_labels: Raster<u8>,
    pub origin: (usize, usize),
}

/// Cuts the pair whose target window starts at `origin`. `padded_image` and
/// `padded_zones` are the scene mirror-padded by `r/2`.
fn pair_from_padded(
    padded_image: &Raster<u8>,
    padded_zones: &Raster<u8>,
    origin: (usize, usize),
    r: usize,
) -> PatchPair {
    let pad = r / 2;
    let (row, col) = origin;
    let target_image = Raster::from_fn(r, r, |i, j| padded_image.get(row + pad + i, col + pad + j) as f32);
    let target_labels = Raster::from_fn(r, r, |i, j| padded_zones.get(row + pad + i, col + pad + j));
    let context_image = Raster::from_fn(r, r, |i, j| {
        let (y, x) = (row + 2 * i, col + 2 * j);
        let s = padded_image.get(y, x) as f32
            + padded_image.get(y, x + 1) as f32
            + padded_image.get(y + 1, x) as f32
            + padded_image.get(y + 1, x + 1) as f32;
        s / 4.0
    });
    let context_labels = Raster::from_fn(r, r, |i, j| padded_zones.get(row + 2 * i + 1, col + 2 * j + 1));
    PatchPair {
        target_image,
        context_image,
        target_labels,
        context_labels,
        origin,
    }
}

fn check_patch(r: usize) -> Result<()> {
    if r < 2 || r % 2 != 0 {
        return Err(Error::Config(format!("patch size must be even and ≥ 2, got {r}")));
    }
    Ok(())
}

/// Target window at `origin`, context window `2r×2r` around it
/// (area-averaged images, nearest labels) from the mirror-padded scene.
pub fn make_pair(scene: &Scene, origin: (usize, usize), r: usize) -> Result<PatchPair> {
    check_patch(r)?;
    let (height, width) = scene.shape();
    if origin.0 + r > height || origin.1 + r > width {
        return Err(Error::OutOfBounds {
            row: origin.0,
            col: origin.1,
            height,
            width,
            patch: r,
        });
    }
    let pad = r / 2;
    Ok(pair_from_padded(
        &scene.image.mirror_pad(pad),
        &scene.zones.mirror_pad(pad),
        origin,
        r,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileLayout {
    pub scene_shape: (usize, usize),
    pub patch_size: usize,
    pub pad: usize,
    pub positions: Vec<(usize, usize)>,
}

/// Window origins `0, r, 2r, …` with a final window flush with the border
/// when `n` is not a multiple of `r`.
pub fn axis_origins(n: usize, r: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n / r).map(|i| i * r).collect();
    if n % r != 0 {
        v.push(n - r);
    }
    v
}

pub fn tile_layout(shape: (usize, usize), r: usize) -> Result<TileLayout> {
    check_patch(r)?;
    if shape.0 < r || shape.1 < r {
        return Err(Error::Input(format!("scene {shape:?} smaller than one {r}×{r} patch")));
    }
    let cols = axis_origins(shape.1, r);
    let positions = axis_origins(shape.0, r)
        .into_iter()
        .flat_map(|row| cols.iter().map(move |&c| (row, c)))
        .collect();
    Ok(TileLayout {
        scene_shape: shape,
        patch_size: r,
        pad: r / 2,
        positions,
    })
}

/// Non-overlapping tiling in row-major order, flush windows at the far edges.
pub fn tile_scene(scene: &Scene, r: usize) -> Result<(TileLayout, Vec<PatchPair>)> {
    let layout = tile_layout(scene.shape(), r)?;
    let pi = scene.image.mirror_pad(layout.pad);
    let pz = scene.zones.mirror_pad(layout.pad);
    let pairs = layout.positions.iter().map(|&o| pair_from_padded(&pi, &pz, o, r)).collect();
    Ok((layout, pairs))
}

/// Reassembles patch maps in layout order; later windows overwrite earlier
/// ones where flush edge windows overlap.
pub fn stitch<T: Copy + Default>(layout: &TileLayout, maps: &[Raster<T>]) -> Result<Raster<T>> {
    if maps.len() != layout.positions.len() {
        return Err(Error::Shape(format!(
            "{} patch maps for {} layout positions",
            maps.len(),
            layout.positions.len()
        )));
    }
    let r = layout.patch_size;
    let (h, w) = layout.scene_shape;
    let mut out = Raster::filled(h, w, T::default());
    for (&(row, col), m) in layout.positions.iter().zip(maps) {
        if m.shape() != (r, r) {
            return Err(Error::Shape(format!("patch map {:?}, expected ({r}, {r})", m.shape())));
        }
        for i in 0..r {
            let dst = (row + i) * w + col;
            out.data[dst..dst + r].copy_from_slice(&m.data[i * r..(i + 1) * r]);
        }
    }
    Ok(out)
}

/// Rotation (degrees, counter-clockwise about the patch centre) followed by
/// optional flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            hflip: false,
            vflip: false,
        }
    }

    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            angle_deg: rng.random_range(0.0..360.0),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
        }
    }

    /// Source coordinate (row, col) sampled by output pixel `(r, c)` of an
    /// `n×n` raster.
    fn source(&self, n: usize, r: usize, c: usize) -> (f64, f64) {
        let m = (n - 1) as f64;
        let r = if self.vflip { m - r as f64 } else { r as f64 };
        let c = if self.hflip { m - c as f64 } else { c as f64 };
        let centre = m / 2.0;
        let (dy, dx) = (r - centre, c - centre);
        let t = self.angle_deg.to_radians();
        let (s, co) = (libm::sin(t), libm::cos(t));
        // inverse of a counter-clockwise rotation in (x right, y down) coordinates
        (centre + co * dy - s * dx, centre + s * dy + co * dx)
    }

    fn nearest(&self, n: usize, r: usize, c: usize) -> Option<(usize, usize)> {
        let (y, x) = self.source(n, r, c);
        let (y, x) = (libm::round(y), libm::round(x));
        let inside = |v: f64| v >= 0.0 && v <= (n - 1) as f64;
        (inside(y) && inside(x)).then(|| (y as usize, x as usize))
    }

    pub fn apply_labels(&self, src: &Raster<u8>) -> Raster<u8> {
        let n = src.height;
        Raster::from_fn(n, n, |r, c| match self.nearest(n, r, c) {
            Some((y, x)) => src.get(y, x),
            None => NA,
        })
    }

    pub fn apply_image(&self, src: &Raster<f32>) -> Raster<f32> {
        let n = src.height;
        let last = n - 1;
        Raster::from_fn(n, n, |r, c| {
            if self.nearest(n, r, c).is_none() {
                return 0.0;
            }
            let (y, x) = self.source(n, r, c);
            let (y, x) = (y.clamp(0.0, last as f64), x.clamp(0.0, last as f64));
            let (y0, x0) = (y as usize, x as usize);
            let (y1, x1) = ((y0 + 1).min(last), (x0 + 1).min(last));
            let (ty, tx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            let top = src.get(y0, x0) * (1.0 - tx) + src.get(y0, x1) * tx;
            let bot = src.get(y1, x0) * (1.0 - tx) + src.get(y1, x1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    pub fn apply(&self, pair: &PatchPair) -> PatchPair {
        PatchPair {
            target_image: self.apply_image(&pair.target_image),
            context_image: self.apply_image(&pair.context_image),
            target_labels: self.apply_labels(&pair.target_labels),
            context_labels: self.apply_labels(&pair.context_labels),
            origin: pair.origin,
        }
    }
}

/// Random rotation in `[0°, 360°)` plus independent horizontal and vertical
/// flips, applied identically to all four rasters.
pub fn augment(pair: &PatchPair, seed: u64) -> PatchPair {
    Augmentation::sample(seed).apply(pair)
}

/// Maps 8-bit intensities to `[-1, 1]`.
pub fn normalize_intensity(v: f32) -> f32 {
    (v / 255.0 - 0.5) / 0.5
}

/// Network inputs for a batch of pairs: context and target images as
/// `[N, 3, r, r]` (gray replicated to three channels) and flattened labels.
pub struct Batch<T> {
    pub context: Tensor<T>,
    pub target: Tensor<T>,
    pub y_t: Vec<u8>,
    pub y_c: Vec<u8>,
}

pub fn make_batch<T: Scalar>(pairs: &[&PatchPair]) -> Result<Batch<T>> {
    let Some(first) = pairs.first() else {
        return Err(Error::Input("empty batch".into()));
    };
    let r = first.target_image.height;
    let n = pairs.len();
    let plane = r * r;
    let mut context = vec![T::zero(); n * 3 * plane];
    let mut target = vec![T::zero(); n * 3 * plane];
    let mut y_t = Vec::with_capacity(n * plane);
    let mut y_c = Vec::with_capacity(n * plane);
    for (b, p) in pairs.iter().enumerate() {
        if p.target_image.shape() != (r, r) || p.context_image.shape() != (r, r) {
            return Err(Error::Shape("pairs of different sizes in one batch".into()));
        }
        for ch in 0..3 {
            let base = (b * 3 + ch) * plane;
            for i in 0..plane {
                context[base + i] = T::from_f64_lossy(normalize_intensity(p.context_image.data[i]) as f64);
                target[base + i] = T::from_f64_lossy(normalize_intensity(p.target_image.data[i]) as f64);
            }
        }
        y_t.extend_from_slice(&p.target_labels.data);
        y_c.extend_from_slice(&p.context_labels.data);
    }
    Ok(Batch {
        context: Tensor::from_vec(&[n, 3, r, r], context)?,
        target: Tensor::from_vec(&[n, 3, r, r], target)?,
        y_t,
        y_c,
    })
}
