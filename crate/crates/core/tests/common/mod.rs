#![allow(dead_code)]

use frontnet_core::data::{generate_scene, make_batch, tile_scene, Batch, PatchPair};
use frontnet_core::model::ModelConfig;

/// Gradient-check geometry: the smallest patch the hook alignment allows at
/// window 7, with narrow channels.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        context_dim: 12,
        ..ModelConfig::tiny()
    }
}

/// Patches of a generated scene that contain at least `classes` classes.
pub fn rich_pairs(seed: u64, r: usize, classes: usize, n: usize) -> Vec<PatchPair> {
    let scene = generate_scene(seed, 4 * r, 4 * r, 20.0, r).unwrap();
    let (_, pairs) = tile_scene(&scene, r).unwrap();
    let mut picked: Vec<PatchPair> = pairs
        .into_iter()
        .filter(|p| {
            let mut seen = [false; 4];
            p.target_labels.data.iter().for_each(|&v| seen[v as usize] = true);
            seen.iter().filter(|&&s| s).count() >= classes
        })
        .take(n)
        .collect();
    assert!(!picked.is_empty(), "no patch with {classes} classes");
    while picked.len() < n {
        picked.push(picked[0].clone());
    }
    picked
}

pub fn batch_f64(pairs: &[PatchPair]) -> Batch<f64> {
    let refs: Vec<&PatchPair> = pairs.iter().collect();
    make_batch(&refs).unwrap()
}
