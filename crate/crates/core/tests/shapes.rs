use frontnet_core::autodiff::Graph;
use frontnet_core::model::{Model, ModelConfig};
use frontnet_core::nn::Ctx;
use frontnet_core::Tensor;

/// Layer sizes (h, w, c) of the reference configuration, context then target.
const CONTEXT_ROWS: [(&str, [usize; 3]); 10] = [
    ("Patch Embedding", [56, 56, 96]),
    ("Stage 1", [56, 56, 96]),
    ("Stage 2", [28, 28, 192]),
    ("Stage 3", [14, 14, 384]),
    ("Stage 4", [7, 7, 768]),
    ("Stage 5", [14, 14, 384]),
    ("Stage 6", [28, 28, 192]),
    ("Stage 7", [56, 56, 96]),
    ("Patch Expanding", [224, 224, 96]),
    ("Patch Projection", [224, 224, 4]),
];

const TARGET_ROWS: [(&str, [usize; 3]); 10] = [
    ("Convolution Block 1", [224, 224, 32]),
    ("Convolution Block 2", [112, 112, 64]),
    ("Convolution Block 3", [56, 56, 128]),
    ("Convolution Block 4", [28, 28, 256]),
    ("Convolution Block 5", [14, 14, 320]),
    ("Convolution Block 6", [28, 28, 256]),
    ("Convolution Block 7", [56, 56, 128]),
    ("Convolution Block 8", [112, 112, 64]),
    ("Convolution Block 9", [224, 224, 32]),
    ("Prediction Head", [224, 224, 4]),
];

#[test]
fn reference_scale_trace_matches_every_row() {
    let cfg = ModelConfig::paper();
    let (model, store) = Model::new::<f32>(cfg, 0).unwrap();
    let img = Tensor::from_fn(&[1, 3, 224, 224], |i| ((i * 31) % 97) as f32 / 97.0 - 0.5);
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let c = ctx.g.constant(img.clone());
    let t = ctx.g.constant(img);
    let out = model.forward(&mut ctx, c, t).unwrap();
    let got: Vec<(String, [usize; 3])> = out.context_trace.iter().chain(&out.target_trace).cloned().collect();
    let want: Vec<(String, [usize; 3])> = CONTEXT_ROWS.iter().chain(&TARGET_ROWS).map(|(n, s)| (n.to_string(), *s)).collect();
    assert_eq!(got, want);
}

#[test]
fn hook_merged_maps_at_reference_scale() {
    let shapes = ModelConfig::paper().hook_shapes();
    let merged: Vec<[usize; 3]> = shapes.iter().map(|s| [s.height, s.width, s.context_channels + s.target_channels]).collect();
    assert_eq!(merged, [[14, 14, 512], [28, 28, 352]]);
}
