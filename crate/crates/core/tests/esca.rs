use frontnet_core::autodiff::Graph;
use frontnet_core::hooks::{concat_hook, Esca, Hook, HookShape, HookType, SaHook, SenetHook};
use frontnet_core::nn::{rng_from_seed, Ctx, ParamStore};
use frontnet_core::Tensor;
use rand::Rng;

const SHAPE: HookShape = HookShape {
    context_channels: 3,
    target_channels: 2,
    height: 4,
    width: 4,
    out_channels: 5,
};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn inputs(n: usize, s: &HookShape) -> (Tensor<f64>, Tensor<f64>) {
    (
        rand_tensor(&[n, s.context_channels, 2 * s.height, 2 * s.width], 11),
        rand_tensor(&[n, s.target_channels, s.height, s.width], 12),
    )
}

/// `concat(center crop of f_c, f_t)` by index arithmetic, `[n][c][l]`.
fn merged_oracle(fc: &Tensor<f64>, ft: &Tensor<f64>, s: &HookShape) -> Vec<Vec<Vec<f64>>> {
    let n = fc.shape()[0];
    let (h, w) = (s.height, s.width);
    let (cc, ct) = (s.context_channels, s.target_channels);
    (0..n)
        .map(|b| {
            (0..cc + ct)
                .map(|k| {
                    (0..h * w)
                        .map(|p| {
                            let (i, j) = (p / w, p % w);
                            if k < cc {
                                fc.data()[((b * cc + k) * 2 * h + i + h / 2) * 2 * w + j + w / 2]
                            } else {
                                ft.data()[((b * ct + k - cc) * h + i) * w + j]
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn run_esca(esca: &Esca, store: &ParamStore<f64>, fc: &Tensor<f64>, ft: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, store, false);
    let (a, b) = (ctx.g.constant(fc.clone()), ctx.g.constant(ft.clone()));
    let t = esca.forward_traced(&mut ctx, a, b).unwrap();
    (g.value(t.out).clone(), g.value(t.gate).clone(), g.value(t.s).clone())
}

fn fuse_oracle(w: &[f64], a: &[Vec<Vec<f64>>], cout: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for img in a {
        let cin = img.len();
        for o in 0..cout {
            for p in 0..img[0].len() {
                out.push((0..cin).map(|k| w[o * cin + k] * img[k][p]).sum());
            }
        }
    }
    out
}

#[test]
fn zero_theta_identity_fusion_is_gated_input() {
    let shape = HookShape {
        out_channels: SHAPE.merged(),
        ..SHAPE
    };
    let mut store = ParamStore::new();
    let esca = Esca::new(&mut store, &mut rng_from_seed(0), "h", shape);
    let c = shape.merged();
    *store.get_mut(esca.u) = rand_tensor(&[shape.positions(), c], 5);
    *store.get_mut(esca.fuse.w) = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let (fc, ft) = inputs(2, &shape);
    let (out, _, _) = run_esca(&esca, &store, &fc, &ft);
    let m = merged_oracle(&fc, &ft, &shape);
    let u = store.get(esca.u).data().to_vec();
    let gates: Vec<Vec<f64>> = u.chunks(c).map(softmax).collect();
    let mut want = Vec::new();
    for img in &m {
        for (k, ch) in img.iter().enumerate() {
            for (p, v) in ch.iter().enumerate() {
                want.push(gates[p][k] * v);
            }
        }
    }
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn zero_theta_uniform_gate_is_scaled_pointwise_conv() {
    let mut store = ParamStore::new();
    let esca = Esca::new(&mut store, &mut rng_from_seed(1), "h", SHAPE);
    *store.get_mut(esca.u) = Tensor::full(&[SHAPE.positions(), SHAPE.merged()], 0.37);
    let (fc, ft) = inputs(2, &SHAPE);
    let (out, gate, _) = run_esca(&esca, &store, &fc, &ft);
    let c = SHAPE.merged() as f64;
    let m: Vec<Vec<Vec<f64>>> = merged_oracle(&fc, &ft, &SHAPE)
        .into_iter()
        .map(|img| img.into_iter().map(|ch| ch.into_iter().map(|v| v / c).collect()).collect())
        .collect();
    let want = fuse_oracle(store.get(esca.fuse.w).data(), &m, SHAPE.out_channels);
    assert_eq!(out.shape(), [2, 5, 4, 4]);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9);
    }
    for row in gate.data().chunks(SHAPE.merged()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Depthwise 3×3 with zero padding on one channel plane.
fn depthwise(plane: &[f64], h: usize, w: usize, k: &[f64], b: f64) -> Vec<f64> {
    let mut out = vec![b; h * w];
    for i in 0..h {
        for j in 0..w {
            for di in 0..3 {
                for dj in 0..3 {
                    let (y, x) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        out[i * w + j] += k[di * 3 + dj] * plane[y as usize * w + x as usize];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn spatial_attention_matches_per_channel_oracle() {
    let mut store = ParamStore::new();
    let esca = Esca::new(&mut store, &mut rng_from_seed(2), "h", SHAPE);
    *store.get_mut(esca.theta) = Tensor::from_vec(&[1], vec![0.8]).unwrap();
    for (i, (_, b)) in esca.dw.iter().enumerate() {
        *store.get_mut(*b) = rand_tensor(&[SHAPE.merged()], 30 + i as u64);
    }
    let (fc, ft) = inputs(1, &SHAPE);
    let (_, _, s) = run_esca(&esca, &store, &fc, &ft);
    let m = merged_oracle(&fc, &ft, &SHAPE);
    let (h, w, c) = (SHAPE.height, SHAPE.width, SHAPE.merged());
    let scale = 1.0 / (c as f64).sqrt();
    for k in 0..c {
        let qkv: Vec<Vec<f64>> = esca
            .dw
            .iter()
            .map(|(wid, bid)| depthwise(&m[0][k], h, w, &store.get(*wid).data()[9 * k..9 * k + 9], store.get(*bid).data()[k]))
            .collect();
        for i in 0..h * w {
            let logits: Vec<f64> = (0..h * w).map(|j| qkv[0][i] * qkv[1][j] * scale).collect();
            let p = softmax(&logits);
            let att: f64 = p.iter().zip(&qkv[2]).map(|(a, v)| a * v).sum();
            let want = m[0][k][i] + 0.8 * att;
            let got = s.data()[k * h * w + i];
            assert!((got - want).abs() < 1e-12, "channel {k} position {i}: {got} vs {want}");
        }
    }
}

#[test]
fn merged_map_sizes_at_reference_scale() {
    let mut g = Graph::<f32>::inference();
    for (fc, ft, want) in [([1, 192, 28, 28], [1, 320, 14, 14], [1, 512, 14, 14]), ([1, 96, 56, 56], [1, 256, 28, 28], [1, 352, 28, 28])] {
        let a = g.constant(Tensor::zeros(&fc));
        let b = g.constant(Tensor::zeros(&ft));
        let m = concat_hook(&mut g, a, b).unwrap();
        assert_eq!(g.shape(m), want);
    }
    let a = g.constant(Tensor::zeros(&[1, 4, 6, 6]));
    let b = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
    assert!(concat_hook(&mut g, a, b).is_err());
}

#[test]
fn ablation_hooks_are_drop_in() {
    let (fc, ft) = inputs(2, &SHAPE);
    for kind in HookType::ALL {
        let mut store = ParamStore::<f64>::new();
        let hook = Hook::new(&mut store, &mut rng_from_seed(3), kind, "h", SHAPE);
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let (a, b) = (ctx.g.constant(fc.clone()), ctx.g.constant(ft.clone()));
        let y = hook.forward(&mut ctx, a, b).unwrap();
        assert_eq!(g.shape(y), [2, 5, 4, 4], "{}", kind.name());
        assert_eq!(hook.kind(), kind);
    }
}

#[test]
fn zero_gamma_self_attention_reduces_to_fusion() {
    let mut store = ParamStore::<f64>::new();
    let sa = SaHook::new(&mut store, &mut rng_from_seed(4), "h", SHAPE);
    let (fc, ft) = inputs(1, &SHAPE);
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let (a, b) = (ctx.g.constant(fc.clone()), ctx.g.constant(ft.clone()));
    let y = sa.forward(&mut ctx, a, b).unwrap();
    let want = fuse_oracle(store.get(sa.fuse.w).data(), &merged_oracle(&fc, &ft, &SHAPE), 5);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn squeeze_excitation_gate_is_a_probability() {
    let mut store = ParamStore::<f64>::new();
    let se = SenetHook::new(&mut store, &mut rng_from_seed(5), "h", SHAPE);
    let (fc, ft) = inputs(3, &SHAPE);
    let mut g = Graph::inference();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let (a, b) = (ctx.g.constant(fc), ctx.g.constant(ft));
    let (_, gate) = se.forward_gated(&mut ctx, a, b).unwrap();
    assert_eq!(g.shape(gate), [3, 5, 1, 1]);
    assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
}
