//! Property and invariant tests: per-primitive gradient checks against
//! central finite differences, replay determinism, layout bijections, and
//! model-level structural properties.

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;

use distillforge_core::gradcheck::finite_diff_check;
use distillforge_core::graph::{Graph, NodeRef};
use distillforge_core::kernels::ConvGeom;
use distillforge_core::model::{self, ModelConfig};
use distillforge_core::params::{Layout, ParamVector};
use distillforge_core::rng::stream;
use distillforge_core::tensor::Tensor;
use distillforge_core::Result;

const PRIMITIVE_TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], label: &str, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = stream(4242, label);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks d(sum((r * f(x))^2))/dx against central differences. The fixed
/// random weights `r` break symmetries (normalization layers are nearly
/// scale-invariant, so an unweighted sum of squares has a degenerate,
/// ill-conditioned gradient).
fn check_primitive<Build>(name: &str, x: Tensor<f64>, build: Build)
where
    Build: Fn(&mut Graph<f64>, NodeRef) -> Result<NodeRef>,
{
    let err = finite_diff_check(
        |g, leaf| {
            let y = build(g, leaf)?;
            let weights = rand_tensor(g.value(y).shape(), "objective-weights", 0.25, 1.0);
            let r = g.constant(weights);
            let w = g.mul(y, r)?;
            let sq = g.mul(w, w)?;
            g.sum_all(sq)
        },
        &x,
        1e-6,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err < PRIMITIVE_TOL, "{name}: relative error {err}");
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let x = rand_tensor(&[2, 3], "ew", -1.5, 1.5);
    let c = rand_tensor(&[2, 3], "ew-const", -1.0, 1.0);
    check_primitive("add", x.clone(), |g, leaf| {
        let k = g.constant(c.clone());
        g.add(leaf, k)
    });
    check_primitive("sub", x.clone(), |g, leaf| {
        let k = g.constant(c.clone());
        g.sub(leaf, k)
    });
    check_primitive("sub_rhs", x.clone(), |g, leaf| {
        let k = g.constant(c.clone());
        g.sub(k, leaf)
    });
    check_primitive("mul", x.clone(), |g, leaf| {
        let k = g.constant(c.clone());
        g.mul(leaf, k)
    });
    let denom = rand_tensor(&[2, 3], "ew-denom", 0.5, 2.0);
    check_primitive("div_lhs", x.clone(), |g, leaf| {
        let k = g.constant(denom.clone());
        g.div(leaf, k)
    });
    check_primitive("div_rhs", denom.clone(), |g, leaf| {
        let k = g.constant(x.clone());
        g.div(k, leaf)
    });
    check_primitive("neg", x.clone(), |g, leaf| g.neg(leaf));
    check_primitive("exp", x.clone(), |g, leaf| g.exp(leaf));
    let pos = rand_tensor(&[2, 3], "ew-pos", 0.2, 3.0);
    check_primitive("ln", pos.clone(), |g, leaf| g.ln(leaf));
    check_primitive("sqrt", pos, |g, leaf| g.sqrt(leaf));
    // keep inputs away from the kink
    let off_kink = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_primitive("relu", off_kink, |g, leaf| g.relu(leaf));
    check_primitive("scale", x.clone(), |g, leaf| g.scale(leaf, -1.7));
    check_primitive("add_const", x, |g, leaf| g.add_const(leaf, 0.9));
}

#[test]
fn linear_algebra_primitives_match_finite_differences() {
    let a = rand_tensor(&[3, 4], "mm-a", -1.0, 1.0);
    let b = rand_tensor(&[4, 2], "mm-b", -1.0, 1.0);
    check_primitive("matmul_lhs", a.clone(), |g, leaf| {
        let k = g.constant(b.clone());
        g.matmul(leaf, k)
    });
    check_primitive("matmul_rhs", b, |g, leaf| {
        let k = g.constant(a.clone());
        g.matmul(k, leaf)
    });
    let x = rand_tensor(&[2, 3, 4], "perm", -1.0, 1.0);
    check_primitive("permute", x.clone(), |g, leaf| g.permute(leaf, &[2, 0, 1]));
    check_primitive("reshape", x.clone(), |g, leaf| g.reshape(leaf, &[4, 6]));
    let small = rand_tensor(&[3, 1], "bc", -1.0, 1.0);
    check_primitive("broadcast_to", small, |g, leaf| {
        g.broadcast_to(leaf, &[2, 3, 4])
    });
    check_primitive("sum_to", x, |g, leaf| g.sum_to(leaf, &[3, 1]));
}

#[test]
fn structural_primitives_match_finite_differences() {
    let x = rand_tensor(&[4, 3], "cat", -1.0, 1.0);
    let other = rand_tensor(&[2, 3], "cat-b", -1.0, 1.0);
    check_primitive("concat0", x.clone(), |g, leaf| {
        let k = g.constant(other.clone());
        g.concat0(&[k, leaf])
    });
    check_primitive("slice0", x.clone(), |g, leaf| g.slice0(leaf, 1, 2));
    let idx = Arc::new(vec![2usize, 0, 2, 3]);
    check_primitive("index_select0", x.clone(), |g, leaf| {
        g.index_select0(leaf, Arc::clone(&idx))
    });
    let small = rand_tensor(&[4, 3], "scat", -1.0, 1.0);
    check_primitive("index_scatter_add0", small, |g, leaf| {
        g.index_scatter_add0(leaf, Arc::clone(&idx), 6)
    });
}

#[test]
fn image_primitives_match_finite_differences() {
    let x = rand_tensor(&[2, 2, 4, 4], "img", -1.0, 1.0);
    let geom = ConvGeom {
        batch: 2,
        channels: 2,
        height: 4,
        width: 4,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        pad: 1,
    };
    check_primitive("im2col", x.clone(), move |g, leaf| g.im2col(leaf, geom));
    let cols = rand_tensor(&[18, 32], "cols", -1.0, 1.0);
    check_primitive("col2im", cols, move |g, leaf| g.col2im(leaf, geom));
    check_primitive("avg_pool", x.clone(), |g, leaf| g.avg_pool(leaf, 2));
    let pooled = rand_tensor(&[2, 2, 2, 2], "pooled", -1.0, 1.0);
    check_primitive("avg_pool_back", pooled, |g, leaf| {
        g.avg_pool_back(leaf, 2, 4, 4)
    });

    let grid = rand_tensor(&[2, 3, 3, 2], "grid", -0.7, 4.3);
    check_primitive("grid_sample", x.clone(), |g, leaf| {
        let k = g.constant(grid.clone());
        g.grid_sample(leaf, k)
    });
    let gout = rand_tensor(&[2, 2, 3, 3], "gout", -1.0, 1.0);
    check_primitive("grid_sample_back", gout, |g, leaf| {
        let k = g.constant(grid.clone());
        g.grid_sample_back(leaf, k, 4, 4)
    });
}

#[test]
fn composite_blocks_match_finite_differences() {
    let x = rand_tensor(&[2, 1, 4, 4], "conv-x", -1.0, 1.0);
    let w = rand_tensor(&[3, 1, 3, 3], "conv-w", -0.5, 0.5);
    let bias = rand_tensor(&[3], "conv-b", -0.5, 0.5);
    check_primitive("conv2d_input", x.clone(), |g, leaf| {
        let kw = g.constant(w.clone());
        let kb = g.constant(bias.clone());
        g.conv2d(leaf, kw, Some(kb), 1, 1)
    });
    check_primitive("conv2d_kernel", w.clone(), |g, leaf| {
        let kx = g.constant(x.clone());
        let kb = g.constant(bias.clone());
        g.conv2d(kx, leaf, Some(kb), 1, 1)
    });
    check_primitive("instance_norm", x.clone(), |g, leaf| {
        g.instance_norm(leaf, 1e-5)
    });
    let logits = rand_tensor(&[3, 4], "ce-logits", -2.0, 2.0);
    let onehot = distillforge_core::data::one_hot::<f64>(&[1, 3, 0], 4);
    let err = finite_diff_check(
        |g, leaf| {
            let y = g.constant(onehot.clone());
            g.softmax_cross_entropy_mean(leaf, y)
        },
        &logits,
        1e-6,
    )
    .unwrap();
    assert!(err < PRIMITIVE_TOL, "softmax_ce: {err}");
}

#[test]
fn second_derivatives_match_closed_forms() {
    // y = 3x^3 - 2x: y'' = 18x, checked at several points
    for &v in &[-1.3f64, -0.2, 0.7, 2.1] {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(v));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let t1 = g.scale(x3, 3.0).unwrap();
        let t2 = g.scale(x, 2.0).unwrap();
        let y = g.sub(t1, t2).unwrap();
        let d1 = g.grad(y, &[x], true).unwrap()[0];
        let expect_d1 = 9.0 * v * v - 2.0;
        assert!((g.value(d1).item().unwrap() - expect_d1).abs() < 1e-10);
        let d2 = g.grad(d1, &[x], false).unwrap()[0];
        assert!((g.value(d2).item().unwrap() - 18.0 * v).abs() < 1e-10);
    }
}

#[test]
fn second_derivative_through_exp_matches() {
    // y = exp(x^2): y'' = (2 + 4x^2) exp(x^2)
    let v = 0.6f64;
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(v));
    let x2 = g.mul(x, x).unwrap();
    let y = g.exp(x2).unwrap();
    let d1 = g.grad(y, &[x], true).unwrap()[0];
    let d2 = g.grad(d1, &[x], false).unwrap()[0];
    let expect = (2.0 + 4.0 * v * v) * (v * v).exp();
    assert!((g.value(d2).item().unwrap() - expect).abs() < 1e-10);
}

#[test]
fn forward_is_batch_permutation_equivariant() {
    let cfg = ModelConfig {
        depth: 2,
        width: 3,
        in_channels: 1,
        height: 8,
        width_px: 8,
        class_count: 3,
    };
    let m = model::build::<f64>(&cfg, 5).unwrap();
    let batch = rand_tensor(&[5, 1, 8, 8], "perm-batch", 0.0, 1.0);
    let logits = m.forward(&batch).unwrap();
    let perm = [3usize, 0, 4, 1, 2];
    let shuffled = distillforge_core::kernels::index_select0(&batch, &perm).unwrap();
    let logits_shuffled = m.forward(&shuffled).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        for c in 0..3 {
            let a = logits_shuffled.data()[row * 3 + c];
            let b = logits.data()[src * 3 + c];
            assert!(
                distillforge_core::gradcheck::relative_error(a, b) < 1e-9,
                "row {row} class {c}: {a} vs {b}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flatten_unflatten_bijection(
        lens in proptest::collection::vec(1usize..6, 1..5),
        seed in 0u64..1000,
    ) {
        let shapes: Vec<(String, Vec<usize>)> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| (format!("p{i}"), vec![l, 2]))
            .collect();
        let layout = Arc::new(Layout::new(shapes));
        let mut rng = stream(seed, "bijection");
        let data: Vec<f32> = (0..layout.total_len()).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let pv = ParamVector::new(Tensor::from_vec(data), Arc::clone(&layout)).unwrap();
        let parts = pv.unflatten();
        let back = ParamVector::flatten(&parts, layout).unwrap();
        prop_assert_eq!(back.data().data(), pv.data().data());
    }

    #[test]
    fn graph_forward_replay_is_bit_identical(seed in 0u64..1000) {
        let run = |seed: u64| -> Vec<f32> {
            let mut rng = stream(seed, "replay");
            let data: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::<f32>::new();
            let x = g.param(Tensor::new(vec![2, 3, 4], data).unwrap());
            let e = g.exp(x).unwrap();
            let s = g.sum_to(e, &[2, 1, 1]).unwrap();
            let b = g.broadcast_to(s, &[2, 3, 4]).unwrap();
            let d = g.div(e, b).unwrap();
            let m = g.reshape(d, &[6, 4]).unwrap();
            let mt = g.permute(m, &[1, 0]).unwrap();
            let mm = g.matmul(m, mt).unwrap();
            g.value(mm).data().to_vec()
        };
        prop_assert_eq!(run(seed), run(seed));
    }

    #[test]
    fn param_count_formula_matches_runtime_layout(
        depth in 1usize..4,
        width in 1usize..6,
        in_channels in 1usize..3,
        classes in 2usize..5,
        scale in 0usize..3,
        seed in 0u64..10_000,
    ) {
        let side = (1usize << depth) * (1 + scale);
        let cfg = ModelConfig {
            depth,
            width,
            in_channels,
            height: side,
            width_px: side,
            class_count: classes,
        };
        prop_assert!(cfg.validate().is_ok());
        prop_assert_eq!(cfg.param_count(), cfg.layout().total_len());
        let model = model::build::<f32>(&cfg, seed).unwrap();
        prop_assert_eq!(model.params.len(), cfg.param_count());
    }

    #[test]
    fn no_dead_parameters_in_small_configs(
        coord_seed in 0u64..500,
    ) {
        let cfg = ModelConfig {
            depth: 1,
            width: 2,
            in_channels: 1,
            height: 4,
            width_px: 4,
            class_count: 2,
        };
        let m = model::build::<f64>(&cfg, 1).unwrap();
        let batch = rand_tensor(&[2, 1, 4, 4], "dead-params", 0.1, 1.0);
        let base = m.forward(&batch).unwrap();
        let mut rng = stream(coord_seed, "coordinate");
        let coord = rng.gen_range(0..m.params.len());
        let bumped = m.params.data().with_element(
            coord,
            m.params.data().data()[coord] + 0.35,
        );
        let parts = ParamVector::new(bumped, Arc::clone(m.params.layout())).unwrap();
        let changed = model::Model { config: cfg, params: parts }
            .forward(&batch)
            .unwrap();
        let moved = base
            .data()
            .iter()
            .zip(changed.data())
            .any(|(a, b)| (a - b).abs() > 1e-12);
        prop_assert!(moved, "perturbing parameter {} left logits unchanged", coord);
    }
}
