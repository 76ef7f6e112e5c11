use super::*;
use crate::rng::stream;
use rand::Rng;

// Independent oracles. These are written in the dumbest possible style on
// purpose: different loop order than the implementation, no shortcuts.

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn log_sum_exp_oracle(x: &[f64]) -> f64 {
    let mut mx = x[0];
    for &v in x {
        if v > mx {
            mx = v;
        }
    }
    let mut s = 0.0;
    for &v in x {
        s += (v - mx).exp();
    }
    mx + s.ln()
}

fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_oracle(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

fn rand_vec(tag: &str, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = stream(99, tag, 0);
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

#[test]
fn matmul_matches_oracle() {
    let (m, k, n) = (5, 7, 4);
    let a = rand_vec("mm-a", m * k, 2.0);
    let b = rand_vec("mm-b", k * n, 2.0);
    let g = Graph::new();
    let ta = g.constant(&[m, k], a.clone());
    let tb = g.constant(&[k, n], b.clone());
    let got = ta.matmul(&tb).data();
    let want = matmul_oracle(&a, &b, m, k, n);
    for (x, y) in got.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn transpose_is_involutive() {
    let x = rand_vec("tt", 12, 3.0);
    let g = Graph::new();
    let t = g.constant(&[3, 4], x.clone());
    assert_eq!(t.t().t().data(), x);
    assert_eq!(t.t().shape(), vec![4, 3]);
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let x = rand_vec("ce", 7, 10.0);
    let target = 3;
    let g = Graph::new();
    let logits = g.constant(&[7], x.clone());
    let got = logits.cross_entropy(target).item();
    let want = log_sum_exp_oracle(&x) - x[target];
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot() {
    let x = rand_vec("ceg", 5, 4.0);
    let p = Param::new("logits", &[5], x.clone());
    let g = Graph::new();
    let logits = g.param(&p).reshape(&[5]);
    logits.cross_entropy(2).backward();
    let probs = softmax_oracle(&x);
    for i in 0..5 {
        let want = probs[i] - if i == 2 { 1.0 } else { 0.0 };
        assert!((p.grad()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_match_oracle() {
    let x = rand_vec("sm", 3 * 6, 20.0);
    let g = Graph::new();
    let t = g.constant(&[3, 6], x.clone());
    let y = t.softmax(1).data();
    for r in 0..3 {
        let row = &y[r * 6..(r + 1) * 6];
        let want = softmax_oracle(&x[r * 6..(r + 1) * 6]);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_handles_extreme_logits() {
    let g = Graph::new();
    let t = g.constant(&[1, 3], vec![1000.0, -1000.0, 999.0]);
    let y = t.softmax(1).data();
    assert!(y.iter().all(|v| v.is_finite()));
    assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_zeroes_masked_columns_exactly() {
    let g = Graph::new();
    let t = g.constant(&[2, 4], vec![5.0, 1.0, 2.0, 3.0, -1.0, 0.0, 1.0, 2.0]);
    let y = t.masked_softmax_rows(Some(&[true, false, true, false])).data();
    for r in 0..2 {
        assert_eq!(y[r * 4 + 1], 0.0);
        assert_eq!(y[r * 4 + 3], 0.0);
        assert!((y[r * 4] + y[r * 4 + 2] - 1.0).abs() < 1e-12);
    }
}

#[test]
#[should_panic(expected = "fully masked")]
fn masked_softmax_rejects_all_masked() {
    let g = Graph::new();
    let t = g.constant(&[1, 2], vec![1.0, 2.0]);
    t.masked_softmax_rows(Some(&[false, false]));
}

#[test]
fn layer_norm_standardizes_rows() {
    let x = rand_vec("ln", 4 * 8, 5.0);
    let g = Graph::new();
    let gain = g.constant(&[8], vec![1.0; 8]);
    let bias = g.constant(&[8], vec![0.0; 8]);
    let y = g.constant(&[4, 8], x).layer_norm(&gain, &bias).data();
    for r in 0..4 {
        let row = &y[r * 8..(r + 1) * 8];
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        // the eps floor shrinks variance slightly below 1
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn layer_norm_constant_row_stays_finite() {
    let g = Graph::new();
    let gain = g.constant(&[4], vec![1.0; 4]);
    let bias = g.constant(&[4], vec![0.5; 4]);
    let y = g.constant(&[1, 4], vec![7.0; 4]).layer_norm(&gain, &bias).data();
    assert_eq!(y, vec![0.5; 4]);
}

#[test]
fn log_clamped_floors_at_1e12th() {
    let g = Graph::new();
    let t = g.constant(&[3], vec![0.0, 1e-30, 1.0]);
    let y = t.log_clamped().data();
    assert_eq!(y[0], LOG_FLOOR.ln());
    assert_eq!(y[1], LOG_FLOOR.ln());
    assert_eq!(y[2], 0.0);
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    let g = Graph::new();
    let y = g.constant(&[2], vec![800.0, -800.0]).sigmoid().data();
    assert_eq!(y[0], 1.0);
    assert!(y[1] >= 0.0 && y[1] < 1e-100);
}

#[test]
fn gather_rows_accumulates_repeated_ids() {
    let table = Param::new("table", &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let g = Graph::new();
    let t = g.param(&table);
    let picked = g.gather_rows(&t, &[0, 0, 2]);
    assert_eq!(picked.data(), vec![1.0, 2.0, 1.0, 2.0, 5.0, 6.0]);
    picked.sum().backward();
    assert_eq!(&*table.grad(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn fanout_gradients_accumulate() {
    // z feeds two consumers; dz must be the sum of both contributions
    let p = Param::new("x", &[2], vec![1.5, -0.5]);
    let g = Graph::new();
    let x = g.param(&p);
    let z = x.scale(2.0);
    let loss = z.sum().add(&z.mul(&z).sum());
    loss.backward();
    // d/dx [2x + 4x^2] = 2 + 8x
    assert!((p.grad()[0] - (2.0 + 8.0 * 1.5)).abs() < 1e-12);
    assert!((p.grad()[1] - (2.0 + 8.0 * -0.5)).abs() < 1e-12);
}

#[test]
fn same_param_as_two_leaves_accumulates() {
    let p = Param::new("x", &[1], vec![3.0]);
    let g = Graph::new();
    let a = g.param(&p);
    let b = g.param(&p);
    a.sum().add(&b.sum()).backward();
    assert_eq!(p.grad()[0], 2.0);
}

#[test]
fn detach_blocks_gradient_flow() {
    let p = Param::new("x", &[3], vec![1.0, 2.0, 3.0]);
    let g = Graph::new();
    let x = g.param(&p);
    let loss = x.detach().mul(&x.detach()).sum();
    loss.backward();
    assert_eq!(&*p.grad(), &[0.0, 0.0, 0.0]);
}

/// Forward pass that routes through every differentiable op, as a function
/// of a flat parameter vector. Used for the finite-difference check.
fn composite_loss(params: &ParamSet) -> Tensor {
    let g = Graph::new();
    let w1 = g.param(params.get("w1").unwrap());
    let b1 = g.param(params.get("b1").unwrap());
    let gain = g.param(params.get("gain").unwrap());
    let bias = g.param(params.get("bias").unwrap());
    let w2 = g.param(params.get("w2").unwrap());
    let s = g.param(params.get("s").unwrap());
    let table = g.param(params.get("table").unwrap());

    let x = g.constant(&[2, 4], vec![0.3, -1.2, 0.7, 0.1, 1.4, 0.2, -0.6, 0.9]);
    let emb = g.gather_rows(&table, &[1, 0]); // [2,4]
    let h = x.add(&emb).matmul(&w1).add_row(&b1); // [2,6]
    let h = h.layer_norm(&gain, &bias).gelu();
    let left = h.cols(0, 3);
    let right = h.cols(3, 3).t().t();
    let h2 = g.concat_cols(&[left.clone(), right]); // reassembled [2,6]
    let stacked = h2.rows(0, 1).concat_rows(&h2.rows(1, 1)); // [2,6]
    let logits = stacked.matmul(&w2).scale_by(&s.reshape(&[1])); // [2,3]
    let ce = logits
        .rows(0, 1)
        .reshape(&[3])
        .cross_entropy(1)
        .add(&logits.rows(1, 1).reshape(&[3]).cross_entropy(2));
    let probs = logits.masked_softmax_rows(Some(&[true, true, false]));
    let aux = probs.add_const(1e-3).log_clamped().mean().scale(-0.25);
    let sq = left.mul(&left).sum().scale(0.05);
    let sig = logits.sigmoid().softmax(0).sub(&logits.softmax(1)).sum().scale(0.3);
    ce.add(&aux).add(&sq).add(&sig)
}

fn composite_params() -> ParamSet {
    let mut ps = ParamSet::new();
    let mut rng = stream(7, "composite", 0);
    ps.register(Param::randn("w1", &[4, 6], 0.5, &mut rng));
    ps.register(Param::randn("b1", &[6], 0.5, &mut rng));
    ps.register(Param::full("gain", &[6], 1.0));
    ps.register(Param::zeros("bias", &[6]));
    ps.register(Param::randn("w2", &[6, 3], 0.5, &mut rng));
    ps.register(Param::new("s", &[1], vec![0.8]));
    ps.register(Param::randn("table", &[3, 4], 0.5, &mut rng));
    ps
}

#[test]
fn finite_difference_check_passes_on_composite() {
    let ps = composite_params();
    ps.zero_grads();
    composite_loss(&ps).backward();
    let analytic = ps.grad_flat();
    let mut theta = ps.to_flat();
    let worst = finite_diff_check(
        |t| {
            ps.load_flat(t);
            composite_loss(&ps).item()
        },
        &mut theta,
        &analytic,
        1e-5,
    );
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn unused_parameter_has_zero_gradient_and_passes_check() {
    let mut ps = ParamSet::new();
    let used = ps.register(Param::new("used", &[2], vec![1.0, 2.0]));
    ps.register(Param::new("dead", &[2], vec![5.0, -5.0]));
    let fwd = |ps: &ParamSet| {
        let g = Graph::new();
        g.param(ps.get("used").unwrap()).mul(&g.param(ps.get("used").unwrap())).sum()
    };
    ps.zero_grads();
    fwd(&ps).backward();
    let analytic = ps.grad_flat();
    assert_eq!(&analytic[2..], &[0.0, 0.0]);
    assert!((analytic[0] - 2.0 * used.data()[0]).abs() < 1e-12);
    let mut theta = ps.to_flat();
    let worst = finite_diff_check(
        |t| {
            ps.load_flat(t);
            fwd(&ps).item()
        },
        &mut theta,
        &analytic,
        1e-5,
    );
    assert!(worst < 1e-4);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let ps = composite_params();
        ps.zero_grads();
        composite_loss(&ps).backward();
        ps.grad_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adamw_first_step_magnitude() {
    let mut ps = ParamSet::new();
    let p = ps.register(Param::new("w", &[1], vec![0.5]));
    let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &ps);
    p.add_grad(&[1.0]);
    opt.step(&ps);
    let delta = 0.5 - p.data()[0];
    let want = 0.1 / (1.0 + 1e-8);
    assert!((delta - want).abs() < 1e-12, "delta {delta}");
    assert_eq!(p.grad()[0], 0.0, "gradient must be cleared by the step");
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    // zero gradient: the adaptive term vanishes, leaving pure decay
    let mut ps = ParamSet::new();
    let p = ps.register(Param::new("w", &[1], vec![2.0]));
    let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.01), &ps);
    opt.step(&ps);
    assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
}

#[test]
fn adamw_converges_on_quadratic() {
    let mut ps = ParamSet::new();
    let p = ps.register(Param::new("theta", &[1], vec![0.0]));
    let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &ps);
    for _ in 0..100 {
        let g = Graph::new();
        let d = g.param(&p).add_const(-3.0);
        d.mul(&d).sum().backward();
        opt.step(&ps);
    }
    assert!((p.data()[0] - 3.0).abs() < 0.1, "theta {}", p.data()[0]);
}

#[test]
fn param_set_flat_roundtrip() {
    let ps = composite_params();
    let flat = ps.to_flat();
    assert_eq!(flat.len(), ps.total_len());
    let mut shifted = flat.clone();
    for v in shifted.iter_mut() {
        *v += 1.0;
    }
    ps.load_flat(&shifted);
    assert_eq!(ps.to_flat(), shifted);
    ps.load_flat(&flat);
    assert_eq!(ps.to_flat(), flat);
}

#[test]
#[should_panic(expected = "duplicate parameter name")]
fn param_set_rejects_duplicate_names() {
    let mut ps = ParamSet::new();
    ps.register(Param::zeros("w", &[1]));
    ps.register(Param::zeros("w", &[1]));
}

#[test]
#[should_panic(expected = "incompatible shapes")]
fn matmul_rejects_shape_mismatch() {
    let g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]);
    let b = g.constant(&[4, 2], vec![0.0; 8]);
    a.matmul(&b);
}

#[test]
#[should_panic(expected = "different graphs")]
fn cross_graph_ops_are_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.constant(&[2], vec![1.0, 2.0]);
    let b = g2.constant(&[2], vec![3.0, 4.0]);
    a.add(&b);
}

mod properties {
    use super::*;
    use proptest::prelude::*;
    // both globs re-export an Rng trait; pin the one we mean
    use rand::Rng;

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 2..16),
            c in -100.0f64..100.0,
        ) {
            let n = xs.len();
            let g = Graph::new();
            let base = g.constant(&[1, n], xs.clone()).softmax(1).data();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let moved = g.constant(&[1, n], shifted).softmax(1).data();
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn layer_norm_output_is_standardized(
            xs in proptest::collection::vec(-10.0f64..10.0, 8),
        ) {
            let mean_in = xs.iter().sum::<f64>() / 8.0;
            let var_in = xs.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / 8.0;
            prop_assume!(var_in > 1e-3);
            let g = Graph::new();
            let gain = g.constant(&[8], vec![1.0; 8]);
            let bias = g.constant(&[8], vec![0.0; 8]);
            let y = g.constant(&[1, 8], xs).layer_norm(&gain, &bias).data();
            let mean = y.iter().sum::<f64>() / 8.0;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 2e-2);
        }

        #[test]
        fn matmul_agrees_with_oracle_on_random_shapes(
            m in 1usize..5, k in 1usize..5, n in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = stream(seed, "prop-mm", 0);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g = Graph::new();
            let got = g.constant(&[m, k], a.clone()).matmul(&g.constant(&[k, n], b.clone())).data();
            let want = matmul_oracle(&a, &b, m, k, n);
            for (x, y) in got.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
