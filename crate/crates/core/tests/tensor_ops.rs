use ima_core::tensor::{
    check_gradients, finite_diff_check, Graph, Reduction, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Projects an arbitrary tensor to a scalar with fixed random weights so that
/// every output coordinate contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn assert_pass(report: ima_core::tensor::GradCheckReport, what: &str) {
    assert!(report.passed, "{what}: {report:?}");
}

#[test]
fn matmul_hand_example_and_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.data(c), &[17.0, 39.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 4], &mut rng);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let xa = g.constant(x.clone());
    let i4 = g.constant(Tensor::new(vec![4, 4], eye).unwrap());
    let y = g.matmul(xa, i4).unwrap();
    assert_eq!(g.data(y), x.data());
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[4, 2]).unwrap());
    match g.matmul(a, b) {
        Err(TensorError::DimensionMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_gradients_all_transpose_modes() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random(&if ta { [k, m] } else { [m, k] }, &mut rng);
            let b = random(&if tb { [n, k] } else { [k, n] }, &mut rng);
            let r = check_gradients(
                |g, v| {
                    let c = g.matmul_t(v[0], ta, v[1], tb)?;
                    Ok(project(g, c, seed))
                },
                &[a, b],
                H,
                TOL,
            )
            .unwrap();
            assert_pass(r, "matmul");
        }
    }
}

#[test]
fn sum_of_product_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = random(&[3, 2], &mut rng);
    let a = random(&[4, 3], &mut rng);
    let r = finite_diff_check(
        |g, x| {
            let bv = g.constant(b.clone());
            let c = g.matmul(x, bv)?;
            Ok(g.sum(c))
        },
        &a,
        H,
        TOL,
    )
    .unwrap();
    assert_pass(r, "sum(A.B)");
}

#[test]
fn conv2d_identity_kernel_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 5, 7], &mut rng);
    let mut w = vec![0.0; 2 * 2 * 9];
    w[4] = 1.0; // out 0 <- in 0 centre tap
    w[3 * 9 + 4] = 1.0; // out 1 <- in 1 centre tap
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::new(vec![2, 2, 3, 3], w).unwrap());
    let y = g.conv2d(xv, wv, (1, 1)).unwrap();
    assert_eq!(g.data(y), x.data());

    let one = g.constant(Tensor::zeros(&[1, 40, 8]).unwrap());
    let w1 = g.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
    let y1 = g.conv2d(one, w1, (2, 2)).unwrap();
    assert_eq!(g.shape(y1), &[1, 20, 4]);
    let y2 = g.conv2d(y1, w1, (2, 2)).unwrap();
    assert_eq!(g.shape(y2)[1], 10);

    let odd = g.constant(Tensor::zeros(&[1, 41, 8]).unwrap());
    let z1 = g.conv2d(odd, w1, (2, 2)).unwrap();
    let z2 = g.conv2d(z1, w1, (2, 2)).unwrap();
    assert_eq!((g.shape(z1)[1], g.shape(z2)[1]), (21, 11));
}

#[test]
fn conv2d_shape_formula_holds_on_grid() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
    for h in 1..=64 {
        for wd in (1..=64).step_by(7) {
            let x = g.constant(Tensor::zeros(&[1, h, wd]).unwrap());
            for s in [1, 2] {
                let y = g.conv2d(x, w, (s, s)).unwrap();
                assert_eq!(g.shape(y)[1], (h + 2 - 3) / s + 1);
                assert_eq!(g.shape(y)[1], h.div_ceil(s));
                assert_eq!(g.shape(y)[2], wd.div_ceil(s));
            }
        }
    }
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]).unwrap());
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    assert!(g.conv2d(x, w, (1, 1)).is_err());
    let w2 = g.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    assert!(g.conv2d(x, w2, (3, 3)).is_err());
}

#[test]
fn conv2d_gradients() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cin = rng.gen_range(1..3);
        let cout = rng.gen_range(1..3);
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let s = if seed % 2 == 0 { 1 } else { 2 };
        let x = random(&[cin, h, w], &mut rng);
        let k = random(&[cout, cin, 3, 3], &mut rng);
        let r = check_gradients(
            |g, v| {
                let y = g.conv2d(v[0], v[1], (s, s))?;
                Ok(project(g, y, seed))
            },
            &[x, k],
            H,
            TOL,
        )
        .unwrap();
        assert_pass(r, "conv2d");
    }
}

#[test]
fn batchnorm_train_constant_input_gives_beta() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 3], 4.2).unwrap());
    let gamma = g.constant(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let beta = g.constant(Tensor::new(vec![2], vec![0.25, 7.0]).unwrap());
    let (y, stats) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
    for (i, v) in g.data(y).iter().enumerate() {
        let want = if i < 9 { 0.25 } else { 7.0 };
        assert!((v - want).abs() < 1e-12);
    }
    assert_eq!(stats.var, vec![0.0, 0.0]);
}

#[test]
fn batchnorm_train_standardised_input_passes_through() {
    // per channel: values -1, 1 repeated -> mean 0, var 1
    let data: Vec<f64> = (0..8)
        .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 })
        .collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 2, 2], data.clone()).unwrap());
    let gamma = g.constant(Tensor::full(&[2], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[2]).unwrap());
    let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-12).unwrap();
    for (a, b) in g.data(y).iter().zip(&data) {
        assert!((a - b).abs() < 1e-6);
    }
    // with the default epsilon the output shrinks by 1/sqrt(1 + 1e-5)
    let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
    for (a, b) in g.data(y).iter().zip(&data) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_eval_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[3, 4, 2], &mut rng);
    let mean = [0.3, -0.1, 0.7];
    let var = [1.2, 0.5, 2.0];
    let gm = [0.9, 1.1, -0.4];
    let bt = [0.0, 0.2, -0.3];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(Tensor::new(vec![3], gm.to_vec()).unwrap());
    let bv = g.constant(Tensor::new(vec![3], bt.to_vec()).unwrap());
    let y = g.batchnorm_eval(xv, gv, bv, &mean, &var, 1e-5).unwrap();
    for (i, v) in g.data(y).iter().enumerate() {
        let c = i / 8;
        let want = (x.data()[i] - mean[c]) / (var[c] + 1e-5).sqrt() * gm[c] + bt[c];
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let c = rng.gen_range(1..4);
        let x = random(&[c, rng.gen_range(1..4), rng.gen_range(2..5)], &mut rng);
        let gamma = random(&[c], &mut rng);
        let beta = random(&[c], &mut rng);
        let r = check_gradients(
            |g, v| {
                let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                Ok(project(g, y, seed))
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            H,
            TOL,
        )
        .unwrap();
        assert_pass(r, "batchnorm train");
        let rm: Vec<f64> = (0..c).map(|i| i as f64 * 0.1).collect();
        let rv: Vec<f64> = (0..c).map(|i| 1.0 + i as f64).collect();
        let r = check_gradients(
            |g, v| {
                let y = g.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                Ok(project(g, y, seed))
            },
            &[x, gamma, beta],
            H,
            TOL,
        )
        .unwrap();
        assert_pass(r, "batchnorm eval");
    }
}

#[test]
fn softmax_uniform_row_and_invariants() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 7], 0.3).unwrap());
    let y = g.softmax_rows(x);
    for v in g.data(y) {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let t = random(&[3, 6], &mut rng);
        let shift = rng.gen_range(-20.0..20.0);
        let shifted = Tensor::new(
            vec![3, 6],
            t.data().iter().map(|v| v * 5.0 + shift).collect(),
        )
        .unwrap();
        let base = Tensor::new(vec![3, 6], t.data().iter().map(|v| v * 5.0).collect()).unwrap();
        let a = g.constant(base);
        let b = g.constant(shifted);
        let ya = g.softmax_rows(a);
        let yb = g.softmax_rows(b);
        for r in 0..3 {
            let s: f64 = g.data(ya)[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for (p, q) in g.data(ya).iter().zip(g.data(yb)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_and_shape_op_gradients() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let x = random(&[r, c], &mut rng);
        let y = random(&[r, c], &mut rng);
        let bias = random(&[c], &mut rng);
        let gamma = random(&[c], &mut rng);
        let beta = random(&[c], &mut rng);
        let res = check_gradients(
            |g, v| {
                let s = g.softmax_rows(v[0]);
                let a = g.add(s, v[1])?;
                let m = g.mul(a, v[0])?;
                let b = g.add_row_bias(m, v[2])?;
                let l = g.layer_norm(b, v[3], v[4], 1e-5)?;
                let sc = g.scale(l, 0.7);
                let re = g.relu(sc);
                let sq = g.mul(re, sc)?;
                let cat = g.concat(&[sq, v[1]], 1)?;
                let sl = g.slice(cat, 1, 1, c)?;
                let rs = g.reshape(sl, &[c, r])?;
                Ok(project(g, rs, seed))
            },
            &[x, y, bias, gamma, beta],
            H,
            TOL,
        )
        .unwrap();
        assert_pass(res, "elementwise chain");
    }
}

#[test]
fn permute_concat_slice_gradients() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let s = [
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        ];
        let x = random(&s, &mut rng);
        let perms = [
            [0, 1, 2],
            [1, 0, 2],
            [2, 0, 1],
            [0, 2, 1],
            [1, 2, 0],
            [2, 1, 0],
        ];
        let perm = perms[seed as usize % 6];
        let res = check_gradients(
            |g, v| {
                let p = g.permute3(v[0], perm)?;
                let c = g.concat(&[p, p], 0)?;
                let sl = g.slice(c, 0, 1, 1)?;
                Ok(project(g, sl, seed))
            },
            &[x],
            H,
            TOL,
        )
        .unwrap();
        assert_pass(res, "permute/concat/slice");
    }
}

#[test]
fn permute3_matches_index_map() {
    let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
    let mut g = Graph::new();
    let v = g.constant(x);
    let p = g.permute3(v, [1, 0, 2]).unwrap();
    assert_eq!(g.shape(p), &[3, 2, 4]);
    // out[t][c][f] = in[c][t][f]
    assert_eq!(g.data(p)[4 + 1], 13.0);
}

#[test]
fn embedding_lookup_gradient_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = random(&[5, 3], &mut rng);
    for seed in 0..20u64 {
        let ids: Vec<usize> = (0..4).map(|i| (i * 3 + seed as usize) % 5).collect();
        let res = finite_diff_check(
            |g, t| {
                let e = g.embedding(&ids, t)?;
                Ok(project(g, e, seed))
            },
            &table,
            H,
            TOL,
        )
        .unwrap();
        assert_pass(res, "embedding");
    }
    let mut g = Graph::new();
    let t = g.constant(table);
    assert!(matches!(
        g.embedding(&[5], t),
        Err(TensorError::Index {
            index: 5,
            bound: 5,
            ..
        })
    ));
}

#[test]
fn dropout_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[10], 2.0).unwrap());
    let y0 = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.data(y0), g.data(x));
    let y1 = g.dropout(x, 1.0, true, &mut rng).unwrap();
    assert!(g.data(y1).iter().all(|&v| v == 0.0));
    let ye = g.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(g.data(ye), g.data(x));
    assert!(matches!(
        g.dropout(x, 1.5, true, &mut rng),
        Err(TensorError::Parameter { .. })
    ));
    assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn dropout_monte_carlo_mean_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut acc = [0.0; 4];
    let draws = 10_000;
    for _ in 0..draws {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.5, true, &mut rng).unwrap();
        for (a, b) in acc.iter_mut().zip(g.data(y)) {
            *a += b;
        }
    }
    for (a, b) in acc.iter().zip(x.data()) {
        let mean = a / draws as f64;
        assert!(((mean - b) / b).abs() < 0.05, "{mean} vs {b}");
    }
}

#[test]
fn dropout_gradient_uses_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.param(&Tensor::full(&[50], 1.0).unwrap());
    let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), g.data(y));
}

/// Direct transcription of the smoothed objective as a double loop.
fn brute_force_ce(
    logits: &[f64],
    targets: &[usize],
    v: usize,
    eps: f64,
    pad: Option<usize>,
) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == pad {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (c, &x) in row.iter().enumerate() {
            let q = if c == t {
                1.0 - eps + eps / v as f64
            } else {
                eps / v as f64
            };
            let p = x.exp() / z;
            total -= q * p.ln();
        }
    }
    total
}

#[test]
fn cross_entropy_matches_brute_force_and_fd() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let logits = random(&[2, 3, 5], &mut rng);
        let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        let pad = if seed % 3 == 0 {
            Some(targets[0])
        } else {
            None
        };
        let eps = [0.0, 0.1, 0.3][seed as usize % 3];
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let l = g
            .cross_entropy(lv, &targets, eps, pad, Reduction::Sum)
            .unwrap();
        let want = brute_force_ce(logits.data(), &targets, 5, eps, pad);
        assert!(
            (g.scalar(l) - want).abs() < 1e-10,
            "{} vs {want}",
            g.scalar(l)
        );

        let count = targets.iter().filter(|&&t| Some(t) != pad).count() as f64;
        let lm = g
            .cross_entropy(lv, &targets, eps, pad, Reduction::Mean)
            .unwrap();
        assert!((g.scalar(lm) - want / count).abs() < 1e-10);

        let r = finite_diff_check(
            |g, x| g.cross_entropy(x, &targets, eps, pad, Reduction::Sum),
            &logits,
            H,
            TOL,
        )
        .unwrap();
        assert_pass(r, "cross entropy");
    }
}

#[test]
fn cross_entropy_uniform_and_peaked() {
    let v = 6;
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, v]).unwrap());
    for eps in [0.0, 0.1, 0.5] {
        let l = g
            .cross_entropy(x, &[0, 2, 5], eps, None, Reduction::Mean)
            .unwrap();
        assert!((g.scalar(l) - (v as f64).ln()).abs() < 1e-12);
    }
    let mut peaked = vec![0.0; v];
    peaked[2] = 60.0;
    let p = g.constant(Tensor::new(vec![1, v], peaked).unwrap());
    let l = g.cross_entropy(p, &[2], 0.0, None, Reduction::Sum).unwrap();
    assert!(g.scalar(l) < 1e-20);
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4]).unwrap());
    assert_eq!(
        g.cross_entropy(x, &[0, 0], 0.1, Some(0), Reduction::Sum)
            .unwrap_err(),
        TensorError::DegenerateBatch
    );
    assert!(matches!(
        g.cross_entropy(x, &[1, 4], 0.1, None, Reduction::Sum),
        Err(TensorError::Index { .. })
    ));
}

#[test]
fn backward_contract_and_accumulation() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, TensorError::Contract(_)));

    // loss that does not depend on x
    let c = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let detached = g.sum(c);
    g.backward(detached).unwrap();
    assert!(g.grad(x).is_none());
}

#[test]
fn half_squared_norm_gradient_is_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random(&[10], &mut rng);
    let r = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_pass(r.clone(), "0.5|x|^2");
    assert!(r.max_abs_error < 1e-8);

    let mut g = Graph::new();
    let v = g.param(&x);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let l = g.scale(s, 0.5);
    g.backward(l).unwrap();
    for (a, b) in g.grad(v).unwrap().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_loss_passes_self_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 5], &mut rng);
    let r = finite_diff_check(
        |g, v| {
            let s = g.softmax_rows(v);
            Ok(project(g, s, 8))
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert_pass(r, "softmax");
}

#[test]
fn wrong_backward_rule_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[6], &mut rng);
    let r = finite_diff_check(
        |g, v| {
            // forward x^2, but claim the derivative is x
            let y = g.custom_unary(
                v,
                |d| d.iter().map(|t| t * t).collect(),
                |x, _y, dy| x.iter().zip(dy).map(|(a, b)| a * b).collect(),
            )?;
            Ok(g.sum(y))
        },
        &x,
        H,
        TOL,
    )
    .unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 0.1);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let wv = g.param(&w);
        let h = g.matmul(xv, wv).unwrap();
        let d = g.dropout(h, 0.3, true, &mut rng).unwrap();
        let s = g.softmax_rows(d);
        let l = g
            .cross_entropy(s, &[0, 1, 2], 0.1, None, Reduction::Sum)
            .unwrap();
        g.backward(l).unwrap();
        (
            g.scalar(l).to_bits(),
            g.grad(wv)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
