mod common;

use degaa::numcore::{cosine_lr, gradient_check, rng_for, Mlp, Sgd, SgdConfig, Tape, Tensor};
use degaa::Error;
use proptest::prelude::*;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn plain(lr_max: f64, lr_min: f64, total: usize, momentum: f64) -> SgdConfig {
    SgdConfig { lr_max, lr_min, total_steps: total, momentum, weight_decay: 0.0, clip_norm: None }
}

#[test]
fn matmul_by_identity() {
    let mut t = Tape::new();
    let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let i = t.constant(Tensor::identity(2)).unwrap();
    let y = t.matmul(a, i).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let a = t.constant(m(&[&[0.0, 0.0, 0.0]])).unwrap();
    let y = t.softmax_rows(a).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_against_scalar_evaluation() {
    let mut t = Tape::new();
    let a = t.constant(m(&[&[2.0, 1.0, 0.0]])).unwrap();
    let p = t.softmax_rows(a).unwrap();
    let ce = t.cross_entropy(p, &[0]).unwrap();
    let e = std::f64::consts::E;
    let expected = -(e * e / (e * e + e + 1.0)).ln();
    assert!((t.value(ce).item() - expected).abs() < 1e-12);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    match t.matmul(a, b) {
        Err(Error::Dimension { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains('2') && detail.contains('3'), "{detail}");
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn non_finite_input_is_rejected() {
    let mut t = Tape::new();
    let r = t.constant(m(&[&[1.0, f64::NAN]]));
    assert!(matches!(r, Err(Error::Numeric { .. })));
}

#[test]
fn gradient_of_summed_linear_map_is_x() {
    let mut t = Tape::new();
    let w = t.param(m(&[&[0.3, -1.0, 2.0], &[0.5, 0.0, 1.5]])).unwrap();
    let x = t.constant(m(&[&[1.0], &[-2.0], &[4.0]])).unwrap();
    let y = t.matmul(w, x).unwrap();
    let mean = t.mean(y).unwrap();
    let sum = t.scale(mean, 2.0).unwrap();
    let g = t.backward(sum).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
}

#[test]
fn dead_relu_blocks_the_gradient() {
    let mut t = Tape::new();
    let neg = t.constant(Tensor::scalar(-1.0)).unwrap();
    let c = t.param(Tensor::scalar(3.0)).unwrap();
    let r = t.relu(neg).unwrap();
    let loss = t.elementwise_mul(r, c).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get_or_zeros(c, &Tensor::scalar(0.0)).item(), 0.0);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut t = Tape::new();
    let a = t.param(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(t.backward(a), Err(Error::Contract(_))));
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = rng_for(11, 0);
    let mlp = Mlp::he(&[5, 7, 6, 3], &mut rng).unwrap();
    let x = common::uniform_matrix(&mut common::rng(3), 4, 5, -1.0, 1.0);
    let mut inputs = vec![x];
    for layer in &mlp.layers {
        inputs.push(layer.weight.clone());
        inputs.push(layer.bias.clone());
    }
    let report = gradient_check(&inputs, 1e-5, |t, v| {
        let mut h = v[0];
        for (i, pair) in v[1..].chunks(2).enumerate() {
            h = t.matmul(h, pair[0])?;
            h = t.add_row(h, pair[1])?;
            if i < 2 {
                h = t.relu(h)?;
            }
        }
        t.cross_entropy_logits(h, &[0, 2, 1, 0])
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert_eq!(report.entries, 4 * 5 + 5 * 7 + 7 + 7 * 6 + 6 + 6 * 3 + 3);
}

#[test]
fn cosine_schedule_landmarks() {
    let cfg = plain(0.1, 0.001, 100, 0.9);
    assert_eq!(cosine_lr(0, &cfg).unwrap(), 0.1);
    assert!((cosine_lr(100, &cfg).unwrap() - 0.001).abs() < 1e-15);
    assert!((cosine_lr(50, &cfg).unwrap() - 0.0505).abs() < 1e-15);
    assert!(matches!(cosine_lr(101, &cfg), Err(Error::Contract(_))));
}

#[test]
fn sgd_without_momentum_is_plain_descent() {
    let mut opt = Sgd::new(&plain(0.5, 0.5, 1, 0.0));
    let mut p = Tensor::scalar(1.0);
    opt.step(vec![&mut p], &[Tensor::scalar(2.0)], 0.5).unwrap();
    assert_eq!(p.item(), 0.0);

    let mut q = Tensor::scalar(1.25);
    opt = Sgd::new(&plain(0.5, 0.5, 1, 0.0));
    opt.step(vec![&mut q], &[Tensor::scalar(0.0)], 0.5).unwrap();
    assert_eq!(q.item(), 1.25);
}

#[test]
fn momentum_two_steps_match_unrolled_recurrence() {
    let (lr, mu, g) = (0.1, 0.9, 0.7);
    let mut opt = Sgd::new(&plain(lr, lr, 2, mu));
    let mut p = Tensor::scalar(2.0);
    opt.step(vec![&mut p], &[Tensor::scalar(g)], lr).unwrap();
    opt.step(vec![&mut p], &[Tensor::scalar(g)], lr).unwrap();
    let v1 = g;
    let p1 = 2.0 - lr * v1;
    let v2 = mu * v1 + g;
    let p2 = p1 - lr * v2;
    assert_eq!(p.item(), p2);
}

#[test]
fn sgd_rejects_misaligned_gradients() {
    let mut opt = Sgd::new(&plain(0.1, 0.1, 1, 0.0));
    let mut p = Tensor::zeros(&[2, 2]);
    let r = opt.step(vec![&mut p], &[Tensor::zeros(&[2, 3])], 0.1);
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

fn train(seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 2);
    let mut mlp = Mlp::he(&[3, 8, 2], &mut rng).unwrap();
    let x = common::uniform_matrix(&mut common::rng(seed), 16, 3, -1.0, 1.0);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let cfg = plain(0.1, 0.01, 20, 0.9);
    let mut opt = Sgd::new(&cfg);
    for step in 0..20 {
        let mut t = Tape::new();
        let b = mlp.bind(&mut t).unwrap();
        let xv = t.constant(x.clone()).unwrap();
        let y = b.forward(&mut t, xv).unwrap();
        let loss = t.cross_entropy_logits(y, &labels).unwrap();
        let g = t.backward(loss).unwrap();
        let vars = b.vars();
        let params: Vec<&Tensor> = mlp.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        let grads = degaa::numcore::collect_grads(&g, &vars, &params);
        opt.step(mlp.params_mut(), &grads, cosine_lr(step, &cfg).unwrap()).unwrap();
    }
    mlp.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied()).collect()
}

#[test]
fn training_is_bit_reproducible() {
    let a = train(5);
    assert_eq!(a, train(5));
    assert_ne!(a, train(6));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), spread in 0.0f64..700.0) {
        let x = common::uniform_matrix(&mut common::rng(seed), rows, cols, -spread - 1e-9, spread + 1e-9);
        let mut t = Tape::new();
        let a = t.constant(x).unwrap();
        let y = t.softmax_rows(a).unwrap();
        for r in 0..rows {
            let s: f64 = t.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_schedule_never_increases(total in 1usize..500, lo in 1e-6f64..0.1, extra in 0.0f64..1.0) {
        let cfg = plain(lo + extra, lo, total, 0.0);
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, &cfg).unwrap();
            prop_assert!(lr <= prev);
            prop_assert!(lr >= lo - 1e-15);
            prev = lr;
        }
    }
}
