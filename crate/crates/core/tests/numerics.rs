mod common;

use graphpb::fixtures::seeded_rng;
use graphpb::gradcheck::{check_ggnn_step, check_gradients, relative_error, FiniteDifference, TOLERANCE};
use graphpb::params::Leaf;
use graphpb::tensor::{adam_step, AdamState, LrSchedule, Tape, Tensor, TensorError};
use rand::Rng;

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = seeded_rng(1);
    for _ in 0..200 {
        let (n, k, m) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12));
        let a = Tensor::uniform(n, k, 2.0, &mut rng);
        let b = Tensor::uniform(k, m, 2.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        assert!(common::max_abs_diff(&got.to_rows(), &common::naive_matmul(&a.to_rows(), &b.to_rows())) <= 1e-12);
    }
}

#[test]
fn analytic_values() {
    let x = Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap();
    assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
    assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    assert_eq!(Tensor::scalar(0.0).tanh().item(), 0.0);
    assert_eq!(Tensor::scalar(-1.0).relu().item(), 0.0);
    let err = x.matmul(&Tensor::zeros(3, 1)).unwrap_err();
    assert!(err.to_string().contains("(2, 2)") && err.to_string().contains("(3, 1)"), "{err}");
}

#[test]
fn softmax_rows_normalised() {
    let mut rng = seeded_rng(2);
    for _ in 0..100 {
        let t = Tensor::uniform(rng.random_range(1..8), rng.random_range(1..10), 5.0, &mut rng).softmax_rows();
        for i in 0..t.rows() {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(t.row(i).iter().all(|&p| p > 0.0 && p < 1.0 || t.cols() == 1));
        }
    }
}

#[test]
fn mse_gradient_is_two_x() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.7));
    let loss = x.mse_loss(tape.var(Tensor::scalar(0.0))).unwrap();
    assert!((loss.backward().unwrap().wrt(x).unwrap().item() - 1.4).abs() < 1e-15);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros(2, 2));
    assert!(matches!(x.backward(), Err(TensorError::NotScalarLoss(_))));
    let other = Tape::new();
    let y = other.var(Tensor::scalar(1.0));
    let g = x.sum().unwrap().backward().unwrap();
    assert!(matches!(g.wrt(y), Err(TensorError::DetachedTensor)));
}

#[test]
fn sigmoid_sum_matches_two_point_differences() {
    let mut rng = seeded_rng(3);
    for _ in 0..20 {
        let w = Tensor::uniform(4, 3, 1.0, &mut rng);
        let x = Tensor::uniform(3, 2, 1.0, &mut rng);
        let mut bundle = (Leaf(w), Leaf(x));
        let check = check_gradients("sigmoid_sum", &mut bundle, FiniteDifference::default(), |b| {
            let tape = Tape::new();
            let (w, x) = (tape.var(b.0 .0.clone()), tape.var(b.1 .0.clone()));
            let loss = w.matmul(x)?.sigmoid()?.sum()?;
            let g = loss.backward()?;
            Ok::<_, TensorError>((loss.value().item(), vec![g.wrt(w)?, g.wrt(x)?]))
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }
}

#[test]
fn ggnn_layer_gradients_at_small_width() {
    for seed in 0..3 {
        let c = check_ggnn_step(4, seed, FiniteDifference::default()).unwrap();
        // |V| = 3, D = 4 keeps every entry above the two-point noise floor.
        assert!(c.max_rel_error < TOLERANCE, "{c:?}");
    }
    assert!(relative_error(1.0, 1.0 + 1e-5) < 1e-4);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
    let before = p.clone();
    let mut state = AdamState::default();
    for _ in 0..10 {
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &mut state, 1e-3).unwrap();
    }
    assert_eq!(p, before);
    assert!(state.m.iter().chain(&state.v).all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn adam_constant_gradient_step_bounded_by_lr() {
    let lr = 1e-3;
    let mut p = Tensor::zeros(1, 3);
    let g = Tensor::from_rows(&[[0.5, -3.0, 1e-4]]).unwrap();
    let mut state = AdamState::default();
    for _ in 0..100 {
        let before = p.clone();
        adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut state, lr).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!((a - b).abs() <= lr * (1.0 + 1e-6));
        }
    }
    assert!(p.data()[0] < 0.0 && p.data()[1] > 0.0);
}

#[test]
fn adam_descends_quadratic_bowl() {
    let target = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
    let mut p = Tensor::zeros(1, 3);
    let mut state = AdamState::default();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let diff = p.sub(&target).unwrap();
        losses.push(diff.data().iter().map(|d| d * d).sum::<f64>());
        adam_step(&mut [&mut p], &[diff.scale(2.0)], &mut state, 1e-2).unwrap();
    }
    assert!(losses.windows(2).skip(5).all(|w| w[1] < w[0]), "monotone after warmup");
}

#[test]
fn schedule_endpoints() {
    let s = LrSchedule::default();
    assert_eq!(s.lr(0), 1e-3);
    assert!((s.lr(5000) - 1e-5).abs() < 1e-20);
    assert_eq!(s.lr(9000), 1e-5);
    assert!((1..5000).all(|i| s.lr(i) < s.lr(i - 1)));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = seeded_rng(99);
        let a = Tensor::uniform(5, 5, 1.0, &mut rng);
        a.matmul(&a.transpose()).unwrap().tanh().softmax_rows()
    };
    assert_eq!(run().data(), run().data());
}
