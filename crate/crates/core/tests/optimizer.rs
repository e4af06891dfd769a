//! Adam optimizer behavior: first-step size, convergence on a quadratic
//! bowl, validation, state round-trips, and chunked gradient accumulation.

use lgslam_core::tensor::{AdamCfg, Param, Tape, Tensor};
use lgslam_core::Error;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

#[test]
fn first_step_moves_by_learning_rate() {
    // With bias correction, the very first update is lr * g / (|g| + eps),
    // i.e. essentially lr in the direction of the gradient sign.
    let mut p = Param::new(Tensor::scalar(0.0));
    p.accumulate(&[3.0]).unwrap();
    p.adam_step(&AdamCfg::with_lr(0.1)).unwrap();
    assert!((p.data()[0] + 0.1).abs() < 1e-8, "got {}", p.data()[0]);
}

#[test]
fn rejects_nonpositive_learning_rate() {
    let mut p = Param::new(Tensor::scalar(0.0));
    p.accumulate(&[1.0]).unwrap();
    for lr in [0.0, -0.5, f64::NAN] {
        assert!(matches!(
            p.adam_step(&AdamCfg::with_lr(lr)),
            Err(Error::InvalidParam(_))
        ));
    }
}

#[test]
fn converges_on_quadratic_bowl() {
    let target = [2.0, -1.0];
    let mut p = Param::new(Tensor::col(&[0.0, 0.0]));
    let cfg = AdamCfg::with_lr(0.1);
    for _ in 0..300 {
        let tape = Tape::new();
        let vp = p.push(&tape);
        let t = tape.leaf(Tensor::col(&target));
        let loss = tape.sum_all(tape.square(tape.sub(vp, t).unwrap()));
        let g = tape.backward(loss).unwrap();
        p.zero_grad();
        p.accumulate_from(&g, vp).unwrap();
        p.adam_step(&cfg).unwrap();
    }
    for (got, want) in p.data().iter().zip(&target) {
        assert!((got - want).abs() < 1e-2, "got {got}, want {want}");
    }
}

#[test]
fn state_restore_resumes_identically() {
    let grads: Vec<Vec<f64>> = (0..10)
        .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.61).cos()])
        .collect();
    let cfg = AdamCfg::with_lr(0.05);

    let mut a = Param::new(Tensor::col(&[0.3, -0.2]));
    for g in &grads[..5] {
        a.zero_grad();
        a.accumulate(g).unwrap();
        a.adam_step(&cfg).unwrap();
    }
    let (value, m, v, t) = {
        let (value, m, v, t) = a.state();
        (value.to_vec(), m.to_vec(), v.to_vec(), t)
    };
    for g in &grads[5..] {
        a.zero_grad();
        a.accumulate(g).unwrap();
        a.adam_step(&cfg).unwrap();
    }

    let mut b = Param::new(Tensor::col(&[0.0, 0.0]));
    b.restore(&value, &m, &v, t).unwrap();
    for g in &grads[5..] {
        b.zero_grad();
        b.accumulate(g).unwrap();
        b.adam_step(&cfg).unwrap();
    }

    let bits = |p: &Param| p.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    // Restore validates lengths.
    let mut c = Param::new(Tensor::col(&[0.0, 0.0, 0.0]));
    assert!(c.restore(&value, &m, &v, t).is_err());
}

#[test]
fn moment_history_carries_across_steps() {
    // Two steps with opposite gradients: without momentum the second step
    // would mirror the first; with it, the accumulated first moment damps the
    // reversal, so the net displacement stays negative.
    let cfg = AdamCfg::with_lr(0.1);
    let mut p = Param::new(Tensor::scalar(0.0));
    p.accumulate(&[1.0]).unwrap();
    p.adam_step(&cfg).unwrap();
    let after_first = p.data()[0];
    p.zero_grad();
    p.accumulate(&[-1.0]).unwrap();
    p.adam_step(&cfg).unwrap();
    let second_delta = p.data()[0] - after_first;
    assert!(after_first < 0.0);
    assert!(second_delta.abs() < after_first.abs() * 0.85, "momentum should damp the reversal: first {after_first}, second delta {second_delta}");
    let (_, _, _, t) = p.state();
    assert_eq!(t, 2);
}

#[test]
fn chunked_accumulation_matches_full_batch() {
    // Losses used by the pipeline are sums over rays, so a backward pass per
    // chunk with accumulated gradients must equal one big backward pass.
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let n = 40;
    let x = Tensor::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
    let w0 = Tensor::from_fn(3, 1, |_, _| rng.random_range(-0.5..0.5));

    let grad_of = |rows: std::ops::Range<usize>, w: &Param| -> Vec<f64> {
        let tape = Tape::new();
        let vw = w.push(&tape);
        let xs = Tensor::from_fn(rows.len(), 3, |r, c| x.get(rows.start + r, c));
        let ys = Tensor::from_fn(rows.len(), 1, |r, _| y.get(rows.start + r, 0));
        let pred = tape.matmul(tape.leaf(xs), vw).unwrap();
        let resid = tape.sub(pred, tape.leaf(ys)).unwrap();
        // Scale by the full batch size so chunk losses add up to the mean.
        let loss = tape.mul_scalar(tape.sum_all(tape.square(resid)), 1.0 / n as f64);
        let g = tape.backward(loss).unwrap();
        g.get(vw).unwrap().to_vec()
    };

    let mut full = Param::new(w0.clone());
    full.accumulate(&grad_of(0..n, &full)).unwrap();

    let mut chunked = Param::new(w0);
    let g1 = grad_of(0..17, &chunked);
    let g2 = grad_of(17..n, &chunked);
    chunked.accumulate(&g1).unwrap();
    chunked.accumulate(&g2).unwrap();

    for (a, b) in full.grad().iter().zip(chunked.grad()) {
        assert!((a - b).abs() < 1e-12, "full {a} vs chunked {b}");
    }
}
