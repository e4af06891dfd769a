//! Gradient checks for every tape operation against central finite
//! differences, plus closed-form spot values and API error paths.
//!
//! The finite-difference oracle is independent of the backward pass: it only
//! calls the forward evaluation on perturbed inputs.

use lgslam_core::tensor::{Tape, Tensor, Var};
use lgslam_core::Error;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

const FD_EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;

fn perturbed(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut v = t.data().to_vec();
    v[idx] += delta;
    Tensor::new(t.rows(), t.cols(), v)
}

/// Check analytic gradients of `build`'s scalar output w.r.t. every element
/// of every input against central differences.
fn fd_check(name: &str, inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars);
    assert_eq!(tape.shape(loss), (1, 1), "{name}: loss must be scalar");
    let grads = tape.backward(loss).expect("backward");

    let eval = |inp: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = inp.iter().map(|x| t.leaf(x.clone())).collect();
        t.item(build(&t, &vs))
    };

    for (i, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i] = perturbed(t, j, FD_EPS);
            let mut minus = inputs.to_vec();
            minus[i] = perturbed(t, j, -FD_EPS);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let a = analytic[j];
            let err = (fd - a).abs();
            let scale = fd.abs().max(a.abs()).max(ABS_FLOOR);
            assert!(
                err / scale < REL_TOL || err < ABS_FLOOR,
                "{name}: input {i} elem {j}: analytic {a} vs fd {fd} (rel {})",
                err / scale
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha12Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Reduce any tensor to a scalar through a fixed random projection so every
/// output element influences the loss with a distinct weight.
fn project(tape: &Tape, v: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(v);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let w = tape.leaf(Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)));
    tape.sum_all(tape.mul(v, w).unwrap())
}

#[test]
fn binary_ops_all_broadcasts() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let full_a = rand_tensor(&mut rng, 3, 4, -2.0, 2.0);
    let full_b = rand_tensor(&mut rng, 3, 4, -2.0, 2.0);
    let col = rand_tensor(&mut rng, 3, 1, -2.0, 2.0);
    let row = rand_tensor(&mut rng, 1, 4, -2.0, 2.0);
    let scalar = rand_tensor(&mut rng, 1, 1, -2.0, 2.0);

    type BinFn = fn(&Tape, Var, Var) -> lgslam_core::Result<Var>;
    let ops: [(&str, BinFn); 3] = [
        ("add", Tape::add),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
    ];
    let shapes: [(&str, &Tensor, &Tensor); 7] = [
        ("none", &full_a, &full_b),
        ("left_scalar", &scalar, &full_b),
        ("right_scalar", &full_a, &scalar),
        ("left_col", &col, &full_b),
        ("right_col", &full_a, &col),
        ("left_row", &row, &full_b),
        ("right_row", &full_a, &row),
    ];
    for (opname, op) in ops {
        for (bcname, a, b) in &shapes {
            fd_check(
                &format!("{opname}/{bcname}"),
                &[(*a).clone(), (*b).clone()],
                |t, v| project(t, op(t, v[0], v[1]).unwrap(), 7),
            );
        }
    }
}

#[test]
fn same_var_on_both_sides() {
    // x * x must receive gradient contributions from both operands: d/dx = 2x.
    let tape = Tape::new();
    let x = tape.leaf(Tensor::col(&[3.0]));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert!((g.get(x).unwrap()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn unary_elementwise() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let x = rand_tensor(&mut rng, 4, 3, -2.0, 2.0);
    fd_check("neg", &[x.clone()], |t, v| project(t, t.neg(v[0]), 1));
    fd_check("add_scalar", &[x.clone()], |t, v| {
        project(t, t.add_scalar(v[0], 0.7), 2)
    });
    fd_check("mul_scalar", &[x.clone()], |t, v| {
        project(t, t.mul_scalar(v[0], -1.3), 3)
    });
    fd_check("sigmoid", &[x.clone()], |t, v| project(t, t.sigmoid(v[0]), 4));
    fd_check("tanh", &[x.clone()], |t, v| project(t, t.tanh(v[0]), 5));
    fd_check("square", &[x.clone()], |t, v| project(t, t.square(v[0]), 6));

    // Positive inputs keep 1/(x + eps) well-conditioned for the fd oracle.
    let pos = rand_tensor(&mut rng, 4, 3, 0.5, 2.0);
    fd_check("recip_eps", &[pos], |t, v| {
        project(t, t.recip_eps(v[0], 1e-10), 7)
    });

    // Keep inputs away from the relu kink.
    let away = Tensor::from_fn(4, 3, |_, _| {
        let v: f64 = rng.random_range(0.05..2.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    });
    fd_check("relu", &[away], |t, v| project(t, t.relu(v[0]), 8));

    // Mix of strictly-inside and strictly-outside values for clamp01; the
    // outside ones must get zero gradient, matching the (flat) fd slope.
    let clamped = Tensor::row(&[0.1, 0.5, 0.93, -0.4, 1.37, 0.02]);
    fd_check("clamp01", &[clamped], |t, v| project(t, t.clamp01(v[0]), 9));
}

#[test]
fn matmul_and_transpose() {
    let mut rng = ChaCha12Rng::seed_from_u64(37);
    let a = rand_tensor(&mut rng, 3, 5, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 5, 2, -1.0, 1.0);
    fd_check("matmul", &[a.clone(), b], |t, v| {
        project(t, t.matmul(v[0], v[1]).unwrap(), 10)
    });
    fd_check("transpose", &[a.clone()], |t, v| {
        project(t, t.transpose(v[0]), 11)
    });

    // A @ I == A, exactly.
    let tape = Tape::new();
    let va = tape.leaf(a.clone());
    let id = tape.leaf(Tensor::identity(5));
    let prod = tape.value(tape.matmul(va, id).unwrap());
    assert_eq!(prod.data(), a.data());
}

#[test]
fn reductions() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, 3, 5, -2.0, 2.0);
    fd_check("sum_all", &[x.clone()], |t, v| t.sum_all(v[0]));
    fd_check("mean_all", &[x.clone()], |t, v| t.mean_all(v[0]));
    fd_check("sum_rows", &[x.clone()], |t, v| {
        project(t, t.sum_rows(v[0]), 12)
    });
    fd_check("softmax_rows", &[x.clone()], |t, v| {
        project(t, t.softmax_rows(v[0]), 13)
    });
}

#[test]
fn softmax_rows_is_a_distribution() {
    let mut rng = ChaCha12Rng::seed_from_u64(43);
    // Large common offsets must not overflow: softmax subtracts the row max.
    let x = Tensor::from_fn(6, 8, |r, _| rng.random_range(-3.0..3.0) + r as f64 * 250.0);
    let tape = Tape::new();
    let y = tape.value(tape.softmax_rows(tape.leaf(x.clone())));
    for r in 0..6 {
        let row = &y.data()[r * 8..(r + 1) * 8];
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        assert!(row.iter().all(|&p| p > 0.0));
    }
    // Shift invariance: softmax(x + c) == softmax(x).
    let shifted = Tensor::from_fn(6, 8, |r, c| x.get(r, c) + 55.5);
    let t2 = Tape::new();
    let y2 = t2.value(t2.softmax_rows(t2.leaf(shifted)));
    for (a, b) in y.data().iter().zip(y2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Equal logits give the uniform distribution.
    let t3 = Tape::new();
    let u = t3.value(t3.softmax_rows(t3.leaf(Tensor::row(&[4.0, 4.0]))));
    assert!((u.get(0, 0) - 0.5).abs() < 1e-15);
    assert!((u.get(0, 1) - 0.5).abs() < 1e-15);
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha12Rng::seed_from_u64(53);
    let a = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 4, 2, -1.0, 1.0);
    fd_check("concat_cols", &[a.clone(), b], |t, v| {
        project(t, t.concat_cols(v[0], v[1]).unwrap(), 14)
    });
    fd_check("narrow_cols", &[a.clone()], |t, v| {
        project(t, t.narrow_cols(v[0], 1, 2).unwrap(), 15)
    });
    // Repeated columns: gradients from both copies must accumulate.
    fd_check("select_cols", &[a.clone()], |t, v| {
        project(t, t.select_cols(v[0], &[2, 0, 2]).unwrap(), 16)
    });
    fd_check("reshape", &[a.clone()], |t, v| {
        project(t, t.reshape(v[0], 2, 6).unwrap(), 17)
    });
    // Repeated rows likewise.
    fd_check("gather_rows", &[a.clone()], |t, v| {
        project(t, t.gather_rows(v[0], &[3, 1, 1, 0, 3]).unwrap(), 18)
    });
}

#[test]
fn plane_lookup_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(61);
    let (nu, nv, ch) = (4, 5, 3);
    let plane = rand_tensor(&mut rng, nu * nv, ch, -1.0, 1.0);
    // Coordinates chosen strictly inside cells so the fd step never crosses a
    // cell boundary (the lookup is only piecewise smooth).
    let uv = Tensor::from_fn(6, 2, |_, c| {
        let n = if c == 0 { nu } else { nv };
        let cell = rng.random_range(0..n - 1) as f64;
        (cell + rng.random_range(0.3..0.7)) / (n - 1) as f64
    });
    fd_check("plane_lookup", &[plane, uv], |t, v| {
        project(t, t.plane_lookup(v[0], v[1], nu, nv).unwrap(), 19)
    });
}

#[test]
fn plane_lookup_interpolates_nodes_exactly() {
    // At a node the lookup must return that node's feature row untouched.
    let (nu, nv, ch) = (3, 4, 2);
    let plane = Tensor::from_fn(nu * nv, ch, |r, c| (r * 10 + c) as f64);
    let tape = Tape::new();
    let p = tape.leaf(plane.clone());
    for iu in 0..nu {
        for iv in 0..nv {
            let uv = tape.leaf(Tensor::row(&[
                iu as f64 / (nu - 1) as f64,
                iv as f64 / (nv - 1) as f64,
            ]));
            let out = tape.value(tape.plane_lookup(p, uv, nu, nv).unwrap());
            for c in 0..ch {
                let want = plane.get(iu * nv + iv, c);
                assert!(
                    (out.get(0, c) - want).abs() < 1e-12,
                    "node ({iu},{iv}) ch {c}"
                );
            }
        }
    }
    // Cell-center lookup is the average of the four corners.
    let uv = tape.leaf(Tensor::row(&[0.5 / (nu - 1) as f64, 0.5 / (nv - 1) as f64]));
    let out = tape.value(tape.plane_lookup(p, uv, nu, nv).unwrap());
    for c in 0..ch {
        let want = (plane.get(0, c) + plane.get(1, c) + plane.get(nv, c) + plane.get(nv + 1, c)) / 4.0;
        assert!((out.get(0, c) - want).abs() < 1e-12);
    }
}

#[test]
fn oneblob_gradients_and_values() {
    let mut rng = ChaCha12Rng::seed_from_u64(67);
    let x = rand_tensor(&mut rng, 3, 2, 0.02, 0.98);
    fd_check("oneblob", &[x], |t, v| {
        project(t, t.oneblob(v[0], 5).unwrap(), 20)
    });

    // A coordinate exactly on a bin center gives kernel value 1 there, and
    // exp(-k^2/2) at a center k bins away.
    let tape = Tape::new();
    let bins = 8;
    let xc = tape.leaf(Tensor::row(&[2.5 / bins as f64]));
    let y = tape.value(tape.oneblob(xc, bins).unwrap());
    assert_eq!(y.shape(), (1, bins));
    for b in 0..bins {
        let k = b as f64 - 2.0;
        let want = (-0.5 * k * k).exp();
        assert!((y.get(0, b) - want).abs() < 1e-12, "bin {b}");
    }
}

#[test]
fn rotation_series_ops() {
    for &x in &[0.04, 0.3, 1.7, 2.5, 9.4] {
        fd_check("sinc_sqrt", &[Tensor::scalar(x)], |t, v| t.sinc_sqrt(v[0]));
        fd_check("cosc_sqrt", &[Tensor::scalar(x)], |t, v| t.cosc_sqrt(v[0]));
    }
    // Closed-form spot values: at x = pi^2, sin(pi)/pi ~ 0 and
    // (1 - cos(pi))/pi^2 = 2/pi^2.
    let t = Tape::new();
    let x = t.leaf(Tensor::scalar(std::f64::consts::PI.powi(2)));
    assert!(t.item(t.sinc_sqrt(x)).abs() < 1e-15);
    let want = 2.0 / std::f64::consts::PI.powi(2);
    assert!((t.item(t.cosc_sqrt(x)) - want).abs() < 1e-14);
}

#[test]
fn rotation_series_agrees_with_closed_form_at_branch() {
    // The Taylor branch engages below 1e-8. Just inside it the closed form is
    // still accurate in f64, so both must agree there: values tightly,
    // derivatives to the precision the cancellation-prone closed form allows.
    let x = 0.9e-8;
    let t = Tape::new();
    let vx = t.leaf(Tensor::scalar(x));
    let s = t.sinc_sqrt(vx);
    let sq = x.sqrt();
    assert!((t.item(s) - sq.sin() / sq).abs() < 1e-14);
    let ds = t.backward(s).unwrap().get(vx).unwrap()[0];
    let ds_closed = (sq * sq.cos() - sq.sin()) / (2.0 * sq * sq * sq);
    assert!((ds - ds_closed).abs() < 1e-6, "{ds} vs {ds_closed}");

    let t2 = Tape::new();
    let vx2 = t2.leaf(Tensor::scalar(x));
    let c = t2.cosc_sqrt(vx2);
    assert!((t2.item(c) - (1.0 - sq.cos()) / x).abs() < 1e-7);
    let dc = t2.backward(c).unwrap().get(vx2).unwrap()[0];
    assert!((dc + 1.0 / 24.0).abs() < 1e-9);

    // Limits at zero.
    let t3 = Tape::new();
    assert!((t3.item(t3.sinc_sqrt(t3.leaf(Tensor::scalar(0.0)))) - 1.0).abs() < 1e-15);
    assert!((t3.item(t3.cosc_sqrt(t3.leaf(Tensor::scalar(0.0)))) - 0.5).abs() < 1e-15);
}

#[test]
fn classic_spot_derivatives() {
    let tape = Tape::new();
    // sigmoid(0) = 1/2 with slope 1/4.
    let x = tape.leaf(Tensor::scalar(0.0));
    let s = tape.sigmoid(x);
    assert!((tape.item(s) - 0.5).abs() < 1e-15);
    let g = tape.backward(s).unwrap();
    assert!((g.get(x).unwrap()[0] - 0.25).abs() < 1e-15);
    // tanh(0) = 0 with slope 1.
    let t2 = Tape::new();
    let x2 = t2.leaf(Tensor::scalar(0.0));
    let y2 = t2.tanh(x2);
    assert_eq!(t2.item(y2), 0.0);
    assert!((t2.backward(y2).unwrap().get(x2).unwrap()[0] - 1.0).abs() < 1e-15);
    // d/dx x^2 at 3 is 6.
    let t3 = Tape::new();
    let x3 = t3.leaf(Tensor::scalar(3.0));
    let y3 = t3.square(x3);
    assert!((t3.backward(y3).unwrap().get(x3).unwrap()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn composite_graphs_random_seeds() {
    // A decoder-plus-normalization shaped graph exercising op interactions.
    for seed in 0..20u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
        let x = rand_tensor(&mut rng, 3, 2, 0.1, 0.9);
        let w1 = rand_tensor(&mut rng, 8, 6, -0.7, 0.7);
        let b1 = rand_tensor(&mut rng, 1, 6, -0.3, 0.3);
        let w2 = rand_tensor(&mut rng, 6, 4, -0.7, 0.7);
        let weights = rand_tensor(&mut rng, 3, 1, 0.1, 1.0);
        fd_check(
            &format!("composite seed {seed}"),
            &[x, w1, b1, w2, weights],
            |t, v| {
                let enc = t.oneblob(t.clamp01(v[0]), 4).unwrap(); // [3 x 8]
                let h = t.relu(t.add(t.matmul(enc, v[1]).unwrap(), v[2]).unwrap());
                let dec = t.matmul(h, v[3]).unwrap(); // [3 x 4]
                let gate = t.softmax_rows(t.narrow_cols(dec, 0, 2).unwrap());
                let tail = t.tanh(t.narrow_cols(dec, 2, 2).unwrap());
                let mixed = t.mul(gate, tail).unwrap();
                let per_row = t.sum_rows(mixed); // [3 x 1]
                let wsum = t.sum_all(t.mul(per_row, v[4]).unwrap());
                let norm = t.recip_eps(t.sum_all(v[4]), 1e-10);
                t.mul(wsum, norm).unwrap()
            },
        );
    }
}

#[test]
fn shape_errors() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(3, 2));
    assert!(matches!(
        tape.add(a, b),
        Err(Error::ShapeMismatch { op: "add", .. })
    ));
    assert!(matches!(
        tape.matmul(a, a),
        Err(Error::ShapeMismatch { op: "matmul", .. })
    ));
    assert!(tape.concat_cols(a, b).is_err());
    assert!(tape.narrow_cols(a, 2, 2).is_err());
    assert!(tape.select_cols(a, &[0, 3]).is_err());
    assert!(tape.reshape(a, 4, 2).is_err());
    assert!(tape.gather_rows(a, &[2]).is_err());
    assert!(tape.oneblob(a, 0).is_err());

    // Backward demands a scalar loss.
    assert!(matches!(
        tape.backward(a),
        Err(Error::NonScalarLoss { shape: (2, 3) })
    ));
}

#[test]
fn constants_receive_no_gradient_but_pass_it_through() {
    // Frozen-parameter pattern: data and weights as constants, only the
    // remaining leaf gets a gradient — and it matches the all-leaf graph.
    let x = Tensor::from_fn(4, 3, |r, c| (r + c) as f64 * 0.1 - 0.3);
    let w = Tensor::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.4);
    let b = Tensor::row(&[0.2, -0.1]);

    let run = |frozen: bool| -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let tape = Tape::new();
        let insert = |t: Tensor| if frozen { tape.constant(t) } else { tape.leaf(t) };
        let vx = insert(x.clone());
        let vw = tape.leaf(w.clone());
        let vb = insert(b.clone());
        let h = tape.sigmoid(tape.add(tape.matmul(vx, vw).unwrap(), vb).unwrap());
        let loss = tape.mean_all(tape.square(h));
        let g = tape.backward(loss).unwrap();
        let pick = |v: Var| g.get(v).map(|s| s.to_vec());
        (pick(vx), pick(vw), pick(vb))
    };

    let (gx_leaf, gw_leaf, gb_leaf) = run(false);
    let (gx_const, gw_const, gb_const) = run(true);
    assert!(gx_leaf.is_some() && gb_leaf.is_some());
    assert!(gx_const.is_none() && gb_const.is_none());
    // Pruning must not change the surviving gradient.
    let (a, b2) = (gw_leaf.unwrap(), gw_const.unwrap());
    for (x, y) in a.iter().zip(&b2) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    // Large enough to engage the parallel paths; results must still be
    // bit-identical run to run because chunk boundaries are fixed.
    let run = || {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let x = rand_tensor(&mut rng, 4096, 4, -1.0, 1.0);
        let w = rand_tensor(&mut rng, 4, 4, -1.0, 1.0);
        let tape = Tape::new();
        let vx = tape.leaf(x);
        let vw = tape.leaf(w);
        let h = tape.softmax_rows(tape.tanh(tape.matmul(vx, vw).unwrap()));
        let loss = tape.mean_all(tape.square(h));
        let g = tape.backward(loss).unwrap();
        let bits: Vec<u64> = tape
            .value(loss)
            .data()
            .iter()
            .chain(g.get(vx).unwrap())
            .chain(g.get(vw).unwrap())
            .map(|f| f.to_bits())
            .collect();
        bits
    };
    assert_eq!(run(), run());
}
