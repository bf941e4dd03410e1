use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdforge::gradcheck::check_gradients;
use rdforge::{Error, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> rdforge::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn assert_grad_ok(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> rdforge::Result<Var>) {
    let report = check_gradients(inputs, EPS, f).unwrap();
    assert!(
        report.max_rel_error < OP_TOL,
        "{name}: max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 3]));
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn tanh_value() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.5));
    let y = tape.tanh(x).unwrap();
    assert!((tape.value(y).item().unwrap() - 0.46211715726).abs() < 1e-11);
    assert_eq!(tape.value(y).item().unwrap(), 0.5f64.tanh());
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3]"));
    let c = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    let e = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(tape.softmax(e).is_err());
    assert!(tape.layer_norm(e, 1e-12).is_err());
    let s = tape.constant(Tensor::scalar(1.0));
    assert!(tape.softmax(s).is_err());
}

#[test]
fn mse_of_x_with_itself_has_zero_grad() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let loss = tape.mse(v, v).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn linear_grad_is_the_input() {
    let w = Tensor::vector(vec![0.1, 0.2, 0.3]).with_grad();
    let mut tape = Tape::new();
    let wv = tape.leaf(&w);
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let prod = tape.mul(wv, x).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(wv).unwrap(), &[1.0, 2.0, 3.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
    let y = tape.tanh(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Autograd(_))));

    let mut other = Tape::new();
    let z = other.leaf(&Tensor::scalar(1.0).with_grad());
    assert!(matches!(tape.backward(z), Err(Error::Autograd(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut w = Tensor::vector(vec![0.5, -0.5]).with_grad();
    let mut tape = Tape::new();
    let wv = tape.leaf(&w);
    let sq = tape.mul(wv, wv).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    g.accumulate_into(wv, &mut w).unwrap();
    let g = tape.backward(loss).unwrap();
    g.accumulate_into(wv, &mut w).unwrap();
    assert_eq!(w.grad().unwrap(), &[2.0, -2.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1e300]));
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite("mul"))));
}

#[test]
fn dropout_eval_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.7, false, &mut rng).unwrap();
    assert_eq!(x, y);
    assert!(tape.dropout(x, 0.0, true, &mut rng).is_err());
}

#[test]
fn dropout_zero_fraction_passes_chi_square() {
    let n = 20_000;
    for &keep in &[0.7, 0.5, 0.9] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = tape.dropout(x, keep, true, &mut rng).unwrap();
        let data = tape.value(y).data();
        let zeros = data.iter().filter(|v| **v == 0.0).count() as f64;
        let kept = n as f64 - zeros;
        for v in data.iter().filter(|v| **v != 0.0) {
            assert!((v - 1.0 / keep).abs() < 1e-15, "survivors scaled by 1/p");
        }
        let e0 = n as f64 * (1.0 - keep);
        let e1 = n as f64 * keep;
        let chi2 = (zeros - e0).powi(2) / e0 + (kept - e1).powi(2) / e1;
        // chi-square critical value, 1 dof, alpha = 0.01
        assert!(chi2 < 6.635, "keep {keep}: chi2 {chi2}");
    }
}

#[test]
fn determinism_same_seed_same_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[3, 4]).with_grad();
        let b = random(&mut rng, &[4, 2]).with_grad();
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(av, bv).unwrap();
        let d = tape.dropout(c, 0.6, true, &mut rng).unwrap();
        let e = tape.tanh(d).unwrap();
        let loss = tape.mean(e).unwrap();
        let g = tape.backward(loss).unwrap();
        (
            tape.value(e).data().to_vec(),
            g.get(av).unwrap().to_vec(),
            g.get(bv).unwrap().to_vec(),
        )
    };
    let (x1, y1, z1) = run();
    let (x2, y2, z2) = run();
    assert!(x1.iter().zip(&x2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(z1.iter().zip(&z2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn every_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..5u64 {
        let s = trial;
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let c = random(&mut rng, &[3, 4]);
        let bias = random(&mut rng, &[4]);
        let batched_a = random(&mut rng, &[2, 3, 4]);
        let batched_b = random(&mut rng, &[2, 4, 2]);
        let scalar = random(&mut rng, &[]);

        assert_grad_ok("matmul", &[a.clone(), b.clone()], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("batched matmul", &[batched_a.clone(), batched_b.clone()], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("add", &[a.clone(), c.clone()], |t, v| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("add broadcast", &[a.clone(), bias.clone()], |t, v| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("sub broadcast", &[a.clone(), bias.clone()], |t, v| {
            let o = t.sub(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("mul", &[a.clone(), c.clone()], |t, v| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("mul scalar", &[a.clone(), scalar.clone()], |t, v| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("scale", &[a.clone()], |t, v| {
            let o = t.scale(v[0], -1.7)?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("concat last", &[a.clone(), random(&mut rng, &[3, 2])], |t, v| {
            let o = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("concat rows", &[a.clone(), c.clone()], |t, v| {
            let o = t.concat(&[v[0], v[1]], 0)?;
            weighted_sum(t, o, s)
        });
        for (name, op) in [
            ("tanh", Tape::tanh as fn(&mut Tape, Var) -> rdforge::Result<Var>),
            ("sigmoid", Tape::sigmoid),
            ("relu", Tape::relu),
            ("softmax", Tape::softmax),
        ] {
            assert_grad_ok(name, &[a.clone()], |t, v| {
                let o = op(t, v[0])?;
                weighted_sum(t, o, s)
            });
        }
        assert_grad_ok("layer_norm", &[a.clone()], |t, v| {
            let o = t.layer_norm(v[0], 1e-12)?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("embedding_lookup", &[a.clone()], |t, v| {
            let o = t.embedding_lookup(v[0], &[2, 0, 2, 1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("select_rows", &[a.clone(), c.clone()], |t, v| {
            let o = t.select_rows(&[true, false, true], v[0], v[1])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("narrow", &[a.clone()], |t, v| {
            let o = t.narrow(v[0], 1, 1, 2)?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("reshape+permute", &[batched_a.clone()], |t, v| {
            let r = t.reshape(v[0], &[2, 3, 2, 2])?;
            let o = t.permute(r, &[0, 2, 1, 3])?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("dropout", &[a.clone()], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let o = t.dropout(v[0], 0.6, true, &mut rng)?;
            weighted_sum(t, o, s)
        });
        assert_grad_ok("mean", &[a.clone()], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mean(sq)
        });
        assert_grad_ok("mse", &[a.clone(), c.clone()], |t, v| t.mse(v[0], v[1]));
    }
}

#[test]
fn permute_matches_index_arithmetic() {
    let data: Vec<f64> = (0..24).map(f64::from).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
    let y = tape.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(tape.shape(y), &[4, 2, 3]);
    let out = tape.value(y).data();
    for i in 0..4 {
        for j in 0..2 {
            for k in 0..3 {
                assert_eq!(out[i * 6 + j * 3 + k], data[j * 12 + k * 4 + i]);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![rows, cols], x).unwrap());
        let y = tape.softmax(v).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..5, cols in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![rows, cols], x).unwrap());
        let y = tape.layer_norm(v, 1e-12).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
