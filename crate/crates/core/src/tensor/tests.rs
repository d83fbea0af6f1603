use proptest::prelude::*;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.leaf(&Tensor::identity(3));
    let m = tape.leaf(&t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 7.0, 8.0]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out), tape.value(m));

    let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.leaf(&t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab), &[2.0, 1.0, 4.0, 3.0]);

    let a = tape.leaf(&Tensor::zeros([2, 3]));
    let b = tape.leaf(&Tensor::zeros([4, 5]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn transposed_and_batched_products_agree_with_loops() {
    let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).cos()).collect();
    let mut tape = Tape::<f64>::new();
    let av = tape.leaf(&t(&[2, 2, 3], &a));
    let bv = tape.leaf(&t(&[2, 2, 3], &b));
    let out = tape.bmm(av, bv, false, true).unwrap();
    assert_eq!(tape.shape(out), &[2, 2, 2]);
    for bt in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| a[bt * 6 + i * 3 + k] * b[bt * 6 + j * 3 + k]).sum();
                assert!((tape.value(out)[bt * 4 + i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let c = 0.7;
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[2, 3], &[0.0, 0.0, 0.0, c, c + 2f64.ln(), f64::NEG_INFINITY]));
    assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));

    let x = tape.leaf(&t(&[1, 3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax_rows(x).unwrap();
    assert!(close(tape.value(s), &[1.0 / 3.0; 3], 1e-15));

    let x = tape.leaf(&t(&[1, 2], &[c, c + 2f64.ln()]));
    let s = tape.softmax_rows(x).unwrap();
    assert!(close(tape.value(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));

    let x = tape.leaf(&t(&[1, 2], &[1.0, f64::NAN]));
    assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1000.0f32, 1000.0]).unwrap());
    let s = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_the_tail() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
    let s = tape.softmax_masked(x, Some(&[1, 2])).unwrap();
    let v = tape.value(s);
    assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
    assert!((v[3] + v[4] - 1.0).abs() < 1e-15 && v[5] == 0.0);
    assert!(tape.softmax_masked(x, Some(&[0, 2])).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

    let zero = tape.leaf(&Tensor::scalar(0.0));
    let y = tape.add(x, zero).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let v = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let s = tape.scale(v, 0.1);
    assert!(close(tape.value(s), &[0.1, 0.2], 1e-15));

    let sq = tape.square(v);
    assert_eq!(tape.value(sq), &[1.0, 4.0]);
    let rt = tape.sqrt(sq);
    assert_eq!(tape.value(rt), &[1.0, 2.0]);
    let d = tape.sub(v, v).unwrap();
    assert_eq!(tape.value(d), &[0.0, 0.0]);
    let p = tape.mul(v, v).unwrap();
    assert_eq!(tape.value(p), &[1.0, 4.0]);
    assert!(matches!(tape.add(x, v), Err(Error::Dimension(_))));
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[3], &[2.0, 4.0, 6.0]));
    let m = tape.mean_all(x).unwrap();
    assert_eq!(tape.item(m), 4.0);

    let same = tape.sum(x, &[]).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    assert_eq!(tape.shape(same), tape.shape(x));

    let v = [1.5, -2.0, 0.25];
    let copies = tape.leaf(&t(&[4, 3], &v.repeat(4)));
    let m = tape.mean(copies, &[0]).unwrap();
    assert_eq!(tape.value(m), &v);

    let g = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let rows = tape.sum(g, &[1]).unwrap();
    assert_eq!(tape.value(rows), &[6.0, 15.0]);
    let cols = tape.sum(g, &[0]).unwrap();
    assert_eq!(tape.value(cols), &[5.0, 7.0, 9.0]);
    assert!(matches!(tape.sum(g, &[2]), Err(Error::Dimension(_))));
}

#[test]
fn shape_ops() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let tr = tape.transpose_last(x).unwrap();
    assert_eq!(tape.shape(tr), &[3, 2]);
    assert_eq!(tape.value(tr), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let y = tape.leaf(&t(&[2, 1], &[7.0, 8.0]));
    let c = tape.concat_last(&[x, y]).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
    let g = tape.gather(x, vec![5, GATHER_ZERO, 0], [3]).unwrap();
    assert_eq!(tape.value(g), &[6.0, 0.0, 1.0]);
    assert!(tape.gather(x, vec![6], [1]).is_err());
    assert!(tape.reshape(x, [4]).is_err());
}

#[test]
fn backward_examples() {
    let x0 = t(&[3], &[0.5, -1.0, 3.0]);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&x0);
    let s = tape.sum_all(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(&x0);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, -2.0, 6.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(&x0);
    let a = tape.sum_all(x).unwrap();
    let b = tape.sum_all(x).unwrap();
    let s = tape.add(a, b).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);

    let not_scalar = tape.param(&x0);
    assert!(matches!(tape.backward(not_scalar), Err(Error::Contract(_))));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&t(&[3], &[-1.0, 0.0, 1.0]));
    let r = tape.relu(x);
    let s = tape.sum_all(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let c = tape.leaf(&t(&[2], &[3.0, 4.0]));
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum_all(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn fd_grad_examples() {
    let x = t(&[2], &[3.0, 4.0]);
    let g = fd_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
    assert!(close(g.data(), &[6.0, 8.0], 1e-8));
    let x = t(&[2, 2], &[0.1, -7.0, 2.0, 1e3]);
    let g = fd_grad(|x| Ok(x.data().iter().sum()), &x, 1e-5).unwrap();
    assert!(close(g.data(), &[1.0; 4], 1e-6));
    assert!(fd_grad(|x| Ok(x.data()[0]), &x, 0.0).is_err());
}

#[test]
fn relative_error_uses_a_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-11, 0.0) - 1e-5).abs() < 1e-18);
    let r = GradCheckReport::compare("g", &[1.0, 2.0], &[1.0, 2.2]);
    assert_eq!(r.worst_index, 1);
    assert!(!r.passes(1e-4));
}

/// `x ↦ Σ layer_norm(softplus(x W) ⊙ x W + b)²` over a composite graph.
fn composite(tape: &mut Tape<f64>, x: Var, w: Var, gain: Var, bias: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let sp = tape.softplus(xw);
    let h = tape.mul(sp, xw)?;
    let e = tape.exp(h);
    let e = tape.scale(e, 0.1);
    let h = tape.add(h, e)?;
    let n = tape.layer_norm(h, gain, bias, 1e-5)?;
    let s = tape.softmax_rows(n)?;
    let p = tape.powf(s, 1.5);
    let tr = tape.transpose_last(p)?;
    let q = tape.square(tr);
    let m = tape.mean(q, &[1])?;
    let r = tape.sqrt(m);
    tape.sum_all(r)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let x0 = t(&[3, 2], &[0.3, -1.2, 0.8, 0.5, -0.4, 1.1]);
    let w0 = t(&[2, 4], &[0.2, -0.7, 1.3, 0.4, -0.9, 0.6, 0.1, -0.3]);
    let g0 = t(&[4], &[1.0, 0.8, 1.2, 0.9]);
    let b0 = t(&[4], &[0.1, -0.2, 0.0, 0.3]);
    let mut tape = Tape::new();
    let (x, w, g, b) = (tape.param(&x0), tape.param(&w0), tape.param(&g0), tape.param(&b0));
    let l = composite(&mut tape, x, w, g, b).unwrap();
    let grads = tape.backward(l).unwrap();
    let inputs = [&x0, &w0, &g0, &b0];
    for (slot, var) in [x, w, g, b].into_iter().enumerate() {
        let numeric = fd_grad(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = (0..4)
                    .map(|i| tape.leaf(if i == slot { probe } else { inputs[i] }))
                    .collect();
                let l = composite(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
                Ok(tape.item(l))
            },
            inputs[slot],
            1e-5,
        )
        .unwrap();
        let (err, _) = max_relative_error(grads.get(var).unwrap(), numeric.data());
        assert!(err < 1e-4, "input {slot}: relative error {err}");
    }
}

#[test]
fn injected_fault_flips_a_gradient() {
    let run = || {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum_all(r).unwrap();
        tape.backward(s).unwrap().get(x).unwrap().to_vec()
    };
    fault::inject_sign_flip("relu");
    let flipped = run();
    fault::clear();
    assert_eq!(flipped, vec![-1.0, -1.0]);
    assert_eq!(run(), vec![1.0, 1.0]);
}

fn softmax_of(rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[rows, cols], v));
    let s = tape.softmax_rows(x).unwrap();
    tape.value(s).to_vec()
}

fn matrix(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-20.0..20.0f64, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, v) in matrix(6)) {
        let s = softmax_of(r, c, &v);
        for row in s.chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts((r, c, v) in matrix(6), shift in -50.0..50.0f64) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let (a, b) = (softmax_of(r, c, &v), softmax_of(r, c, &shifted));
        prop_assert!(close(&a, &b, 1e-9));
    }

    #[test]
    fn forward_and_backward_are_deterministic((r, c, v) in matrix(5)) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.param(&Tensor::new(vec![r, c], v.iter().map(|&x| x as f32).collect()).unwrap());
            let xt = tape.transpose_last(x).unwrap();
            let g = tape.matmul(x, xt).unwrap();
            let s = tape.softmax_rows(g).unwrap();
            let l = tape.sum_all(s).unwrap();
            let l = tape.mul(l, l).unwrap();
            let grads = tape.backward(l).unwrap();
            (tape.value(s).to_vec(), grads.get(x).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_the_input((r, c, v) in matrix(5)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[r, c], &v));
        let sq = tape.square(x);
        let l = tape.sum_all(sq).unwrap();
        let g = tape.backward(l).unwrap();
        let want: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        prop_assert_eq!(g.get(x).unwrap(), &want[..]);
    }
}
