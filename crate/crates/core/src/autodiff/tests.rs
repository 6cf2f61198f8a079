use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `f` at every entry of every parameter.
fn fd_check(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, tol: f64) {
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p).unwrap()).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap()
    };
    let eval = |ps: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p).unwrap()).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };
    let h = 1e-5;
    for (pi, p) in params.iter().enumerate() {
        let mut num = vec![0.0; p.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut ps = params.to_vec();
            ps[pi].data_mut()[i] += h;
            let up = eval(&ps);
            ps[pi].data_mut()[i] -= 2.0 * h;
            let down = eval(&ps);
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.0[pi].data();
        let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(rel <= tol, "param {pi}: rel err {rel:e}");
    }
}

#[test]
fn linear_forward_example() {
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::from_vec(vec![0.5, -0.5]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant_ref(&x).unwrap(), tape.param(&w).unwrap(), tape.param(&b).unwrap());
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 1.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = Tensor::new(vec![2, 3], vec![1000.0, 1000.0, 1000.0, -3.0, 0.0, 7.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let y = tape.softmax_rows(xv).unwrap();
    for row in tape.value(y).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
    assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn maxpool_ties_route_to_first() {
    let x = Tensor::filled(&[2, 2, 1], 3.0);
    let mut tape = Tape::new();
    let xv = tape.param(&x).unwrap();
    let y = tape.maxpool2d(xv, [2, 2], 2).unwrap();
    let r = tape.reshape(y, &[1]).unwrap();
    let g = tape.backward(r).unwrap();
    assert_eq!(g.0[0].data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn adaptive_pool_blocks_partition() {
    // 5 rows onto 2 blocks: rows 0..2 and 2..5
    let x = Tensor::new(vec![5, 1, 1], vec![1.0, 3.0, 5.0, 7.0, 9.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let y = tape.adaptive_avgpool(xv, [2, 1]).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 7.0]);
    let small = tape.constant(Tensor::zeros(&[1, 1, 1])).unwrap();
    assert!(tape.adaptive_avgpool(small, [2, 1]).is_err());
}

#[test]
fn rmse_zero_loss_has_zero_gradient() {
    let p = Tensor::from_vec(vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let pv = tape.param(&p).unwrap();
    let l = tape.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let loss = tape.rmse(pv, l).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(tape.value(loss).data(), &[0.0]);
    assert_eq!(g.0[0].data(), &[0.0, 0.0]);
}

#[test]
fn rmse_example_value() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
    let l = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 2.0, 2.0])).unwrap();
    let loss = tape.rmse(p, l).unwrap();
    assert_eq!(tape.value(loss).data(), &[1.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let w = Tensor::scalar(2.0);
    let mut tape = Tape::new();
    let v = tape.param(&w).unwrap();
    let y = tape.scale(v, 3.0).unwrap();
    assert_eq!(tape.backward(y).unwrap().0[0].data(), &[3.0]);
    assert_eq!(tape.backward(y), Err(AutodiffError::Consumed));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let a = Tensor::scalar(2.0);
    let b = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
    let mut tape = Tape::new();
    let av = tape.param(&a).unwrap();
    tape.param(&b).unwrap();
    let y = tape.scale(av, 2.0).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.0[1], Tensor::zeros(&[2, 2]));
}

#[test]
fn non_scalar_loss_rejected() {
    let a = Tensor::from_vec(vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let v = tape.param(&a).unwrap();
    assert!(matches!(tape.backward(v), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn non_finite_parameter_rejected() {
    let a = Tensor::from_vec(vec![f64::NAN]);
    let mut tape = Tape::new();
    assert_eq!(tape.param(&a).unwrap_err(), AutodiffError::NonFinite("parameter"));
}

#[test]
fn fd_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2])];
    let label = rand_tensor(&mut rng, &[3, 2]);
    fd_check(
        &ps,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let l = t.constant(label.clone())?;
            t.rmse(y, l)
        },
        1e-6,
    );
}

#[test]
fn fd_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ps = [rand_tensor(&mut rng, &[4, 5, 2]), rand_tensor(&mut rng, &[2, 2, 2, 3]), rand_tensor(&mut rng, &[3])];
    let label = rand_tensor(&mut rng, &[36]);
    fd_check(
        &ps,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]))?;
            let y = t.reshape(y, &[36])?;
            let l = t.constant(label.clone())?;
            t.rmse(y, l)
        },
        1e-6,
    );
}

#[test]
fn fd_relu_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps = [rand_tensor(&mut rng, &[4, 6, 2])];
    let label = rand_tensor(&mut rng, &[12]);
    fd_check(
        &ps,
        |t, v| {
            let y = t.relu(v[0])?;
            let y = t.maxpool2d(y, [2, 2], 2)?;
            let y = t.reshape(y, &[12])?;
            let l = t.constant(label.clone())?;
            t.rmse(y, l)
        },
        1e-6,
    );
}

#[test]
fn fd_attention_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ps = [
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[6, 4]),
    ];
    let label = rand_tensor(&mut rng, &[5, 1, 1]);
    fd_check(
        &ps,
        |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let k = t.matmul(v[0], v[2])?;
            let val = t.matmul(v[0], v[3])?;
            let s = t.matmul_nt(q, k)?;
            let s = t.scale(s, 1.0 / 3f64.sqrt())?;
            let a = t.softmax_rows(s)?;
            let o = t.matmul(a, val)?;
            let cat = t.concat_cols(&[o, val])?;
            let y = t.matmul(cat, v[4])?;
            let y = t.add(y, v[0])?;
            let y = t.reshape(y, &[5, 4, 1])?;
            let y = t.adaptive_avgpool(y, [5, 1])?;
            let y = t.affine(y, 2.0, &[1.0; 5])?;
            let l = t.constant(label.clone())?;
            let r1 = t.rmse(y, l)?;
            let r2 = t.rmse(y, y)?;
            t.mean(&[r1, r2])
        },
        1e-4,
    );
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let run = || {
        let mut tape = Tape::new();
        let (wv, xv) = (tape.param(&w).unwrap(), tape.constant_ref(&x).unwrap());
        let y = tape.linear(xv, wv, None).unwrap();
        let y = tape.softmax_rows(y).unwrap();
        let l = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let loss = tape.rmse(y, l).unwrap();
        tape.backward(loss).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |g: &Gradients| g.0[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

proptest! {
    #[test]
    fn conv_pool_shapes(h in 2usize..9, w in 2usize..9, c in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[h, w, 1])).unwrap();
        let k = tape.constant(Tensor::zeros(&[2, 2, 1, c])).unwrap();
        let y = tape.conv2d(x, k, None).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[h - 1, w - 1, c][..]);
        if h >= 3 && w >= 3 {
            let p = tape.maxpool2d(y, [2, 2], 2).unwrap();
            prop_assert_eq!(tape.value(p).shape(), &[(h - 3) / 2 + 1, (w - 3) / 2 + 1, c][..]);
        }
    }
}
