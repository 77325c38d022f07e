use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resound_core::autograd::{gradcheck, Array, Tensor};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    Array::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_grads(name: &str, f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Array]) {
    for (i, r) in gradcheck::check(f, inputs, 1e-6).iter().enumerate() {
        let e = r.relative_error();
        assert!(e < 1e-6, "{name}: input {i} relative error {e:e}");
    }
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&mut rng, &[2, 3, 4]);
    let b = rand_array(&mut rng, &[3, 1]);
    let pos = rand_array(&mut rng, &[3, 1]).mapv(|v| v.abs() + 0.5);
    assert_grads("add/mul/div", |t| t[0].add(&t[1]).mul(&t[0]).div(&t[2]).sum(), &[a.clone(), b.clone(), pos]);
    assert_grads("sub/tanh/sigmoid", |t| t[0].sub(&t[1]).tanh().sigmoid().mean(), &[a.clone(), b.clone()]);
    assert_grads("exp/ln/sqrt", |t| t[0].exp().add_scalar(1.0).ln().sqrt().sum(), &[a.clone()]);
    assert_grads("sin/cos/square", |t| t[0].sin().mul(&t[0].cos()).square().sum(), &[a.clone()]);
    assert_grads("leaky", |t| t[0].leaky_relu(0.1).scale(3.0).sum(), &[a.clone()]);
    let alpha = rand_array(&mut rng, &[3]);
    assert_grads("prelu", |t| t[0].prelu(&t[1]).square().sum(), &[a.clone(), alpha]);
}

#[test]
fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_array(&mut rng, &[2, 3, 6]);
    let w = rand_array(&mut rng, &[2, 3, 6]);
    let wt = Tensor::constant(w);
    assert_grads("sum_axis", |t| t[0].sum_axis(1, false).square().sum(), &[a.clone()]);
    assert_grads("mean_axis keep", |t| t[0].mean_axis(2, true).square().sum(), &[a.clone()]);
    assert_grads("reshape/permute", |t| t[0].reshape(&[6, 6]).permute(&[1, 0]).mul(&wt.reshape(&[6, 6])).sum(), &[a.clone()]);
    assert_grads("narrow/concat", |t| Tensor::concat(&[t[0].narrow(2, 1, 3), t[0].narrow(2, 0, 2)], 2).square().sum(), &[a.clone()]);
    assert_grads("pad/avg_pool", |t| t[0].pad(2, 1, 2).narrow(2, 0, 6).avg_pool_last(3).square().sum(), &[a.clone()]);
    assert_grads("logsumexp", |t| t[0].logsumexp(1, false).square().sum(), &[a.clone()]);
    assert_grads("log_softmax", |t| t[0].log_softmax().mul(&wt).sum(), &[a.clone()]);
    assert_grads("stack", |t| Tensor::stack(&[t[0].clone(), t[0].square()], 1).mean_axis(1, false).sum(), &[a.clone()]);
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[4, 5]);
    let a3 = rand_array(&mut rng, &[2, 3, 4]);
    let b3 = rand_array(&mut rng, &[2, 4, 5]);
    assert_grads("mm", |t| t[0].matmul(&t[1]).square().sum(), &[a, b.clone()]);
    assert_grads("bmm 3x2", |t| t[0].matmul(&t[1]).square().sum(), &[a3.clone(), b]);
    assert_grads("bmm 3x3", |t| t[0].matmul(&t[1]).square().sum(), &[a3, b3]);
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_array(&mut rng, &[2, 3, 11]);
    let w = rand_array(&mut rng, &[4, 3, 3]);
    let bias = rand_array(&mut rng, &[4]);
    assert_grads("conv1d", |t| t[0].conv1d(&t[1], Some(&t[2]), 2, 1, 2).square().sum(), &[x.clone(), w, bias]);
    let wt = rand_array(&mut rng, &[3, 4, 5]);
    let bt = rand_array(&mut rng, &[4]);
    assert_grads("conv_t1d", |t| t[0].conv_transpose1d(&t[1], Some(&t[2]), 3, 1, 1).square().sum(), &[x, wt, bt]);
    let x2 = rand_array(&mut rng, &[2, 2, 5, 7]);
    let w2 = rand_array(&mut rng, &[3, 2, 3, 3]);
    let b2 = rand_array(&mut rng, &[3]);
    assert_grads("conv2d", |t| t[0].conv2d(&t[1], Some(&t[2]), (1, 2), (1, 1)).square().sum(), &[x2, w2, b2]);
}

#[test]
fn conv1d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[1, 2, 9]);
    let w = rand_array(&mut rng, &[1, 2, 3]);
    let y = Tensor::constant(x.clone()).conv1d(&Tensor::constant(w.clone()), None, 2, 1, 1);
    let out_len = (9 + 2 - 3) / 2 + 1;
    assert_eq!(y.shape(), &[1, 1, out_len]);
    for o in 0..out_len {
        let mut acc = 0.0;
        for c in 0..2 {
            for k in 0..3 {
                let i = (o * 2 + k) as isize - 1;
                if (0..9).contains(&i) {
                    acc += w[[0, c, k]] * x[[0, c, i as usize]];
                }
            }
        }
        assert!((y.value()[[0, 0, o]] - acc).abs() < 1e-12);
    }
}

#[test]
fn fir_and_stft_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_array(&mut rng, &[2, 3, 12]);
    let taps = vec![0.1, 0.2, 0.4, 0.2, 0.1];
    let t1 = taps.clone();
    assert_grads("fir_decimate", move |t| t[0].fir_decimate(&t1, 3).square().sum(), &[x.clone()]);
    let t2 = taps.clone();
    assert_grads("fir_interpolate", move |t| t[0].fir_interpolate(&t2, 2).square().sum(), &[x]);
    let s = rand_array(&mut rng, &[2, 40]);
    let win: Vec<f64> = (0..16).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / 16.0).cos()).collect();
    assert_grads("stft_magnitude", move |t| t[0].stft_magnitude(16, 4, &win).sum(), &[s]);
}

#[test]
fn interpolation_is_scaled_adjoint_of_decimation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let taps = vec![0.05, -0.1, 0.3, 0.5, 0.3, -0.1, 0.05];
    let x = rand_array(&mut rng, &[1, 12]);
    let y = rand_array(&mut rng, &[1, 4]);
    let dx = Tensor::constant(x.clone()).fir_decimate(&taps, 3);
    let uy = Tensor::constant(y.clone()).fir_interpolate(&taps, 3);
    let lhs: f64 = dx.value().iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let rhs: f64 = uy.value().iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / 3.0;
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn inference_builds_no_graph() {
    let a = Tensor::from_vec(&[2], vec![1.0, 2.0]);
    let b = a.square().sum();
    assert!(!b.requires_grad());
    assert!(b.backward().is_empty());
}
