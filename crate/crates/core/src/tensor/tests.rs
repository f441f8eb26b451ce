use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    (random_vec(rng, shape.iter().product()), shape.to_vec())
}

#[test]
fn shape_must_match_data() {
    assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
    assert_eq!(t.numel(), 6);
    assert!(t.grad().is_none());
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(random_vec(&mut rng, 2 * 3 * 5 * 4), &[2, 3, 5, 4]).unwrap();
    let mut k = vec![0.0; 9];
    for c in 0..3 {
        k[c * 3 + c] = 1.0;
    }
    let k = Tensor::new(k, &[3, 3, 1, 1]).unwrap();
    let y = conv2d(&x, &k, &Tensor::zeros(&[3]), 1, 0).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_all_ones_window_counts() {
    let x = Tensor::full(&[1, 1, 4, 4], 1.0);
    let k = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
    let at = |r: usize, c: usize| y.data()[r * 4 + c];
    assert_eq!(at(1, 1), 9.0);
    assert_eq!(at(2, 2), 9.0);
    assert_eq!(at(0, 0), 4.0);
    assert_eq!(at(3, 3), 4.0);
    assert_eq!(at(0, 1), 6.0);
}

#[test]
fn conv_zero_kernel_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(random_vec(&mut rng, 2 * 4 * 4), &[1, 2, 4, 4]).unwrap();
    let y = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_stride_two_halves_resolution() {
    let x = Tensor::full(&[1, 1, 8, 6], 1.0);
    let y = conv2d(&x, &Tensor::full(&[2, 1, 3, 3], 1.0), &Tensor::zeros(&[2]), 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 2, 4, 3]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let err = conv2d(&x, &Tensor::zeros(&[2, 4, 3, 3]), &Tensor::zeros(&[2]), 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("3 channels") && msg.contains("expects 4"), "{msg}");
}

#[test]
fn group_norm_constant_input_is_zero() {
    let x = Tensor::full(&[2, 4, 3, 3], 0.7);
    let y = group_norm(&x, 2, 1e-5).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn group_norm_keeps_standardised_values() {
    let vals: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let x = Tensor::new(vals.clone(), &[1, 1, 4, 4]).unwrap();
    let y = group_norm(&x, 1, 1e-5).unwrap();
    for (a, b) in y.data().iter().zip(&vals) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn group_norm_per_group_mean_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(random_vec(&mut rng, 2 * 6 * 5 * 5), &[2, 6, 5, 5]).unwrap();
    let y = group_norm(&x, 3, 1e-5).unwrap();
    for chunk in y.data().chunks(2 * 25) {
        let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    assert!(group_norm(&Tensor::zeros(&[1, 6, 2, 2]), 4, 1e-5).is_err());
    assert!(group_norm(&Tensor::zeros(&[1, 4, 2, 2]), 2, 0.0).is_err());
}

#[test]
fn silu_reference_points() {
    let y = Tensor::new(vec![0.0, 20.0, -20.0], &[3]).unwrap().silu();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 20.0).abs() < 1e-6);
    assert!(y.data()[2].abs() < 1e-6);
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::parameter(vec![0.3, -2.0, 5.0, 1.0, 0.0, 7.0], &[2, 3]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let vals = vec![0.3, -2.0, 5.0, 1.5];
    let x = Tensor::parameter(vals.clone(), &[4]).unwrap();
    x.mul(&x).unwrap().sum().scale(0.5).backward().unwrap();
    assert_eq!(x.grad().unwrap(), vals);
}

#[test]
fn backward_twice_doubles_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::parameter(random_vec(&mut rng, 2 * 4 * 4), &[1, 2, 4, 4]).unwrap();
    let k = Tensor::parameter(random_vec(&mut rng, 2 * 2 * 9), &[2, 2, 3, 3]).unwrap();
    let b = Tensor::parameter(random_vec(&mut rng, 2), &[2]).unwrap();
    let loss = group_norm(&conv2d(&x, &k, &b, 1, 1).unwrap(), 1, 1e-5)
        .unwrap()
        .silu()
        .square()
        .sum();
    loss.backward().unwrap();
    let first = k.grad().unwrap();
    loss.backward().unwrap();
    let second = k.grad().unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
    assert!(x.square().backward().is_err());
}

#[test]
fn intermediate_tensors_receive_gradients() {
    let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.scale(3.0);
    y.sum().backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
    assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
}

#[test]
fn no_graph_without_grad_inputs() {
    let x = Tensor::full(&[1, 1, 4, 4], 1.0);
    let y = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert!(!y.requires_grad());
    assert!(!y.has_grad_fn());
}

#[test]
fn detach_cuts_the_graph() {
    let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.scale(2.0).detach();
    assert!(!y.requires_grad());
    let z = y.mul(&x).unwrap().sum();
    z.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn gradcheck_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_input(&mut rng, &[2, 3, 2, 2]);
    let b = rand_input(&mut rng, &[2, 3, 2, 2]);
    let both = [a.clone(), b.clone()];
    assert!(gradcheck(&both, |t| t[0].add(&t[1]).unwrap()) < 1e-4);
    assert!(gradcheck(&both, |t| t[0].sub(&t[1]).unwrap()) < 1e-4);
    assert!(gradcheck(&both, |t| t[0].mul(&t[1]).unwrap()) < 1e-4);
    assert!(gradcheck(&both, |t| t[0].mse(&t[1]).unwrap()) < 1e-4);
    let one = [a];
    assert!(gradcheck(&one, |t| t[0].scale(-1.7)) < 1e-4);
    assert!(gradcheck(&one, |t| t[0].add_scalar(0.4)) < 1e-4);
    assert!(gradcheck(&one, |t| t[0].square()) < 1e-4);
    assert!(gradcheck(&one, |t| t[0].sum()) < 1e-4);
    assert!(gradcheck(&one, |t| t[0].mean()) < 1e-4);
    assert!(gradcheck(&one, |t| t[0].scale(4.0).silu()) < 1e-4);
    assert!(gradcheck(&one, |t| t[0].reshape(&[6, 4]).unwrap()) < 1e-4);
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_input(&mut rng, &[2, 2, 2, 3]);
    let b = rand_input(&mut rng, &[2, 1, 2, 3]);
    assert!(gradcheck(&[a.clone(), b], |t| concat_channels(&t[0], &t[1]).unwrap()) < 1e-4);
    assert!(gradcheck(&[a.clone()], |t| upsample_nearest2x(&t[0]).unwrap()) < 1e-4);
    let s = rand_input(&mut rng, &[2]);
    let sh = rand_input(&mut rng, &[2]);
    assert!(gradcheck(&[a, s, sh], |t| channel_affine(&t[0], &t[1], &t[2]).unwrap()) < 1e-4);
}

#[test]
fn gradcheck_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = rand_input(&mut rng, &[3, 5]);
    let b = rand_input(&mut rng, &[3]);
    let x1 = rand_input(&mut rng, &[5]);
    let x2 = rand_input(&mut rng, &[4, 5]);
    assert!(gradcheck(&[x1, w.clone(), b.clone()], |t| linear(&t[0], &t[1], &t[2]).unwrap()) < 1e-4);
    assert!(gradcheck(&[x2, w, b], |t| linear(&t[0], &t[1], &t[2]).unwrap()) < 1e-4);
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_input(&mut rng, &[2, 2, 4, 4]);
    let k = rand_input(&mut rng, &[3, 2, 3, 3]);
    let b = rand_input(&mut rng, &[3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let err = gradcheck(&[x.clone(), k.clone(), b.clone()], |t| {
            conv2d(&t[0], &t[1], &t[2], stride, pad).unwrap()
        });
        assert!(err < 1e-4, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn gradcheck_group_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_input(&mut rng, &[2, 4, 2, 3]);
    assert!(gradcheck(&[x.clone()], |t| group_norm(&t[0], 2, 1e-5).unwrap()) < 1e-4);
    assert!(gradcheck(&[x], |t| group_norm(&t[0], 4, 1e-5).unwrap()) < 1e-4);
}

#[test]
fn gradcheck_conv_norm_silu_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_input(&mut rng, &[1, 2, 4, 4]);
    let k = rand_input(&mut rng, &[4, 2, 3, 3]);
    let b = rand_input(&mut rng, &[4]);
    let err = gradcheck(&[x, k, b], |t| {
        let h = conv2d(&t[0], &t[1], &t[2], 1, 1).unwrap();
        group_norm(&h, 2, 1e-5).unwrap().silu()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Tensor::new(random_vec(&mut rng, 3 * 8 * 8), &[1, 3, 8, 8]).unwrap();
        let k = Tensor::new(random_vec(&mut rng, 4 * 3 * 9), &[4, 3, 3, 3]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[4]), 1, 1).unwrap();
        group_norm(&y, 2, 1e-5).unwrap().silu().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn parameter_store_rejects_duplicates_and_keeps_order() {
    let mut store = ParameterStore::new();
    store.insert("b", Tensor::zeros(&[2])).unwrap();
    store.insert("a", Tensor::zeros(&[3])).unwrap();
    assert!(store.insert("b", Tensor::zeros(&[1])).is_err());
    assert_eq!(store.names().collect::<Vec<_>>(), ["b", "a"]);
    assert_eq!(store.numel(), 5);
    assert!(store.set_data("a", vec![1.0; 2]).is_err());
    store.set_data("a", vec![1.0; 3]).unwrap();
    assert_eq!(store.get("a").unwrap().data(), &[1.0; 3]);
}
