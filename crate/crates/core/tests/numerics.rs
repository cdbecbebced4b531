mod common;

use std::sync::Arc;

use common::{circular_direct_2d, dft, long_conv_direct, rng};
use hyenapixel::{circular_convolve, fft, grad_check, Tape, Tensor, Var};
use proptest::prelude::*;

fn signal(n: usize, seed: u64) -> Tensor {
    Tensor::uniform([n], -1.0, 1.0, &mut rng(seed))
}

#[test]
fn fft_matches_direct_dft_at_awkward_lengths() {
    for (n, seed) in [(63, 1), (111, 2), (64, 3), (1, 4)] {
        let x = signal(n, seed);
        let fast = fft(&x, &[0], false).unwrap().interleaved();
        for (k, (re, im)) in dft(x.data()).into_iter().enumerate() {
            assert!((fast[2 * k] - re).abs() < 1e-10, "n={n} k={k}");
            assert!((fast[2 * k + 1] - im).abs() < 1e-10, "n={n} k={k}");
        }
    }
}

#[test]
fn inverse_fft_recovers_the_signal() {
    let x = Tensor::uniform([7, 9, 2], -1.0, 1.0, &mut rng(5));
    let back = fft(&x, &[0, 1], false).unwrap().transform(&[0, 1], true).unwrap();
    assert!(back.real_part().max_abs_diff(&x) < 1e-13);
    let im = back.interleaved().iter().skip(1).step_by(2).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(im < 1e-13);
}

#[test]
fn circular_convolution_matches_direct_sum() {
    let (x, h) = (signal(64, 6), signal(64, 7));
    let y = circular_convolve(&x, &h, &[0]).unwrap();
    let direct = circular_direct_2d(x.data(), h.data(), 1, 64);
    assert!(y.max_abs_diff(&Tensor::new([64], direct).unwrap()) < 1e-12);

    let x = Tensor::uniform([9, 13], -1.0, 1.0, &mut rng(8));
    let h = Tensor::uniform([9, 13], -1.0, 1.0, &mut rng(9));
    let y = circular_convolve(&x, &h, &[0, 1]).unwrap();
    let direct = Tensor::new([9, 13], circular_direct_2d(x.data(), h.data(), 9, 13)).unwrap();
    assert!(y.max_abs_diff(&direct) < 1e-12);
}

#[test]
fn circular_convolution_keeps_batch_axes_separate() {
    let x = Tensor::uniform([3, 10], -1.0, 1.0, &mut rng(10));
    let h = Tensor::uniform([3, 10], -1.0, 1.0, &mut rng(11));
    let y = circular_convolve(&x, &h, &[1]).unwrap();
    for b in 0..3 {
        let row = |t: &Tensor| t.data()[b * 10..(b + 1) * 10].to_vec();
        let direct = circular_direct_2d(&row(&x), &row(&h), 1, 10);
        for (a, d) in row(&y).iter().zip(direct) {
            assert!((a - d).abs() < 1e-12);
        }
    }
}

#[test]
fn long_convolution_at_flattened_stage_one_length() {
    // 56·56 positions with a 2·56²-1 tap bidirectional kernel.
    let l = 56 * 56;
    let u = Tensor::uniform([1, 1, l, 2], -1.0, 1.0, &mut rng(12));
    let k = Tensor::uniform([1, 2 * l - 1, 2], -1.0, 1.0, &mut rng(13));
    let tape = Tape::new();
    let y = tape.leaf(u.clone()).long_conv(&tape.leaf(k.clone()), (0, l - 1)).unwrap();
    let direct = long_conv_direct(&u, &k, (0, l - 1));
    assert!(y.value().max_abs_diff(&direct) < 1e-9);
}

#[test]
fn long_convolution_causal_and_planar_geometries() {
    let u = Tensor::uniform([2, 1, 17, 3], -1.0, 1.0, &mut rng(14));
    let k = Tensor::uniform([1, 17, 3], -1.0, 1.0, &mut rng(15));
    let tape = Tape::new();
    let y = tape.leaf(u.clone()).long_conv(&tape.leaf(k.clone()), (0, 0)).unwrap();
    assert!(y.value().max_abs_diff(&long_conv_direct(&u, &k, (0, 0))) < 1e-12);

    let u = Tensor::uniform([1, 7, 10, 2], -1.0, 1.0, &mut rng(16));
    let k = Tensor::uniform([13, 19, 2], -1.0, 1.0, &mut rng(17));
    let y = tape.leaf(u.clone()).long_conv(&tape.leaf(k.clone()), (6, 9)).unwrap();
    assert!(y.value().max_abs_diff(&long_conv_direct(&u, &k, (6, 9))) < 1e-12);
}

fn check<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> hyenapixel::Result<Var<'t>>,
{
    let r = grad_check(f, inputs, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
}

fn u(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Uniform values with magnitude in `[0.2, 1]`, away from activation kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    u(shape, seed).map(|v| v.signum() * (0.2 + 0.8 * v.abs()))
}

#[test]
fn elementwise_and_reduction_gradients() {
    let (a, b) = (u(&[3, 4], 20), u(&[3, 4], 21));
    check("add", |_, v| v[0].add(&v[1])?.sin()?.sum(), &[a.clone(), b.clone()]);
    check("sub", |_, v| v[0].sub(&v[1])?.sin()?.sum(), &[a.clone(), b.clone()]);
    check("mul", |_, v| v[0].mul(&v[1])?.sin()?.sum(), &[a.clone(), b.clone()]);
    check("scale", |_, v| v[0].scale(-1.7)?.add_scalar(0.3)?.sin()?.mean(), &[a.clone()]);
    let mask = Arc::new(u(&[3, 4], 22));
    check("mul_const", move |_, v| v[0].mul_const(Arc::clone(&mask))?.sin()?.sum(), &[a.clone()]);
    check("reshape", |_, v| v[0].reshape([4, 3])?.narrow_last(1, 2)?.sin()?.sum(), &[a.clone()]);
    let (x, p) = (u(&[2, 3, 4], 23), u(&[4], 24));
    check("mul_channel", |_, v| v[0].mul_channel(&v[1])?.sin()?.sum(), &[x.clone(), p.clone()]);
    check("add_channel", |_, v| v[0].add_channel(&v[1])?.sin()?.sum(), &[x, p]);
}

#[test]
fn layer_gradients() {
    let x = u(&[2, 3, 3, 4], 30);
    check("linear", |_, v| v[0].linear(&v[1], Some(&v[2]))?.sin()?.sum(), &[x.clone(), u(&[4, 5], 31), u(&[5], 32)]);
    check(
        "depthwise_conv2d",
        |_, v| v[0].depthwise_conv2d(&v[1], Some(&v[2]), (1, 2))?.sin()?.sum(),
        &[x.clone(), u(&[3, 5, 4], 33), u(&[4], 34)],
    );
    check(
        "conv2d",
        |_, v| v[0].conv2d(&v[1], &v[2], 2, 1)?.sin()?.sum(),
        &[x.clone(), u(&[3, 3, 4, 2], 35), u(&[2], 36)],
    );
    check(
        "layer_norm",
        |_, v| v[0].layer_norm(&v[1], &v[2], 1e-6)?.sin()?.sum(),
        &[x.clone(), u(&[4], 37), u(&[4], 38)],
    );
    check(
        "star_relu",
        |_, v| v[0].star_relu(&v[1], &v[2])?.sin()?.sum(),
        &[away_from_zero(&[2, 3, 3, 4], 39), Tensor::scalar(0.9), Tensor::scalar(-0.4)],
    );
    check("spatial_mean", |_, v| v[0].spatial_mean()?.sin()?.sum(), &[x]);
    let logits = u(&[4, 5], 40);
    check("cross_entropy", |_, v| v[0].cross_entropy(&[0, 3, 4, 1], 0.1), &[logits]);
}

#[test]
fn convolution_and_window_gradients() {
    let d = Arc::new(vec![0.0, 1.0, 2.5, 4.0, 7.0]);
    let alpha = Tensor::new([3], vec![0.1, 0.4, 0.9]).unwrap();
    check(
        "decay_window",
        move |_, v| Var::decay_window(&v[0], &v[1], Arc::clone(&d))?.sin()?.sum(),
        &[alpha, u(&[3], 41)],
    );
    check(
        "long_conv",
        |_, v| v[0].long_conv(&v[1], (2, 3))?.sin()?.sum(),
        &[u(&[2, 3, 4, 2], 42), u(&[5, 7, 2], 43)],
    );
    check(
        "circular_convolve",
        |_, v| v[0].circular_convolve(&v[1], &[0, 1])?.sin()?.sum(),
        &[u(&[5, 6, 2], 44), u(&[5, 6, 2], 45)],
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval_holds(data in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        let n = data.len();
        let x = Tensor::new([n], data).unwrap();
        let spec = fft(&x, &[0], false).unwrap().interleaved();
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = spec.iter().map(|v| v * v).sum::<f64>() / n as f64;
        prop_assert!((energy - spectral).abs() <= 1e-9 * energy.max(1.0));
    }

    #[test]
    fn circular_convolution_commutes(
        rows in 1usize..8, cols in 1usize..12, seed in any::<u64>()
    ) {
        let x = Tensor::uniform([rows, cols], -1.0, 1.0, &mut rng(seed));
        let h = Tensor::uniform([rows, cols], -1.0, 1.0, &mut rng(seed ^ 1));
        let xy = circular_convolve(&x, &h, &[0, 1]).unwrap();
        let yx = circular_convolve(&h, &x, &[0, 1]).unwrap();
        prop_assert!(xy.max_abs_diff(&yx) < 1e-12);
    }

    #[test]
    fn long_convolution_is_linear(
        len in 1usize..40, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()
    ) {
        let x = Tensor::uniform([1, 1, len, 2], -1.0, 1.0, &mut rng(seed));
        let y = Tensor::uniform([1, 1, len, 2], -1.0, 1.0, &mut rng(seed ^ 2));
        let k = Tensor::uniform([1, 2 * len - 1, 2], -1.0, 1.0, &mut rng(seed ^ 3));
        let tape = Tape::new();
        let kv = tape.leaf(k);
        let conv = |t: Tensor| tape.leaf(t).long_conv(&kv, (0, len - 1)).unwrap().value();
        let mixed = conv(x.zip_map(&y, |p, q| a * p + b * q).unwrap());
        let separate = conv(x).zip_map(&conv(y), |p, q| a * p + b * q).unwrap();
        prop_assert!(mixed.max_abs_diff(&separate) < 1e-11);
    }
}
