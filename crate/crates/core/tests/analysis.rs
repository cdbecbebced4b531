mod common;

use common::{long_branch, rng, single_block_config, support_box};
use hyenapixel::analysis::{dense_conv, fit_slope, CoverageSource};
use hyenapixel::mixer::MixerKind;
use hyenapixel::model::forward;
use hyenapixel::train::{evaluate, load_dataset, train, DatasetSpec, TrainConfig};
use hyenapixel::{
    bench_runtime, build_model, coverage_report, erf_map, kernel_effective_diameter, truncate_kernels, BenchVariant,
    Model, ModelConfig, Module, Tensor,
};
use proptest::prelude::*;

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::uniform([n, size, size, 3], 0.0, 1.0, &mut rng(seed))
}

fn zero_branches(m: &mut Model) {
    for stage in &mut m.stages {
        for block in &mut stage.blocks {
            for (name, p) in block.mixer.named_params_mut() {
                if name.starts_with("hyena.out_proj") || name.starts_with("local.contract") {
                    p.set(Tensor::zeros(p.value().shape().to_vec()));
                }
            }
            for (name, p) in block.ffn.named_params_mut() {
                if name.starts_with("fc2") {
                    p.set(Tensor::zeros(p.value().shape().to_vec()));
                }
            }
        }
    }
}

fn inclusive(lo: usize, hi: usize) -> ((usize, usize), (usize, usize)) {
    ((lo, hi), (lo, hi))
}

#[test]
fn erf_of_the_stem_is_its_receptive_field() {
    let mut m = build_model(&single_block_config("local", 8, 64)).unwrap();
    zero_branches(&mut m);
    let erf = erf_map(&m, &images(2, 64, 1)).unwrap();
    // 16x16 map, center 8; stride 4, pad 2, kernel 7.
    assert_eq!(support_box(&erf.grid), Some(inclusive(30, 36)));
}

#[test]
fn erf_of_a_local_block_is_confined() {
    let m = build_model(&single_block_config("local", 8, 64)).unwrap();
    let erf = erf_map(&m, &images(2, 64, 2)).unwrap();
    // Seven feature positions at stride 4 widen the stem field by 24 pixels.
    assert_eq!(support_box(&erf.grid), Some(inclusive(18, 48)));
}

#[test]
fn erf_of_a_pixel_block_covers_the_image() {
    let m = build_model(&single_block_config("hpx", 8, 64)).unwrap();
    let erf = erf_map(&m, &images(2, 64, 3)).unwrap();
    let min = erf.grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min > 0.0, "min {min}");
}

#[test]
fn erf_is_normalized() {
    let m = build_model(&ModelConfig::preset("hb-micro").unwrap()).unwrap();
    let erf = erf_map(&m, &images(3, 32, 4)).unwrap();
    assert_eq!(erf.num_images, 3);
    assert!(erf.scale > 0.0);
    let max = erf.grid.data().iter().cloned().fold(0.0, f64::max);
    assert_eq!(max, 1.0);
    assert!(erf.grid.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(erf_map(&m, &images(0, 32, 4)).is_err());
}

fn radial_grid(side: usize, alpha: f64, bias: f64) -> Tensor {
    let c = (side / 2) as f64;
    Tensor::from_fn([side, side], |i| {
        let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
        (-alpha * (y * y + x * x).sqrt()).exp() + bias
    })
}

#[test]
fn diameter_examples() {
    assert_eq!(kernel_effective_diameter(&Tensor::ones([13, 13]), 0.05).unwrap(), 13.0);
    assert_eq!(kernel_effective_diameter(&radial_grid(13, 1e6, 0.0), 0.05).unwrap(), 1.0);
    // Unit distance decays to exactly 1/20.
    assert_eq!(kernel_effective_diameter(&radial_grid(13, 20f64.ln(), 0.0), 0.05 - 1e-12).unwrap(), 3.0);
    assert_eq!(kernel_effective_diameter(&Tensor::zeros([5, 5]), 0.05).unwrap(), 0.0);
    let line = Tensor::new([7], vec![0.0, 0.2, 0.5, 1.0, 0.5, 0.01, 0.0]).unwrap();
    assert_eq!(kernel_effective_diameter(&line, 0.1).unwrap(), 5.0);
    assert!(kernel_effective_diameter(&Tensor::ones([4, 5]), 0.05).is_err());
    assert!(kernel_effective_diameter(&Tensor::ones([5, 5]), 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diameter_shrinks_with_threshold_and_decay(
        alpha in 0.01f64..3.0,
        d_alpha in 0.0f64..2.0,
        t in 0.01f64..0.9,
        d_t in 0.0f64..0.5,
        half in 1usize..10,
    ) {
        let side = 2 * half + 1;
        let base = kernel_effective_diameter(&radial_grid(side, alpha, 0.0), t).unwrap();
        let higher_t = kernel_effective_diameter(&radial_grid(side, alpha, 0.0), t + d_t).unwrap();
        let faster = kernel_effective_diameter(&radial_grid(side, alpha + d_alpha, 0.0), t).unwrap();
        prop_assert!(higher_t <= base);
        prop_assert!(faster <= base);
        prop_assert!(base >= 1.0 && base <= side as f64);
    }
}

#[test]
fn coverage_rows_and_bounds() {
    for preset in ["hpx-micro", "hb-micro", "sep-micro", "causal-micro"] {
        let m = build_model(&ModelConfig::preset(preset).unwrap()).unwrap();
        let blocks: usize = m.config.stage_blocks.iter().sum();
        for source in [CoverageSource::Window, CoverageSource::Kernel] {
            let report = coverage_report(&m, 0.05, source).unwrap();
            assert_eq!(report.rows.len(), blocks, "{preset}");
            for r in &report.rows {
                assert!(r.coverage > 0.0 && r.coverage <= 2.0, "{preset} {r:?}");
            }
            assert_eq!(report.to_csv().lines().count(), 1 + blocks);
        }
    }
    let local = build_model(&ModelConfig::preset("local-micro").unwrap()).unwrap();
    assert!(coverage_report(&local, 0.05, CoverageSource::Window).is_err());
}

#[test]
fn flat_windows_cover_twice_the_extent() {
    let mut m = build_model(&ModelConfig::preset("hpx-micro").unwrap()).unwrap();
    for stage in &mut m.stages {
        for block in &mut stage.blocks {
            for conv in &mut block.mixer.hyena_mut().unwrap().convs {
                let c = conv.filter.channels();
                conv.filter.window.alpha.set(Tensor::zeros([c]));
            }
        }
    }
    let report = coverage_report(&m, 0.05, CoverageSource::Window).unwrap();
    let extents = m.config.stage_extents();
    for r in &report.rows {
        let f = extents[r.stage - 1].0 as f64;
        assert_eq!(r.diameter, 2.0 * f - 1.0);
        assert!((r.coverage - (2.0 * f - 1.0) / f).abs() < 1e-12);
    }
}

#[test]
fn full_relative_size_is_the_identity() {
    let m = build_model(&ModelConfig::preset("hpx-micro").unwrap()).unwrap();
    let x = images(2, 32, 5);
    let before = forward(&m, &x).unwrap();
    for stage in 1..=4 {
        let t = truncate_kernels(&m, stage, 2.0).unwrap();
        assert_eq!(forward(&t, &x).unwrap(), before, "stage {stage}");
    }
}

#[test]
fn zero_relative_size_silences_the_long_branch() {
    for preset in ["hpx-micro", "hb-micro", "sep-micro", "causal-micro"] {
        let m = build_model(&ModelConfig::preset(preset).unwrap()).unwrap();
        let x = images(1, 32, 6);
        for stage in 1..=4 {
            let t = truncate_kernels(&m, stage, 0.0).unwrap();
            let g = long_branch(&t, stage, &x);
            assert!(g.data().iter().all(|&v| v == 0.0), "{preset} stage {stage}");
            assert!(long_branch(&m, stage, &x).data().iter().any(|&v| v != 0.0));
            for (s, st) in t.stages.iter().enumerate() {
                let masked = st.blocks.iter().any(|b| b.mixer.hyena().unwrap().convs.iter().any(|c| c.mask.is_some()));
                assert_eq!(masked, s + 1 == stage, "{preset} stage {stage}");
            }
        }
    }
}

#[test]
fn truncation_rejects_bad_requests() {
    let m = build_model(&ModelConfig::preset("hpx-micro").unwrap()).unwrap();
    assert!(truncate_kernels(&m, 0, 1.0).is_err());
    assert!(truncate_kernels(&m, 5, 1.0).is_err());
    assert!(truncate_kernels(&m, 1, 2.5).is_err());
    assert!(truncate_kernels(&m, 1, -0.1).is_err());
    let local = build_model(&ModelConfig::preset("local-micro").unwrap()).unwrap();
    assert!(truncate_kernels(&local, 1, 1.0).is_err());
}

#[test]
fn truncating_a_trained_model_does_not_help() {
    let spec = DatasetSpec::default();
    let (train_set, val_set) = load_dataset(&spec).unwrap();
    let mut m = build_model(&ModelConfig::preset("hpx-micro").unwrap()).unwrap();
    train(&mut m, &train_set, &val_set, &TrainConfig::default()).unwrap();
    let deepest = (1..=m.stages.len())
        .rev()
        .find(|&s| m.stages[s - 1].blocks.iter().any(|b| b.mixer.hyena().is_some()))
        .unwrap();
    let full = evaluate(&truncate_kernels(&m, deepest, 2.0).unwrap(), &val_set, 64).unwrap();
    let cut = evaluate(&truncate_kernels(&m, deepest, 0.1).unwrap(), &val_set, 64).unwrap();
    assert!(full >= cut, "{full} < {cut}");
}

#[test]
fn dense_conv_matches_direct_summation() {
    let (h, w, c) = (5, 7, 2);
    let x = Tensor::uniform([h, w, c], -1.0, 1.0, &mut rng(7));
    let k = Tensor::uniform([2 * h - 1, 2 * w - 1, c], -1.0, 1.0, &mut rng(8));
    let y = dense_conv(&x, &k).unwrap();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for s in 0..h {
                    for t in 0..w {
                        acc += x.at(&[s, t, ch]) * k.at(&[i + h - 1 - s, j + w - 1 - t, ch]);
                    }
                }
                assert!((y.at(&[i, j, ch]) - acc).abs() < 1e-12);
            }
        }
    }
    assert!(dense_conv(&x, &Tensor::zeros([3, 3, c])).is_err());
}

#[test]
fn bench_table_shape() {
    let variants = [BenchVariant::Mixer(MixerKind::HPx), BenchVariant::DenseConv];
    let table = bench_runtime(&variants, &[4, 8], 2, 5).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.slopes.len(), 2);
    assert!(table.rows.iter().all(|r| r.median_seconds > 0.0 && r.pixels == r.extent * r.extent));
    assert_eq!(table.to_csv().lines().count(), 5);
    assert!(bench_runtime(&variants, &[4], 2, 4).is_err());
    assert!("nope".parse::<BenchVariant>().is_err());
}

#[test]
fn slope_fit_is_exact_on_power_laws() {
    let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.7 * v + 0.3).collect();
    assert!((fit_slope(&x, &y) - 1.7).abs() < 1e-12);
}
