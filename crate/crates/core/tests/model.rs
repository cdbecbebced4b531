mod common;

use common::rng;
use hyenapixel::model::{block_forward, forward, load_checkpoint, save_checkpoint};
use hyenapixel::nn::module_grad_check;
use hyenapixel::{build_model, count_params, Model, ModelConfig, Module, Tensor};
use tempfile::TempDir;

fn model(preset: &str) -> Model {
    build_model(&ModelConfig::preset(preset).unwrap()).unwrap()
}

fn count(preset: &str) -> usize {
    count_params(&model(preset))
}

#[test]
fn s18_parameter_anchors() {
    for (preset, target) in [("hpx-s18", 29e6), ("hb-s18", 28e6), ("chpx-s18", 28e6)] {
        let n = count(preset) as f64;
        assert!((n / target - 1.0).abs() <= 0.10, "{preset}: {n} vs {target}");
    }
}

#[test]
fn depth_orders_parameter_counts() {
    let (s4, s12) = (count("hpx-s4"), count("hpx-s12"));
    assert!(s4 < s12 && s12 < count("hpx-s18"));
}

#[test]
fn shape_ladder_at_224() {
    let expect = [(56, 56, 64), (28, 28, 128), (14, 14, 320), (7, 7, 512)];
    for family in ["hpx", "hb", "sep", "causal", "chpx", "local"] {
        assert_eq!(model(&format!("{family}-s4")).shape_ladder(), expect, "{family}");
    }
    let cfg = ModelConfig::preset("hpx-s18").unwrap();
    assert_eq!(cfg.stage_extents(), [(56, 56), (28, 28), (14, 14), (7, 7)]);
    assert_eq!(cfg.stage_blocks, [3, 3, 9, 3]);
}

#[test]
fn micro_stage_maps_have_the_ladder_shapes() {
    let m = model("hpx-micro");
    let x = Tensor::uniform([2, 32, 32, 3], 0.0, 1.0, &mut rng(1));
    let tape = hyenapixel::Tape::new();
    let ctx = hyenapixel::Ctx::new(&tape);
    let f = m.features(&ctx, ctx.input(x)).unwrap();
    let shapes: Vec<Vec<usize>> = f.stages.iter().map(|s| s.shape()).collect();
    assert_eq!(shapes, [[2, 8, 8, 8], [2, 4, 4, 8], [2, 2, 2, 8], [2, 1, 1, 8]]);
    assert_eq!(f.logits.shape(), [2, 4]);
}

#[test]
fn batch_items_are_independent() {
    let m = model("hb-micro");
    let x = Tensor::uniform([3, 32, 32, 3], 0.0, 1.0, &mut rng(2));
    let all = forward(&m, &x).unwrap();
    for i in 0..3 {
        let one = Tensor::new([1, 32, 32, 3], x.data()[i * 3072..(i + 1) * 3072].to_vec()).unwrap();
        let y = forward(&m, &one).unwrap();
        assert!(y.max_abs_diff(&Tensor::new([1, 4], all.data()[i * 4..i * 4 + 4].to_vec()).unwrap()) < 1e-13);
    }
}

fn zero_branches(m: &mut Model, stage: usize) {
    let block = &mut m.stages[stage].blocks[0];
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

#[test]
fn zeroed_branches_make_blocks_identities() {
    for preset in ["hpx-micro", "local-micro", "sep-micro"] {
        let mut m = model(preset);
        zero_branches(&mut m, 0);
        let x = Tensor::uniform([2, 8, 8, 8], -1.0, 1.0, &mut rng(3));
        assert_eq!(block_forward(&x, &m.stages[0].blocks[0]).unwrap(), x, "{preset}");
    }
}

#[test]
fn zero_res_scale_silences_a_branch() {
    let mut m = model("hpx-micro");
    let block = &mut m.stages[2].blocks[0];
    let (s1, s2) = (block.res_scale1.as_mut().unwrap(), block.res_scale2.as_mut().unwrap());
    s1.set(Tensor::zeros([8]));
    s2.set(Tensor::zeros([8]));
    let x = Tensor::uniform([1, 2, 2, 8], -1.0, 1.0, &mut rng(4));
    assert_eq!(block_forward(&x, &m.stages[2].blocks[0]).unwrap(), x);
    assert!(m.stages[0].blocks[0].res_scale1.is_none());
}

#[test]
fn block_gradients() {
    for (mixer, c) in [("hpx", 8), ("hpx", 4), ("hb", 8), ("sep", 8), ("local", 8), ("causal", 8)] {
        let m = build_model(&common::single_block_config(mixer, c, 24)).unwrap();
        let block = &m.stages[0].blocks[0];
        let x = Tensor::uniform([1, 6, 6, c], -1.0, 1.0, &mut rng(5));
        let r = module_grad_check(block, &[x], |ctx, v| block.forward(ctx, v[0])?.sin()?.sum(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{mixer} C={c}: {r:?}");
    }
}

#[test]
fn micro_end_to_end_gradients() {
    let m = model("hpx-micro");
    let x = Tensor::uniform([2, 32, 32, 3], 0.0, 1.0, &mut rng(6));
    let r = module_grad_check(&m, &[x], |ctx, v| m.forward(ctx, v[0])?.cross_entropy(&[1, 3], 0.1), 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = TempDir::new().unwrap();
    let m = model("sep-micro");
    save_checkpoint(&m, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    // Tensors are stored in single precision.
    for ((na, a), (nb, b)) in m.named_params().iter().zip(back.named_params()) {
        assert_eq!(*na, nb);
        let rounded = a.value().map(|v| v as f32 as f64);
        assert_eq!(&rounded, b.value(), "{na}");
    }
    let again = TempDir::new().unwrap();
    save_checkpoint(&back, again.path()).unwrap();
    let reloaded = load_checkpoint(again.path()).unwrap();
    let x = Tensor::uniform([1, 32, 32, 3], 0.0, 1.0, &mut rng(7));
    assert_eq!(forward(&back, &x).unwrap(), forward(&reloaded, &x).unwrap());
}

#[test]
fn same_size_resampling_is_bitwise_identical() {
    let m = model("hpx-micro");
    let x = Tensor::uniform([1, 32, 32, 3], 0.0, 1.0, &mut rng(8));
    let same = m.resampled([32, 32]).unwrap();
    assert_eq!(forward(&m, &x).unwrap(), forward(&same, &x).unwrap());
    let big = m.resampled([64, 64]).unwrap();
    assert_eq!(forward(&big, &Tensor::zeros([1, 64, 64, 3])).unwrap().shape(), [1, 4]);
}
