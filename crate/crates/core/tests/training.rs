mod common;

use common::rng;
use hyenapixel::train::{history_csv, train, train_to_dir};
use hyenapixel::{
    adamw_step, build_model, cosine_warmup_lr, cross_entropy_smoothed, load_dataset, AdamHyper, AdamState, DataSource,
    DatasetSpec, Model, ModelConfig, Module, Schedule, Tensor, TrainConfig,
};
use tempfile::TempDir;

fn small_data() -> DatasetSpec {
    DatasetSpec { train_size: 48, val_size: 24, ..DatasetSpec::default() }
}

fn short_run() -> TrainConfig {
    TrainConfig { total_epochs: 3, warmup_epochs: 1, batch_size: 16, ..TrainConfig::default() }
}

fn micro(preset: &str) -> Model {
    build_model(&ModelConfig::preset(preset).unwrap()).unwrap()
}

fn params(m: &Model) -> Vec<Tensor> {
    m.named_params().into_iter().map(|(_, p)| p.value().clone()).collect()
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = load_dataset(&small_data()).unwrap();
    let cfg = TrainConfig { hflip: true, ..short_run() };
    let (mut a, mut b) = (micro("hpx-micro"), micro("hpx-micro"));
    let ha = train(&mut a, &tr, &va, &cfg).unwrap();
    let hb = train(&mut b, &tr, &va, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(params(&a), params(&b));
    assert_ne!(params(&a), params(&micro("hpx-micro")));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (tr, va) = load_dataset(&small_data()).unwrap();
    let cfg = TrainConfig { lr_peak: 0.0, lr_final: 0.0, ..short_run() };
    let mut m = micro("local-micro");
    let before = params(&m);
    let h = train(&mut m, &tr, &va, &cfg).unwrap();
    assert_eq!(params(&m), before);
    assert!(h.iter().all(|e| e.val_acc == h[0].val_acc && e.lr == 0.0));
    for e in &h {
        assert!((e.train_loss - h[0].train_loss).abs() < 1e-12);
    }
}

/// Textbook Adam with decoupled weight decay, one parameter vector at a time.
struct AdamOracle {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamOracle {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * wd * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[test]
fn adamw_matches_textbook_updates() {
    for wd in [0.0, 0.05] {
        let mut r = rng(1);
        let mut p = Tensor::uniform([7], -1.0, 1.0, &mut r);
        let mut oracle_p = p.data().to_vec();
        let mut state = AdamState::zeros(&[vec![7]]);
        let mut oracle = AdamOracle { m: vec![0.0; 7], v: vec![0.0; 7], t: 0 };
        for step in 0..25 {
            let g = Tensor::uniform([7], -2.0, 2.0, &mut r);
            let lr = 0.01 * (1.0 + step as f64).sqrt();
            let hp = AdamHyper { lr, betas: (0.9, 0.999), eps: 1e-8, weight_decay: wd };
            adamw_step(&mut [&mut p], std::slice::from_ref(&g), &mut state, &hp).unwrap();
            oracle.step(&mut oracle_p, g.data(), lr, wd);
        }
        let err = p.data().iter().zip(&oracle_p).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
        assert!(err < 1e-14, "wd={wd}: {err}");
    }
}

#[test]
fn adamw_converges_on_a_quadratic() {
    let target = Tensor::uniform([5], -3.0, 3.0, &mut rng(2));
    let mut p = Tensor::zeros([5]);
    let mut state = AdamState::zeros(&[vec![5]]);
    let sched = Schedule { lr_peak: 0.05, lr_final: 0.0, warmup_steps: 0, total_steps: 200 };
    for step in 0..200 {
        let g = p.zip_map(&target, |a, b| 2.0 * (a - b)).unwrap();
        let hp = AdamHyper { lr: cosine_warmup_lr(step, &sched), betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 };
        adamw_step(&mut [&mut p], &[g], &mut state, &hp).unwrap();
    }
    assert!(p.max_abs_diff(&target) < 1e-2, "{p:?} vs {target:?}");
}

#[test]
fn schedule_shape() {
    let s = Schedule { lr_peak: 1e-3, lr_final: 1e-5, warmup_steps: 20, total_steps: 200 };
    for t in 0..20 {
        assert!((cosine_warmup_lr(t, &s) - 1e-3 * t as f64 / 20.0).abs() < 1e-18);
    }
    assert_eq!(cosine_warmup_lr(20, &s), 1e-3);
    let mid = cosine_warmup_lr(110, &s);
    assert!((mid - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for t in 20..=200 {
        let lr = cosine_warmup_lr(t, &s);
        assert!(lr <= prev);
        prev = lr;
    }
    assert!((cosine_warmup_lr(200, &s) - 1e-5).abs() < 1e-18);
    assert_eq!(cosine_warmup_lr(500, &s), 1e-5);
}

#[test]
fn smoothed_cross_entropy_closed_forms() {
    let logits = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, -1.0]).unwrap();
    let eps = 0.1;
    let mut expect = 0.0;
    for (r, &label) in [2usize, 0].iter().enumerate() {
        let row = &logits.data()[r * 3..r * 3 + 3];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            let t = eps / 3.0 + if j == label { 1.0 - eps } else { 0.0 };
            expect -= t * (v - lse);
        }
    }
    expect /= 2.0;
    let got = cross_entropy_smoothed(&logits, &[2, 0], eps).unwrap();
    assert!((got - expect).abs() < 1e-14);
    let uniform = cross_entropy_smoothed(&Tensor::zeros([4, 6]), &[0, 1, 2, 5], 0.3).unwrap();
    assert!((uniform - 6f64.ln()).abs() < 1e-14);
}

#[test]
fn train_to_dir_writes_history_and_checkpoint() {
    let dir = TempDir::new().unwrap();
    let mut m = micro("causal-micro");
    let h = train_to_dir(&mut m, &small_data(), &short_run(), dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(csv, history_csv(&h));
    assert!(csv.starts_with("epoch,lr,train_loss,val_acc\n"));
    assert!(dir.path().join("checkpoint/manifest.json").is_file());
}

#[test]
fn image_directories_load_by_class() {
    let dir = TempDir::new().unwrap();
    for (class, shade) in [("a_dark", 20u8), ("b_light", 230u8)] {
        let d = dir.path().join(class);
        std::fs::create_dir(&d).unwrap();
        for i in 0..4 {
            let img = image::RgbImage::from_pixel(10 + i, 12, image::Rgb([shade, shade, shade]));
            img.save(d.join(format!("{i}.png"))).unwrap();
        }
    }
    let spec = DatasetSpec {
        source: DataSource::Directory { path: dir.path().to_path_buf() },
        image_size: 8,
        num_classes: 2,
        train_size: 100,
        val_size: 2,
        seed: 0,
    };
    let (tr, va) = load_dataset(&spec).unwrap();
    assert_eq!((tr.len(), va.len()), (6, 2));
    for (img, &label) in tr.images.iter().zip(&tr.labels) {
        assert_eq!(img.len(), 8 * 8 * 3);
        let expect = if label == 0 { 20.0 } else { 230.0 } / 255.0;
        assert!(img.iter().all(|&v| (v - expect).abs() < 1e-12));
    }
    let wrong = DatasetSpec { num_classes: 3, ..spec };
    assert!(load_dataset(&wrong).is_err());
}
