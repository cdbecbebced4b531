//! Supervised training: AdamW, warmup + cosine schedule, label-smoothed
//! cross-entropy, a seeded synthetic dataset and an image-folder loader.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::nn::{Ctx, Module};
use crate::tensor::Tensor;

fn d_lr_peak() -> f64 {
    1e-3
}
fn d_lr_final() -> f64 {
    1e-5
}
fn d_warmup() -> usize {
    2
}
fn d_epochs() -> usize {
    20
}
fn d_wd() -> f64 {
    0.05
}
fn d_batch() -> usize {
    32
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr_peak")]
    pub lr_peak: f64,
    #[serde(default = "d_lr_final")]
    pub lr_final: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_epochs")]
    pub total_epochs: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_betas")]
    pub betas: (f64, f64),
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    /// Random horizontal flips of training images.
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return bad("need warmup_epochs < total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_peak >= 0.0 && self.lr_final >= 0.0 && self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return bad("learning rates and weight decay must be non-negative, eps positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must be in [0, 1)");
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            lr_peak: self.lr_peak,
            lr_final: self.lr_final,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.total_epochs * steps_per_epoch,
        }
    }
}

/// Step-level learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear ramp from 0 to `lr_peak` over the warmup, then cosine decay to
/// `lr_final` at `total_steps`; constant afterwards.
pub fn cosine_warmup_lr(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.lr_peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 || step >= s.total_steps {
        return if step >= s.total_steps && span > 0 { s.lr_final } else { s.lr_peak };
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.lr_final + 0.5 * (s.lr_peak - s.lr_final) * (1.0 + (PI * progress).cos())
}

/// Mean label-smoothed cross-entropy of `[N, classes]` logits.
pub fn cross_entropy_smoothed(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("cross_entropy logits"));
    }
    let tape = Tape::new();
    let loss = tape.leaf(logits.clone()).cross_entropy(labels, smoothing)?;
    Ok(loss.value().data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Whether weight decay applies to each parameter.
    pub decay: Vec<bool>,
}

impl AdamState {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            decay: vec![true; shapes.len()],
        }
    }
}

/// One AdamW update: `p ← p(1 - lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return shape_err(format!("param {:?} with grad {:?}", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("adamw gradient"));
        }
    }
    state.step += 1;
    let (b1, b2) = hp.betas;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let shrink = if state.decay[i] { 1.0 - hp.lr * hp.weight_decay } else { 1.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            *pj = *pj * shrink - hp.lr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Class = image quadrant holding a bright blob.
    Synthetic,
    /// `<path>/<class>/<image>`; classes in sorted directory order.
    Directory { path: PathBuf },
}

fn d_source() -> DataSource {
    DataSource::Synthetic
}
fn d_image() -> usize {
    32
}
fn d_classes() -> usize {
    4
}
fn d_train() -> usize {
    512
}
fn d_val() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "d_source")]
    pub source: DataSource,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_train")]
    pub train_size: usize,
    #[serde(default = "d_val")]
    pub val_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Square RGB images in `[0, 1]`-ish range with labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[n, size, size, 3]` batch of the given indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| self.images[i].iter().copied()).collect();
        Tensor::new([idx.len(), self.size, self.size, 3], data).expect("uniform image size")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// One image with a Gaussian blob centered inside quadrant `label`
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right) over noise.
fn blob_image<R: Rng>(size: usize, label: usize, rng: &mut R) -> Vec<f64> {
    let half = size as f64 / 2.0;
    let margin = size as f64 / 8.0;
    let (qy, qx) = ((label / 2) as f64, (label % 2) as f64);
    let cy = qy * half + rng.random_range(margin..half - margin);
    let cx = qx * half + rng.random_range(margin..half - margin);
    let sigma = rng.random_range(0.04..0.08) * size as f64;
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut img = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
            let blob = (-d2 / (2.0 * sigma * sigma)).exp();
            for c in color {
                img.push(c * blob + noise.sample(rng));
            }
        }
    }
    img
}

fn synthetic(spec: &DatasetSpec, n: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let images = labels.iter().map(|&l| blob_image(spec.image_size, l, &mut rng)).collect();
    Dataset {
        size: spec.image_size,
        images,
        labels,
        num_classes: spec.num_classes,
    }
}

fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
    Ok(img.pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)).collect())
}

/// Every file directly under `dir`, in name order, as a `[N, size, size, 3]` batch.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<Tensor> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no images in {}", dir.display())));
    }
    let n = files.len();
    let data = files.iter().map(|f| load_image(f, size)).collect::<Result<Vec<_>>>()?.concat();
    Tensor::new([n, size, size, 3], data)
}

fn directory(spec: &DatasetSpec, root: &Path) -> Result<(Dataset, Dataset)> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.len() != spec.num_classes {
        return Err(Error::Config(format!(
            "{} has {} class directories, expected {}",
            root.display(),
            classes.len(),
            spec.num_classes
        )));
    }
    let mut items = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        items.extend(files.into_iter().map(|f| (f, label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    items.shuffle(&mut rng);
    if items.len() < spec.val_size + 1 {
        return Err(Error::Config(format!("{} images cannot fill a validation split of {}", items.len(), spec.val_size)));
    }
    let (val, train) = items.split_at(spec.val_size);
    let train = &train[..train.len().min(spec.train_size)];
    let load = |items: &[(PathBuf, usize)]| -> Result<Dataset> {
        Ok(Dataset {
            size: spec.image_size,
            images: items.iter().map(|(p, _)| load_image(p, spec.image_size)).collect::<Result<_>>()?,
            labels: items.iter().map(|&(_, l)| l).collect(),
            num_classes: spec.num_classes,
        })
    };
    Ok((load(train)?, load(val)?))
}

/// `(train, validation)` splits.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.image_size == 0 || spec.num_classes == 0 || spec.train_size == 0 {
        return arg_err("dataset needs positive image size, classes and train size");
    }
    match &spec.source {
        DataSource::Synthetic => {
            if !(2..=4).contains(&spec.num_classes) {
                return arg_err(format!("synthetic quadrant task has 2 to 4 classes, got {}", spec.num_classes));
            }
            if spec.image_size < 8 {
                return arg_err("synthetic images must be at least 8 pixels wide");
            }
            Ok((synthetic(spec, spec.train_size, 1), synthetic(spec, spec.val_size, 2)))
        }
        DataSource::Directory { path } => directory(spec, path),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_acc\n");
    for e in history {
        let _ = writeln!(s, "{},{:e},{},{}", e.epoch, e.lr, e.train_loss, e.val_acc);
    }
    s
}

/// Top-1 accuracy, evaluated in chunks of `batch`.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let logits = crate::model::forward(model, &data.batch(chunk))?;
        let k = logits.shape()[1];
        for (r, &i) in chunk.iter().enumerate() {
            let row = &logits.data()[r * k..(r + 1) * k];
            let pred = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(pred == data.labels[i]);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn flip_in_place(t: &mut Tensor, item: usize) {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data_mut();
    for y in 0..h {
        for x in 0..w / 2 {
            for c in 0..3 {
                let a = ((item * h + y) * w + x) * 3 + c;
                let b = ((item * h + y) * w + (w - 1 - x)) * 3 + c;
                d.swap(a, b);
            }
        }
    }
}

/// Trains in place; returns per-epoch statistics.
pub fn train(model: &mut Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let [h, w] = model.config.input_size;
    if train_set.size != h || train_set.size != w || val_set.size != train_set.size {
        return shape_err(format!("dataset images {}px, model input {h}x{w}", train_set.size));
    }
    if train_set.num_classes != model.config.num_classes {
        return shape_err(format!(
            "dataset has {} classes, model {}",
            train_set.num_classes, model.config.num_classes
        ));
    }
    if train_set.is_empty() {
        return arg_err("empty training set");
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, p)| p.value().shape().to_vec()).collect();
    let mut state = AdamState::zeros(&shapes);
    // Norm scales, biases and other vectors are not decayed.
    state.decay = shapes.iter().map(|s| s.len() >= 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = train_set.batch(chunk);
            if cfg.hflip {
                for i in 0..chunk.len() {
                    if rng.random_bool(0.5) {
                        flip_in_place(&mut images, i);
                    }
                }
            }
            let labels = train_set.labels_of(chunk);
            let grads = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape);
                let logits = model.forward(&ctx, ctx.input(images))?;
                let loss = logits.cross_entropy(&labels, cfg.label_smoothing)?;
                loss_sum += loss.value().data()[0] * chunk.len() as f64;
                let g = tape.backward(loss)?;
                model.named_params().iter().map(|(_, p)| ctx.grad(&g, p)).collect::<Vec<_>>()
            };
            step += 1;
            lr = cosine_warmup_lr(step, &schedule);
            let hp = AdamHyper {
                lr,
                betas: cfg.betas,
                eps: cfg.adam_eps,
                weight_decay: cfg.weight_decay,
            };
            let mut params = model.named_params_mut();
            let mut tensors: Vec<&mut Tensor> = params.iter_mut().map(|(_, p)| p.make_mut()).collect();
            adamw_step(&mut tensors, &grads, &mut state, &hp)?;
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_acc: evaluate(model, val_set, cfg.batch_size)?,
        });
    }
    Ok(history)
}

/// Trains and writes `history.csv` and `checkpoint/` under `out`.
pub fn train_to_dir(model: &mut Model, data: &DatasetSpec, cfg: &TrainConfig, out: &Path) -> Result<Vec<EpochStats>> {
    let (train_set, val_set) = load_dataset(data)?;
    let history = train(model, &train_set, &val_set, cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("history.csv"), history_csv(&history))?;
    save_checkpoint(model, &out.join("checkpoint"))?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            lr_peak: 1e-3,
            lr_final: 1e-5,
            warmup_steps: 10,
            total_steps: 100,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(cosine_warmup_lr(0, &s), 0.0);
        assert!(cosine_warmup_lr(1, &s) <= s.lr_peak / 2.0);
        assert_eq!(cosine_warmup_lr(10, &s), s.lr_peak);
        assert!((cosine_warmup_lr(100, &s) - s.lr_final).abs() < 1e-18);
    }

    #[test]
    fn cross_entropy_limits() {
        let u = Tensor::zeros([3, 5]);
        let l = cross_entropy_smoothed(&u, &[0, 2, 4], 0.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let mut big = Tensor::zeros([1, 3]);
        big.data_mut()[1] = 200.0;
        assert!(cross_entropy_smoothed(&big, &[1], 0.0).unwrap() < 1e-80);
        let nan = Tensor::full([1, 2], f64::NAN);
        assert!(cross_entropy_smoothed(&nan, &[0], 0.0).is_err());
    }

    #[test]
    fn zero_gradient_decays_exactly() {
        let mut p = Tensor::full([3], 2.0);
        let mut st = AdamState::zeros(&[vec![3]]);
        let hp = AdamHyper { lr: 0.1, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.5 };
        adamw_step(&mut [&mut p], &[Tensor::zeros([3])], &mut st, &hp).unwrap();
        assert_eq!(p, Tensor::full([3], 2.0 * (1.0 - 0.1 * 0.5)));
    }

    #[test]
    fn first_step_closed_form() {
        let (lr, g, eps, wd, w0) = (0.01, 0.3, 1e-8, 0.1, 1.5);
        let mut p = Tensor::full([1], w0);
        let mut st = AdamState::zeros(&[vec![1]]);
        let hp = AdamHyper { lr, betas: (0.9, 0.999), eps, weight_decay: wd };
        adamw_step(&mut [&mut p], &[Tensor::full([1], g)], &mut st, &hp).unwrap();
        let expect = w0 * (1.0 - lr * wd) - lr * g / (g.abs() + eps);
        assert!((p.data()[0] - expect).abs() < 1e-15);
        assert!(adamw_step(&mut [&mut p], &[Tensor::full([1], f64::INFINITY)], &mut st, &hp).is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let spec = DatasetSpec { train_size: 40, val_size: 20, ..DatasetSpec::default() };
        let (a, v) = load_dataset(&spec).unwrap();
        let (b, _) = load_dataset(&spec).unwrap();
        assert_eq!(a.images, b.images);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
            assert_eq!(v.labels.iter().filter(|&&l| l == c).count(), 5);
        }
        assert_ne!(a.images[0], v.images[0]);
    }
}
