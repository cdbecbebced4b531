//! Hierarchical MetaFormer backbone: overlapping patch stem, stages of
//! `norm → mixer → residual, norm → FFN → residual` blocks with strided
//! downsampling between stages, final norm, spatial mean pool and a head.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::io::{load_hpx1, save_hpx1};
use crate::mixer::{Domain, Mixer, MixerConfig, MixerKind};
use crate::nn::{impl_module, Conv2d, Ctx, LayerNorm, Linear, Module, Param, StarRelu};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Single linear layer on pooled features.
    Linear,
    /// `Linear(C, rC) → StarReLU → LayerNorm → Linear(rC, classes)`.
    Mlp,
}

fn default_ffn_expansion() -> usize {
    4
}
fn default_classes() -> usize {
    1000
}
fn default_res_scale() -> Vec<usize> {
    vec![3, 4]
}
fn default_input() -> [usize; 2] {
    [224, 224]
}
fn default_head() -> HeadKind {
    HeadKind::Mlp
}
fn default_short_conv() -> usize {
    5
}
fn default_local_kernel() -> usize {
    7
}
fn default_local_expansion() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub mixers: Vec<MixerKind>,
    /// Positional embedding dimension per stage.
    pub k: Vec<usize>,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// 1-based stages whose residual branches carry a learnable per-channel scale.
    #[serde(default = "default_res_scale")]
    pub res_scale_stages: Vec<usize>,
    #[serde(default = "default_input")]
    pub input_size: [usize; 2],
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default = "default_ffn_expansion")]
    pub head_expansion: usize,
    #[serde(default = "default_short_conv")]
    pub short_conv: usize,
    #[serde(default = "default_local_kernel")]
    pub local_kernel: usize,
    #[serde(default = "default_local_expansion")]
    pub local_expansion: usize,
    /// Input size the implicit filters were fitted at, when it differs from
    /// `input_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_input_size: Option<[usize; 2]>,
    #[serde(default)]
    pub seed: u64,
}

pub const PRESET_CHANNELS: [usize; 4] = [64, 128, 320, 512];
pub const PRESET_K: [usize; 4] = [32, 32, 48, 64];

impl ModelConfig {
    /// `<family>-<size>` with family in `hpx`, `hb`, `chpx`, `sep`, `causal`,
    /// `local` and size in `s4`, `s12`, `s18`, `micro`.
    pub fn preset(name: &str) -> Result<Self> {
        let (family, size) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        let one = |k: MixerKind| vec![k; 4];
        let mixers = match family {
            "hpx" => one(MixerKind::HPx),
            "hb" => one(MixerKind::HB),
            "sep" => one(MixerKind::HPxSeparable),
            "causal" => one(MixerKind::CausalHyena),
            "local" => one(MixerKind::LocalConv),
            "chpx" => vec![MixerKind::LocalConv, MixerKind::LocalConv, MixerKind::HPx, MixerKind::HPx],
            _ => return Err(Error::Config(format!("unknown preset family {family:?}"))),
        };
        let base = |blocks: Vec<usize>| ModelConfig {
            name: name.to_string(),
            stage_channels: PRESET_CHANNELS.to_vec(),
            stage_blocks: blocks,
            mixers: mixers.clone(),
            k: PRESET_K.to_vec(),
            ffn_expansion: 4,
            num_classes: 1000,
            res_scale_stages: vec![3, 4],
            input_size: [224, 224],
            head: HeadKind::Mlp,
            head_expansion: 4,
            short_conv: 5,
            local_kernel: 7,
            local_expansion: 2,
            filter_input_size: None,
            seed: 0,
        };
        let cfg = match size {
            "s4" => base(vec![1, 1, 1, 1]),
            "s12" => base(vec![2, 2, 6, 2]),
            "s18" => base(vec![3, 3, 9, 3]),
            "micro" => ModelConfig {
                stage_channels: vec![8; 4],
                k: vec![8; 4],
                num_classes: 4,
                input_size: [32, 32],
                head: HeadKind::Linear,
                ..base(vec![1, 1, 1, 1])
            },
            _ => return Err(Error::Config(format!("unknown preset size {size:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Total spatial reduction of the last stage.
    pub fn reduction(&self) -> usize {
        4 << self.num_stages().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=4).contains(&n) {
            return bad(format!("{n} stages; expected 1 to 4"));
        }
        if self.stage_blocks.len() != n || self.mixers.len() != n || self.k.len() != n {
            return bad("stage_channels, stage_blocks, mixers and k must have equal length".into());
        }
        if self.stage_channels.contains(&0) || self.num_classes == 0 || self.ffn_expansion == 0 {
            return bad("channel counts, classes and expansion must be positive".into());
        }
        if self.res_scale_stages.iter().any(|&s| s == 0 || s > n) {
            return bad(format!("res_scale_stages {:?} outside 1..={n}", self.res_scale_stages));
        }
        let r = self.reduction();
        for size in std::iter::once(self.input_size).chain(self.filter_input_size) {
            if size[0] % r != 0 || size[1] % r != 0 || size[0] == 0 || size[1] == 0 {
                return bad(format!("input {}x{} not divisible by {r}", size[0], size[1]));
            }
        }
        for (i, m) in self.mixers.iter().enumerate() {
            if *m == MixerKind::HPx && self.k[i] % 2 != 0 {
                return bad(format!("stage {} h_px needs an even K, got {}", i + 1, self.k[i]));
            }
            if self.k[i] == 0 {
                return bad(format!("stage {} K must be positive", i + 1));
            }
        }
        Ok(())
    }

    /// Feature-map extents `(H, W)` per stage for a given input size.
    pub fn stage_extents_at(&self, input: [usize; 2]) -> Vec<(usize, usize)> {
        (0..self.num_stages())
            .map(|i| (input[0] / (4 << i), input[1] / (4 << i)))
            .collect()
    }

    pub fn stage_extents(&self) -> Vec<(usize, usize)> {
        self.stage_extents_at(self.input_size)
    }

    fn mixer_config(&self, stage: usize, extent: (usize, usize)) -> MixerConfig {
        let mut cfg = MixerConfig::new(
            self.mixers[stage],
            self.stage_channels[stage],
            Domain::Map { h: extent.0, w: extent.1 },
            self.k[stage],
        );
        cfg.short_conv = self.short_conv;
        cfg.local_kernel = self.local_kernel;
        cfg.local_expansion = self.local_expansion;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}
impl_module!(Stem { conv, norm });

/// Strided `3x3` convolution between stages, then norm.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}
impl_module!(Downsample { conv, norm });

#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub act: StarRelu,
    pub fc2: Linear,
}
impl_module!(Ffn { fc1, act, fc2 });

impl Ffn {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, x)?;
        let h = self.act.forward(ctx, h)?;
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub res_scale1: Option<Param>,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub res_scale2: Option<Param>,
}
impl_module!(Block { norm1, mixer, res_scale1, norm2, ffn, res_scale2 });

fn scaled<'t>(ctx: &Ctx<'t>, x: Var<'t>, scale: &Option<Param>) -> Result<Var<'t>> {
    match scale {
        Some(s) => x.mul_channel(&ctx.bind(s)),
        None => Ok(x),
    }
}

impl Block {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let m = self.mixer.forward(ctx, self.norm1.forward(ctx, x)?)?;
        let u = x.add(&scaled(ctx, m, &self.res_scale1)?)?;
        let f = self.ffn.forward(ctx, self.norm2.forward(ctx, u)?)?;
        u.add(&scaled(ctx, f, &self.res_scale2)?)
    }
}

/// Runs one block on a `[N, H, W, C]` tensor.
pub fn block_forward(x: &Tensor, block: &Block) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let y = block.forward(&ctx, ctx.input(x.clone()))?;
    Ok(y.value().as_ref().clone())
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
    pub extent: (usize, usize),
}
impl_module!(Stage { downsample, blocks });

#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Option<Linear>,
    pub act: Option<StarRelu>,
    pub norm: Option<LayerNorm>,
    pub fc: Linear,
}
impl_module!(Head { fc1, act, norm, fc });

impl Head {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        if let Some(fc1) = &self.fc1 {
            h = fc1.forward(ctx, h)?;
        }
        if let Some(act) = &self.act {
            h = act.forward(ctx, h)?;
        }
        if let Some(norm) = &self.norm {
            h = norm.forward(ctx, h)?;
        }
        self.fc.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Head,
}
impl_module!(Model { stem, stages, norm, head });

/// Intermediate maps of one forward pass.
pub struct Features<'t> {
    pub stages: Vec<Var<'t>>,
    /// Normalized last-stage map, `[N, H, W, C]`, before pooling.
    pub pre_pool: Var<'t>,
    pub logits: Var<'t>,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rng = &mut rng;
    let fit_size = config.filter_input_size.unwrap_or(config.input_size);
    let fit_extents = config.stage_extents_at(fit_size);
    let extents = config.stage_extents();
    let c0 = config.stage_channels[0];
    let stem = Stem {
        conv: Conv2d::new(7, 3, c0, 4, 2, rng),
        norm: LayerNorm::new(c0),
    };
    let mut stages = Vec::with_capacity(config.num_stages());
    for i in 0..config.num_stages() {
        let c = config.stage_channels[i];
        let downsample = (i > 0).then(|| Downsample {
            conv: Conv2d::new(3, config.stage_channels[i - 1], c, 2, 1, rng),
            norm: LayerNorm::new(c),
        });
        let rs = config.res_scale_stages.contains(&(i + 1));
        let mcfg = config.mixer_config(i, fit_extents[i]);
        let mut blocks = Vec::with_capacity(config.stage_blocks[i]);
        for _ in 0..config.stage_blocks[i] {
            let mut mixer = Mixer::new(&mcfg, rng)?;
            if fit_extents[i] != extents[i] {
                mixer = mixer.resampled(Domain::Map { h: extents[i].0, w: extents[i].1 })?;
            }
            blocks.push(Block {
                norm1: LayerNorm::new(c),
                mixer,
                res_scale1: rs.then(|| Param::new(Tensor::ones([c]))),
                norm2: LayerNorm::new(c),
                ffn: Ffn {
                    fc1: Linear::new(c, c * config.ffn_expansion, true, rng),
                    act: StarRelu::new(),
                    fc2: Linear::new(c * config.ffn_expansion, c, true, rng),
                },
                res_scale2: rs.then(|| Param::new(Tensor::ones([c]))),
            });
        }
        stages.push(Stage {
            downsample,
            blocks,
            extent: extents[i],
        });
    }
    let c = *config.stage_channels.last().expect("validated");
    let head = match config.head {
        HeadKind::Linear => Head {
            fc1: None,
            act: None,
            norm: None,
            fc: Linear::new(c, config.num_classes, true, rng),
        },
        HeadKind::Mlp => {
            let hidden = c * config.head_expansion;
            Head {
                fc1: Some(Linear::new(c, hidden, true, rng)),
                act: Some(StarRelu::new()),
                norm: Some(LayerNorm::new(hidden)),
                fc: Linear::new(hidden, config.num_classes, true, rng),
            }
        }
    };
    Ok(Model {
        config: config.clone(),
        stem,
        stages,
        norm: LayerNorm::new(c),
        head,
    })
}

pub fn count_params(model: &Model) -> usize {
    model.num_params()
}

/// Stem convolution and norm on a `[N, H, W, 3]` image batch.
pub fn patch_embed<'t>(ctx: &Ctx<'t>, stem: &Stem, images: Var<'t>) -> Result<Var<'t>> {
    match *images.shape() {
        [_, h, w, 3] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => {}
        ref s => return shape_err(format!("patch embedding needs [N, H, W, 3] with H, W divisible by 4, got {s:?}")),
    }
    stem.norm.forward(ctx, stem.conv.forward(ctx, images)?)
}

/// Halves the extent and changes the channel count.
pub fn downsample<'t>(ctx: &Ctx<'t>, ds: &Downsample, x: Var<'t>) -> Result<Var<'t>> {
    match *x.shape() {
        [_, h, w, _] if h % 2 == 0 && w % 2 == 0 => {}
        ref s => return shape_err(format!("downsampling needs even extents, got {s:?}")),
    }
    ds.norm.forward(ctx, ds.conv.forward(ctx, x)?)
}

impl Model {
    pub fn features<'t>(&self, ctx: &Ctx<'t>, images: Var<'t>) -> Result<Features<'t>> {
        let [h, w] = self.config.input_size;
        match *images.shape() {
            [_, ih, iw, 3] if ih == h && iw == w => {}
            ref s => return shape_err(format!("model expects [N, {h}, {w}, 3], got {s:?}")),
        }
        let mut x = patch_embed(ctx, &self.stem, images)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = downsample(ctx, ds, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(ctx, x)?;
            }
            stages.push(x);
        }
        let pre_pool = self.norm.forward(ctx, x)?;
        let logits = self.head.forward(ctx, pre_pool.spatial_mean()?)?;
        Ok(Features {
            stages,
            pre_pool,
            logits,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, images: Var<'t>) -> Result<Var<'t>> {
        Ok(self.features(ctx, images)?.logits)
    }

    /// Stage feature-map extents and channels.
    pub fn shape_ladder(&self) -> Vec<(usize, usize, usize)> {
        self.stages
            .iter()
            .zip(&self.config.stage_channels)
            .map(|(s, &c)| (s.extent.0, s.extent.1, c))
            .collect()
    }

    /// `(stage, block)` pairs, 0-based, with their blocks.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &Block)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.blocks.iter().enumerate().map(move |(b, blk)| (s, b, blk)))
    }

    /// Same weights at another input size; implicit filters are re-evaluated
    /// on the new grids.
    pub fn resampled(&self, input_size: [usize; 2]) -> Result<Model> {
        let mut config = self.config.clone();
        config.filter_input_size = Some(self.config.filter_input_size.unwrap_or(self.config.input_size));
        config.input_size = input_size;
        if config.filter_input_size == Some(input_size) {
            config.filter_input_size = None;
        }
        config.validate()?;
        let extents = config.stage_extents();
        let mut out = self.clone();
        out.config = config;
        for (stage, &(h, w)) in out.stages.iter_mut().zip(&extents) {
            stage.extent = (h, w);
            for block in &mut stage.blocks {
                block.mixer = block.mixer.resampled(Domain::Map { h, w })?;
            }
        }
        Ok(out)
    }
}

/// Logits `[N, classes]` for an image batch.
pub fn forward(model: &Model, images: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let y = model.forward(&ctx, ctx.input(images.clone()))?;
    Ok(y.value().as_ref().clone())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    config: ModelConfig,
    tensors: BTreeMap<String, String>,
}

const CHECKPOINT_FORMAT: &str = "hpx-checkpoint-v1";

/// Writes one HPX1 file per parameter plus `manifest.json`.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (i, (name, p)) in model.named_params().into_iter().enumerate() {
        let file = format!("{i:04}_{name}.hpx1");
        save_hpx1(&dir.join(&file), p.value())?;
        tensors.insert(name, file);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let mut model = build_model(&manifest.config)?;
    let mut params = model.named_params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter_mut() {
        let file = manifest
            .tensors
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        let t = load_hpx1(&dir.join(file))?;
        if t.shape() != p.value().shape() {
            return Err(Error::Format(format!("{name}: stored {:?}, expected {:?}", t.shape(), p.value().shape())));
        }
        p.set(t);
    }
    Ok(model)
}

/// Reads only the configuration echoed in a checkpoint manifest.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    Ok(manifest.config)
}
