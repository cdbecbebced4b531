use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use hyenapixel::analysis::BenchVariant;
use hyenapixel::io::{save_hpx1, save_pgm};
use hyenapixel::mixer::ConvLayout;
use hyenapixel::model::Model;
use hyenapixel::train::{evaluate, history_csv, train};
use hyenapixel::{
    bench_runtime, build_model, checkpoint_config, count_params, coverage_report, erf_map, load_checkpoint,
    load_dataset, load_image_folder, save_checkpoint, truncate_kernels, CoverageSource, DataSource, DatasetSpec,
    ModelConfig, Tensor, TrainConfig,
};

/// Train, inspect and benchmark long-convolution vision models.
#[derive(Debug, Parser)]
#[command(name = "hpx", version)]
pub struct CliConfig {
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model inspection.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Effective receptive field of the center output.
    Erf {
        #[command(flatten)]
        model: ModelArgs,
        /// Image directory, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        images: String,
        #[arg(long, default_value_t = 8)]
        num_images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learned window diameter relative to each block's feature extent.
    Coverage {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Source::Window)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero long-convolution taps of one stage outside a centered box.
    Truncate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        stage: usize,
        /// Relative sizes in [0, 2], comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        rel: Vec<f64>,
        /// Measure validation accuracy before and after.
        #[arg(long)]
        eval: bool,
        /// Dataset JSON for `--eval`; defaults to the synthetic task at the model's input size.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-pass runtime scaling.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "h_px,dense_conv")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        extents: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialized filter export.
    Filters {
        #[command(subcommand)]
        command: FiltersCommand,
    },
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Print the config, shape ladder and parameter count.
    Info {
        /// Run config JSON, model config JSON or checkpoint directory.
        path: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["path", "checkpoint"])]
        preset: Option<String>,
        #[arg(long, conflicts_with = "path")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum FiltersCommand {
    /// Write every long-convolution kernel as HPX1 tensors and PGM images.
    Dump {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint directory.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Freshly initialized preset instead of a checkpoint.
    #[arg(long)]
    preset: Option<String>,
    /// Initialization seed for `--preset`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Window,
    Kernel,
}

/// Everything a `train` run needs; `preset` and `model` are exclusive.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    data: DatasetSpec,
    #[serde(default)]
    train: TrainConfig,
}

/// Bad invocation or unreadable config: exit code 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Usage>() {
            Ok(u) => Failure::Usage(u.0),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Usage(e.into()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

impl RunFile {
    fn load(path: &Path) -> anyhow::Result<(ModelConfig, DatasetSpec, TrainConfig)> {
        let file: RunFile = read_json(path)?;
        let model = match (file.preset, file.model) {
            (Some(p), None) => ModelConfig::preset(&p).map_err(usage)?,
            (None, Some(m)) => m,
            _ => return Err(usage(anyhow!("{}: give exactly one of `preset` or `model`", path.display()))),
        };
        model.validate().map_err(usage)?;
        file.train.validate().map_err(usage)?;
        Ok((model, file.data, file.train))
    }
}

impl ModelArgs {
    fn load(&self) -> anyhow::Result<Model> {
        match (&self.model, &self.preset) {
            (Some(dir), _) => {
                if !dir.join("manifest.json").is_file() {
                    return Err(usage(anyhow!("{} is not a checkpoint directory", dir.display())));
                }
                Ok(load_checkpoint(dir)?)
            }
            (None, Some(p)) => {
                let mut cfg = ModelConfig::preset(p).map_err(usage)?;
                cfg.seed = self.seed;
                Ok(build_model(&cfg)?)
            }
            (None, None) => Err(usage(anyhow!("give --model or --preset"))),
        }
    }

    fn describe(&self) -> Value {
        match (&self.model, &self.preset) {
            (Some(dir), _) => json!({ "checkpoint": dir }),
            _ => json!({ "preset": self.preset, "seed": self.seed }),
        }
    }
}

/// `manifest.json` for one run. The hash covers the subcommand and its
/// effective config, never the output location.
fn write_manifest(out: &Path, subcommand: &str, config: &Value, seed: u64) -> anyhow::Result<()> {
    let canonical = serde_json::to_vec(&json!({ "subcommand": subcommand, "config": config }))?;
    let hash: String = Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect();
    let manifest = json!({
        "format": "hpx-run-manifest-v1",
        "subcommand": subcommand,
        "config": config,
        "config_hash": hash,
        "seed": seed,
        "versions": { "hpx": env!("CARGO_PKG_VERSION"), "hyenapixel": hyenapixel::VERSION },
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn progress(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn model_info(path: Option<&Path>, preset: Option<&str>, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let cfg = match (path, preset, checkpoint) {
        (_, Some(p), _) => ModelConfig::preset(p).map_err(usage)?,
        (_, _, Some(dir)) => checkpoint_config(dir).map_err(usage)?,
        (Some(p), _, _) if p.is_dir() => checkpoint_config(p).map_err(usage)?,
        (Some(p), _, _) => {
            let value: Value = read_json(p)?;
            let is_run = ["preset", "model", "data", "train"].iter().any(|k| value.get(k).is_some());
            if is_run {
                RunFile::load(p)?.0
            } else {
                serde_json::from_value(value).with_context(|| format!("parsing {}", p.display())).map_err(usage)?
            }
        }
        (None, None, None) => return Err(usage(anyhow!("give a config path, --preset or --checkpoint"))),
    };
    cfg.validate().map_err(usage)?;
    let model = build_model(&cfg)?;
    println!("model: {}", if cfg.name.is_empty() { "(unnamed)" } else { &cfg.name });
    println!("parameters: {}", count_params(&model));
    println!("input: {}x{}", cfg.input_size[0], cfg.input_size[1]);
    for (i, (h, w, c)) in model.shape_ladder().into_iter().enumerate() {
        let mixer = cfg.mixers[i].name();
        println!("stage {}: {h}x{w}x{c} ({} x {mixer})", i + 1, cfg.stage_blocks[i]);
    }
    println!("config: {}", serde_json::to_string(&cfg)?);
    Ok(())
}

fn run_train(config: &Path, out: &Path, quiet: bool) -> anyhow::Result<()> {
    let (model_cfg, data, train_cfg) = RunFile::load(config)?;
    create_out(out)?;
    let mut model = build_model(&model_cfg)?;
    progress(quiet, format!("training {} ({} parameters)", model_cfg.name, count_params(&model)));
    let (train_set, val_set) = load_dataset(&data)?;
    let history = train(&mut model, &train_set, &val_set, &train_cfg)?;
    for e in &history {
        progress(quiet, format!("epoch {:>3}  lr {:.2e}  loss {:.4}  val_acc {:.4}", e.epoch, e.lr, e.train_loss, e.val_acc));
    }
    fs::write(out.join("history.csv"), history_csv(&history))?;
    save_checkpoint(&model, &out.join("checkpoint"))?;
    let config = json!({ "model": model_cfg, "data": data, "train": train_cfg });
    write_manifest(out, "train", &config, train_cfg.seed)
}

fn square_input(model: &Model) -> anyhow::Result<usize> {
    match model.config.input_size {
        [h, w] if h == w => Ok(h),
        [h, w] => bail!("image loading needs a square model input, got {h}x{w}"),
    }
}

/// Synthetic quadrant-task split matching the model's input and classes.
fn synthetic_spec(model: &Model, seed: u64) -> anyhow::Result<DatasetSpec> {
    Ok(DatasetSpec {
        source: DataSource::Synthetic,
        image_size: square_input(model)?,
        num_classes: model.config.num_classes,
        seed,
        ..DatasetSpec::default()
    })
}

fn run_erf(args: &ModelArgs, images: &str, num_images: usize, out: &Path) -> anyhow::Result<()> {
    let model = args.load()?;
    let size = square_input(&model)?;
    let batch = if images == "synthetic" {
        if num_images == 0 {
            return Err(usage(anyhow!("--num-images must be positive")));
        }
        let spec = DatasetSpec {
            num_classes: model.config.num_classes.clamp(2, 4),
            train_size: 1,
            val_size: num_images,
            ..synthetic_spec(&model, args.seed)?
        };
        let (_, val) = load_dataset(&spec)?;
        val.batch(&(0..val.len()).collect::<Vec<_>>())
    } else {
        let dir = Path::new(images);
        if !dir.is_dir() {
            return Err(usage(anyhow!("{images} is neither `synthetic` nor a directory")));
        }
        load_image_folder(dir, size)?
    };
    create_out(out)?;
    let erf = erf_map(&model, &batch)?;
    save_hpx1(out.join("erf.hpx1"), &erf.grid)?;
    save_pgm(out.join("erf.pgm"), &erf.grid)?;
    let config = json!({
        "model": model.config,
        "source": args.describe(),
        "images": images,
        "num_images": erf.num_images,
    });
    write_manifest(out, "erf", &config, args.seed)
}

fn run_coverage(args: &ModelArgs, threshold: f64, source: Source, out: &Path) -> anyhow::Result<()> {
    let model = args.load()?;
    let src = match source {
        Source::Window => CoverageSource::Window,
        Source::Kernel => CoverageSource::Kernel,
    };
    let report = coverage_report(&model, threshold, src)?;
    create_out(out)?;
    fs::write(out.join("coverage.csv"), report.to_csv())?;
    let config = json!({
        "model": model.config,
        "source": args.describe(),
        "threshold": threshold,
        "measure": format!("{source:?}").to_lowercase(),
    });
    write_manifest(out, "coverage", &config, args.seed)
}

fn run_truncate(
    args: &ModelArgs,
    stage: usize,
    rels: &[f64],
    eval: bool,
    data: Option<&Path>,
    out: &Path,
    quiet: bool,
) -> anyhow::Result<()> {
    let model = args.load()?;
    if let Some(r) = rels.iter().find(|r| !(0.0..=2.0).contains(*r)) {
        return Err(usage(anyhow!("--rel {r} outside [0, 2]")));
    }
    let spec = match data {
        Some(p) => read_json::<DatasetSpec>(p)?,
        None => synthetic_spec(&model, 0)?,
    };
    let val = if eval { Some(load_dataset(&spec)?.1) } else { None };
    let mut csv = String::from("stage,relative_size,kept_taps,total_taps,accuracy\n");
    for &rel in rels {
        let truncated = truncate_kernels(&model, stage, rel)?;
        let (mut kept, mut total) = (0usize, 0usize);
        for block in &truncated.stages[stage - 1].blocks {
            for conv in block.mixer.hyena().map(|m| m.convs.as_slice()).unwrap_or(&[]) {
                let ((kh, kw), _) = conv.geometry();
                let n = kh * kw * conv.filter.channels();
                total += n;
                kept += conv.mask.as_ref().map_or(n, |m| m.data().iter().filter(|&&v| v != 0.0).count());
            }
        }
        let acc = match &val {
            Some(v) => {
                let a = evaluate(&truncated, v, 32)?;
                progress(quiet, format!("stage {stage} rel {rel}: accuracy {a:.4}"));
                a.to_string()
            }
            None => String::new(),
        };
        csv += &format!("{stage},{rel},{kept},{total},{acc}\n");
    }
    create_out(out)?;
    fs::write(out.join("truncate.csv"), csv)?;
    let config = json!({
        "model": model.config,
        "source": args.describe(),
        "stage": stage,
        "relative_sizes": rels,
        "eval": eval.then_some(&spec),
    });
    write_manifest(out, "truncate", &config, args.seed)
}

fn run_bench(
    variants: &[String],
    extents: &[usize],
    channels: usize,
    repeats: usize,
    out: &Path,
    quiet: bool,
) -> anyhow::Result<()> {
    let parsed = variants
        .iter()
        .map(|v| v.parse::<BenchVariant>().map_err(|e| usage(anyhow!("{e}"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    create_out(out)?;
    let table = bench_runtime(&parsed, extents, channels, repeats)?;
    fs::write(out.join("bench.csv"), table.to_csv())?;
    for v in &parsed {
        if let Some(s) = table.slope(v.name()) {
            progress(quiet, format!("{}: log-log slope {s:.3}", v.name()));
        }
    }
    let config = json!({ "variants": variants, "extents": extents, "channels": channels, "repeats": repeats });
    write_manifest(out, "bench", &config, 0)
}

fn layout_name(layout: ConvLayout) -> &'static str {
    match layout {
        ConvLayout::Flat => "flat",
        ConvLayout::Horizontal => "horizontal",
        ConvLayout::Vertical => "vertical",
        ConvLayout::Plane => "plane",
    }
}

fn run_filters_dump(args: &ModelArgs, out: &Path) -> anyhow::Result<()> {
    let model = args.load()?;
    create_out(out)?;
    let mut count = 0;
    for (s, b, block) in model.blocks() {
        let Some(mixer) = block.mixer.hyena() else { continue };
        for conv in &mixer.convs {
            let stem = format!("stage{}_block{}_{}", s + 1, b + 1, layout_name(conv.layout));
            let kernel = conv.materialize()?;
            let (kh, kw, c) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
            let mean = Tensor::from_fn([kh, kw], |i| (0..c).map(|ch| kernel.data()[i * c + ch]).sum::<f64>() / c as f64);
            save_hpx1(out.join(format!("{stem}.hpx1")), &kernel)?;
            save_hpx1(out.join(format!("{stem}_mean.hpx1")), &mean)?;
            save_pgm(out.join(format!("{stem}_mean.pgm")), &mean)?;
            let per_channel = out.join(format!("{stem}_channels"));
            fs::create_dir_all(&per_channel)?;
            for ch in 0..c {
                let plane = Tensor::from_fn([kh, kw], |i| kernel.data()[i * c + ch]);
                save_pgm(per_channel.join(format!("c{ch:03}.pgm")), &plane)?;
            }
            count += 1;
        }
    }
    if count == 0 {
        bail!("model has no long-convolution filters");
    }
    let config = json!({ "model": model.config, "source": args.describe() });
    write_manifest(out, "filters_dump", &config, args.seed)
}

pub fn parse_args<I, T>(argv: I) -> Result<CliConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    CliConfig::try_parse_from(argv)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("HPX_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| usage(anyhow!("HPX_THREADS={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cfg: &CliConfig) -> anyhow::Result<()> {
    configure_threads()?;
    let quiet = cfg.quiet;
    match &cfg.command {
        Command::Train { config, out } => run_train(config, out, quiet),
        Command::Model { command: ModelCommand::Info { path, preset, checkpoint } } => {
            model_info(path.as_deref(), preset.as_deref(), checkpoint.as_deref())
        }
        Command::Erf { model, images, num_images, out } => run_erf(model, images, *num_images, out),
        Command::Coverage { model, threshold, source, out } => run_coverage(model, *threshold, *source, out),
        Command::Truncate { model, stage, rel, eval, data, out } => {
            run_truncate(model, *stage, rel, *eval, data.as_deref(), out, quiet)
        }
        Command::Bench { variants, extents, channels, repeats, out } => {
            run_bench(variants, extents, *channels, *repeats, out, quiet)
        }
        Command::Filters { command: FiltersCommand::Dump { model, out } } => run_filters_dump(model, out),
    }
}

pub fn run(cfg: CliConfig) -> ExitCode {
    match dispatch(&cfg).map_err(Failure::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `hpx --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    match parse_args(std::env::args_os()) {
        Ok(cfg) => run(cfg),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}
