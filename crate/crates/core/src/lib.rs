//! Hyena-family long-convolution token mixers (causal, bidirectional and 2D
//! "pixel" variants) inside a hierarchical MetaFormer backbone, with the
//! tooling used to inspect them: effective receptive fields, learned kernel
//! coverage, kernel truncation and runtime scaling.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod fft;
pub mod filter;
pub mod io;
pub mod longconv;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use analysis::{
    bench_runtime, coverage_report, erf_map, kernel_effective_diameter, truncate_kernels, BenchTable, BenchVariant,
    CoverageReport, CoverageSource, ErfMap,
};
pub use autodiff::{grad_check, Grads, Tape, Var};
pub use error::{Error, Result};
pub use fft::{circular_convolve, fft, ComplexSpectrum};
pub use filter::{
    build_basis_1d, build_basis_2d, eval_window, materialize_filter, resample_filter, FilterFfn, FilterShape,
    ImplicitFilter, PositionalBasis1D, PositionalBasis2D, Positions, WindowParams, WindowVariant,
};
pub use mixer::{
    hyena_bidirectional_mix, hyena_causal_mix, hyena_pixel_mix, local_conv_mix, project_qkv, separable_mix, Domain,
    HyenaMixer, LocalConvMixer, Mixer, MixerConfig, MixerKind, ProjectionParams,
};
pub use model::{
    block_forward, build_model, checkpoint_config, count_params, downsample, forward, load_checkpoint, patch_embed,
    save_checkpoint, Block, HeadKind, Model, ModelConfig,
};
pub use nn::{Ctx, Module, Param};
pub use tensor::Tensor;
pub use train::{
    adamw_step, cosine_warmup_lr, cross_entropy_smoothed, load_dataset, load_image_folder, train, AdamHyper, AdamState, DataSource,
    Dataset, DatasetSpec, EpochStats, Schedule, TrainConfig,
};
