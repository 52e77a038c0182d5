//! Numerical core for turning image-level labels into dense pseudo masks.
//!
//! * [`shape_cues`]: patch self-information and texture-dropping masks.
//! * [`spr`]: joint color/class affinities, score propagation and pseudo masks.
//! * [`losses`]: classification, pixel-wise and region-wise losses with analytic gradients.
//! * [`metrics`]: confusion-matrix mIoU and boundary IoU.
//! * [`synth`] and [`pipeline`]: synthetic scenes and batch orchestration.
//!
//! Score maps keep background in channel 0 and object classes in `1..=K`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod shape_cues;
pub mod spr;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{
    append_background_plane, argmax_mask, normalize_scores, strip_background_plane, ClassSet,
    ImageRgb, LabelMask, Tensor3, ValidMask, BACKGROUND, IGNORE,
};
pub use losses::{
    classification_loss, gwp_class_scores, lambda_schedule, pixel_loss, region_loss, total_loss,
    ImageLabels, LossParams, LossReport,
};
pub use metrics::{boundary_iou, BoundaryParams, BoundaryReport, ConfusionMatrix, IouReport};
pub use pipeline::{run_pipeline, PipelineConfig, Summary};
pub use shape_cues::{
    apply_drop, concat_channels, drop_probability, sample_drop_mask, self_information, DropMask,
    DropProbMap, InfoMap, ScmParams, ShapeCues,
};
pub use spr::{
    compute_affinities, local_sigma, pseudo_mask, refine, spr, AffinityField, SprParams,
};
pub use synth::{
    alpha_sweep, degrade_scores, synth, AlphaTable, Degradation, SceneKind, SyntheticScene,
};
