//! Pyramid attention network for unsupervised deformable 3D registration.
//!
//! A weight-shared encoder with squeeze-and-excitation blocks builds five
//! feature levels for the moving and fixed images. A cascade of multi-head
//! local attention transformers turns neighbourhood attention into
//! displacement fields, coarse to fine. Training minimizes local NCC plus a
//! smoothness term and an orthogonality penalty on the attention heads.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod interp;
pub mod io;
pub mod jacobian;
pub mod lat;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod volume;

pub use decoder::{decode_pyramid, DecodeOutput, LatParams, DEFAULT_HEADS};
pub use encoder::{encode_pyramid, image_pyramid, EncoderParams, FeaturePyramid, DESK_WIDTHS, LEVELS};
pub use error::{Error, Result};
pub use interp::{compose, trilinear_sample, upsample_field, warp, warp_labels, Interpolation};
pub use jacobian::jacobian_det;
pub use lat::{lat_forward, lat_forward_backward, local_attention, subfields, AttentionMap, HeadGrid, LatLevel, LatOutput};
pub use metrics::{assd, dsc, evaluate_pair, neg_jacobian_fraction, LabelMetrics, MetricsReport};
pub use losses::{
    ncc_loss, ncc_loss_grad, orthogonality_loss, orthogonality_loss_grad, smoothness_loss, smoothness_loss_grad, total_loss, HeadMatrix, LossBreakdown, LossWeights};
pub use model::{ModelConfig, PanModel, PanParams};
pub use params::{Parameters, Tensor};
pub use pipeline::{evaluate_entries, evaluate_entry, network_grid, register_pair, Evaluation, PairEvaluation, Registration};
pub use train::{Adam, AdamConfig, StepRecord, TrainConfig, TrainPair, Trainer};
pub use synth::{generate_dataset, generate_pair, generate_translation_pair, Manifest, SynthConfig, SynthPair};
pub use volume::{Dims, DisplacementField, FeatureMap, LabelMap, Mask, Volume};
