//! Detecting human answer mistakes in GuessWhat?!-style visual dialogues.
//!
//! The library covers the full pipeline: corpus loading and filtering,
//! question typing, turn and contingency statistics, synthetic mistake
//! generation, a small reverse-mode autodiff core, the detector models and
//! their training protocol, evaluation, and few-shot prompt construction for
//! external vision-language models.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar type for the common cases.

pub mod corpus;
pub mod detector;
pub mod eval;
pub mod fixtures;
pub mod nn;
pub mod prompts;
pub mod qtype;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use scalar::Scalar;

pub type Tensor = nn::Tensor<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type Graph = nn::Graph<f64>;
pub type Adam = nn::Adam<f64>;
pub type Detector = detector::DetectorModel<f64>;
pub type KFoldOutcome = detector::KFoldOutcome<f64>;

pub type TensorF32 = nn::Tensor<f32>;
pub type ParamStoreF32 = nn::ParamStore<f32>;
pub type GraphF32 = nn::Graph<f32>;
pub type AdamF32 = nn::Adam<f32>;
pub type DetectorF32 = detector::DetectorModel<f32>;
