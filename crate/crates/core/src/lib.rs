//! Localize discriminative layers in activation dumps of a frozen backbone,
//! score and select the neurons that carry the real/fake signal, and check
//! the selection with masking ablations.
//!
//! Everything numeric is generic over [`Scalar`] (f32 or f64). The aliases
//! below pin f64, which is what the command-line tool uses. Layer and neuron
//! indices are 1-based throughout.

pub mod ablation;
pub mod dump;
pub mod error;
pub mod fdu;
pub mod localization;
pub mod matrix;
pub mod metrics;
pub mod probe;
pub mod scalar;
pub mod synth;

pub use ablation::{LinearDetector, MaskMode, MaskSpec, NeuronId};
pub use dump::{read_dump, slice_layers, write_dump, ActivationDump};
pub use error::{Error, Result};
pub use fdu::PoolScope;
pub use localization::{CriticalLayerResult, Fallback, LocalizationConfig};
pub use matrix::Matrix;
pub use probe::ProbeConfig;
pub use scalar::Scalar;
pub use synth::PlantSpec;

pub type MatrixF64 = matrix::Matrix<f64>;
pub type ProbeModelF64 = probe::ProbeModel<f64>;
pub type ProbeModelF32 = probe::ProbeModel<f32>;
pub type LayerProfileF64 = localization::LayerProfile<f64>;
pub type NeuronScoreF64 = fdu::NeuronScore<f64>;
pub type FduSignatureF64 = fdu::FduSignature<f64>;
pub type FduSignatureF32 = fdu::FduSignature<f32>;
pub type FduClassifierF64 = fdu::FduClassifier<f64>;
pub type LinearDetectorF64 = ablation::LinearDetector<f64>;
pub type AblationReportF64 = ablation::AblationReport<f64>;
pub type DeclineCurveF64 = ablation::DeclineCurve<f64>;
pub type DetectionMetricsF64 = metrics::DetectionMetrics<f64>;
pub type OracleAnswerF64 = synth::OracleAnswer<f64>;
