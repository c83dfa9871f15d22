//! Four-class learning-affect classifier: preprocessing, the reference CNN,
//! training, and evaluation.

pub mod adam;
pub mod checkpoint;
pub mod image;
pub mod label;
pub mod metrics;
pub mod network;
pub mod train;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file};
pub use image::{preprocess_face, ImageTensor, RawCrop, FACE_SIZE};
pub use label::{argmax_emotion, softmax, EmotionClass, EmotionProbabilities, NUM_CLASSES};
pub use metrics::{evaluate, Averages, ClassMetrics, MetricsReport};
pub use network::{ActivationPattern, Architecture, ClassifierParams, Tensor};
pub use train::{cross_entropy_loss, train, EpochStats, LabeledDataset, Split, TrainingRun};

/// Lower bound applied to probabilities before taking their logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("pixel values must lie in [0, 1]")]
    InvalidPixels,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid emotion label {0:?}")]
    InvalidLabel(String),
    #[error("not a probability distribution: {0:?}")]
    InvalidProbabilities(Vec<f64>),
    #[error("{probs} predictions but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training data has no samples of class {0}")]
    MissingClass(EmotionClass),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("parameters became non-finite")]
    NonFiniteParameters,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedCheckpointVersion(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Anything that maps a preprocessed face to class probabilities.
pub trait EmotionModel: Send + Sync {
    fn input_channels(&self) -> usize;

    fn predict(&self, image: &ImageTensor) -> Result<EmotionProbabilities, ClassifierError>;
}

impl EmotionModel for ClassifierParams {
    fn input_channels(&self) -> usize {
        self.architecture.input_channels
    }

    fn predict(&self, image: &ImageTensor) -> Result<EmotionProbabilities, ClassifierError> {
        ClassifierParams::predict(self, image)
    }
}

/// Preprocess a raw crop for `model`, run it, and pick the top class.
pub fn classify_crop(
    model: &dyn EmotionModel,
    crop: &RawCrop,
) -> Result<(EmotionClass, EmotionProbabilities), ClassifierError> {
    let image = preprocess_face(&crop.with_channels(model.input_channels())?)?;
    let probs = model.predict(&image)?;
    Ok((probs.argmax(), probs))
}
