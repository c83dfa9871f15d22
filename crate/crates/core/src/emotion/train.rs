use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::image::ImageTensor;
use super::label::{EmotionClass, EmotionProbabilities, NUM_CLASSES};
use super::network::{Architecture, ClassifierParams};
use super::{ClassifierError, EmotionModel, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub items: Vec<(ImageTensor, EmotionClass)>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(items: Vec<(ImageTensor, EmotionClass)>, split: Split) -> Self {
        Self { items, split }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for (_, c) in &self.items {
            counts[c.code()] += 1;
        }
        counts
    }
}

/// Mean negative log-likelihood of the true classes, with probabilities
/// floored at `1e-12`.
pub fn cross_entropy_loss(
    batch_probs: &[EmotionProbabilities],
    true_codes: &[EmotionClass],
) -> Result<f64, ClassifierError> {
    if batch_probs.len() != true_codes.len() {
        return Err(ClassifierError::LengthMismatch {
            probs: batch_probs.len(),
            labels: true_codes.len(),
        });
    }
    if batch_probs.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let total: f64 = batch_probs
        .iter()
        .zip(true_codes)
        .map(|(p, c)| -p.prob(*c).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / batch_probs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub params: ClassifierParams,
    pub history: Vec<EpochStats>,
}

/// Mini-batch Adam training of the reference network.
///
/// Per-epoch loss and accuracy are accumulated over the batches as they are
/// trained, so they lag the end-of-epoch weights slightly. Given the same
/// seed the whole run is bit-reproducible.
pub fn train(
    dataset: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    architecture: Architecture,
    config: &AdamConfig,
    seed: u64,
) -> Result<TrainingRun, ClassifierError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let counts = dataset.class_counts();
    if let Some(missing) = EmotionClass::ALL.iter().find(|c| counts[c.code()] == 0) {
        return Err(ClassifierError::MissingClass(*missing));
    }

    let mut params = ClassifierParams::init(architecture, seed)?;
    let mut state = AdamState::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&ImageTensor, EmotionClass)> = chunk
                .iter()
                .map(|&i| (&dataset.items[i].0, dataset.items[i].1))
                .collect();
            let (loss, grads, hits) = params.loss_and_gradients(&batch)?;
            step += 1;
            adam_step(&mut params.tensors, &grads, config, &mut state, step)?;
            if !params.is_finite() {
                return Err(ClassifierError::NonFiniteParameters);
            }
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        let val_acc = validation
            .map(|v| accuracy(&params, v))
            .transpose()?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / dataset.len() as f64,
            train_acc: correct as f64 / dataset.len() as f64,
            val_acc,
        });
    }
    Ok(TrainingRun { params, history })
}

pub fn accuracy(model: &dyn EmotionModel, dataset: &LabeledDataset) -> Result<f64, ClassifierError> {
    if dataset.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut correct = 0;
    for (image, label) in &dataset.items {
        if model.predict(image)?.argmax() == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Writes `epoch,train_loss,train_acc,val_acc` rows with a header line.
pub fn write_history<W: Write>(mut w: W, history: &[EpochStats]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,train_acc,val_acc")?;
    for h in history {
        let val = h.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(w, "{},{:.6},{:.6},{}", h.epoch, h.train_loss, h.train_acc, val)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(p: [f64; 4]) -> EmotionProbabilities {
        EmotionProbabilities::new(p).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = cross_entropy_loss(&[probs([0.0, 0.0, 1.0, 0.0])], &[EmotionClass::Engagement]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_prediction_costs_ln4() {
        for c in EmotionClass::ALL {
            let l = cross_entropy_loss(&[probs([0.25; 4])], &[c]).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-6);
            assert!((l - 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn two_item_batch() {
        let l = cross_entropy_loss(
            &[probs([0.5, 0.5, 0.0, 0.0]), probs([0.25, 0.25, 0.25, 0.25])],
            &[EmotionClass::Boredom, EmotionClass::Frustration],
        )
        .unwrap();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_is_floored() {
        let l = cross_entropy_loss(&[probs([1.0, 0.0, 0.0, 0.0])], &[EmotionClass::Confusion]).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            cross_entropy_loss(&[probs([0.25; 4])], &[]),
            Err(ClassifierError::LengthMismatch { probs: 1, labels: 0 })
        ));
    }

    #[test]
    fn missing_class_is_rejected() {
        let img = ImageTensor::with_size(1, 8, vec![0.5; 64]).unwrap();
        let ds = LabeledDataset::new(
            vec![
                (img.clone(), EmotionClass::Boredom),
                (img.clone(), EmotionClass::Confusion),
                (img, EmotionClass::Engagement),
            ],
            Split::Train,
        );
        let err = train(&ds, None, Architecture::default(), &AdamConfig::default(), 0).unwrap_err();
        assert_eq!(err, ClassifierError::MissingClass(EmotionClass::Frustration));
    }

    #[test]
    fn history_csv_format() {
        let mut buf = Vec::new();
        write_history(
            &mut buf,
            &[EpochStats {
                epoch: 1,
                train_loss: 1.25,
                train_acc: 0.5,
                val_acc: None,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_acc\n1,1.250000,0.500000,\n"
        );
    }
}
