use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ClassifierError;

pub const NUM_CLASSES: usize = 4;

/// Learning-affect class. Integer codes follow alphabetical label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Boredom = 0,
    Confusion = 1,
    Engagement = 2,
    Frustration = 3,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; NUM_CLASSES] = [
        EmotionClass::Boredom,
        EmotionClass::Confusion,
        EmotionClass::Engagement,
        EmotionClass::Frustration,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            EmotionClass::Boredom => "boredom",
            EmotionClass::Confusion => "confusion",
            EmotionClass::Engagement => "engagement",
            EmotionClass::Frustration => "frustration",
        }
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EmotionClass {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.label() == lower)
            .ok_or_else(|| ClassifierError::InvalidLabel(s.to_string()))
    }
}

/// Probability vector over the four classes, indexed by class code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionProbabilities([f64; NUM_CLASSES]);

impl EmotionProbabilities {
    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self, ClassifierError> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(ClassifierError::InvalidProbabilities(probs.to_vec()));
        }
        Ok(Self(probs))
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64; NUM_CLASSES]) -> Self {
        Self(softmax(logits))
    }

    pub fn as_array(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn prob(&self, class: EmotionClass) -> f64 {
        self.0[class.code()]
    }

    /// Most probable class; ties go to the lowest code.
    pub fn argmax(&self) -> EmotionClass {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        EmotionClass::ALL[best]
    }

    pub fn max_probability(&self) -> f64 {
        self.0[self.argmax().code()]
    }
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn argmax_emotion(p: &EmotionProbabilities) -> EmotionClass {
    p.argmax()
}
