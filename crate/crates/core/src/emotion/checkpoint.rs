//! Versioned JSON checkpoint for the reference network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::label::EmotionClass;
use super::network::{Architecture, ClassifierParams, Tensor};
use super::ClassifierError;

pub const CHECKPOINT_FORMAT: &str = "classwatch-reference-cnn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: Architecture,
    /// Class labels in code order.
    classes: Vec<String>,
    seed: u64,
    tensors: Vec<Tensor>,
}

pub fn save_checkpoint<W: Write>(params: &ClassifierParams, writer: W) -> Result<(), ClassifierError> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture: params.architecture,
        classes: EmotionClass::ALL.iter().map(|c| c.label().to_string()).collect(),
        seed: params.seed,
        tensors: params.tensors.clone(),
    };
    serde_json::to_writer(writer, &ckpt).map_err(|e| ClassifierError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint<R: Read>(mut reader: R) -> Result<ClassifierParams, ClassifierError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
    // Check the header on its own first so an unknown version is reported as
    // such rather than as a schema error.
    let header: Header =
        serde_json::from_str(&text).map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(ClassifierError::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(ClassifierError::UnsupportedCheckpointVersion(header.version));
    }
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
    let expected: Vec<&str> = EmotionClass::ALL.iter().map(|c| c.label()).collect();
    if ckpt.classes != expected {
        return Err(ClassifierError::Checkpoint(format!(
            "class table {:?} does not match {:?}",
            ckpt.classes, expected
        )));
    }
    ClassifierParams::from_tensors(ckpt.architecture, ckpt.seed, ckpt.tensors)
}

pub fn save_checkpoint_file(params: &ClassifierParams, path: &Path) -> Result<(), ClassifierError> {
    let file = File::create(path).map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(file);
    save_checkpoint(params, &mut w)?;
    w.flush().map_err(|e| ClassifierError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint_file(path: &Path) -> Result<ClassifierParams, ClassifierError> {
    let file = File::open(path).map_err(|e| ClassifierError::Checkpoint(format!("{}: {e}", path.display())))?;
    load_checkpoint(BufReader::new(file))
}
