//! Server and operator tooling around `classwatch-core`.

pub mod api;
pub mod remote;

use std::path::Path;
use std::sync::Arc;

use classwatch_core::emotion::{load_checkpoint_file, Architecture, ClassifierError, ClassifierParams, EmotionModel};

/// Loads the classifier checkpoint, or falls back to an untrained seeded
/// network when the file does not exist.
pub fn load_model(path: &Path) -> Result<Arc<dyn EmotionModel>, ClassifierError> {
    if path.exists() {
        let params = load_checkpoint_file(path)?;
        log::info!("loaded classifier from {}", path.display());
        return Ok(Arc::new(params));
    }
    log::warn!(
        "no classifier at {}; using an untrained network (run `classwatch train` first)",
        path.display()
    );
    Ok(Arc::new(ClassifierParams::init(Architecture::default(), 0)?))
}
