//! Classroom monitoring engine: embedding-based attendance with a
//! once-per-session rule, continuous learning-affect classification, storage,
//! ingestion, analytics, a deterministic classroom simulator, and dataset
//! preparation for the classifier.

pub mod analytics;
pub mod dataset;
pub mod emotion;
pub mod gateway;
pub mod matcher;
pub mod session;
pub mod sim;
pub mod store;

/// Current wall-clock time as UTC milliseconds since the epoch.
pub fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or_default()
}
