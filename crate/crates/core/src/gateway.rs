//! Ingestion of detection batches from perception sources.
//!
//! Wire format (protocol version 1) is a JSON object
//! `{"detections": [WireDetection, ...]}`; see `docs/wire-protocol.md`.
//! Each detection is validated on its own, so one malformed element never
//! poisons the rest of its batch. Accepted events are handed to the session
//! engine in batch order under a single ingest lock.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{RawCrop, FACE_SIZE};
use crate::matcher::Embedding;
use crate::session::{DetectionEvent, OutcomeKind, SessionEngine};

pub const PROTOCOL_VERSION: u32 = 1;
pub const CROP_BYTES: usize = FACE_SIZE * FACE_SIZE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("batch of {size} exceeds the limit of {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("source id must be non-empty")]
    EmptySourceId,
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub capture_interval_ms: u64,
    pub max_batch: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            capture_interval_ms: 2000,
            max_batch: 32,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.capture_interval_ms == 0 {
            return Err(GatewayError::InvalidConfig("capture_interval_ms must be > 0".into()));
        }
        if self.max_batch == 0 {
            return Err(GatewayError::InvalidConfig("max_batch must be > 0".into()));
        }
        Ok(())
    }
}

/// One detection as sent by a perception source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub protocol_version: u32,
    pub session_id: String,
    pub source_id: String,
    pub captured_at: i64,
    pub embedding: Vec<f64>,
    /// Base64 (standard alphabet, padded) of 4096 row-major grayscale bytes.
    pub face_crop: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WireBatch {
    pub detections: Vec<serde_json::Value>,
}

impl WireDetection {
    pub fn from_event(event: &DetectionEvent) -> Self {
        let gray = event.face_crop.to_grayscale();
        Self {
            protocol_version: PROTOCOL_VERSION,
            session_id: event.session_id.clone(),
            source_id: event.source_id.clone(),
            captured_at: event.captured_at,
            embedding: event.embedding.as_slice().to_vec(),
            face_crop: BASE64.encode(&gray.data),
        }
    }

    /// Validates and converts to an engine event; the error string is the
    /// rejection reason code.
    pub fn into_event(self) -> Result<DetectionEvent, Rejection> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(Rejection::new(
                "UnsupportedProtocolVersion",
                format!("version {} (expected {PROTOCOL_VERSION})", self.protocol_version),
            ));
        }
        let embedding = Embedding::new(self.embedding)
            .map_err(|e| Rejection::new("InvalidEmbedding", e.to_string()))?;
        let bytes = BASE64
            .decode(self.face_crop.as_bytes())
            .map_err(|e| Rejection::new("InvalidCrop", e.to_string()))?;
        if bytes.len() != CROP_BYTES {
            return Err(Rejection::new(
                "InvalidCrop",
                format!("crop decodes to {} bytes, expected {CROP_BYTES}", bytes.len()),
            ));
        }
        let face_crop = RawCrop::grayscale(FACE_SIZE, FACE_SIZE, bytes)
            .map_err(|e| Rejection::new("InvalidCrop", e.to_string()))?;
        Ok(DetectionEvent {
            session_id: self.session_id,
            captured_at: self.captured_at,
            embedding,
            face_crop,
            source_id: self.source_id,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: String,
    pub detail: String,
}

impl Rejection {
    fn new(reason: &str, detail: String) -> Self {
        Self {
            reason: reason.to_string(),
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Ack {
    Accepted {
        outcome: OutcomeKind,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        unregistered_source: bool,
    },
    Rejected(Rejection),
}

impl Ack {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Ack::Accepted { .. })
    }

    pub fn reason(&self) -> Option<&str> {
        match self {
            Ack::Rejected(r) => Some(&r.reason),
            Ack::Accepted { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub source_id: String,
    pub room_label: Option<String>,
    pub registered: bool,
    pub accepted: u64,
    pub rejected: u64,
}

/// Anything that accepts detection batches: the in-process gateway or a
/// remote one over HTTP.
pub trait DetectionSink {
    fn max_batch(&self) -> usize;

    fn submit(&self, batch: Vec<WireDetection>) -> Result<Vec<Ack>, GatewayError>;
}

pub struct Gateway {
    engine: Arc<SessionEngine>,
    config: GatewayConfig,
    sources: RwLock<BTreeMap<String, SourceInfo>>,
    ingest: Mutex<()>,
}

impl Gateway {
    pub fn new(engine: Arc<SessionEngine>, config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            engine,
            config,
            sources: RwLock::new(BTreeMap::new()),
            ingest: Mutex::new(()),
        })
    }

    pub fn engine(&self) -> &Arc<SessionEngine> {
        &self.engine
    }

    pub fn config(&self) -> GatewayConfig {
        self.config
    }

    /// Idempotent; re-registering updates the room label.
    pub fn register_source(&self, source_id: &str, room_label: &str) -> Result<SourceInfo, GatewayError> {
        if source_id.trim().is_empty() {
            return Err(GatewayError::EmptySourceId);
        }
        let mut sources = self.sources.write();
        let info = sources.entry(source_id.to_string()).or_insert_with(|| SourceInfo {
            source_id: source_id.to_string(),
            ..SourceInfo::default()
        });
        info.registered = true;
        info.room_label = Some(room_label.to_string());
        Ok(info.clone())
    }

    pub fn sources(&self) -> Vec<SourceInfo> {
        self.sources.read().values().cloned().collect()
    }

    /// Parses a raw request body. Only an unparseable envelope fails the
    /// whole request.
    pub fn submit_json(&self, body: &[u8]) -> Result<Vec<Ack>, GatewayError> {
        let batch: WireBatch =
            serde_json::from_slice(body).map_err(|e| GatewayError::MalformedPayload(e.to_string()))?;
        self.check_size(batch.detections.len())?;
        let items = batch
            .detections
            .into_iter()
            .map(|v| {
                serde_json::from_value::<WireDetection>(v)
                    .map_err(|e| Rejection::new("MalformedEvent", e.to_string()))
            })
            .collect();
        Ok(self.ingest(items))
    }

    pub fn submit_detections(&self, batch: Vec<WireDetection>) -> Result<Vec<Ack>, GatewayError> {
        self.check_size(batch.len())?;
        Ok(self.ingest(batch.into_iter().map(Ok).collect()))
    }

    fn check_size(&self, size: usize) -> Result<(), GatewayError> {
        if size > self.config.max_batch {
            return Err(GatewayError::BatchTooLarge {
                size,
                max: self.config.max_batch,
            });
        }
        Ok(())
    }

    fn ingest(&self, items: Vec<Result<WireDetection, Rejection>>) -> Vec<Ack> {
        let _order = self.ingest.lock();
        items
            .into_iter()
            .map(|item| {
                let source_id = item.as_ref().map(|w| w.source_id.clone()).ok();
                let ack = match item.and_then(WireDetection::into_event) {
                    Err(r) => Ack::Rejected(r),
                    Ok(event) => {
                        let outcome = self.engine.process_detection(&event);
                        match outcome.rejection {
                            Some(err) => Ack::Rejected(Rejection::new(err.code(), err.to_string())),
                            None => Ack::Accepted {
                                outcome: outcome.kind,
                                unregistered_source: false,
                            },
                        }
                    }
                };
                self.record_source(source_id, ack)
            })
            .collect()
    }

    fn record_source(&self, source_id: Option<String>, mut ack: Ack) -> Ack {
        let Some(source_id) = source_id else {
            return ack;
        };
        let mut sources = self.sources.write();
        let info = sources.entry(source_id.clone()).or_insert_with(|| SourceInfo {
            source_id,
            ..SourceInfo::default()
        });
        match &mut ack {
            Ack::Accepted {
                unregistered_source, ..
            } => {
                info.accepted += 1;
                *unregistered_source = !info.registered;
            }
            Ack::Rejected(_) => info.rejected += 1,
        }
        ack
    }
}

impl DetectionSink for Gateway {
    fn max_batch(&self) -> usize {
        self.config.max_batch
    }

    fn submit(&self, batch: Vec<WireDetection>) -> Result<Vec<Ack>, GatewayError> {
        self.submit_detections(batch)
    }
}
