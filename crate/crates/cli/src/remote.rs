//! Blocking HTTP client for a running server, used by `simulate --remote`.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use classwatch_core::gateway::{Ack, DetectionSink, GatewayError, WireDetection};
use classwatch_core::session::Session;

use crate::api::AckResponse;

pub struct RemoteGateway {
    base: String,
    client: reqwest::blocking::Client,
    max_batch: usize,
}

fn unavailable(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::GatewayUnavailable(e.to_string())
}

impl RemoteGateway {
    /// Connects and reads the server's batch limit.
    pub fn connect(base_url: &str) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(unavailable)?;
        let mut gw = Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
            max_batch: 1,
        };
        let cfg: Value = gw.get("/v1/config")?;
        gw.max_batch = cfg["max_batch"].as_u64().unwrap_or(1).max(1) as usize;
        Ok(gw)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, GatewayError> {
        let resp = self.client.get(format!("{}{path}", self.base)).send().map_err(unavailable)?;
        Self::decode(resp)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, GatewayError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .map_err(unavailable)?;
        Self::decode(resp)
    }

    fn decode<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, GatewayError> {
        let status = resp.status();
        let text = resp.text().map_err(unavailable)?;
        if !status.is_success() {
            return Err(GatewayError::GatewayUnavailable(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedPayload(e.to_string()))
    }

    /// Enrolls a student; an already enrolled id is not an error.
    pub fn enroll(&self, student_id: &str, display_name: &str, embedding: &[f64], enrolled_at: i64) -> Result<(), GatewayError> {
        let body = json!({
            "student_id": student_id,
            "display_name": display_name,
            "embedding": embedding,
            "enrolled_at": enrolled_at,
        });
        let resp = self
            .client
            .post(format!("{}/v1/students", self.base))
            .json(&body)
            .send()
            .map_err(unavailable)?;
        if resp.status() == reqwest::StatusCode::CONFLICT {
            return Ok(());
        }
        Self::decode::<Value>(resp).map(|_| ())
    }

    pub fn start_session(&self, course_label: &str, started_at: i64) -> Result<Session, GatewayError> {
        self.post("/v1/sessions", &json!({ "course_label": course_label, "started_at": started_at }))
    }

    pub fn end_session(&self, session_id: &str, ended_at: i64) -> Result<Session, GatewayError> {
        self.post(&format!("/v1/sessions/{session_id}/end"), &json!({ "ended_at": ended_at }))
    }

    pub fn summary(&self, session_id: &str) -> Result<Value, GatewayError> {
        self.get(&format!("/v1/sessions/{session_id}/summary"))
    }
}

impl DetectionSink for RemoteGateway {
    fn max_batch(&self) -> usize {
        self.max_batch
    }

    fn submit(&self, batch: Vec<WireDetection>) -> Result<Vec<Ack>, GatewayError> {
        let resp: AckResponse = self.post("/v1/detections", &json!({ "detections": batch }))?;
        Ok(resp.acks)
    }
}
