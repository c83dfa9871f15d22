use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use classwatch_cli::api::{router, AppState};
use classwatch_cli::remote::RemoteGateway;
use classwatch_core::emotion::{Architecture, ClassifierParams, EmotionClass};
use classwatch_core::gateway::{DetectionSink, Gateway, GatewayConfig, WireDetection};
use classwatch_core::matcher::{Embedding, MatcherConfig};
use classwatch_core::session::{DetectionEvent, SessionEngine};
use classwatch_core::sim::{generate_students, render_emotion_crop, run_scenario, Pace, SimScenario};
use classwatch_core::store::JournalStore;

fn gateway() -> Arc<Gateway> {
    let engine = SessionEngine::new(
        Arc::new(JournalStore::in_memory()),
        Arc::new(ClassifierParams::init(Architecture::default(), 0).unwrap()),
        MatcherConfig::default(),
    );
    Arc::new(Gateway::new(Arc::new(engine), GatewayConfig { capture_interval_ms: 2000, max_batch: 4 }).unwrap())
}

fn app() -> Router {
    router(AppState::new(gateway()), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

fn basis(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; 128];
    v[k] = 1.0;
    v
}

fn detection(session: &str, at: i64, embedding: Vec<f64>) -> Value {
    let event = DetectionEvent {
        session_id: session.into(),
        captured_at: at,
        embedding: Embedding::new(embedding).unwrap(),
        face_crop: render_emotion_crop(EmotionClass::Engagement, at as u64),
        source_id: "cam-1".into(),
    };
    serde_json::to_value(WireDetection::from_event(&event)).unwrap()
}

async fn setup(app: &Router) -> String {
    for (i, id) in ["ana", "ben", "cy"].iter().enumerate() {
        let (st, _) = call(
            app,
            "POST",
            "/v1/students",
            Some(json!({ "student_id": id, "display_name": id.to_uppercase(), "embedding": basis(i), "enrolled_at": 0 })),
        )
        .await;
        assert_eq!(st, StatusCode::CREATED);
    }
    let (st, session) = call(app, "POST", "/v1/sessions", Some(json!({ "course_label": "CS101", "started_at": 1000 }))).await;
    assert_eq!(st, StatusCode::CREATED);
    session["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_and_config() {
    let app = app();
    let (st, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (_, cfg) = call(&app, "GET", "/v1/config", None).await;
    assert_eq!(cfg["capture_interval_ms"], 2000);
    assert_eq!(cfg["max_batch"], 4);
    assert_eq!(cfg["protocol_version"], 1);
}

#[tokio::test]
async fn live_session_flow() {
    let app = app();
    let sid = setup(&app).await;
    let mut short = detection(&sid, 1200, basis(1));
    short["embedding"] = json!(vec![0.0; 127]);
    let batch = json!({ "detections": [
        detection(&sid, 1100, basis(0)),
        short,
        detection(&sid, 1300, basis(0)),
        detection(&sid, 1400, basis(7)),
    ]});
    let (st, resp) = call(&app, "POST", "/v1/detections", Some(batch)).await;
    assert_eq!(st, StatusCode::OK);
    let acks = resp["acks"].as_array().unwrap();
    assert_eq!(acks[0]["status"], "accepted");
    assert_eq!(acks[0]["outcome"], "attendance_marked");
    assert_eq!(acks[0]["unregistered_source"], true);
    assert_eq!(acks[1]["status"], "rejected");
    assert_eq!(acks[1]["reason"], "InvalidEmbedding");
    assert_eq!(acks[2]["outcome"], "attendance_skipped_emotion_logged");
    assert_eq!(acks[3]["outcome"], "unmatched_ignored");

    let (_, att) = call(&app, "GET", &format!("/v1/sessions/{sid}/attendance"), None).await;
    let present = att["present"].as_array().unwrap();
    assert_eq!(present.len(), 1);
    assert_eq!(present[0]["student_id"], "ana");
    assert_eq!(present[0]["display_name"], "ANA");
    assert_eq!(present[0]["confidence"], 1.0);
    assert_eq!(present[0]["timestamp"], 1100);
    assert_eq!(att["unmatched_count"], 1);

    let (_, dist) = call(&app, "GET", &format!("/v1/sessions/{sid}/emotions/distribution"), None).await;
    assert_eq!(dist["total"], 2);
    let fr = &dist["fractions"];
    let sum: f64 = ["boredom", "confusion", "engagement", "frustration"].iter().map(|k| fr[k].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    let (_, early) = call(&app, "GET", &format!("/v1/sessions/{sid}/emotions/distribution?start=0&end=1200"), None).await;
    assert_eq!(early["total"], 1);

    let (_, ts) = call(&app, "GET", &format!("/v1/sessions/{sid}/emotions/timeseries?bucket_ms=250"), None).await;
    let buckets = ts["buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 2);
    assert_eq!(buckets[0]["bucket_start"], 1000);
    assert_eq!(buckets[1]["bucket_start"], 1250);
    let (st, _) = call(&app, "GET", &format!("/v1/sessions/{sid}/emotions/timeseries?bucket_ms=0"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (_, ana) = call(&app, "GET", &format!("/v1/sessions/{sid}/students/ana"), None).await;
    assert_eq!(ana["history"].as_array().unwrap().len(), 2);
    let (_, ben) = call(&app, "GET", &format!("/v1/sessions/{sid}/students/ben"), None).await;
    assert!(ben["attendance"].is_null());
    assert!(ben["history"].as_array().unwrap().is_empty());
    let (st, _) = call(&app, "GET", &format!("/v1/sessions/{sid}/students/zed"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (_, summary) = call(&app, "GET", &format!("/v1/sessions/{sid}/summary"), None).await;
    assert_eq!(summary["present"], 1);
    assert_eq!(summary["absent"], 2);
    assert_eq!(summary["unmatched_count"], 1);

    let (st, ended) = call(&app, "POST", &format!("/v1/sessions/{sid}/end"), Some(json!({ "ended_at": 5000 }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ended["status"], "ended");
    let (st, err) = call(&app, "POST", &format!("/v1/sessions/{sid}/end"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["error"], "AlreadyEnded");

    let (_, late) = call(&app, "POST", "/v1/detections", Some(json!({ "detections": [detection(&sid, 6000, basis(1))] }))).await;
    assert_eq!(late["acks"][0]["reason"], "SessionNotActive");

    let (_, sessions) = call(&app, "GET", "/v1/sessions", None).await;
    assert_eq!(sessions.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn request_level_errors() {
    let app = app();
    let sid = setup(&app).await;
    let five: Vec<Value> = (0..5).map(|i| detection(&sid, 1100 + i, basis(0))).collect();
    let (st, err) = call(&app, "POST", "/v1/detections", Some(json!({ "detections": five }))).await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(err["error"], "BatchTooLarge");
    let (st, err) = call(&app, "POST", "/v1/detections", Some(json!({ "nope": 1 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "MalformedPayload");
    let (st, _) = call(&app, "GET", "/v1/sessions/session-9999/summary", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, err) = call(
        &app,
        "POST",
        "/v1/students",
        Some(json!({ "student_id": "ana", "display_name": "again", "embedding": basis(9) })),
    )
    .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["error"], "DuplicateStudentId");
    // Nothing above may have written rows.
    let (_, dist) = call(&app, "GET", &format!("/v1/sessions/{sid}/emotions/distribution"), None).await;
    assert_eq!(dist["total"], 0);
}

#[tokio::test]
async fn sources_are_idempotent() {
    let app = app();
    for _ in 0..2 {
        let (st, _) = call(&app, "POST", "/v1/sources", Some(json!({ "source_id": "cam-1", "room_label": "A" }))).await;
        assert_eq!(st, StatusCode::OK);
    }
    let (_, list) = call(&app, "GET", "/v1/sources", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["registered"], true);
    let (st, _) = call(&app, "POST", "/v1/sources", Some(json!({ "source_id": " " }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn reads_are_repeatable() {
    let app = app();
    let sid = setup(&app).await;
    call(&app, "POST", "/v1/detections", Some(json!({ "detections": [detection(&sid, 1100, basis(2))] }))).await;
    for path in ["attendance", "emotions/distribution", "emotions/timeseries", "summary", "students/cy"] {
        let uri = format!("/v1/sessions/{sid}/{path}");
        let a = call(&app, "GET", &uri, None).await;
        let b = call(&app, "GET", &uri, None).await;
        assert_eq!(a, b, "{uri}");
    }
}

#[tokio::test]
async fn serves_dashboard_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>dash</html>").unwrap();
    let app = router(AppState::new(gateway()), Some(dir.path().to_path_buf()));
    let resp = app
        .clone()
        .oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>dash</html>");
    let (st, _) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(st, StatusCode::OK);
}

#[test]
fn simulator_over_http() {
    let gw = gateway();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::new(gw.clone()), None);
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });

    let remote = RemoteGateway::connect(&format!("http://{addr}")).unwrap();
    assert_eq!(remote.max_batch(), 4);
    let mut scenario = SimScenario::new(5, 6, 1);
    scenario.embedding_noise_sigma = 0.0;
    scenario.intruder_count = 1;
    let students = generate_students(&scenario).unwrap();
    for s in &students {
        remote.enroll(&s.student_id, &s.display_name, s.embedding.as_slice(), 0).unwrap();
    }
    // Enrolling again is tolerated.
    remote.enroll("s1", "Student 1", students[0].embedding.as_slice(), 0).unwrap();
    let session = remote.start_session("remote", scenario.start_time_ms).unwrap();
    let log = run_scenario(&scenario, &students, &session.session_id, &remote, Pace::Compressed).unwrap();
    assert_eq!(log.emitted().count(), 7 * 30);
    assert!(log.emitted().all(|e| e.ack.as_ref().unwrap().is_accepted()));
    let summary = remote.summary(&session.session_id).unwrap();
    assert_eq!(summary["present"], 6);
    assert_eq!(summary["unmatched_count"], 30);
    assert_eq!(summary["distribution"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum::<u64>(), 180);
    remote.end_session(&session.session_id, scenario.start_time_ms + 60_000).unwrap();
    rt.shutdown_background();

    assert!(matches!(
        RemoteGateway::connect("http://127.0.0.1:1"),
        Err(classwatch_core::gateway::GatewayError::GatewayUnavailable(_))
    ));
}
