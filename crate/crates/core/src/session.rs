//! Session lifecycle and the per-session attendance state.
//!
//! Every matched detection is classified for emotion. Only the first match of
//! a student within a session writes an attendance row; later matches skip
//! attendance and log the emotion alone. All mutation for one session runs
//! under that session's lock, so events are applied in arrival order.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{classify_crop, ClassifierError, EmotionClass, EmotionModel, RawCrop};
use crate::matcher::{
    Embedding, MatchError, MatchResult, MatcherConfig, Roster, StudentProfile,
};
use crate::store::{AttendanceRecord, EmotionObservation, InsertOutcome, RecordFilter, Store, StoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is not active")]
    SessionNotActive(String),
    #[error("session {0} has already ended")]
    AlreadyEnded(String),
    #[error("unknown student {0}")]
    UnknownStudent(String),
    #[error("timestamp {timestamp} precedes session start {started_at}")]
    BeforeSessionStart { timestamp: i64, started_at: i64 },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EngineError {
    /// Short machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::UnknownSession(_) => "UnknownSession",
            EngineError::SessionNotActive(_) => "SessionNotActive",
            EngineError::AlreadyEnded(_) => "AlreadyEnded",
            EngineError::UnknownStudent(_) => "UnknownStudent",
            EngineError::BeforeSessionStart { .. } => "BeforeSessionStart",
            EngineError::Match(MatchError::InvalidEmbedding(_)) => "InvalidEmbedding",
            EngineError::Match(MatchError::DuplicateStudentId(_)) => "DuplicateStudentId",
            EngineError::Match(_) => "InvalidStudent",
            EngineError::Classifier(ClassifierError::EmptyImage) => "EmptyImage",
            EngineError::Classifier(_) => "ClassifierError",
            EngineError::Store(_) => "StoreError",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Ended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub course_label: String,
    pub started_at: i64,
    pub ended_at: Option<i64>,
    pub status: SessionStatus,
}

impl Session {
    pub fn new(session_id: String, course_label: String, started_at: i64) -> Self {
        Self {
            session_id,
            course_label,
            started_at,
            ended_at: None,
            status: SessionStatus::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }
}

/// One detected face at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionEvent {
    pub session_id: String,
    pub captured_at: i64,
    pub embedding: Embedding,
    pub face_crop: RawCrop,
    pub source_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    AttendanceMarked,
    AttendanceSkippedEmotionLogged,
    UnmatchedIgnored,
    Rejected,
}

#[derive(Debug)]
pub struct ProcessOutcome {
    pub kind: OutcomeKind,
    pub matched: Option<MatchResult>,
    /// Predicted class and its probability.
    pub emotion: Option<(EmotionClass, f64)>,
    pub rejection: Option<EngineError>,
}

impl ProcessOutcome {
    fn rejected(err: EngineError) -> Self {
        Self {
            kind: OutcomeKind::Rejected,
            matched: None,
            emotion: None,
            rejection: Some(err),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresentStudent {
    pub student_id: String,
    pub display_name: String,
    pub timestamp: i64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session: Session,
    /// Ordered by attendance timestamp, then student id.
    pub present: Vec<PresentStudent>,
    pub unmatched_count: u64,
}

/// Attendance bit-vector for one session (a set bit is a key present in
/// `marks`) plus the diagnostics counter.
#[derive(Debug, Default)]
struct SessionState {
    marks: HashMap<String, (i64, f64)>,
    unmatched_count: u64,
}

struct SessionEntry {
    session: Session,
    state: SessionState,
}

pub struct SessionEngine {
    roster: Roster,
    store: Arc<dyn Store>,
    model: Arc<dyn EmotionModel>,
    matcher: MatcherConfig,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<SessionEntry>>>>,
    next_session: AtomicU64,
}

impl SessionEngine {
    /// Builds an engine over `store`, restoring enrolled students, sessions,
    /// and attendance flags from it.
    pub fn new(store: Arc<dyn Store>, model: Arc<dyn EmotionModel>, matcher: MatcherConfig) -> Self {
        let roster = Roster::new();
        for profile in store.students() {
            // Store keys are unique, so this cannot collide.
            let _ = roster.insert(profile);
        }
        let mut sessions = BTreeMap::new();
        for session in store.sessions() {
            let mut state = SessionState::default();
            for r in store.attendance(&RecordFilter::session(&session.session_id)) {
                state.marks.insert(r.student_id, (r.timestamp, r.confidence));
            }
            sessions.insert(
                session.session_id.clone(),
                Arc::new(Mutex::new(SessionEntry { session, state })),
            );
        }
        let next = sessions.len() as u64 + 1;
        Self {
            roster,
            store,
            model,
            matcher,
            sessions: RwLock::new(sessions),
            next_session: AtomicU64::new(next),
        }
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.store
    }

    pub fn matcher_config(&self) -> MatcherConfig {
        self.matcher
    }

    pub fn enroll_student(
        &self,
        student_id: &str,
        display_name: &str,
        reference_embedding: Embedding,
        enrolled_at: i64,
    ) -> Result<StudentProfile, EngineError> {
        let profile = self
            .roster
            .enroll(student_id, display_name, reference_embedding, enrolled_at)?;
        if let Err(e) = self.store.insert_student(&profile) {
            self.roster.remove(student_id);
            return Err(e.into());
        }
        Ok(profile)
    }

    pub fn start_session(&self, course_label: &str, start_time: i64) -> Result<Session, EngineError> {
        let mut sessions = self.sessions.write();
        let session_id = loop {
            let n = self.next_session.fetch_add(1, Ordering::SeqCst);
            let id = format!("session-{n:04}");
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        let session = Session::new(session_id.clone(), course_label.to_string(), start_time);
        self.store.insert_session(&session)?;
        sessions.insert(
            session_id,
            Arc::new(Mutex::new(SessionEntry {
                session: session.clone(),
                state: SessionState::default(),
            })),
        );
        Ok(session)
    }

    fn entry(&self, session_id: &str) -> Result<Arc<Mutex<SessionEntry>>, EngineError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_string()))
    }

    pub fn end_session(&self, session_id: &str, end_time: i64) -> Result<Session, EngineError> {
        let entry = self.entry(session_id)?;
        let mut entry = entry.lock();
        if !entry.session.is_active() {
            return Err(EngineError::AlreadyEnded(session_id.to_string()));
        }
        if end_time < entry.session.started_at {
            return Err(EngineError::BeforeSessionStart {
                timestamp: end_time,
                started_at: entry.session.started_at,
            });
        }
        self.store.end_session(session_id, end_time)?;
        entry.session.ended_at = Some(end_time);
        entry.session.status = SessionStatus::Ended;
        Ok(entry.session.clone())
    }

    pub fn session(&self, session_id: &str) -> Result<Session, EngineError> {
        Ok(self.entry(session_id)?.lock().session.clone())
    }

    pub fn sessions(&self) -> Vec<Session> {
        let entries: Vec<_> = self.sessions.read().values().cloned().collect();
        entries.iter().map(|e| e.lock().session.clone()).collect()
    }

    /// Attendance flag of `student_id` in `session_id`.
    pub fn is_marked(&self, session_id: &str, student_id: &str) -> Result<bool, EngineError> {
        Ok(self.entry(session_id)?.lock().state.marks.contains_key(student_id))
    }

    /// Runs one detection through matching, attendance and emotion logging.
    /// Failures are reported as a `Rejected` outcome carrying the error.
    pub fn process_detection(&self, event: &DetectionEvent) -> ProcessOutcome {
        match self.try_process(event) {
            Ok(outcome) => outcome,
            Err(e) => ProcessOutcome::rejected(e),
        }
    }

    fn try_process(&self, event: &DetectionEvent) -> Result<ProcessOutcome, EngineError> {
        let entry = self.entry(&event.session_id)?;
        Self::check_active(&entry.lock().session, event.captured_at)?;

        let result = self.roster.match_embedding(&event.embedding, &self.matcher);
        let student_id = match (&result.matched, &result.student_id) {
            (true, Some(id)) => id.clone(),
            _ => {
                let mut entry = entry.lock();
                Self::check_active(&entry.session, event.captured_at)?;
                entry.state.unmatched_count += 1;
                return Ok(ProcessOutcome {
                    kind: OutcomeKind::UnmatchedIgnored,
                    matched: Some(result),
                    emotion: None,
                    rejection: None,
                });
            }
        };

        // Classification is pure, so it runs outside the session lock.
        let (emotion, probs) = classify_crop(self.model.as_ref(), &event.face_crop)?;
        let emotion_confidence = probs.max_probability();

        let mut entry = entry.lock();
        Self::check_active(&entry.session, event.captured_at)?;
        let kind = if entry.state.marks.contains_key(&student_id) {
            OutcomeKind::AttendanceSkippedEmotionLogged
        } else {
            let record = AttendanceRecord {
                student_id: student_id.clone(),
                session_id: event.session_id.clone(),
                timestamp: event.captured_at,
                confidence: result.confidence,
            };
            let inserted = self.store.insert_attendance(&record)?;
            entry
                .state
                .marks
                .insert(student_id.clone(), (record.timestamp, record.confidence));
            match inserted {
                InsertOutcome::Inserted => OutcomeKind::AttendanceMarked,
                InsertOutcome::DuplicateRejected => OutcomeKind::AttendanceSkippedEmotionLogged,
            }
        };
        self.store.insert_emotion(&EmotionObservation {
            student_id,
            session_id: event.session_id.clone(),
            emotion,
            confidence: emotion_confidence,
            timestamp: event.captured_at,
        })?;
        Ok(ProcessOutcome {
            kind,
            matched: Some(result),
            emotion: Some((emotion, emotion_confidence)),
            rejection: None,
        })
    }

    fn check_active(session: &Session, captured_at: i64) -> Result<(), EngineError> {
        if !session.is_active() {
            return Err(EngineError::SessionNotActive(session.session_id.clone()));
        }
        if captured_at < session.started_at {
            return Err(EngineError::BeforeSessionStart {
                timestamp: captured_at,
                started_at: session.started_at,
            });
        }
        Ok(())
    }

    pub fn session_snapshot(&self, session_id: &str) -> Result<SessionSnapshot, EngineError> {
        let entry = self.entry(session_id)?;
        let entry = entry.lock();
        let mut present: Vec<PresentStudent> = entry
            .state
            .marks
            .iter()
            .map(|(id, &(timestamp, confidence))| PresentStudent {
                student_id: id.clone(),
                display_name: self.roster.get(id).map(|p| p.display_name).unwrap_or_default(),
                timestamp,
                confidence,
            })
            .collect();
        present.sort_by(|a, b| (a.timestamp, &a.student_id).cmp(&(b.timestamp, &b.student_id)));
        Ok(SessionSnapshot {
            session: entry.session.clone(),
            present,
            unmatched_count: entry.state.unmatched_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotion::{Architecture, ClassifierParams};
    use crate::matcher::EMBEDDING_DIM;
    use crate::store::JournalStore;

    fn axis(scale: f64, index: usize) -> Embedding {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[index] = scale;
        Embedding::new(v).unwrap()
    }

    fn engine() -> (SessionEngine, Arc<JournalStore>) {
        let store = Arc::new(JournalStore::in_memory());
        let model = Arc::new(ClassifierParams::init(Architecture::default(), 1).unwrap());
        let engine = SessionEngine::new(store.clone(), model, MatcherConfig::default());
        engine.enroll_student("s1", "Ada", axis(5.0, 0), 0).unwrap();
        engine.enroll_student("s2", "Bo", axis(5.0, 1), 0).unwrap();
        (engine, store)
    }

    fn event(session_id: &str, t: i64, embedding: Embedding) -> DetectionEvent {
        DetectionEvent {
            session_id: session_id.into(),
            captured_at: t,
            embedding,
            face_crop: RawCrop::grayscale(64, 64, vec![128; 4096]).unwrap(),
            source_id: "cam-1".into(),
        }
    }

    #[test]
    fn start_gives_fresh_distinct_sessions() {
        let (engine, _) = engine();
        let a = engine.start_session("CS101", 1_000).unwrap();
        let b = engine.start_session("CS101", 1_000).unwrap();
        assert_ne!(a.session_id, b.session_id);
        assert!(a.is_active());
        let snap = engine.session_snapshot(&a.session_id).unwrap();
        assert!(snap.present.is_empty());
        assert_eq!(snap.unmatched_count, 0);
        assert!(!engine.is_marked(&a.session_id, "s1").unwrap());
        assert!(!engine.is_marked(&a.session_id, "s2").unwrap());
    }

    #[test]
    fn first_then_repeat_detection() {
        let (engine, store) = engine();
        let s = engine.start_session("CS101", 0).unwrap();
        let first = engine.process_detection(&event(&s.session_id, 2_000, axis(5.1, 0)));
        assert_eq!(first.kind, OutcomeKind::AttendanceMarked);
        let second = engine.process_detection(&event(&s.session_id, 4_000, axis(4.95, 0)));
        assert_eq!(second.kind, OutcomeKind::AttendanceSkippedEmotionLogged);
        let att = store.attendance(&RecordFilter::session(&s.session_id));
        assert_eq!(att.len(), 1);
        assert_eq!(att[0].timestamp, 2_000);
        assert_eq!(att[0].confidence, 0.9);
        assert_eq!(store.emotions(&RecordFilter::session(&s.session_id)).len(), 2);
    }

    #[test]
    fn unmatched_faces_write_nothing() {
        let (engine, store) = engine();
        let s = engine.start_session("CS101", 0).unwrap();
        let out = engine.process_detection(&event(&s.session_id, 10, axis(-5.0, 2)));
        assert_eq!(out.kind, OutcomeKind::UnmatchedIgnored);
        assert!(store.attendance(&RecordFilter::session(&s.session_id)).is_empty());
        assert!(store.emotions(&RecordFilter::session(&s.session_id)).is_empty());
        assert_eq!(engine.session_snapshot(&s.session_id).unwrap().unmatched_count, 1);
    }

    #[test]
    fn ended_sessions_reject_and_stay_frozen() {
        let (engine, store) = engine();
        let s = engine.start_session("CS101", 0).unwrap();
        let ended = engine.end_session(&s.session_id, 100).unwrap();
        assert_eq!(ended.status, SessionStatus::Ended);
        assert_eq!(ended.ended_at, Some(100));
        let out = engine.process_detection(&event(&s.session_id, 50, axis(5.0, 0)));
        assert_eq!(out.kind, OutcomeKind::Rejected);
        assert!(matches!(out.rejection, Some(EngineError::SessionNotActive(_))));
        assert!(store.emotions(&RecordFilter::session(&s.session_id)).is_empty());
        assert!(matches!(
            engine.end_session(&s.session_id, 200),
            Err(EngineError::AlreadyEnded(_))
        ));
        assert!(matches!(engine.end_session("nope", 1), Err(EngineError::UnknownSession(_))));
    }

    #[test]
    fn unknown_session_and_early_events_are_rejected() {
        let (engine, _) = engine();
        let out = engine.process_detection(&event("ghost", 0, axis(5.0, 0)));
        assert!(matches!(out.rejection, Some(EngineError::UnknownSession(_))));
        let s = engine.start_session("CS101", 1_000).unwrap();
        let out = engine.process_detection(&event(&s.session_id, 999, axis(5.0, 0)));
        assert_eq!(out.rejection.unwrap().code(), "BeforeSessionStart");
    }

    #[test]
    fn snapshot_orders_by_time() {
        let (engine, _) = engine();
        let s = engine.start_session("CS101", 0).unwrap();
        engine.process_detection(&event(&s.session_id, 30, axis(5.0, 1)));
        engine.process_detection(&event(&s.session_id, 40, axis(5.0, 0)));
        let snap = engine.session_snapshot(&s.session_id).unwrap();
        let ids: Vec<_> = snap.present.iter().map(|p| p.student_id.as_str()).collect();
        assert_eq!(ids, ["s2", "s1"]);
        assert_eq!(snap.present[1].display_name, "Ada");
    }

    #[test]
    fn state_is_restored_from_store() {
        let (engine, store) = engine();
        let s = engine.start_session("CS101", 0).unwrap();
        engine.process_detection(&event(&s.session_id, 30, axis(5.0, 1)));
        let model = Arc::new(ClassifierParams::init(Architecture::default(), 1).unwrap());
        let reopened = SessionEngine::new(store, model, MatcherConfig::default());
        assert!(reopened.is_marked(&s.session_id, "s2").unwrap());
        let out = reopened.process_detection(&event(&s.session_id, 60, axis(5.0, 1)));
        assert_eq!(out.kind, OutcomeKind::AttendanceSkippedEmotionLogged);
        let next = reopened.start_session("CS102", 100).unwrap();
        assert_ne!(next.session_id, s.session_id);
    }

    #[test]
    fn duplicate_enrollment_leaves_store_untouched() {
        let (engine, store) = engine();
        assert!(matches!(
            engine.enroll_student("s1", "Again", axis(1.0, 5), 0),
            Err(EngineError::Match(MatchError::DuplicateStudentId(_)))
        ));
        assert_eq!(store.students().len(), 2);
    }
}
