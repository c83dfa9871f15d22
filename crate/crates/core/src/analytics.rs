//! Read-side aggregations behind the dashboard views.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{EmotionClass, NUM_CLASSES};
use crate::session::{Session, SessionEngine};
use crate::store::{AttendanceRecord, EmotionObservation, RecordFilter, Store};

pub const DEFAULT_BUCKET_MS: i64 = 60_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown student {0}")]
    UnknownStudent(String),
    #[error("bucket width must be positive, got {0}")]
    InvalidBucketWidth(i64),
}

/// Per-class counts indexed by class code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub boredom: u64,
    pub confusion: u64,
    pub engagement: u64,
    pub frustration: u64,
}

impl ClassCounts {
    pub fn from_array(a: [u64; NUM_CLASSES]) -> Self {
        Self {
            boredom: a[0],
            confusion: a[1],
            engagement: a[2],
            frustration: a[3],
        }
    }

    pub fn as_array(&self) -> [u64; NUM_CLASSES] {
        [self.boredom, self.confusion, self.engagement, self.frustration]
    }

    pub fn add(&mut self, class: EmotionClass) {
        match class {
            EmotionClass::Boredom => self.boredom += 1,
            EmotionClass::Confusion => self.confusion += 1,
            EmotionClass::Engagement => self.engagement += 1,
            EmotionClass::Frustration => self.frustration += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.as_array().iter().sum()
    }

    /// Most frequent class, lowest code on ties; `None` when empty.
    pub fn dominant(&self) -> Option<EmotionClass> {
        if self.total() == 0 {
            return None;
        }
        let counts = self.as_array();
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if counts[k] > counts[best] {
                best = k;
            }
        }
        Some(EmotionClass::ALL[best])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassFractions {
    pub boredom: f64,
    pub confusion: f64,
    pub engagement: f64,
    pub frustration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionDistribution {
    pub session_id: String,
    pub total: u64,
    pub counts: ClassCounts,
    pub fractions: ClassFractions,
    /// Timestamp of the latest counted row, or the session start when none.
    pub as_of: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub bucket_start: i64,
    pub counts: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngagementTimeSeries {
    pub session_id: String,
    pub bucket_width_ms: i64,
    pub buckets: Vec<Bucket>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentProfileView {
    pub session_id: String,
    pub student_id: String,
    pub display_name: String,
    pub attendance: Option<AttendanceRecord>,
    pub history: Vec<EmotionObservation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: Session,
    pub enrolled: usize,
    pub present: usize,
    pub absent: usize,
    pub dominant_emotion: Option<EmotionClass>,
    pub distribution: ClassCounts,
    pub unmatched_count: u64,
}

fn require_session(store: &dyn Store, session_id: &str) -> Result<Session, AnalyticsError> {
    store
        .session(session_id)
        .ok_or_else(|| AnalyticsError::UnknownSession(session_id.to_string()))
}

fn count(rows: &[EmotionObservation]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for r in rows {
        c.add(r.emotion);
    }
    c
}

/// Class composition of a session, optionally restricted to `[start, end)`.
pub fn emotion_distribution(
    store: &dyn Store,
    session_id: &str,
    range: Option<(i64, i64)>,
) -> Result<EmotionDistribution, AnalyticsError> {
    let session = require_session(store, session_id)?;
    let mut filter = RecordFilter::session(session_id);
    if let Some((start, end)) = range {
        filter = filter.range(start, end);
    }
    let rows = store.emotions(&filter);
    let counts = count(&rows);
    let total = counts.total();
    let frac = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    Ok(EmotionDistribution {
        session_id: session_id.to_string(),
        total,
        fractions: ClassFractions {
            boredom: frac(counts.boredom),
            confusion: frac(counts.confusion),
            engagement: frac(counts.engagement),
            frustration: frac(counts.frustration),
        },
        counts,
        as_of: rows.iter().map(|r| r.timestamp).max().unwrap_or(session.started_at),
    })
}

/// Counts per fixed-width bucket aligned to the session start. Covers every
/// bucket from the first row to the last, empty ones included.
pub fn engagement_timeseries(
    store: &dyn Store,
    session_id: &str,
    bucket_width_ms: i64,
) -> Result<EngagementTimeSeries, AnalyticsError> {
    if bucket_width_ms <= 0 {
        return Err(AnalyticsError::InvalidBucketWidth(bucket_width_ms));
    }
    let session = require_session(store, session_id)?;
    let rows = store.emotions(&RecordFilter::session(session_id));
    let origin = session.started_at;
    let index = |t: i64| (t - origin).div_euclid(bucket_width_ms);
    let mut buckets = Vec::new();
    if let (Some(first), Some(last)) = (
        rows.iter().map(|r| index(r.timestamp)).min(),
        rows.iter().map(|r| index(r.timestamp)).max(),
    ) {
        buckets = (first..=last)
            .map(|i| Bucket {
                bucket_start: origin + i * bucket_width_ms,
                counts: ClassCounts::default(),
            })
            .collect();
        for r in &rows {
            buckets[(index(r.timestamp) - first) as usize].counts.add(r.emotion);
        }
    }
    Ok(EngagementTimeSeries {
        session_id: session_id.to_string(),
        bucket_width_ms,
        buckets,
    })
}

pub fn student_profile(
    store: &dyn Store,
    session_id: &str,
    student_id: &str,
) -> Result<StudentProfileView, AnalyticsError> {
    require_session(store, session_id)?;
    let student = store
        .students()
        .into_iter()
        .find(|s| s.student_id == student_id)
        .ok_or_else(|| AnalyticsError::UnknownStudent(student_id.to_string()))?;
    let filter = RecordFilter::session(session_id).student(student_id);
    Ok(StudentProfileView {
        session_id: session_id.to_string(),
        student_id: student_id.to_string(),
        display_name: student.display_name,
        attendance: store.attendance(&filter).into_iter().next(),
        history: store.emotions(&filter),
    })
}

pub fn session_summary(engine: &SessionEngine, session_id: &str) -> Result<SessionSummary, AnalyticsError> {
    let store = engine.store().as_ref();
    let session = require_session(store, session_id)?;
    let enrolled = store.students().len();
    let present = store.attendance(&RecordFilter::session(session_id)).len();
    let distribution = count(&store.emotions(&RecordFilter::session(session_id)));
    let unmatched_count = engine
        .session_snapshot(session_id)
        .map(|s| s.unmatched_count)
        .unwrap_or(0);
    Ok(SessionSummary {
        session,
        enrolled,
        present,
        absent: enrolled.saturating_sub(present),
        dominant_emotion: distribution.dominant(),
        distribution,
        unmatched_count,
    })
}

/// Sessions newest first.
pub fn list_sessions(store: &dyn Store) -> Vec<Session> {
    let mut sessions = store.sessions();
    sessions.sort_by(|a, b| b.started_at.cmp(&a.started_at).then_with(|| a.session_id.cmp(&b.session_id)));
    sessions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{Embedding, StudentProfile};
    use crate::store::JournalStore;

    fn seeded() -> JournalStore {
        let store = JournalStore::in_memory();
        for id in ["a", "b"] {
            store
                .insert_student(&StudentProfile {
                    student_id: id.into(),
                    display_name: id.to_uppercase(),
                    reference_embedding: Embedding::zeros(),
                    enrolled_at: 0,
                })
                .unwrap();
        }
        store.insert_session(&Session::new("x".into(), "c".into(), 1000)).unwrap();
        store
    }

    fn emo(store: &JournalStore, sid: &str, e: EmotionClass, t: i64) {
        store
            .insert_emotion(&EmotionObservation {
                student_id: sid.into(),
                session_id: "x".into(),
                emotion: e,
                confidence: 0.9,
                timestamp: t,
            })
            .unwrap();
    }

    #[test]
    fn empty_distribution_is_all_zero() {
        let store = seeded();
        let d = emotion_distribution(&store, "x", None).unwrap();
        assert_eq!(d.total, 0);
        assert_eq!(d.fractions, ClassFractions::default());
        assert_eq!(d.as_of, 1000);
        assert_eq!(
            emotion_distribution(&store, "nope", None),
            Err(AnalyticsError::UnknownSession("nope".into()))
        );
    }

    #[test]
    fn hand_counted_fractions() {
        let store = seeded();
        for t in 0..3 {
            emo(&store, "a", EmotionClass::Engagement, 1000 + t);
        }
        emo(&store, "b", EmotionClass::Boredom, 1500);
        let d = emotion_distribution(&store, "x", None).unwrap();
        assert_eq!(d.fractions.boredom, 0.25);
        assert_eq!(d.fractions.confusion, 0.0);
        assert_eq!(d.fractions.engagement, 0.75);
        assert_eq!(d.fractions.frustration, 0.0);
        assert_eq!(d.as_of, 1500);
        let early = emotion_distribution(&store, "x", Some((1000, 1002))).unwrap();
        assert_eq!(early.total, 2);
    }

    #[test]
    fn half_open_buckets() {
        let store = seeded();
        emo(&store, "a", EmotionClass::Confusion, 1000 + 500);
        let ts = engagement_timeseries(&store, "x", 1000).unwrap();
        assert_eq!(ts.buckets.len(), 1);
        assert_eq!(ts.buckets[0].bucket_start, 1000);

        emo(&store, "a", EmotionClass::Confusion, 1000 + 3000);
        let ts = engagement_timeseries(&store, "x", 1000).unwrap();
        let starts: Vec<i64> = ts.buckets.iter().map(|b| b.bucket_start).collect();
        assert_eq!(starts, vec![1000, 2000, 3000, 4000]);
        assert_eq!(ts.buckets[1].counts.total(), 0);
        assert_eq!(ts.buckets[3].counts.confusion, 1);
        assert_eq!(
            engagement_timeseries(&store, "x", 0),
            Err(AnalyticsError::InvalidBucketWidth(0))
        );
    }

    #[test]
    fn absent_student_profile() {
        let store = seeded();
        let p = student_profile(&store, "x", "b").unwrap();
        assert!(p.attendance.is_none());
        assert!(p.history.is_empty());
        assert_eq!(p.display_name, "B");
        assert_eq!(
            student_profile(&store, "x", "zz"),
            Err(AnalyticsError::UnknownStudent("zz".into()))
        );
    }

    #[test]
    fn dominant_ties_go_low() {
        assert_eq!(ClassCounts::from_array([2, 2, 2, 2]).dominant(), Some(EmotionClass::Boredom));
        assert_eq!(ClassCounts::from_array([0, 3, 3, 1]).dominant(), Some(EmotionClass::Confusion));
        assert_eq!(ClassCounts::default().dominant(), None);
    }
}
