//! Durable storage for students, sessions, attendance and emotion rows.
//!
//! [`JournalStore`] keeps tables in memory and, when opened on a path,
//! appends every mutation to a newline-delimited JSON journal that is
//! replayed on reopen. The journal line format is the same one used by
//! [`export`] and [`import`]:
//!
//! ```text
//! {"kind":"student","student_id":..,"display_name":..,"enrolled_at":..,"embedding":[..128 numbers..]}
//! {"kind":"session","session_id":..,"course_label":..,"started_at":..,"ended_at":null|ms}
//! {"kind":"session_end","session_id":..,"ended_at":..}
//! {"kind":"attendance","student_id":..,"session_id":..,"timestamp":..,"confidence":..}
//! {"kind":"emotion","student_id":..,"session_id":..,"emotion":"engagement",..,"confidence":..,"timestamp":..}
//! ```
//!
//! Fields appear in exactly the order shown; timestamps are integer UTC
//! milliseconds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::EmotionClass;
use crate::matcher::{Embedding, StudentProfile};
use crate::session::{Session, SessionStatus};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown student {0}")]
    UnknownStudent(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("student {0} already exists")]
    DuplicateStudent(String),
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error("session {0} has already ended")]
    SessionAlreadyEnded(String),
    #[error("invalid emotion label {0:?}")]
    InvalidLabel(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("journal line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn is_foreign_key_violation(&self) -> bool {
        matches!(self, StoreError::UnknownStudent(_) | StoreError::UnknownSession(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttendanceRecord {
    pub student_id: String,
    pub session_id: String,
    pub timestamp: i64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionObservation {
    pub student_id: String,
    pub session_id: String,
    pub emotion: EmotionClass,
    pub confidence: f64,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    Inserted,
    DuplicateRejected,
}

/// Row selection for queries. `range` is half-open: `[start, end)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordFilter {
    pub session_id: String,
    pub student_id: Option<String>,
    pub range: Option<(i64, i64)>,
}

impl RecordFilter {
    pub fn session(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            ..Self::default()
        }
    }

    pub fn student(mut self, student_id: impl Into<String>) -> Self {
        self.student_id = Some(student_id.into());
        self
    }

    pub fn range(mut self, start: i64, end: i64) -> Self {
        self.range = Some((start, end));
        self
    }

    fn accepts(&self, student_id: &str, timestamp: i64) -> bool {
        self.student_id.as_deref().is_none_or(|s| s == student_id)
            && self.range.is_none_or(|(a, b)| a <= timestamp && timestamp < b)
    }
}

/// Storage contract used by the session engine and analytics.
///
/// Single-row inserts are linearizable; readers only ever observe committed
/// rows. Query results are ordered by `(timestamp, student_id)`, then by
/// insertion order.
pub trait Store: Send + Sync {
    fn insert_student(&self, profile: &StudentProfile) -> Result<(), StoreError>;
    fn insert_session(&self, session: &Session) -> Result<(), StoreError>;
    fn end_session(&self, session_id: &str, ended_at: i64) -> Result<(), StoreError>;
    fn insert_attendance(&self, record: &AttendanceRecord) -> Result<InsertOutcome, StoreError>;
    fn insert_emotion(&self, observation: &EmotionObservation) -> Result<(), StoreError>;

    fn students(&self) -> Vec<StudentProfile>;
    fn sessions(&self) -> Vec<Session>;
    fn session(&self, session_id: &str) -> Option<Session>;
    fn attendance(&self, filter: &RecordFilter) -> Vec<AttendanceRecord>;
    fn emotions(&self, filter: &RecordFilter) -> Vec<EmotionObservation>;
}

/// One line of the journal / export format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Student {
        student_id: String,
        display_name: String,
        enrolled_at: i64,
        embedding: Vec<f64>,
    },
    Session {
        session_id: String,
        course_label: String,
        started_at: i64,
        ended_at: Option<i64>,
    },
    SessionEnd {
        session_id: String,
        ended_at: i64,
    },
    Attendance {
        student_id: String,
        session_id: String,
        timestamp: i64,
        confidence: f64,
    },
    Emotion {
        student_id: String,
        session_id: String,
        emotion: String,
        confidence: f64,
        timestamp: i64,
    },
}

#[derive(Default)]
struct Tables {
    students: BTreeMap<String, StudentProfile>,
    sessions: BTreeMap<String, Session>,
    attendance_keys: HashSet<(String, String)>,
    attendance: HashMap<String, Vec<AttendanceRecord>>,
    emotions: HashMap<String, Vec<EmotionObservation>>,
}

impl Tables {
    fn check_refs(&self, student_id: &str, session_id: &str) -> Result<(), StoreError> {
        if !self.sessions.contains_key(session_id) {
            return Err(StoreError::UnknownSession(session_id.to_string()));
        }
        if !self.students.contains_key(student_id) {
            return Err(StoreError::UnknownStudent(student_id.to_string()));
        }
        Ok(())
    }

    /// Validates and applies one record. Returns `Ok(None)` when the record
    /// was a duplicate attendance row (nothing written).
    fn apply(&mut self, record: Record) -> Result<Option<()>, StoreError> {
        match record {
            Record::Student {
                student_id,
                display_name,
                enrolled_at,
                embedding,
            } => {
                if student_id.trim().is_empty() {
                    return Err(StoreError::InvalidRecord("empty student id".into()));
                }
                if self.students.contains_key(&student_id) {
                    return Err(StoreError::DuplicateStudent(student_id));
                }
                let reference_embedding =
                    Embedding::new(embedding).map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
                self.students.insert(
                    student_id.clone(),
                    StudentProfile {
                        student_id,
                        display_name,
                        reference_embedding,
                        enrolled_at,
                    },
                );
            }
            Record::Session {
                session_id,
                course_label,
                started_at,
                ended_at,
            } => {
                if self.sessions.contains_key(&session_id) {
                    return Err(StoreError::DuplicateSession(session_id));
                }
                if ended_at.is_some_and(|e| e < started_at) {
                    return Err(StoreError::InvalidRecord(format!(
                        "session {session_id} ends before it starts"
                    )));
                }
                let status = if ended_at.is_some() {
                    SessionStatus::Ended
                } else {
                    SessionStatus::Active
                };
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id,
                        course_label,
                        started_at,
                        ended_at,
                        status,
                    },
                );
            }
            Record::SessionEnd { session_id, ended_at } => {
                let session = self
                    .sessions
                    .get_mut(&session_id)
                    .ok_or_else(|| StoreError::UnknownSession(session_id.clone()))?;
                if session.status == SessionStatus::Ended {
                    return Err(StoreError::SessionAlreadyEnded(session_id));
                }
                if ended_at < session.started_at {
                    return Err(StoreError::InvalidRecord(format!(
                        "session {session_id} ends before it starts"
                    )));
                }
                session.ended_at = Some(ended_at);
                session.status = SessionStatus::Ended;
            }
            Record::Attendance {
                student_id,
                session_id,
                timestamp,
                confidence,
            } => {
                self.check_refs(&student_id, &session_id)?;
                check_confidence(confidence)?;
                let key = (student_id.clone(), session_id.clone());
                if self.attendance_keys.contains(&key) {
                    return Ok(None);
                }
                self.attendance_keys.insert(key);
                self.attendance
                    .entry(session_id.clone())
                    .or_default()
                    .push(AttendanceRecord {
                        student_id,
                        session_id,
                        timestamp,
                        confidence,
                    });
            }
            Record::Emotion {
                student_id,
                session_id,
                emotion,
                confidence,
                timestamp,
            } => {
                let emotion: EmotionClass = emotion
                    .parse()
                    .map_err(|_| StoreError::InvalidLabel(emotion.clone()))?;
                self.check_refs(&student_id, &session_id)?;
                check_confidence(confidence)?;
                self.emotions
                    .entry(session_id.clone())
                    .or_default()
                    .push(EmotionObservation {
                        student_id,
                        session_id,
                        emotion,
                        confidence,
                        timestamp,
                    });
            }
        }
        Ok(Some(()))
    }

    /// Canonical snapshot: students, sessions (with end times folded in),
    /// then attendance and emotion rows per session in query order.
    fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for s in self.students.values() {
            out.push(Record::from(s));
        }
        for s in self.sessions.values() {
            out.push(Record::Session {
                session_id: s.session_id.clone(),
                course_label: s.course_label.clone(),
                started_at: s.started_at,
                ended_at: s.ended_at,
            });
        }
        for id in self.sessions.keys() {
            for a in sorted(self.attendance.get(id), |r| (r.timestamp, r.student_id.clone())) {
                out.push(Record::from(&a));
            }
            for e in sorted(self.emotions.get(id), |r| (r.timestamp, r.student_id.clone())) {
                out.push(Record::from(&e));
            }
        }
        out
    }
}

fn check_confidence(c: f64) -> Result<(), StoreError> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(StoreError::InvalidRecord(format!("confidence {c} outside [0, 1]")))
    }
}

fn sorted<T: Clone, K: Ord>(rows: Option<&Vec<T>>, key: impl Fn(&T) -> K) -> Vec<T> {
    let mut rows = rows.cloned().unwrap_or_default();
    rows.sort_by_key(|r| key(r));
    rows
}

impl From<&StudentProfile> for Record {
    fn from(s: &StudentProfile) -> Self {
        Record::Student {
            student_id: s.student_id.clone(),
            display_name: s.display_name.clone(),
            enrolled_at: s.enrolled_at,
            embedding: s.reference_embedding.as_slice().to_vec(),
        }
    }
}

impl From<&AttendanceRecord> for Record {
    fn from(a: &AttendanceRecord) -> Self {
        Record::Attendance {
            student_id: a.student_id.clone(),
            session_id: a.session_id.clone(),
            timestamp: a.timestamp,
            confidence: a.confidence,
        }
    }
}

impl From<&EmotionObservation> for Record {
    fn from(e: &EmotionObservation) -> Self {
        Record::Emotion {
            student_id: e.student_id.clone(),
            session_id: e.session_id.clone(),
            emotion: e.emotion.label().to_string(),
            confidence: e.confidence,
            timestamp: e.timestamp,
        }
    }
}

struct Inner {
    tables: Tables,
    journal: Option<BufWriter<File>>,
}

/// In-memory tables with an optional append-only journal on disk.
pub struct JournalStore {
    inner: RwLock<Inner>,
    path: Option<PathBuf>,
}

impl JournalStore {
    pub fn in_memory() -> Self {
        Self {
            inner: RwLock::new(Inner {
                tables: Tables::default(),
                journal: None,
            }),
            path: None,
        }
    }

    /// Opens (or creates) a journal file, replaying existing lines.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut tables = Tables::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            replay(reader, &mut tables)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            inner: RwLock::new(Inner {
                tables,
                journal: Some(BufWriter::new(file)),
            }),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn write(&self, record: Record) -> Result<Option<()>, StoreError> {
        let mut inner = self.inner.write();
        let line = serde_json::to_string(&record).map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
        let applied = inner.tables.apply(record)?;
        if applied.is_some() {
            if let Some(j) = inner.journal.as_mut() {
                writeln!(j, "{line}")?;
                j.flush()?;
            }
        }
        Ok(applied)
    }

    pub fn records(&self) -> Vec<Record> {
        self.inner.read().tables.records()
    }

    /// Fsync the journal.
    pub fn sync(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.write();
        if let Some(j) = inner.journal.as_mut() {
            j.flush()?;
            j.get_ref().sync_all()?;
        }
        Ok(())
    }
}

fn replay<R: BufRead>(reader: R, tables: &mut Tables) -> Result<(), StoreError> {
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        tables.apply(record).map_err(|e| match e {
            StoreError::Io(_) => e,
            other => StoreError::Corrupt {
                line: i + 1,
                message: other.to_string(),
            },
        })?;
    }
    Ok(())
}

impl Store for JournalStore {
    fn insert_student(&self, profile: &StudentProfile) -> Result<(), StoreError> {
        self.write(Record::from(profile)).map(|_| ())
    }

    fn insert_session(&self, session: &Session) -> Result<(), StoreError> {
        self.write(Record::Session {
            session_id: session.session_id.clone(),
            course_label: session.course_label.clone(),
            started_at: session.started_at,
            ended_at: session.ended_at,
        })
        .map(|_| ())
    }

    fn end_session(&self, session_id: &str, ended_at: i64) -> Result<(), StoreError> {
        self.write(Record::SessionEnd {
            session_id: session_id.to_string(),
            ended_at,
        })
        .map(|_| ())
    }

    fn insert_attendance(&self, record: &AttendanceRecord) -> Result<InsertOutcome, StoreError> {
        Ok(match self.write(Record::from(record))? {
            Some(()) => InsertOutcome::Inserted,
            None => InsertOutcome::DuplicateRejected,
        })
    }

    fn insert_emotion(&self, observation: &EmotionObservation) -> Result<(), StoreError> {
        self.write(Record::from(observation)).map(|_| ())
    }

    fn students(&self) -> Vec<StudentProfile> {
        self.inner.read().tables.students.values().cloned().collect()
    }

    fn sessions(&self) -> Vec<Session> {
        self.inner.read().tables.sessions.values().cloned().collect()
    }

    fn session(&self, session_id: &str) -> Option<Session> {
        self.inner.read().tables.sessions.get(session_id).cloned()
    }

    fn attendance(&self, filter: &RecordFilter) -> Vec<AttendanceRecord> {
        let inner = self.inner.read();
        let mut rows: Vec<_> = inner
            .tables
            .attendance
            .get(&filter.session_id)
            .into_iter()
            .flatten()
            .filter(|r| filter.accepts(&r.student_id, r.timestamp))
            .cloned()
            .collect();
        rows.sort_by(|a, b| (a.timestamp, &a.student_id).cmp(&(b.timestamp, &b.student_id)));
        rows
    }

    fn emotions(&self, filter: &RecordFilter) -> Vec<EmotionObservation> {
        let inner = self.inner.read();
        let mut rows: Vec<_> = inner
            .tables
            .emotions
            .get(&filter.session_id)
            .into_iter()
            .flatten()
            .filter(|r| filter.accepts(&r.student_id, r.timestamp))
            .cloned()
            .collect();
        rows.sort_by(|a, b| (a.timestamp, &a.student_id).cmp(&(b.timestamp, &b.student_id)));
        rows
    }
}

/// Writes a canonical snapshot of `store`, one record per line.
pub fn export<W: Write>(store: &JournalStore, mut writer: W) -> Result<(), StoreError> {
    for record in store.records() {
        let line = serde_json::to_string(&record).map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Loads export-format lines into `store`, validating every record.
pub fn import<R: BufRead>(store: &JournalStore, reader: R) -> Result<usize, StoreError> {
    let mut count = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        store.write(record)?;
        count += 1;
    }
    Ok(count)
}
