//! Identity matching of detected-face embeddings against enrolled students.
//!
//! A probe embedding is compared with every enrolled reference by Euclidean
//! distance; the nearest enrollee is accepted when its distance is strictly
//! below the configured threshold.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimensionality of every face embedding.
pub const EMBEDDING_DIM: usize = 128;

/// Default acceptance threshold on embedding distance.
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("student id already enrolled: {0}")]
    DuplicateStudentId(String),
    #[error("student id must be non-empty")]
    EmptyStudentId,
    #[error("threshold must be in (0, 2], got {0}")]
    InvalidThreshold(f64),
    #[error("enrollment line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A 128-dimensional face embedding with finite components.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, MatchError> {
        if values.len() != EMBEDDING_DIM {
            return Err(MatchError::InvalidEmbedding(format!(
                "expected {EMBEDDING_DIM} components, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::InvalidEmbedding(format!(
                "component {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = MatchError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Embedding([{:.4}, {:.4}, ..; {}])", self.0[0], self.0[1], self.0.len())
    }
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &Embedding, b: &Embedding) -> f64 {
    squared_distance(&a.0, &b.0).sqrt()
}

/// Euclidean distance between raw vectors, checking that dimensions agree.
pub fn try_distance(a: &[f64], b: &[f64]) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::InvalidEmbedding(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_distance(a, b).sqrt())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Display confidence for a match distance: `clamp(1 - d, 0, 1)` rounded
/// half-up to two decimals.
pub fn confidence_from_distance(distance: f64) -> f64 {
    let raw = (1.0 - distance).clamp(0.0, 1.0);
    // Nudge by a few ulps so values like 0.91 (stored as 0.9099999...) round
    // the way they print.
    ((raw * 100.0 + 0.5 + 1e-9).floor() / 100.0).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub student_id: String,
    pub display_name: String,
    pub reference_embedding: Embedding,
    /// UTC milliseconds since the epoch.
    pub enrolled_at: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub threshold: f64,
}

impl MatcherConfig {
    pub fn new(threshold: f64) -> Result<Self, MatchError> {
        if !(threshold > 0.0 && threshold <= 2.0) {
            return Err(MatchError::InvalidThreshold(threshold));
        }
        Ok(Self { threshold })
    }
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub matched: bool,
    pub student_id: Option<String>,
    /// Distance to the nearest enrollee; infinite when nobody is enrolled.
    pub distance: f64,
    pub confidence: f64,
}

impl MatchResult {
    fn no_candidates() -> Self {
        Self {
            matched: false,
            student_id: None,
            distance: f64::INFINITY,
            confidence: 0.0,
        }
    }
}

/// Nearest-reference matching over an ordered set of profiles.
///
/// Profiles must be iterated in ascending `student_id` order for the
/// lexicographic tie-break to hold.
pub fn match_against<'a, I>(profiles: I, probe: &Embedding, config: &MatcherConfig) -> MatchResult
where
    I: IntoIterator<Item = &'a StudentProfile>,
{
    let mut best: Option<(&'a str, f64)> = None;
    for profile in profiles {
        let d = distance(probe, &profile.reference_embedding);
        match best {
            Some((_, best_d)) if d >= best_d => {}
            _ => best = Some((&profile.student_id, d)),
        }
    }
    match best {
        None => MatchResult::no_candidates(),
        Some((id, d)) => {
            let matched = d < config.threshold;
            MatchResult {
                matched,
                student_id: matched.then(|| id.to_string()),
                distance: d,
                confidence: confidence_from_distance(d),
            }
        }
    }
}

/// Enrollment registry. Concurrent readers, serialized writers.
#[derive(Default)]
pub struct Roster {
    profiles: RwLock<BTreeMap<String, StudentProfile>>,
}

impl Roster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enroll(
        &self,
        student_id: &str,
        display_name: &str,
        reference_embedding: Embedding,
        enrolled_at: i64,
    ) -> Result<StudentProfile, MatchError> {
        let profile = StudentProfile {
            student_id: student_id.to_string(),
            display_name: display_name.to_string(),
            reference_embedding,
            enrolled_at,
        };
        self.insert(profile.clone())?;
        Ok(profile)
    }

    pub fn insert(&self, profile: StudentProfile) -> Result<(), MatchError> {
        if profile.student_id.trim().is_empty() {
            return Err(MatchError::EmptyStudentId);
        }
        let mut profiles = self.profiles.write();
        if profiles.contains_key(&profile.student_id) {
            return Err(MatchError::DuplicateStudentId(profile.student_id));
        }
        profiles.insert(profile.student_id.clone(), profile);
        Ok(())
    }

    pub(crate) fn remove(&self, student_id: &str) {
        self.profiles.write().remove(student_id);
    }

    pub fn get(&self, student_id: &str) -> Option<StudentProfile> {
        self.profiles.read().get(student_id).cloned()
    }

    pub fn contains(&self, student_id: &str) -> bool {
        self.profiles.read().contains_key(student_id)
    }

    pub fn len(&self) -> usize {
        self.profiles.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn profiles(&self) -> Vec<StudentProfile> {
        self.profiles.read().values().cloned().collect()
    }

    pub fn match_embedding(&self, probe: &Embedding, config: &MatcherConfig) -> MatchResult {
        match_against(self.profiles.read().values(), probe, config)
    }
}

/// One parsed line of an enrollment file.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrollmentEntry {
    pub student_id: String,
    pub display_name: String,
    pub embedding: Embedding,
}

/// Parses the enrollment format: `student_id,display_name,v1,...,v128` per
/// line. Blank lines and lines starting with `#` are skipped.
pub fn read_enrollment<R: BufRead>(reader: R) -> Result<Vec<EnrollmentEntry>, MatchError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| MatchError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != EMBEDDING_DIM + 2 {
            return Err(MatchError::Parse {
                line: lineno,
                message: format!(
                    "expected {} fields, got {}",
                    EMBEDDING_DIM + 2,
                    fields.len()
                ),
            });
        }
        let student_id = fields[0].trim();
        if student_id.is_empty() {
            return Err(MatchError::Parse {
                line: lineno,
                message: "empty student id".into(),
            });
        }
        let values = fields[2..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| MatchError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        let embedding = Embedding::new(values).map_err(|e| MatchError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        entries.push(EnrollmentEntry {
            student_id: student_id.to_string(),
            display_name: fields[1].trim().to_string(),
            embedding,
        });
    }
    Ok(entries)
}

pub fn write_enrollment<W: Write>(mut writer: W, entries: &[EnrollmentEntry]) -> std::io::Result<()> {
    for e in entries {
        if e.student_id.contains(',') || e.display_name.contains(',') {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("field of {} contains a comma", e.student_id),
            ));
        }
        write!(writer, "{},{}", e.student_id, e.display_name)?;
        for v in e.embedding.as_slice() {
            write!(writer, ",{v}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}
