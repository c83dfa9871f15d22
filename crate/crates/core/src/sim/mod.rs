//! Deterministic synthetic classroom used in place of cameras.
//!
//! A scenario fixes the roster, the noise level on emitted embeddings, the
//! Markov chain driving each participant's affective state, absentees, and
//! intruders. Running it produces a stream of [`WireDetection`]s and a
//! ground-truth log; the same scenario and seed always yield bit-identical
//! output.

pub mod render;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{EmotionClass, NUM_CLASSES};
use crate::gateway::{Ack, DetectionSink, GatewayError, WireDetection};
use crate::matcher::{distance, Embedding, DEFAULT_THRESHOLD, EMBEDDING_DIM};
use crate::session::{DetectionEvent, EngineError, SessionEngine};

pub use render::render_emotion_crop;

/// Per-component spread of generated reference embeddings.
const IDENTITY_SPREAD: f64 = 0.15;
const MAX_REJECTIONS: usize = 100_000;

pub type TransitionMatrix = [[f64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("could not place {0} well-separated embeddings")]
    SeparationFailed(usize),
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),
    #[error("gateway returned {got} acknowledgments for {sent} detections")]
    AckMismatch { sent: usize, got: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("scenario file: {0}")]
    Io(String),
}

impl From<GatewayError> for SimError {
    fn from(e: GatewayError) -> Self {
        SimError::GatewayUnavailable(e.to_string())
    }
}

/// Self-transition 0.85, the remaining mass spread evenly.
pub fn default_transition() -> TransitionMatrix {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 0.85 } else { 0.05 }))
}

fn default_tick_ms() -> u64 {
    2000
}
fn default_sigma() -> f64 {
    0.05
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_course() -> String {
    "Simulated lecture".into()
}
fn default_start() -> i64 {
    1_700_000_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub seed: u64,
    pub student_count: usize,
    pub session_minutes: u64,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Standard deviation of the Gaussian noise added to each embedding
    /// component.
    #[serde(default = "default_sigma")]
    pub embedding_noise_sigma: f64,
    #[serde(default = "default_transition")]
    pub emotion_transition: TransitionMatrix,
    #[serde(default)]
    pub absent_students: Vec<String>,
    #[serde(default)]
    pub intruder_count: usize,
    /// Matcher threshold the roster separation is built around.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_course")]
    pub course_label: String,
    #[serde(default = "default_start")]
    pub start_time_ms: i64,
}

impl SimScenario {
    pub fn new(seed: u64, student_count: usize, session_minutes: u64) -> Self {
        Self {
            seed,
            student_count,
            session_minutes,
            tick_ms: default_tick_ms(),
            embedding_noise_sigma: default_sigma(),
            emotion_transition: default_transition(),
            absent_students: Vec::new(),
            intruder_count: 0,
            threshold: default_threshold(),
            course_label: default_course(),
            start_time_ms: default_start(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Self = toml::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.student_count == 0 {
            return bad("student_count must be >= 1".into());
        }
        if self.tick_ms == 0 {
            return bad("tick_ms must be > 0".into());
        }
        if !(self.embedding_noise_sigma >= 0.0 && self.embedding_noise_sigma.is_finite()) {
            return bad(format!("embedding_noise_sigma {} must be >= 0", self.embedding_noise_sigma));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return bad("threshold must be > 0".into());
        }
        MarkovChain::new(self.emotion_transition)?;
        Ok(())
    }

    pub fn ticks(&self) -> u64 {
        self.session_minutes * 60_000 / self.tick_ms
    }
}

/// Row-stochastic transition matrix over the four affective states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkovChain {
    matrix: TransitionMatrix,
}

impl MarkovChain {
    pub fn new(matrix: TransitionMatrix) -> Result<Self, SimError> {
        for (i, row) in matrix.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(SimError::InvalidScenario(format!(
                    "transition row {i} is not a distribution: {row:?}"
                )));
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.matrix
    }

    pub fn next<R: Rng>(&self, current: EmotionClass, rng: &mut R) -> EmotionClass {
        let row = &self.matrix[current.code()];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return EmotionClass::ALL[j];
            }
        }
        // Rounding left a sliver above the last cumulative sum.
        EmotionClass::ALL[row.iter().rposition(|&p| p > 0.0).unwrap_or(NUM_CLASSES - 1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimStudent {
    pub student_id: String,
    pub display_name: String,
    pub embedding: Embedding,
}

fn random_embedding<R: Rng>(rng: &mut R) -> Embedding {
    let normal = Normal::new(0.0, IDENTITY_SPREAD).expect("valid spread");
    Embedding::new((0..EMBEDDING_DIM).map(|_| normal.sample(rng)).collect()).expect("finite")
}

/// Reference embeddings for `student_count` students, pairwise more than
/// twice the threshold apart. Ids are `s1..sN`.
pub fn generate_students(scenario: &SimScenario) -> Result<Vec<SimStudent>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5717_de47);
    let min_gap = 2.0 * scenario.threshold;
    let mut out: Vec<SimStudent> = Vec::with_capacity(scenario.student_count);
    let mut attempts = 0;
    while out.len() < scenario.student_count {
        attempts += 1;
        if attempts > MAX_REJECTIONS {
            return Err(SimError::SeparationFailed(scenario.student_count));
        }
        let candidate = random_embedding(&mut rng);
        if out.iter().all(|s| distance(&s.embedding, &candidate) > min_gap) {
            let n = out.len() + 1;
            out.push(SimStudent {
                student_id: format!("s{n}"),
                display_name: format!("Student {n}"),
                embedding: candidate,
            });
        }
    }
    Ok(out)
}

/// Enrolls generated students (at the scenario start time).
pub fn enroll_students(
    engine: &SessionEngine,
    scenario: &SimScenario,
    students: &[SimStudent],
) -> Result<(), SimError> {
    for s in students {
        engine.enroll_student(&s.student_id, &s.display_name, s.embedding.clone(), scenario.start_time_ms)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Participant {
    Student { student_id: String },
    Intruder { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub tick: u64,
    pub captured_at: i64,
    pub participant: Participant,
    pub emotion: EmotionClass,
    pub emitted: bool,
    pub ack: Option<Ack>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLog {
    pub entries: Vec<GroundTruthEntry>,
}

impl GroundTruthLog {
    pub fn emitted(&self) -> impl Iterator<Item = &GroundTruthEntry> {
        self.entries.iter().filter(|e| e.emitted)
    }

    /// Students emitted at least once.
    pub fn present_students(&self) -> std::collections::BTreeSet<String> {
        self.emitted()
            .filter_map(|e| match &e.participant {
                Participant::Student { student_id } => Some(student_id.clone()),
                Participant::Intruder { .. } => None,
            })
            .collect()
    }

    pub fn intruder_emissions(&self) -> usize {
        self.emitted()
            .filter(|e| matches!(e.participant, Participant::Intruder { .. }))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pace {
    /// Ticks run back-to-back.
    Compressed,
    /// Each tick waits out the remainder of `tick_ms`.
    RealTime,
}

/// Streams one session's worth of synthetic detections into `sink`.
pub fn run_scenario(
    scenario: &SimScenario,
    students: &[SimStudent],
    session_id: &str,
    sink: &dyn DetectionSink,
    pace: Pace,
) -> Result<GroundTruthLog, SimError> {
    run_scenario_with(scenario, students, session_id, pace, |batch| sink_submit(sink, batch))
}

fn sink_submit(sink: &dyn DetectionSink, batch: Vec<WireDetection>) -> Result<Vec<Ack>, SimError> {
    let mut acks = Vec::with_capacity(batch.len());
    let max = sink.max_batch().max(1);
    let mut rest = batch;
    while !rest.is_empty() {
        let tail = rest.split_off(rest.len().min(max));
        let sent = rest.len();
        let got = sink.submit(rest)?;
        if got.len() != sent {
            return Err(SimError::AckMismatch { sent, got: got.len() });
        }
        acks.extend(got);
        rest = tail;
    }
    Ok(acks)
}

/// Same as [`run_scenario`], handing each tick's detections to `submit`.
pub fn run_scenario_with<F>(
    scenario: &SimScenario,
    students: &[SimStudent],
    session_id: &str,
    pace: Pace,
    mut submit: F,
) -> Result<GroundTruthLog, SimError>
where
    F: FnMut(Vec<WireDetection>) -> Result<Vec<Ack>, SimError>,
{
    scenario.validate()?;
    let chain = MarkovChain::new(scenario.emotion_transition)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, scenario.embedding_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let min_gap = 2.0 * scenario.threshold;

    let participants: Vec<Participant> = students
        .iter()
        .map(|s| Participant::Student {
            student_id: s.student_id.clone(),
        })
        .chain((0..scenario.intruder_count).map(|index| Participant::Intruder { index }))
        .collect();
    let mut states: Vec<EmotionClass> = participants
        .iter()
        .map(|_| EmotionClass::ALL[rng.random_range(0..NUM_CLASSES)])
        .collect();

    let mut log = GroundTruthLog::default();
    for tick in 0..scenario.ticks() {
        let tick_started = Instant::now();
        let captured_at = scenario.start_time_ms + (tick * scenario.tick_ms) as i64;
        if tick > 0 {
            for s in &mut states {
                *s = chain.next(*s, &mut rng);
            }
        }
        let mut batch = Vec::new();
        let mut batch_rows = Vec::new();
        for (i, participant) in participants.iter().enumerate() {
            let emotion = states[i];
            let emitted = match participant {
                Participant::Student { student_id } => !scenario.absent_students.contains(student_id),
                Participant::Intruder { .. } => true,
            };
            let row = log.entries.len();
            log.entries.push(GroundTruthEntry {
                tick,
                captured_at,
                participant: participant.clone(),
                emotion,
                emitted,
                ack: None,
            });
            if !emitted {
                continue;
            }
            let embedding = match participant {
                Participant::Student { .. } => {
                    let base = students[i].embedding.as_slice();
                    let values = base
                        .iter()
                        .map(|v| {
                            if scenario.embedding_noise_sigma > 0.0 {
                                v + noise.sample(&mut rng)
                            } else {
                                *v
                            }
                        })
                        .collect();
                    Embedding::new(values).expect("finite")
                }
                Participant::Intruder { .. } => intruder_embedding(&mut rng, students, min_gap)?,
            };
            let crop = render_emotion_crop(emotion, rng.random());
            let event = DetectionEvent {
                session_id: session_id.to_string(),
                captured_at,
                embedding,
                face_crop: crop,
                source_id: "simulator".into(),
            };
            batch.push(WireDetection::from_event(&event));
            batch_rows.push(row);
        }
        if !batch.is_empty() {
            let sent = batch.len();
            let acks = submit(batch)?;
            if acks.len() != sent {
                return Err(SimError::AckMismatch { sent, got: acks.len() });
            }
            for (row, ack) in batch_rows.into_iter().zip(acks) {
                log.entries[row].ack = Some(ack);
            }
        }
        if pace == Pace::RealTime {
            let budget = Duration::from_millis(scenario.tick_ms);
            if let Some(rest) = budget.checked_sub(tick_started.elapsed()) {
                std::thread::sleep(rest);
            }
        }
    }
    Ok(log)
}

fn intruder_embedding<R: Rng>(rng: &mut R, students: &[SimStudent], min_gap: f64) -> Result<Embedding, SimError> {
    for _ in 0..MAX_REJECTIONS {
        let candidate = random_embedding(rng);
        if students.iter().all(|s| distance(&s.embedding, &candidate) > min_gap) {
            return Ok(candidate);
        }
    }
    Err(SimError::SeparationFailed(students.len() + 1))
}
