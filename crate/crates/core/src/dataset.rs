//! Preparation of an annotated video-clip corpus into a labeled frame
//! manifest: primary label per clip, per-class sampling, uniform frame
//! selection and a stratified train/test split.
//!
//! Video decoding is not done here. Each clip is expected as a directory of
//! already extracted frame images under a common root, named after the clip
//! id with or without its video extension, e.g. `frames/1100011002/` for clip
//! `1100011002.avi` (`ffmpeg -i clip.avi frames/<id>/%04d.png` produces such a
//! layout).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{preprocess_face, EmotionClass, ImageTensor, LabeledDataset, RawCrop, Split, NUM_CLASSES};

pub const FRAMES_PER_CLIP: usize = 10;
pub const TEST_FRACTION: f64 = 0.2;
const FRAME_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Annotation columns in file order, which is also the tie-break order.
pub const ANNOTATION_ORDER: [EmotionClass; NUM_CLASSES] = [
    EmotionClass::Boredom,
    EmotionClass::Engagement,
    EmotionClass::Confusion,
    EmotionClass::Frustration,
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("clip {0} has no nonzero score")]
    AllZeroScores(String),
    #[error("clip {clip}: {column} score {value} outside 0..=3")]
    InvalidScore { clip: String, column: &'static str, value: i64 },
    #[error("annotation table is missing column {0}")]
    MissingColumn(&'static str),
    #[error("annotation row {row}: {message}")]
    Annotation { row: usize, message: String },
    #[error("{class}: {requested} clips requested, {available} available")]
    InsufficientClips { class: EmotionClass, requested: usize, available: usize },
    #[error("no frame images in {0}")]
    EmptyClip(PathBuf),
    #[error("no frame directory for clip {0}")]
    MissingClip(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub boredom: u8,
    pub engagement: u8,
    pub confusion: u8,
    pub frustration: u8,
}

impl ClipAnnotation {
    pub fn new(clip_id: impl Into<String>, boredom: u8, engagement: u8, confusion: u8, frustration: u8) -> Self {
        Self {
            clip_id: clip_id.into(),
            boredom,
            engagement,
            confusion,
            frustration,
        }
    }

    /// Scores in annotation column order.
    pub fn scores(&self) -> [u8; NUM_CLASSES] {
        [self.boredom, self.engagement, self.confusion, self.frustration]
    }
}

/// Reads the annotation table. Headers are matched by name after trimming,
/// extra columns are ignored.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<ClipAnnotation>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Annotation { row: 0, message: e.to_string() })?
        .clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or(DatasetError::MissingColumn(name))
    };
    let id_col = col("ClipID")?;
    let score_cols = [col("Boredom")?, col("Engagement")?, col("Confusion")?, col("Frustration")?];
    let names = ["Boredom", "Engagement", "Confusion", "Frustration"];

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| DatasetError::Annotation { row, message: e.to_string() })?;
        let field = |c: usize| {
            rec.get(c).ok_or_else(|| DatasetError::Annotation {
                row,
                message: format!("expected at least {} fields", c + 1),
            })
        };
        let clip_id = field(id_col)?.to_string();
        if clip_id.is_empty() {
            continue;
        }
        let mut scores = [0u8; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let raw = field(score_cols[k])?;
            let value: i64 = raw.parse().map_err(|_| DatasetError::Annotation {
                row,
                message: format!("{} is not an integer: {raw:?}", names[k]),
            })?;
            if !(0..=3).contains(&value) {
                return Err(DatasetError::InvalidScore {
                    clip: clip_id,
                    column: names[k],
                    value,
                });
            }
            scores[k] = value as u8;
        }
        out.push(ClipAnnotation::new(clip_id, scores[0], scores[1], scores[2], scores[3]));
    }
    Ok(out)
}

/// Highest-scoring class; ties go to the earlier annotation column.
pub fn select_primary_emotion(annotation: &ClipAnnotation) -> Result<EmotionClass, DatasetError> {
    let scores = annotation.scores();
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    if scores[best] == 0 {
        return Err(DatasetError::AllZeroScores(annotation.clip_id.clone()));
    }
    Ok(ANNOTATION_ORDER[best])
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledClip {
    pub clip_id: String,
    pub emotion: EmotionClass,
}

/// Labels every clip, dropping all-zero ones.
pub fn label_clips(annotations: &[ClipAnnotation]) -> Vec<LabeledClip> {
    annotations
        .iter()
        .filter_map(|a| {
            select_primary_emotion(a).ok().map(|emotion| LabeledClip {
                clip_id: a.clip_id.clone(),
                emotion,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTarget {
    Count(usize),
    TakeAll,
}

/// Per-class targets indexed by class code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTargets(pub [ClassTarget; NUM_CLASSES]);

impl Default for SampleTargets {
    fn default() -> Self {
        Self([
            ClassTarget::Count(40),
            ClassTarget::Count(40),
            ClassTarget::Count(40),
            ClassTarget::TakeAll,
        ])
    }
}

/// Seeded uniform sampling without replacement per class. The result is
/// ordered by clip id.
pub fn balanced_sample(
    clips: &[LabeledClip],
    targets: &SampleTargets,
    seed: u64,
) -> Result<Vec<LabeledClip>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in EmotionClass::ALL {
        let mut pool: Vec<&LabeledClip> = clips.iter().filter(|c| c.emotion == class).collect();
        pool.sort();
        pool.dedup_by(|a, b| a.clip_id == b.clip_id);
        let take = match targets.0[class.code()] {
            ClassTarget::TakeAll => pool.len(),
            ClassTarget::Count(n) if n <= pool.len() => n,
            ClassTarget::Count(n) => {
                return Err(DatasetError::InsufficientClips {
                    class,
                    requested: n,
                    available: pool.len(),
                })
            }
        };
        let (chosen, _) = pool.partial_shuffle(&mut rng, take);
        out.extend(chosen.iter().map(|c| (*c).clone()));
    }
    out.sort();
    Ok(out)
}

/// `floor(i * n / k)` for `i < k`, deduplicated, then padded with the last
/// index up to length `k`.
pub fn select_frame_indices(n: usize, k: usize) -> Vec<usize> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    idx.dedup();
    let last = *idx.last().expect("k > 0");
    idx.resize(k, last);
    idx
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

pub fn select_frames(dir: &Path, k: usize) -> Result<Vec<PathBuf>, DatasetError> {
    let frames = list_frames(dir)?;
    if frames.is_empty() {
        return Err(DatasetError::EmptyClip(dir.to_path_buf()));
    }
    Ok(select_frame_indices(frames.len(), k)
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// Frame directory for a clip: `<root>/<clip_id>` or the id without its
/// extension.
pub fn clip_dir(frames_root: &Path, clip_id: &str) -> Result<PathBuf, DatasetError> {
    let full = frames_root.join(clip_id);
    if full.is_dir() {
        return Ok(full);
    }
    if let Some(stem) = Path::new(clip_id).file_stem() {
        let short = frames_root.join(stem);
        if short.is_dir() {
            return Ok(short);
        }
    }
    Err(DatasetError::MissingClip(clip_id.to_string()))
}

pub fn load_frame(path: &Path, channels: usize) -> Result<RawCrop, DatasetError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let crop = match channels {
        1 => RawCrop::grayscale(w, h, img.to_luma8().into_raw()),
        3 => RawCrop::new(w, h, 3, img.to_rgb8().into_raw()),
        c => return Err(DatasetError::InvalidConfig(format!("unsupported channel count {c}"))),
    };
    crop.map_err(|e| io_err(path, e))
}

pub fn load_tensor(path: &Path, channels: usize) -> Result<ImageTensor, DatasetError> {
    let crop = load_frame(path, channels)?;
    let mut t = preprocess_face(&crop).map_err(|e| io_err(path, e))?;
    t.provenance = Some(path.display().to_string());
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Frames are split independently (clips may span both sides).
    Frame,
    /// Whole clips go to one side.
    Clip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub frames_per_clip: usize,
    pub test_fraction: f64,
    pub split_mode: SplitMode,
    pub seed: u64,
    /// Decode every selected frame while building, so unreadable files fail
    /// early.
    pub verify_frames: bool,
}

impl PrepConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            frames_per_clip: FRAMES_PER_CLIP,
            test_fraction: TEST_FRACTION,
            split_mode: SplitMode::Frame,
            seed,
            verify_frames: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub emotion: EmotionClass,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub entries: Vec<ManifestEntry>,
    /// Clips per class, indexed by class code.
    pub clip_counts: [usize; NUM_CLASSES],
    pub seed: u64,
}

impl PreparedManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// `(train, test)` frame counts for one class.
    pub fn class_split(&self, class: EmotionClass) -> (usize, usize) {
        self.entries.iter().filter(|e| e.emotion == class).fold((0, 0), |(tr, te), e| match e.split {
            Split::Train => (tr + 1, te),
            Split::Test => (tr, te + 1),
        })
    }

    /// Writes `path,code,split` lines under a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| DatasetError::Manifest { line: 0, message: e.to_string() };
        w.write_record(["path", "code", "split"]).map_err(err)?;
        for e in &self.entries {
            let code = e.emotion.code().to_string();
            w.write_record([e.path.to_string_lossy().as_ref(), code.as_str(), e.split.as_str()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| DatasetError::Manifest { line: 0, message: e.to_string() })?;
        Ok(())
    }
}

pub fn read_manifest_entries<R: Read>(reader: R) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = |message: String| DatasetError::Manifest { line, message };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let code: usize = rec[1].parse().map_err(|_| bad(format!("bad class code {:?}", &rec[1])))?;
        let emotion = EmotionClass::from_code(code).ok_or_else(|| bad(format!("unknown class code {code}")))?;
        let split = match &rec[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("unknown split {other:?}"))),
        };
        out.push(ManifestEntry {
            path: PathBuf::from(&rec[0]),
            emotion,
            split,
        });
    }
    Ok(out)
}

/// Loads and preprocesses one split of a manifest.
pub fn load_split(entries: &[ManifestEntry], split: Split, channels: usize) -> Result<LabeledDataset, DatasetError> {
    let mut items = Vec::new();
    let mut cache: BTreeMap<&Path, ImageTensor> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.split == split) {
        let tensor = match cache.get(e.path.as_path()) {
            Some(t) => t.clone(),
            None => {
                let t = load_tensor(&e.path, channels)?;
                cache.insert(&e.path, t.clone());
                t
            }
        };
        items.push((tensor, e.emotion));
    }
    Ok(LabeledDataset { items, split })
}

/// Selects frames for every sampled clip and assigns splits, stratified per
/// class with `round(test_fraction * n)` test frames (or clips).
pub fn build_manifest(
    sampled: &[LabeledClip],
    frames_root: &Path,
    config: &PrepConfig,
) -> Result<PreparedManifest, DatasetError> {
    if config.frames_per_clip == 0 {
        return Err(DatasetError::InvalidConfig("frames_per_clip must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&config.test_fraction) {
        return Err(DatasetError::InvalidConfig(format!(
            "test_fraction {} outside [0, 1]",
            config.test_fraction
        )));
    }
    let mut clips: Vec<&LabeledClip> = sampled.iter().collect();
    clips.sort();

    // One unit per distinct frame file (or per clip), carrying how many
    // manifest entries it stands for.
    struct Unit {
        class: EmotionClass,
        entries: Vec<usize>,
    }
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut units: Vec<Unit> = Vec::new();
    let mut clip_counts = [0usize; NUM_CLASSES];
    for clip in clips {
        clip_counts[clip.emotion.code()] += 1;
        let dir = clip_dir(frames_root, &clip.clip_id)?;
        let frames = select_frames(&dir, config.frames_per_clip)?;
        let mut by_path: BTreeMap<PathBuf, Vec<usize>> = BTreeMap::new();
        let mut order: Vec<PathBuf> = Vec::new();
        for path in frames {
            if config.verify_frames && !by_path.contains_key(&path) {
                load_tensor(&path, 1)?;
            }
            let slot = entries.len();
            entries.push(ManifestEntry {
                path: path.clone(),
                emotion: clip.emotion,
                split: Split::Train,
            });
            if !by_path.contains_key(&path) {
                order.push(path.clone());
            }
            by_path.entry(path).or_default().push(slot);
        }
        match config.split_mode {
            SplitMode::Frame => units.extend(order.into_iter().map(|p| Unit {
                class: clip.emotion,
                entries: by_path.remove(&p).unwrap_or_default(),
            })),
            SplitMode::Clip => units.push(Unit {
                class: clip.emotion,
                entries: by_path.into_values().flatten().collect(),
            }),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for class in EmotionClass::ALL {
        let mut pool: Vec<&Unit> = units.iter().filter(|u| u.class == class).collect();
        pool.shuffle(&mut rng);
        let (target, weight): (usize, fn(&Unit) -> usize) = match config.split_mode {
            SplitMode::Frame => {
                let total: usize = pool.iter().map(|u| u.entries.len()).sum();
                ((config.test_fraction * total as f64).round() as usize, |u| u.entries.len())
            }
            SplitMode::Clip => ((config.test_fraction * pool.len() as f64).round() as usize, |_| 1),
        };
        let mut taken = 0;
        for unit in pool {
            if taken + weight(unit) <= target {
                taken += weight(unit);
                for &slot in &unit.entries {
                    entries[slot].split = Split::Test;
                }
            }
            if taken == target {
                break;
            }
        }
    }

    Ok(PreparedManifest {
        entries,
        clip_counts,
        seed: config.seed,
    })
}

/// Distinct frame files appearing in both splits (always empty for manifests
/// built here).
pub fn split_overlap(entries: &[ManifestEntry]) -> BTreeSet<PathBuf> {
    let side = |s: Split| -> BTreeSet<&PathBuf> { entries.iter().filter(|e| e.split == s).map(|e| &e.path).collect() };
    side(Split::Train)
        .intersection(&side(Split::Test))
        .map(|p| (*p).clone())
        .collect()
}
