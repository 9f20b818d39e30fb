//! Dialogue corpus ingestion: the newline-delimited game schema, record
//! validation, target-size filtering and the dataset splits used for
//! pretraining, fine-tuning and testing.
//!
//! One game per line, UTF-8 JSON:
//!
//! ```text
//! {"game_id": "g1", "status": "failure",
//!  "image": {"id": "img1", "width": 640, "height": 480, "feature_key": "img1"},
//!  "objects": [{"object_id": "o1", "category": "banana", "bbox": [10, 20, 30, 40]}],
//!  "target_object_id": "o1",
//!  "qas": [{"question": "Is it a fruit?", "answer": "Yes", "mistake": false}]}
//! ```
//!
//! Paths ending in `.gz` are read through a gzip decoder.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Default minimum target-area / image-area ratio kept by [`filter_by_target_size`].
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("tau must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("cannot split {items} items into {k} folds")]
    TooFewItems { items: usize, k: usize },
    #[error("split fractions must be non-negative and sum to at most 1, got {0:?}")]
    InvalidFractions(Vec<f64>),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Problem with a single input line. The line number is 1-based.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct RecordError {
    pub line: usize,
    pub game_id: Option<String>,
    pub kind: RecordErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordErrorKind {
    /// JSON syntax or schema problem; the message names the field.
    Malformed(String),
    Invalid(InvariantViolation),
}

impl fmt::Display for RecordErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordErrorKind::Malformed(msg) => write!(f, "malformed record: {msg}"),
            RecordErrorKind::Invalid(v) => write!(f, "invalid record: {v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvariantViolation {
    #[error("image {field} must be positive, got {value}")]
    ImageDimension { field: &'static str, value: f64 },
    #[error("object {object_id}: bbox {bbox:?} does not fit a {width}x{height} image")]
    BBoxOutOfImage {
        object_id: String,
        bbox: [f64; 4],
        width: f64,
        height: f64,
    },
    #[error("game has no objects")]
    NoObjects,
    #[error("duplicate object id {0}")]
    DuplicateObject(String),
    #[error("target object {0} is not among the objects")]
    MissingTarget(String),
    #[error("game has no question/answer pairs")]
    NoQas,
    #[error("question {0} is empty")]
    EmptyQuestion(usize),
    #[error("question {0} has answer N/A but carries a mistake label")]
    LabeledNa(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Drop invalid records with a warning.
    #[default]
    Skip,
    /// Abort on the first invalid record.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn fits(&self, image: &ImageInfo) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= image.width
            && self.y + self.h <= image.height
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    #[serde(rename = "id", deserialize_with = "de_id")]
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_key: Option<String>,
}

impl ImageInfo {
    /// Key of the whole-image feature vector; falls back to the image id.
    pub fn feature_key(&self) -> &str {
        self.feature_key.as_deref().unwrap_or(&self.image_id)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRef {
    #[serde(deserialize_with = "de_id")]
    pub object_id: String,
    #[serde(rename = "category")]
    pub category_name: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
    #[serde(rename = "N/A")]
    NA,
}

impl Answer {
    pub fn is_yes_no(self) -> bool {
        !matches!(self, Answer::NA)
    }

    /// Yes becomes No and vice versa; N/A is unchanged.
    pub fn flipped(self) -> Answer {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
            Answer::NA => Answer::NA,
        }
    }

    /// Row of the answer embedding table.
    pub fn index(self) -> usize {
        match self {
            Answer::Yes => 0,
            Answer::No => 1,
            Answer::NA => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
            Answer::NA => "N/A",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: Answer,
    #[serde(rename = "mistake", default, skip_serializing_if = "Option::is_none")]
    pub mistake_label: Option<bool>,
}

impl QAPair {
    pub fn new(question: impl Into<String>, answer: Answer) -> Self {
        QAPair {
            question: question.into(),
            answer,
            mistake_label: None,
        }
    }

    pub fn labeled(question: impl Into<String>, answer: Answer, mistake: bool) -> Self {
        QAPair {
            question: question.into(),
            answer,
            mistake_label: Some(mistake),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameStatus {
    Success,
    Failure,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    #[serde(deserialize_with = "de_id")]
    pub game_id: String,
    pub status: GameStatus,
    pub image: ImageInfo,
    pub objects: Vec<ObjectRef>,
    #[serde(deserialize_with = "de_id")]
    pub target_object_id: String,
    pub qas: Vec<QAPair>,
}

impl GameRecord {
    pub fn total_turns(&self) -> usize {
        self.qas.len()
    }

    pub fn target(&self) -> Option<&ObjectRef> {
        self.objects.iter().find(|o| o.object_id == self.target_object_id)
    }

    /// Key of the target-crop feature vector: `<image feature key>/<target object id>`.
    pub fn crop_feature_key(&self) -> String {
        format!("{}/{}", self.image.feature_key(), self.target_object_id)
    }

    /// Target bbox area divided by image area.
    pub fn target_area_ratio(&self) -> Option<f64> {
        self.target().map(|t| t.bbox.area() / self.image.area())
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        for (field, value) in [("width", self.image.width), ("height", self.image.height)] {
            if !(value > 0.0) {
                return Err(InvariantViolation::ImageDimension { field, value });
            }
        }
        if self.objects.is_empty() {
            return Err(InvariantViolation::NoObjects);
        }
        let mut seen = HashSet::new();
        for obj in &self.objects {
            if !seen.insert(obj.object_id.as_str()) {
                return Err(InvariantViolation::DuplicateObject(obj.object_id.clone()));
            }
            if !obj.bbox.fits(&self.image) {
                return Err(InvariantViolation::BBoxOutOfImage {
                    object_id: obj.object_id.clone(),
                    bbox: obj.bbox.into(),
                    width: self.image.width,
                    height: self.image.height,
                });
            }
        }
        if self.target().is_none() {
            return Err(InvariantViolation::MissingTarget(self.target_object_id.clone()));
        }
        if self.qas.is_empty() {
            return Err(InvariantViolation::NoQas);
        }
        for (i, qa) in self.qas.iter().enumerate() {
            if qa.question.trim().is_empty() {
                return Err(InvariantViolation::EmptyQuestion(i + 1));
            }
            if qa.answer == Answer::NA && qa.mistake_label.is_some() {
                return Err(InvariantViolation::LabeledNa(i + 1));
            }
        }
        Ok(())
    }
}

fn de_id<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Str(String),
        Int(i64),
    }
    Ok(match Id::deserialize(d)? {
        Id::Str(s) => s,
        Id::Int(i) => i.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPurpose {
    PretrainTrain,
    PretrainVal,
    FinetunePool,
    TestSameImage,
    TestDifferentImage,
}

/// Named set of game ids with the role it plays in an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub name: String,
    pub purpose: SplitPurpose,
    pub game_ids: BTreeSet<String>,
}

impl CorpusSplit {
    pub fn from_games(name: impl Into<String>, purpose: SplitPurpose, games: &[GameRecord]) -> Self {
        CorpusSplit {
            name: name.into(),
            purpose,
            game_ids: games.iter().map(|g| g.game_id.clone()).collect(),
        }
    }

    /// True when splits with distinct purposes share no game id.
    pub fn disjoint(splits: &[CorpusSplit]) -> bool {
        splits.iter().enumerate().all(|(i, a)| {
            splits[i + 1..]
                .iter()
                .filter(|b| b.purpose != a.purpose)
                .all(|b| a.game_ids.is_disjoint(&b.game_ids))
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub games: Vec<GameRecord>,
    pub skipped: Vec<RecordError>,
}

/// Parses and validates one line. `line` is 1-based.
pub fn parse_game_line(text: &str, line: usize) -> Result<GameRecord, RecordError> {
    let game: GameRecord = serde_json::from_str(text).map_err(|e| RecordError {
        line,
        game_id: None,
        kind: RecordErrorKind::Malformed(e.to_string()),
    })?;
    game.validate().map_err(|v| RecordError {
        line,
        game_id: Some(game.game_id.clone()),
        kind: RecordErrorKind::Invalid(v),
    })?;
    Ok(game)
}

/// Reads newline-delimited games. Blank lines are ignored; input order is kept.
pub fn parse_games<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParsedCorpus, CorpusError> {
    let lines = reader.lines().collect::<Result<Vec<_>, _>>()?;
    let results: Vec<_> = lines
        .par_iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_game_line(l, i + 1))
        .collect();

    let mut corpus = ParsedCorpus::default();
    for result in results {
        match result {
            Ok(game) => corpus.games.push(game),
            Err(err) if mode == ParseMode::Strict => return Err(err.into()),
            Err(err) => {
                log::warn!("skipping record: {err}");
                corpus.skipped.push(err);
            }
        }
    }
    Ok(corpus)
}

/// Opens a corpus file, transparently decompressing `.gz`.
pub fn open_corpus(path: &Path) -> io::Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

pub fn read_games(path: &Path, mode: ParseMode) -> Result<ParsedCorpus, CorpusError> {
    parse_games(open_corpus(path)?, mode)
}

pub fn write_games<W: Write>(mut out: W, games: &[GameRecord]) -> Result<(), CorpusError> {
    for game in games {
        serde_json::to_writer(&mut out, game)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Keeps the games whose target covers at least `tau` of the image area.
pub fn filter_by_target_size(games: &[GameRecord], tau: f64) -> Result<Vec<GameRecord>, CorpusError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CorpusError::InvalidTau(tau));
    }
    Ok(games
        .iter()
        .filter(|g| g.target_area_ratio().is_some_and(|r| r >= tau))
        .cloned()
        .collect())
}

/// Partitions games by whether their image was seen during pretraining.
pub fn split_same_different(
    games: Vec<GameRecord>,
    pretrain_image_ids: &HashSet<String>,
) -> (Vec<GameRecord>, Vec<GameRecord>) {
    games
        .into_iter()
        .partition(|g| pretrain_image_ids.contains(&g.image.image_id))
}

/// Shuffled fold assignment of `0..n`. The first `n % k` folds get one extra
/// index; indices within a fold are ascending.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidK(k));
    }
    if n < k {
        return Err(CorpusError::TooFewItems { items: n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

pub fn kfold_split<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>, CorpusError> {
    Ok(kfold_indices(items.len(), k, seed)?
        .into_iter()
        .map(|fold| fold.into_iter().map(|i| items[i].clone()).collect())
        .collect())
}

/// Shuffles and cuts `items` into consecutive parts of the given fractions.
/// Boundaries are rounded cumulatively; whatever the fractions leave over is dropped.
pub fn fraction_split<T: Clone>(items: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>, CorpusError> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || total > 1.0 + 1e-9 {
        return Err(CorpusError::InvalidFractions(fractions.to_vec()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = items.len() as f64;
    let mut parts = Vec::with_capacity(fractions.len());
    let (mut cum, mut start) = (0.0, 0usize);
    for f in fractions {
        cum += f;
        let end = ((cum * n).round() as usize).min(items.len());
        let mut idx = order[start..end].to_vec();
        idx.sort_unstable();
        parts.push(idx.into_iter().map(|i| items[i].clone()).collect());
        start = end;
    }
    Ok(parts)
}
