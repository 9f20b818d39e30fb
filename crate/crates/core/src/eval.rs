//! Precision, recall and F-score with mistakes as the positive class, plus
//! report assembly for experiment runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const DATASET_SAME: &str = "same-image";
pub const DATASET_DIFFERENT: &str = "different-image";
pub const SLICE_LAST: &str = "last";
pub const SLICE_OTHER: &str = "other";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("value {0} at position {1} is not 0 or 1")]
    NotBinary(u8, usize),
    #[error("report schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, label: bool) {
        match (predicted, label) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: precision(self),
            recall: recall(self),
            f_score: f_score(self),
        }
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Self {
        iter.fold(Confusion::default(), Add::add)
    }
}

/// Counts with label 1 (mistake) as the positive class.
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<Confusion, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion::default();
    for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
        if p > 1 {
            return Err(EvalError::NotBinary(p, i));
        }
        if l > 1 {
            return Err(EvalError::NotBinary(l, i));
        }
        c.record(p == 1, l == 1);
    }
    Ok(c)
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_real(num as f64) / T::from_real(den as f64)
    }
}

/// `tp / (tp + fp)`, or 0 when nothing was predicted positive.
pub fn precision_as<T: Scalar>(c: &Confusion) -> T {
    ratio(c.tp, c.tp + c.fp)
}

/// `tp / (tp + fn)`, or 0 when there are no positives.
pub fn recall_as<T: Scalar>(c: &Confusion) -> T {
    ratio(c.tp, c.tp + c.fn_)
}

/// Harmonic mean of precision and recall, or 0 when both are 0.
pub fn f_score_as<T: Scalar>(c: &Confusion) -> T {
    let p: T = precision_as(c);
    let r: T = recall_as(c);
    if p + r == T::zero() {
        return T::zero();
    }
    (p + p) * r / (p + r)
}

pub fn precision(c: &Confusion) -> f64 {
    precision_as(c)
}

pub fn recall(c: &Confusion) -> f64 {
    recall_as(c)
}

pub fn f_score(c: &Confusion) -> f64 {
    f_score_as(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Metrics {
    /// Component-wise mean; `None` for an empty input.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Metrics {
            precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
            recall: items.iter().map(|m| m.recall).sum::<f64>() / n,
            f_score: items.iter().map(|m| m.f_score).sum::<f64>() / n,
        })
    }
}

/// One scored QA pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub game_id: String,
    pub turn: usize,
    pub total: usize,
    pub label: bool,
    pub probability: f64,
    pub predicted: bool,
}

impl Prediction {
    pub fn is_last_turn(&self) -> bool {
        self.turn == self.total
    }
}

/// Confusions for answers in the final turn and in every other turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSlices {
    pub last: Confusion,
    pub other: Confusion,
}

impl TurnSlices {
    pub fn overall(&self) -> Confusion {
        self.last + self.other
    }

    pub fn get(&self, slice: &str) -> Option<Confusion> {
        match slice {
            SLICE_LAST => Some(self.last),
            SLICE_OTHER => Some(self.other),
            _ => None,
        }
    }
}

pub fn slice_last_turn(predictions: &[Prediction]) -> TurnSlices {
    let mut s = TurnSlices::default();
    for p in predictions {
        let target = if p.is_last_turn() { &mut s.last } else { &mut s.other };
        target.record(p.predicted, p.label);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub confusion: Confusion,
    pub slices: BTreeMap<String, Metrics>,
    pub metadata: ReportMeta,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[Prediction], metadata: ReportMeta) -> Self {
        let s = slice_last_turn(predictions);
        let overall = s.overall();
        let slices = [(SLICE_LAST, s.last), (SLICE_OTHER, s.other)]
            .into_iter()
            .map(|(k, c)| (k.to_string(), c.metrics()))
            .collect();
        EvalReport {
            overall: overall.metrics(),
            confusion: overall,
            slices,
            metadata,
        }
    }
}

/// SHA-256 of the canonical JSON form of `config`, as lowercase hex.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let value = serde_json::to_value(config).expect("config serializes to JSON");
    let text = serde_json::to_string(&value).expect("JSON value serializes");
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Per-fold outcome of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    /// The training part of this fold held only one class.
    pub single_class: bool,
    pub validation: Confusion,
    pub same_image: TurnSlices,
    pub different_image: TurnSlices,
}

/// Everything one `(model, pretrained)` experiment produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub model: String,
    pub pretrained: bool,
    pub seed: u64,
    pub config_hash: String,
    pub split_ids: BTreeMap<String, Vec<String>>,
    pub folds: Vec<FoldRecord>,
}

impl RunRecord {
    /// Mean over folds of the metrics on `dataset`, restricted to `slice`
    /// when given. Folds where the slice has no examples are left out.
    pub fn mean_metrics(&self, dataset: &str, slice: Option<&str>) -> Option<Metrics> {
        let per_fold: Vec<Metrics> = self
            .folds
            .iter()
            .filter_map(|f| {
                let slices = match dataset {
                    DATASET_SAME => f.same_image,
                    DATASET_DIFFERENT => f.different_image,
                    _ => return None,
                };
                let c = match slice {
                    None => slices.overall(),
                    Some(s) => slices.get(s)?,
                };
                (c.total() > 0).then(|| c.metrics())
            })
            .collect();
        Metrics::mean(&per_fold)
    }

    pub fn mean_validation(&self) -> Option<Metrics> {
        let per_fold: Vec<Metrics> = self
            .folds
            .iter()
            .filter(|f| f.validation.total() > 0)
            .map(|f| f.validation.metrics())
            .collect();
        Metrics::mean(&per_fold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub title: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Cell>,
}

impl Grid {
    fn new(title: &str, rows: &[&str], columns: &[&str]) -> Self {
        Grid {
            title: title.into(),
            rows: rows.iter().map(|s| s.to_string()).collect(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            cells: Vec::new(),
        }
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    pub fn missing(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter(|c| c.metrics.is_none())
            .map(|c| format!("{}: {} / {}", self.title, c.row, c.column))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.len() == self.rows.len() * self.columns.len() && self.cells.iter().all(|c| c.metrics.is_some())
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!("{}\n{:width$}", self.title, "");
        for c in &self.columns {
            let _ = write!(out, "  {c:>28}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{r:width$}");
            for c in &self.columns {
                let text = match self.cell(r, c).and_then(|c| c.metrics) {
                    Some(m) => format!("F {:.3} R {:.3} P {:.3}", m.f_score, m.recall, m.precision),
                    None => "missing".to_string(),
                };
                let _ = write!(out, "  {text:>28}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    pub table1: Grid,
    pub table2: Grid,
    pub table4: Grid,
    pub missing: Vec<String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for g in [&self.table1, &self.table2, &self.table4] {
            out.push_str(&g.render());
            out.push('\n');
        }
        if !self.missing.is_empty() {
            out.push_str("missing cells:\n");
            for m in &self.missing {
                let _ = writeln!(out, "  {m}");
            }
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

const MODELS: [&str; 3] = ["baseline", "qa-turn", "question-type"];
const TABLE2_MODELS: [&str; 2] = ["baseline", "qa-turn"];
const ROW_HUMAN: &str = "human-mistake";
const ROW_SYNTH_HUMAN: &str = "synthetic+human-mistake";

/// Lays the runs out as the architecture grid, the turn-slice grid and the
/// pretraining ablation grid. Cells without a matching run stay empty and are
/// listed in `missing`.
pub fn assemble_report(runs: &[RunRecord]) -> Result<ExperimentReport, EvalError> {
    if let Some(r) = runs.iter().find(|r| r.schema_version != REPORT_SCHEMA_VERSION) {
        return Err(EvalError::SchemaVersion {
            found: r.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    let find = |model: &str, pretrained: bool| runs.iter().find(|r| r.model == model && r.pretrained == pretrained);
    let datasets = [DATASET_SAME, DATASET_DIFFERENT];

    let mut table1 = Grid::new("mlp models (F-score)", &MODELS, &datasets);
    for m in MODELS {
        for d in datasets {
            table1.cells.push(Cell {
                row: m.into(),
                column: d.into(),
                metrics: find(m, true).and_then(|r| r.mean_metrics(d, None)),
            });
        }
    }

    let slice_cols: Vec<String> = [SLICE_LAST, SLICE_OTHER]
        .iter()
        .flat_map(|s| datasets.iter().map(move |d| format!("{s}/{d}")))
        .collect();
    let slice_refs: Vec<&str> = slice_cols.iter().map(String::as_str).collect();
    let mut table2 = Grid::new("last turn vs other turns (F-score)", &TABLE2_MODELS, &slice_refs);
    for m in TABLE2_MODELS {
        for col in &slice_cols {
            let (slice, dataset) = col.split_once('/').expect("slice/dataset column");
            table2.cells.push(Cell {
                row: m.into(),
                column: col.clone(),
                metrics: find(m, true).and_then(|r| r.mean_metrics(dataset, Some(slice))),
            });
        }
    }

    let mut table4 = Grid::new("learning method (F-score)", &[ROW_HUMAN, ROW_SYNTH_HUMAN], &datasets);
    for (row, pretrained) in [(ROW_HUMAN, false), (ROW_SYNTH_HUMAN, true)] {
        for d in datasets {
            table4.cells.push(Cell {
                row: row.into(),
                column: d.into(),
                metrics: find("baseline", pretrained).and_then(|r| r.mean_metrics(d, None)),
            });
        }
    }

    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut config_hashes: Vec<String> = runs.iter().map(|r| r.config_hash.clone()).collect();
    config_hashes.sort();
    config_hashes.dedup();
    let missing = [&table1, &table2, &table4].iter().flat_map(|g| g.missing()).collect();
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds,
        config_hashes,
        table1,
        table2,
        table4,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(tp: u64, fp: u64, fn_: u64, tn: u64) -> Confusion {
        Confusion { tp, fp, fn_, tn }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[1], &[1]).unwrap(), c(1, 0, 0, 0));
        assert_eq!(confusion(&[0, 1], &[1, 0]).unwrap(), c(0, 1, 1, 0));
        assert_eq!(confusion(&[0; 5], &[1; 5]).unwrap(), c(0, 0, 5, 0));
        assert!(matches!(confusion(&[0], &[]), Err(EvalError::LengthMismatch { .. })));
        assert_eq!(confusion(&[2], &[1]), Err(EvalError::NotBinary(2, 0)));
    }

    #[test]
    fn metric_examples() {
        let perfect = c(1, 0, 0, 0).metrics();
        assert_eq!(
            perfect,
            Metrics {
                precision: 1.0,
                recall: 1.0,
                f_score: 1.0
            }
        );
        assert_eq!(f_score(&c(0, 3, 4, 1)), 0.0);
        assert_eq!(f_score(&c(0, 0, 0, 9)), 0.0);
        let m = c(2, 1, 1, 0).metrics();
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert!((m.f_score - 2.0 / 3.0).abs() < 1e-15);
        assert!((f_score_as::<f32>(&c(2, 1, 1, 0)) - 2.0 / 3.0).abs() < 1e-6);
    }

    fn pred(turn: usize, total: usize, label: bool, predicted: bool) -> Prediction {
        Prediction {
            game_id: "g".into(),
            turn,
            total,
            label,
            probability: if predicted { 0.9 } else { 0.1 },
            predicted,
        }
    }

    #[test]
    fn last_turn_slicing() {
        let single = [pred(1, 1, true, true), pred(1, 1, false, true)];
        let s = slice_last_turn(&single);
        assert_eq!(s.other.total(), 0);
        assert_eq!(s.last, c(1, 1, 0, 0));

        let mixed = [
            pred(1, 3, false, false),
            pred(2, 3, true, false),
            pred(3, 3, true, true),
            pred(1, 2, false, true),
        ];
        let s = slice_last_turn(&mixed);
        assert_eq!(s.last.total() + s.other.total(), 4);
        assert_eq!(s.overall(), confusion(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap());
    }

    fn run(model: &str, pretrained: bool) -> RunRecord {
        let slices = TurnSlices {
            last: c(2, 1, 1, 4),
            other: c(1, 0, 1, 6),
        };
        RunRecord {
            schema_version: REPORT_SCHEMA_VERSION,
            model: model.into(),
            pretrained,
            seed: 7,
            config_hash: config_hash(&serde_json::json!({"lr": 1e-5})),
            split_ids: BTreeMap::new(),
            folds: vec![FoldRecord {
                fold: 0,
                single_class: false,
                validation: c(1, 1, 1, 1),
                same_image: slices,
                different_image: slices,
            }],
        }
    }

    #[test]
    fn single_run_fills_its_cells_only() {
        let report = assemble_report(&[run("baseline", true)]).unwrap();
        let cell = report.table1.cell("baseline", DATASET_SAME).unwrap();
        assert_eq!(cell.metrics.unwrap(), c(3, 1, 2, 10).metrics());
        assert!(report.table1.cell("qa-turn", DATASET_SAME).unwrap().metrics.is_none());
        assert!(report.table4.cell(ROW_HUMAN, DATASET_SAME).unwrap().metrics.is_none());
        assert!(report.missing.iter().any(|m| m.contains("qa-turn")));
        assert_eq!(report.seeds, vec![7]);
        assert_eq!(report.config_hashes.len(), 1);
        assert_eq!(report.config_hashes[0].len(), 64);
    }

    #[test]
    fn full_set_of_runs_completes_every_grid() {
        let runs = [
            run("baseline", true),
            run("qa-turn", true),
            run("question-type", true),
            run("baseline", false),
        ];
        let report = assemble_report(&runs).unwrap();
        assert!(report.is_complete(), "{:?}", report.missing);
        assert!(report.table4.is_complete());
        assert_eq!(report.table2.cells.len(), 8);
        let back = ExperimentReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert_eq!(assemble_report(&runs).unwrap().to_json(), report.to_json());
        assert!(!report.render_text().contains("missing"));
    }

    #[test]
    fn schema_version_is_checked() {
        let mut r = run("baseline", true);
        r.schema_version = 99;
        assert!(matches!(assemble_report(&[r]), Err(EvalError::SchemaVersion { .. })));
    }

    proptest! {
        #[test]
        fn f_lies_between_precision_and_recall(tp in 1u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let m = c(tp, fp, fn_, 0).metrics();
            let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
            prop_assert!(m.f_score >= lo - 1e-12 && m.f_score <= hi + 1e-12);
            let swapped = c(tp, fn_, fp, 0).metrics();
            prop_assert!((swapped.f_score - m.f_score).abs() < 1e-12);
        }

        #[test]
        fn joint_permutation_keeps_counts(
            pairs in proptest::collection::vec((0u8..2, 0u8..2), 0..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (p, l): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
            let before = confusion(&p, &l).unwrap();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p2, l2): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
            prop_assert_eq!(confusion(&p2, &l2).unwrap(), before);
            prop_assert_eq!(before.total(), pairs.len() as u64);
        }
    }
}
