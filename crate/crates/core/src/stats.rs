//! Analyses of labeled human answer mistakes: where in the dialogue they
//! happen, how often each question type is answered wrongly, and Fisher's
//! exact test of whether the mistake rate depends on the question type.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Hypergeometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GameRecord;
use crate::qtype::{KeywordTable, QuestionType};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_REPLICATES: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Upper bound on the number of candidate tables `fisher_exact` will walk.
pub const DEFAULT_ENUMERATION_CAP: u64 = 50_000_000;

/// Relative slack when comparing table probabilities, so that tables with
/// mathematically equal probability count as "as extreme" despite rounding.
const TIE_SLACK: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("turn {current} is outside a dialogue of {total} turns")]
    InvalidTurn { current: usize, total: usize },
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("corpus carries no mistake labels")]
    Unlabeled,
    #[error("no labeled mistakes to analyze")]
    NoMistakes,
    #[error("exact enumeration would visit more than {cap} tables; use fisher_mc")]
    EnumerationCap { cap: u64 },
    #[error("at least one replicate is required")]
    NoReplicates,
}

/// Turn position relative to the dialogue length, in (0, 1].
pub fn normalized_turn(current: usize, total: usize) -> Result<f64, StatsError> {
    if current == 0 || current > total {
        return Err(StatsError::InvalidTurn { current, total });
    }
    Ok(current as f64 / total as f64)
}

/// Every labeled QA as (1-based turn, total turns, question, is_mistake).
fn labeled_qas(games: &[GameRecord]) -> impl Iterator<Item = (usize, usize, &str, bool)> {
    games.iter().flat_map(|g| {
        let total = g.total_turns();
        g.qas
            .iter()
            .enumerate()
            .filter_map(move |(i, qa)| qa.mistake_label.map(|m| (i + 1, total, qa.question.as_str(), m)))
    })
}

/// Counts of mistakes per normalized-turn bin; bin `i` covers `(i/n, (i+1)/n]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnHistogram {
    pub n_bins: usize,
    pub counts: Vec<u64>,
}

impl TurnHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin of `current/total`, computed in integers so that bin edges are exact.
    pub fn bin_of(current: usize, total: usize, n_bins: usize) -> usize {
        (current * n_bins).div_ceil(total) - 1
    }
}

pub fn mistake_turn_histogram(games: &[GameRecord], n_bins: usize) -> Result<TurnHistogram, StatsError> {
    if n_bins == 0 {
        return Err(StatsError::NoBins);
    }
    let mut counts = vec![0u64; n_bins];
    let mut labeled = false;
    for (current, total, _, mistake) in labeled_qas(games) {
        labeled = true;
        if mistake {
            counts[TurnHistogram::bin_of(current, total, n_bins)] += 1;
        }
    }
    if !labeled {
        return Err(StatsError::Unlabeled);
    }
    Ok(TurnHistogram { n_bins, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastTurnCount {
    pub last_turn: u64,
    pub mistakes: u64,
}

impl LastTurnCount {
    pub fn fraction(&self) -> f64 {
        self.last_turn as f64 / self.mistakes as f64
    }
}

pub fn last_turn_counts(games: &[GameRecord]) -> Result<LastTurnCount, StatsError> {
    let (mut last_turn, mut mistakes) = (0, 0);
    for (current, total, _, mistake) in labeled_qas(games) {
        if mistake {
            mistakes += 1;
            last_turn += u64::from(current == total);
        }
    }
    if mistakes == 0 {
        return Err(StatsError::NoMistakes);
    }
    Ok(LastTurnCount { last_turn, mistakes })
}

/// Share of mistakes made on the final turn of their dialogue.
pub fn last_turn_fraction(games: &[GameRecord]) -> Result<f64, StatsError> {
    last_turn_counts(games).map(|c| c.fraction())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeRate {
    pub mistakes: u64,
    pub total: u64,
    /// `None` when the type was never asked.
    pub rate: Option<f64>,
}

/// Per-type mistake rates. Rates are independent per type and need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistakeRateReport {
    pub by_type: BTreeMap<QuestionType, TypeRate>,
}

pub fn mistake_rate_by_type(games: &[GameRecord], table: &KeywordTable) -> MistakeRateReport {
    let contingency = build_contingency(games, table);
    let by_type = QuestionType::ALL
        .iter()
        .zip(contingency.incorrect.iter().zip(&contingency.correct))
        .map(|(&t, (&bad, &good))| {
            let total = bad + good;
            let rate = (total > 0).then(|| bad as f64 / total as f64);
            (
                t,
                TypeRate {
                    mistakes: bad,
                    total,
                    rate,
                },
            )
        })
        .collect();
    MistakeRateReport { by_type }
}

/// Two-row table: mistaken answers (`incorrect`) and correct answers per column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub columns: Vec<String>,
    pub incorrect: Vec<u64>,
    pub correct: Vec<u64>,
}

impl ContingencyTable {
    pub fn new(columns: Vec<String>, incorrect: Vec<u64>, correct: Vec<u64>) -> Self {
        assert_eq!(columns.len(), incorrect.len());
        assert_eq!(columns.len(), correct.len());
        ContingencyTable {
            columns,
            incorrect,
            correct,
        }
    }

    /// Unnamed table from `[incorrect, correct]` column pairs.
    pub fn from_columns(cols: &[[u64; 2]]) -> Self {
        ContingencyTable::new(
            (0..cols.len()).map(|i| format!("c{i}")).collect(),
            cols.iter().map(|c| c[0]).collect(),
            cols.iter().map(|c| c[1]).collect(),
        )
    }

    pub fn column_totals(&self) -> Vec<u64> {
        self.incorrect.iter().zip(&self.correct).map(|(a, b)| a + b).collect()
    }

    /// Drops all-zero columns; they do not affect any conditional probability.
    fn margins(&self) -> Margins {
        let (cols, tops): (Vec<u64>, Vec<u64>) = self
            .column_totals()
            .into_iter()
            .zip(&self.incorrect)
            .filter(|(c, _)| *c > 0)
            .map(|(c, a)| (c, *a))
            .unzip();
        Margins::new(cols, tops)
    }
}

struct Margins {
    cols: Vec<u64>,
    observed: Vec<u64>,
    top: u64,
    n: u64,
    ln_fact: Vec<f64>,
}

impl Margins {
    fn new(cols: Vec<u64>, observed: Vec<u64>) -> Self {
        let n: u64 = cols.iter().sum();
        let top = observed.iter().sum();
        let mut ln_fact = Vec::with_capacity(n as usize + 1);
        ln_fact.push(0.0);
        for i in 1..=n {
            let prev = ln_fact[i as usize - 1];
            ln_fact.push(prev + (i as f64).ln());
        }
        Margins {
            cols,
            observed,
            top,
            n,
            ln_fact,
        }
    }

    /// Only one table is compatible with these margins.
    fn degenerate(&self) -> bool {
        self.top == 0 || self.top == self.n || self.cols.len() < 2
    }

    fn ln_choose(&self, n: u64, k: u64) -> f64 {
        self.ln_fact[n as usize] - self.ln_fact[k as usize] - self.ln_fact[(n - k) as usize]
    }

    /// Log of the multivariate hypergeometric probability of the table whose
    /// first row is `tops`.
    fn ln_prob(&self, tops: &[u64]) -> f64 {
        let num: f64 = self.cols.iter().zip(tops).map(|(&c, &a)| self.ln_choose(c, a)).sum();
        num - self.ln_choose(self.n, self.top)
    }

    fn search_space(&self) -> u64 {
        self.cols
            .iter()
            .fold(1u64, |acc, &c| acc.saturating_mul(c.min(self.top) + 1))
    }
}

/// Builds the 2 x 9 table of (mistaken, correct) labeled answers per question type.
pub fn build_contingency(games: &[GameRecord], table: &KeywordTable) -> ContingencyTable {
    let mut incorrect = vec![0u64; QuestionType::ALL.len()];
    let mut correct = vec![0u64; QuestionType::ALL.len()];
    for (_, _, question, mistake) in labeled_qas(games) {
        let col = table.classify(question).index();
        if mistake {
            incorrect[col] += 1;
        } else {
            correct[col] += 1;
        }
    }
    ContingencyTable::new(
        QuestionType::ALL.iter().map(|t| t.to_string()).collect(),
        incorrect,
        correct,
    )
}

/// Fisher's exact test by full enumeration: the total conditional probability
/// of all tables with the observed margins that are no more probable than the
/// observed one.
pub fn fisher_exact(table: &ContingencyTable) -> Result<f64, StatsError> {
    fisher_exact_capped(table, DEFAULT_ENUMERATION_CAP)
}

pub fn fisher_exact_capped(table: &ContingencyTable, cap: u64) -> Result<f64, StatsError> {
    let m = table.margins();
    if m.degenerate() {
        return Ok(1.0);
    }
    if m.search_space() > cap {
        return Err(StatsError::EnumerationCap { cap });
    }
    let threshold = m.ln_prob(&m.observed) + TIE_SLACK.ln_1p();

    // suffix[j] = total of columns j.. so the remaining top row stays reachable.
    let mut suffix = vec![0u64; m.cols.len() + 1];
    for j in (0..m.cols.len()).rev() {
        suffix[j] = suffix[j + 1] + m.cols[j];
    }
    let base = -m.ln_choose(m.n, m.top);
    let mut p = 0.0;
    walk(&m, &suffix, 0, m.top, base, threshold, &mut p);
    Ok(p.min(1.0))
}

fn walk(m: &Margins, suffix: &[u64], j: usize, remaining: u64, acc: f64, threshold: f64, p: &mut f64) {
    let c = m.cols[j];
    let lo = remaining.saturating_sub(suffix[j + 1]);
    let hi = c.min(remaining);
    if j + 1 == m.cols.len() {
        // lo == hi == remaining here
        let lp = acc + m.ln_choose(c, remaining);
        if lp <= threshold {
            *p += lp.exp();
        }
        return;
    }
    for a in lo..=hi {
        walk(m, suffix, j + 1, remaining - a, acc + m.ln_choose(c, a), threshold, p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloFisher {
    pub p_value: f64,
    pub replicates: usize,
    /// Simulated tables at least as extreme as the observed one.
    pub extreme: usize,
    pub seed: u64,
    /// Margins admit a single table; `p_value` is 1 without simulation.
    pub degenerate: bool,
}

/// Monte Carlo Fisher test: `replicates` tables drawn from the null with the
/// observed margins, `p = (1 + #extreme) / (replicates + 1)`.
///
/// Replicate `r` draws from its own ChaCha stream `(seed, r)`, so the result
/// does not depend on how the work is scheduled.
pub fn fisher_mc(table: &ContingencyTable, replicates: usize, seed: u64) -> Result<MonteCarloFisher, StatsError> {
    if replicates == 0 {
        return Err(StatsError::NoReplicates);
    }
    let m = table.margins();
    if m.degenerate() {
        log::warn!("contingency table has degenerate margins; reporting p = 1");
        return Ok(MonteCarloFisher {
            p_value: 1.0,
            replicates,
            extreme: 0,
            seed,
            degenerate: true,
        });
    }
    let threshold = m.ln_prob(&m.observed) + TIE_SLACK.ln_1p();
    let extreme = (0..replicates)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            m.ln_prob(&sample_table(&m, &mut rng)) <= threshold
        })
        .count();
    Ok(MonteCarloFisher {
        p_value: (1 + extreme) as f64 / (replicates + 1) as f64,
        replicates,
        extreme,
        seed,
        degenerate: false,
    })
}

/// Draws the first row column by column from successive hypergeometric laws.
fn sample_table(m: &Margins, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut pool = m.n;
    let mut top_left = m.top;
    let mut tops = Vec::with_capacity(m.cols.len());
    for (j, &c) in m.cols.iter().enumerate() {
        let a = if j + 1 == m.cols.len() {
            top_left
        } else if top_left == 0 {
            0
        } else if top_left == pool {
            c
        } else {
            Hypergeometric::new(pool, top_left, c)
                .expect("draws never exceed the pool")
                .sample(rng)
        };
        tops.push(a);
        pool -= c;
        top_left -= a;
    }
    tops
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Answer, GameStatus, ImageInfo, ObjectRef, QAPair};

    fn game(qas: Vec<QAPair>) -> GameRecord {
        GameRecord {
            game_id: "g".into(),
            status: GameStatus::Failure,
            image: ImageInfo {
                image_id: "i".into(),
                width: 10.0,
                height: 10.0,
                feature_key: None,
            },
            objects: vec![ObjectRef {
                object_id: "o".into(),
                category_name: "cup".into(),
                bbox: [0.0, 0.0, 5.0, 5.0].into(),
            }],
            target_object_id: "o".into(),
            qas,
        }
    }

    fn labeled(q: &str, mistake: bool) -> QAPair {
        QAPair::labeled(q, Answer::Yes, mistake)
    }

    #[test]
    fn normalized_turns() {
        assert_eq!(normalized_turn(1, 1).unwrap(), 1.0);
        assert_eq!(normalized_turn(2, 4).unwrap(), 0.5);
        assert_eq!(normalized_turn(3, 5).unwrap(), 0.6);
        assert!(normalized_turn(4, 3).is_err());
        assert!(normalized_turn(0, 3).is_err());
        assert!(normalized_turn(1, 0).is_err());
    }

    #[test]
    fn histogram_bins_are_right_closed() {
        let g = game(vec![labeled("a?", false), labeled("b?", true)]);
        let h = mistake_turn_histogram(&[g], 2).unwrap();
        assert_eq!(h.counts, vec![0, 1]);
        // 1/2 sits on the edge of bin 0 when there are two bins
        assert_eq!(TurnHistogram::bin_of(1, 2, 2), 0);
        assert_eq!(TurnHistogram::bin_of(1, 1, 10), 9);
        assert_eq!(TurnHistogram::bin_of(1, 10, 10), 0);
    }

    #[test]
    fn histogram_errors_and_zero_case() {
        let clean = game(vec![labeled("a?", false)]);
        assert_eq!(mistake_turn_histogram(&[clean], 4).unwrap().counts, vec![0; 4]);
        let unlabeled = game(vec![QAPair::new("a?", Answer::Yes)]);
        assert_eq!(mistake_turn_histogram(&[unlabeled], 4), Err(StatsError::Unlabeled));
        assert_eq!(mistake_turn_histogram(&[], 0), Err(StatsError::NoBins));
    }

    #[test]
    fn last_turn_fractions() {
        let last = game(vec![labeled("a?", false), labeled("b?", true)]);
        let mid = game(vec![labeled("a?", true), labeled("b?", false)]);
        assert_eq!(last_turn_fraction(std::slice::from_ref(&last)).unwrap(), 1.0);
        assert_eq!(last_turn_fraction(std::slice::from_ref(&mid)).unwrap(), 0.0);
        assert_eq!(last_turn_fraction(&[last, mid]).unwrap(), 0.5);
        let clean = game(vec![labeled("a?", false)]);
        assert_eq!(last_turn_fraction(&[clean]), Err(StatsError::NoMistakes));
    }

    #[test]
    fn rates_per_type() {
        let table = KeywordTable::default();
        let mut qas: Vec<QAPair> = (0..4).map(|_| labeled("Is it white?", true)).collect();
        qas.extend((0..6).map(|_| labeled("Is it white?", false)));
        let report = mistake_rate_by_type(&[game(qas)], &table);
        let color = report.by_type[&QuestionType::Color];
        assert_eq!((color.mistakes, color.total, color.rate), (4, 10, Some(0.4)));
        let shape = report.by_type[&QuestionType::Shape];
        assert_eq!((shape.mistakes, shape.total, shape.rate), (0, 0, None));

        let two = game(vec![labeled("Is it white?", true), labeled("Is it round?", true)]);
        let r = mistake_rate_by_type(&[two], &table);
        let sum: f64 = r.by_type.values().filter_map(|t| t.rate).sum();
        assert_eq!(sum, 2.0);
    }

    #[test]
    fn contingency_counts() {
        let table = KeywordTable::default();
        let g = game(vec![
            labeled("Is it white?", true),
            labeled("Is it white?", false),
            labeled("Is it on the left?", false),
        ]);
        let t = build_contingency(&[g], &table);
        let color = QuestionType::Color.index();
        let spatial = QuestionType::Spatial.index();
        assert_eq!((t.incorrect[color], t.correct[color]), (1, 1));
        assert_eq!((t.incorrect[spatial], t.correct[spatial]), (0, 1));
        let empty = build_contingency(&[], &table);
        assert!(empty.incorrect.iter().chain(&empty.correct).all(|&c| c == 0));
        assert_eq!(empty.columns.len(), 9);
    }

    #[test]
    fn single_compatible_table_gives_one() {
        assert_eq!(
            fisher_exact(&ContingencyTable::from_columns(&[[0, 3], [0, 5]])).unwrap(),
            1.0
        );
        assert_eq!(
            fisher_exact(&ContingencyTable::from_columns(&[[2, 0], [4, 0]])).unwrap(),
            1.0
        );
        assert_eq!(
            fisher_exact(&ContingencyTable::from_columns(&[[2, 5], [0, 0]])).unwrap(),
            1.0
        );
        let mc = fisher_mc(&ContingencyTable::from_columns(&[[0, 3], [0, 5]]), 10, 1).unwrap();
        assert!(mc.degenerate);
        assert_eq!(mc.p_value, 1.0);
    }

    #[test]
    fn three_one_table() {
        // Tables with margins (4,4 | 4,4): top-left a in 0..=4 with
        // probabilities (1, 16, 36, 16, 1) / 70; a = 3 and its mirror are
        // as extreme as observed, so p = (1 + 16 + 16 + 1) / 70.
        let t = ContingencyTable::from_columns(&[[3, 1], [1, 3]]);
        let p = fisher_exact(&t).unwrap();
        assert!((p - 34.0 / 70.0).abs() < 1e-14, "{p}");
    }

    #[test]
    fn enumeration_cap() {
        let t = ContingencyTable::from_columns(&[[50, 50], [50, 50], [50, 50]]);
        assert_eq!(
            fisher_exact_capped(&t, 100),
            Err(StatsError::EnumerationCap { cap: 100 })
        );
    }

    #[test]
    fn column_permutation_invariance() {
        let a = ContingencyTable::from_columns(&[[3, 1], [0, 4], [2, 2]]);
        let b = ContingencyTable::from_columns(&[[2, 2], [3, 1], [0, 4]]);
        let (pa, pb) = (fisher_exact(&a).unwrap(), fisher_exact(&b).unwrap());
        assert!((pa - pb).abs() < 1e-13);
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let t = ContingencyTable::from_columns(&[[3, 1], [0, 4], [2, 2]]);
        let a = fisher_mc(&t, 500, 11).unwrap();
        let b = fisher_mc(&t, 500, 11).unwrap();
        assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
        assert_eq!(fisher_mc(&t, 0, 1), Err(StatsError::NoReplicates));
    }

    #[test]
    fn single_replicate_as_extreme_gives_one() {
        // Every table is at least as extreme as the most likely table, so a
        // single draw always counts.
        let t = ContingencyTable::from_columns(&[[2, 2], [2, 2]]);
        let mc = fisher_mc(&t, 1, 5).unwrap();
        assert_eq!(mc.extreme, 1);
        assert_eq!(mc.p_value, 1.0);
    }
}
