//! Few-shot prompts for external vision-language models, and scoring of
//! their replies.
//!
//! Rendering conventions: lines are joined with `\n` and carry no leading or
//! trailing spaces; a few-shot prompt is the eight completed context prompts
//! and the query prompt joined with `\n`; the query ends with a bare
//! `Output:`. Answers and judgments are lowercase `yes` / `no`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Answer, BBox, GameRecord};
use crate::eval::{Cell, Confusion, Grid};
use crate::qtype::{KeywordTable, QuestionType};

pub const CONTEXT_SIZE: usize = 8;
pub const OVERLAY_COLOR: &str = "yellow";

const QTYPE_HINT: &str = "Hint: <spatial>, <color>, <action>, and <size> questions are easy to make mistakes on.";
const TIME_HINT: &str = "Hint: The frequency of answer errors increases as answer time is bigger.";
const JUDGE: &str = "Judge: Is this answer a mistake?";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt type {prompt_type} needs field `{field}`")]
    MissingField {
        prompt_type: PromptType,
        field: &'static str,
    },
    #[error("history variants need at least one earlier question")]
    EmptyHistory,
    #[error("expected {CONTEXT_SIZE} context examples, got {0}")]
    ContextCount(usize),
    #[error("the judged answer must be yes or no, got {0}")]
    NotYesNo(&'static str),
    #[error("turn value {0} is outside (0, 1]")]
    InvalidTurn(f64),
    #[error("unknown prompt type {0:?}")]
    UnknownType(String),
    #[error("not enough context examples for {prompt_type}: need {CONTEXT_SIZE}, have {available}")]
    ContextPool { prompt_type: PromptType, available: usize },
    #[error("request {0} has no gold label")]
    Unlabeled(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Normal,
    QTypeHint,
    TimeHint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptType {
    pub kind: PromptKind,
    pub history: bool,
}

impl PromptType {
    pub const ALL: [PromptType; 6] = [
        PromptType::new(PromptKind::Normal, false),
        PromptType::new(PromptKind::QTypeHint, false),
        PromptType::new(PromptKind::TimeHint, false),
        PromptType::new(PromptKind::Normal, true),
        PromptType::new(PromptKind::QTypeHint, true),
        PromptType::new(PromptKind::TimeHint, true),
    ];

    pub const fn new(kind: PromptKind, history: bool) -> Self {
        PromptType { kind, history }
    }

    fn kind_key(self) -> &'static str {
        match self.kind {
            PromptKind::Normal => "normal",
            PromptKind::QTypeHint => "qtype-hint",
            PromptKind::TimeHint => "time-hint",
        }
    }
}

impl fmt::Display for PromptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind_key())?;
        if self.history {
            f.write_str("+history")?;
        }
        Ok(())
    }
}

impl FromStr for PromptType {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptType::ALL
            .into_iter()
            .find(|t| t.to_string() == s.trim())
            .ok_or_else(|| PromptError::UnknownType(s.to_string()))
    }
}

impl TryFrom<String> for PromptType {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PromptType> for String {
    fn from(t: PromptType) -> Self {
        t.to_string()
    }
}

/// Where the external runner draws the target box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub bbox: BBox,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub question: String,
    pub answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub id: String,
    pub image_ref: String,
    pub overlay: Overlay,
    pub category: String,
    pub history: Vec<HistoryTurn>,
    pub question: String,
    pub answer: Answer,
    pub qtype: Option<QuestionType>,
    /// Normalized turn in (0, 1].
    pub turn: Option<f64>,
    /// Gold judgment: `true` when the answer is a mistake.
    pub judgment: Option<bool>,
}

fn answer_text(a: Answer) -> &'static str {
    match a {
        Answer::Yes => "yes",
        Answer::No => "no",
        Answer::NA => "n/a",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Up to three decimals with trailing zeros removed: `0.5`, `0.667`, `1`.
pub fn format_turn(value: f64) -> String {
    let s = format!("{value:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn render(ex: &PromptExample, ty: PromptType, filled: bool) -> Result<String, PromptError> {
    if !ex.answer.is_yes_no() {
        return Err(PromptError::NotYesNo(ex.answer.as_str()));
    }
    let mut lines = vec![
        "<BOS> <image>".to_string(),
        format!(
            "The target object: {{position: a {OVERLAY_COLOR} rectangle, name: {}}},",
            ex.category
        ),
    ];
    if ty.history {
        if ex.history.is_empty() {
            return Err(PromptError::EmptyHistory);
        }
        let turns: Vec<String> = ex
            .history
            .iter()
            .map(|h| format!("{{question: {}, answer: {}}}", h.question.trim(), answer_text(h.answer)))
            .collect();
        lines.push(format!("Dialogue history: [{}],", turns.join(", ")));
    }
    let question = ex.question.trim();
    match ty.kind {
        PromptKind::TimeHint => {
            let turn = ex.turn.ok_or(PromptError::MissingField {
                prompt_type: ty,
                field: "turn",
            })?;
            if !(turn > 0.0 && turn <= 1.0) {
                return Err(PromptError::InvalidTurn(turn));
            }
            lines.push(format!(
                "Question at {} progression of dialogue: {question},",
                format_turn(turn)
            ));
        }
        _ => lines.push(format!("Question: {question},")),
    }
    lines.push(format!("Answer: {},", answer_text(ex.answer)));
    match ty.kind {
        PromptKind::QTypeHint => {
            let qtype = ex.qtype.ok_or(PromptError::MissingField {
                prompt_type: ty,
                field: "qtype",
            })?;
            lines.push(format!("This question type: <{}>", qtype.key()));
            lines.push(QTYPE_HINT.to_string());
        }
        PromptKind::TimeHint => lines.push(TIME_HINT.to_string()),
        PromptKind::Normal => {}
    }
    lines.push(JUDGE.to_string());
    if filled {
        let judgment = ex.judgment.ok_or(PromptError::MissingField {
            prompt_type: ty,
            field: "judgment",
        })?;
        lines.push(format!("Output: {}.<EOC>", yes_no(judgment)));
    } else {
        lines.push("Output:".to_string());
    }
    Ok(lines.join("\n"))
}

/// Renders one prompt. The output slot is filled when the example carries a
/// gold judgment and left empty otherwise.
pub fn build_prompt(ex: &PromptExample, ty: PromptType) -> Result<String, PromptError> {
    render(ex, ty, ex.judgment.is_some())
}

/// Eight completed context prompts followed by the query with an empty
/// output slot.
pub fn assemble_fewshot(
    context: &[PromptExample],
    query: &PromptExample,
    ty: PromptType,
) -> Result<String, PromptError> {
    if context.len() != CONTEXT_SIZE {
        return Err(PromptError::ContextCount(context.len()));
    }
    let mut parts = context
        .iter()
        .map(|c| render(c, ty, true))
        .collect::<Result<Vec<_>, _>>()?;
    parts.push(render(query, ty, false)?);
    Ok(parts.join("\n"))
}

/// One prompt example per labeled QA pair of `games`; earlier turns form the
/// history.
pub fn prompt_examples_from_games(games: &[GameRecord], table: &KeywordTable) -> Vec<PromptExample> {
    let mut out = Vec::new();
    for g in games {
        let Some(target) = g.target() else {
            log::warn!("game {} has no target, skipped", g.game_id);
            continue;
        };
        let total = g.total_turns();
        for (i, qa) in g.qas.iter().enumerate() {
            let Some(label) = qa.mistake_label else { continue };
            if !qa.answer.is_yes_no() {
                continue;
            }
            out.push(PromptExample {
                id: format!("{}#{}", g.game_id, i + 1),
                image_ref: g.image.image_id.clone(),
                overlay: Overlay {
                    bbox: target.bbox,
                    color: OVERLAY_COLOR.into(),
                },
                category: target.category_name.clone(),
                history: g.qas[..i]
                    .iter()
                    .map(|h| HistoryTurn {
                        question: h.question.clone(),
                        answer: h.answer,
                    })
                    .collect(),
                question: qa.question.clone(),
                answer: qa.answer,
                qtype: Some(table.classify(&qa.question)),
                turn: Some((i + 1) as f64 / total as f64),
                judgment: Some(label),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub id: String,
    pub prompt: String,
    pub image_ref: String,
    /// Images of the context prompts, in prompt order.
    pub context_image_refs: Vec<String>,
    pub overlay: Overlay,
    pub prompt_type: PromptType,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub id: String,
    pub text: String,
}

/// Builds one request per `(query, prompt type)`. Contexts are drawn without
/// replacement from `pool` with a per-request seed; history variants draw
/// only from examples that have history, and skip queries without it.
pub fn build_requests(
    queries: &[PromptExample],
    pool: &[PromptExample],
    types: &[PromptType],
    seed: u64,
) -> Result<Vec<VlmRequest>, PromptError> {
    let mut out = Vec::new();
    for (ti, &ty) in types.iter().enumerate() {
        let candidates: Vec<&PromptExample> = pool
            .iter()
            .filter(|e| e.judgment.is_some() && (!ty.history || !e.history.is_empty()))
            .collect();
        if candidates.len() < CONTEXT_SIZE {
            return Err(PromptError::ContextPool {
                prompt_type: ty,
                available: candidates.len(),
            });
        }
        let mut skipped = 0;
        for (qi, q) in queries.iter().enumerate() {
            if ty.history && q.history.is_empty() {
                skipped += 1;
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((ti as u64) << 32) | qi as u64);
            let context: Vec<PromptExample> = candidates
                .iter()
                .filter(|c| c.id != q.id)
                .copied()
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, CONTEXT_SIZE)
                .map(|c| (*c).clone())
                .collect();
            if context.len() < CONTEXT_SIZE {
                return Err(PromptError::ContextPool {
                    prompt_type: ty,
                    available: context.len(),
                });
            }
            out.push(VlmRequest {
                id: format!("{}/{ty}", q.id),
                prompt: assemble_fewshot(&context, q, ty)?,
                image_ref: q.image_ref.clone(),
                context_image_refs: context.iter().map(|c| c.image_ref.clone()).collect(),
                overlay: q.overlay.clone(),
                prompt_type: ty,
                label: q.judgment,
            });
        }
        if skipped > 0 {
            log::info!("{ty}: skipped {skipped} first-turn queries without history");
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VlmJudgment {
    Mistake,
    NotMistake,
    Unparseable,
}

impl VlmJudgment {
    /// Prediction used for scoring; unparseable replies count as "not a mistake".
    pub fn as_prediction(self) -> bool {
        self == VlmJudgment::Mistake
    }
}

const PHRASES: [(&[&str], VlmJudgment); 4] = [
    (&["not", "a", "mistake"], VlmJudgment::NotMistake),
    (&["mistake"], VlmJudgment::Mistake),
    (&["yes"], VlmJudgment::Mistake),
    (&["no"], VlmJudgment::NotMistake),
];

/// Scans the first line of a reply for the leftmost judgment phrase,
/// preferring the longest phrase at a position.
pub fn parse_vlm_output(text: &str) -> VlmJudgment {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let lower = first.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    for start in 0..words.len() {
        for (phrase, judgment) in PHRASES {
            if words[start..].starts_with(phrase) {
                return judgment;
            }
        }
    }
    VlmJudgment::Unparseable
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmCellStats {
    pub requests: usize,
    pub responses: usize,
    pub unparseable: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmReport {
    pub grid: Grid,
    pub cells: BTreeMap<String, VlmCellStats>,
    pub missing_responses: Vec<String>,
    pub unknown_responses: Vec<String>,
    /// Fraction of requests that received a response.
    pub coverage: f64,
    pub zero_coverage: bool,
}

impl VlmReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

const VLM_ROWS: [&str; 3] = ["normal", "qtype-hint", "time-hint"];
const VLM_COLUMNS: [&str; 2] = ["without-history", "with-history"];

/// Scores replies against request labels in the prompt-type by history
/// grid. Requests without a reply are listed and left out of the metrics.
pub fn score_vlm_run(requests: &[VlmRequest], responses: &[VlmResponse]) -> Result<VlmReport, PromptError> {
    let mut by_id: HashMap<&str, &VlmResponse> = HashMap::new();
    for r in responses {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(PromptError::DuplicateId(r.id.clone()));
        }
    }
    let mut cells: BTreeMap<String, VlmCellStats> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for req in requests {
        if !seen.insert(req.id.as_str()) {
            return Err(PromptError::DuplicateId(req.id.clone()));
        }
        let label = req.label.ok_or_else(|| PromptError::Unlabeled(req.id.clone()))?;
        let stats = cells.entry(req.prompt_type.to_string()).or_insert(VlmCellStats {
            requests: 0,
            responses: 0,
            unparseable: 0,
            confusion: Confusion::default(),
        });
        stats.requests += 1;
        let Some(resp) = by_id.get(req.id.as_str()) else {
            missing.push(req.id.clone());
            continue;
        };
        stats.responses += 1;
        let judgment = parse_vlm_output(&resp.text);
        if judgment == VlmJudgment::Unparseable {
            stats.unparseable += 1;
        }
        stats.confusion.record(judgment.as_prediction(), label);
    }
    let mut unknown: Vec<String> = responses
        .iter()
        .filter(|r| !seen.contains(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    unknown.sort();

    let mut grid = Grid {
        title: "vlm prompts (F-score)".into(),
        rows: VLM_ROWS.iter().map(|s| s.to_string()).collect(),
        columns: VLM_COLUMNS.iter().map(|s| s.to_string()).collect(),
        cells: Vec::new(),
    };
    for ty in PromptType::ALL {
        let metrics = cells
            .get(&ty.to_string())
            .filter(|s| s.responses > 0)
            .map(|s| s.confusion.metrics());
        grid.cells.push(Cell {
            row: ty.kind_key().into(),
            column: VLM_COLUMNS[usize::from(ty.history)].into(),
            metrics,
        });
    }
    let answered = requests.len() - missing.len();
    let coverage = if requests.is_empty() {
        0.0
    } else {
        answered as f64 / requests.len() as f64
    };
    Ok(VlmReport {
        grid,
        cells,
        missing_responses: missing,
        unknown_responses: unknown,
        coverage,
        zero_coverage: answered == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example(judgment: Option<bool>) -> PromptExample {
        PromptExample {
            id: "g1#3".into(),
            image_ref: "coco1".into(),
            overlay: Overlay {
                bbox: BBox::new(10.0, 20.0, 30.0, 40.0),
                color: OVERLAY_COLOR.into(),
            },
            category: "cat".into(),
            history: vec![
                HistoryTurn {
                    question: "is it an animal?".into(),
                    answer: Answer::Yes,
                },
                HistoryTurn {
                    question: "is it on the left?".into(),
                    answer: Answer::No,
                },
            ],
            question: "is it white?".into(),
            answer: Answer::Yes,
            qtype: Some(QuestionType::Color),
            turn: Some(0.5),
            judgment,
        }
    }

    #[test]
    fn turn_formatting() {
        assert_eq!(format_turn(0.5), "0.5");
        assert_eq!(format_turn(2.0 / 3.0), "0.667");
        assert_eq!(format_turn(1.0), "1");
        assert_eq!(format_turn(0.25), "0.25");
        assert_eq!(format_turn(0.1), "0.1");
    }

    #[test]
    fn time_hint_line() {
        let p = build_prompt(&example(Some(false)), PromptType::new(PromptKind::TimeHint, false)).unwrap();
        assert!(p.contains("Question at 0.5 progression of dialogue: is it white?,"));
    }

    #[test]
    fn missing_fields() {
        let mut ex = example(Some(true));
        ex.history.clear();
        assert_eq!(
            build_prompt(&ex, PromptType::new(PromptKind::Normal, true)),
            Err(PromptError::EmptyHistory)
        );
        ex.turn = None;
        assert!(matches!(
            build_prompt(&ex, PromptType::new(PromptKind::TimeHint, false)),
            Err(PromptError::MissingField { field: "turn", .. })
        ));
        ex.qtype = None;
        assert!(matches!(
            build_prompt(&ex, PromptType::new(PromptKind::QTypeHint, false)),
            Err(PromptError::MissingField { field: "qtype", .. })
        ));
        ex.answer = Answer::NA;
        assert!(build_prompt(&ex, PromptType::new(PromptKind::Normal, false)).is_err());
    }

    #[test]
    fn six_variants_are_distinct() {
        let ex = example(Some(true));
        let mut rendered: Vec<String> = PromptType::ALL.iter().map(|&t| build_prompt(&ex, t).unwrap()).collect();
        rendered.sort();
        rendered.dedup();
        assert_eq!(rendered.len(), 6);
    }

    #[test]
    fn query_has_empty_output() {
        let p = build_prompt(&example(None), PromptType::ALL[0]).unwrap();
        assert!(p.ends_with("\nOutput:"));
        assert!(!p.contains("<EOC>"));
    }

    #[test]
    fn fewshot_counts() {
        let ctx: Vec<PromptExample> = (0..8).map(|i| example(Some(i % 3 == 0))).collect();
        for ty in PromptType::ALL {
            let s = assemble_fewshot(&ctx, &example(Some(true)), ty).unwrap();
            assert_eq!(s.matches("<image>").count(), 9);
            assert_eq!(s.matches("<EOC>").count(), 8);
            assert!(s.ends_with("Output:"));
        }
        assert_eq!(
            assemble_fewshot(&ctx[..7], &example(None), PromptType::ALL[0]),
            Err(PromptError::ContextCount(7))
        );
        let mut bad = ctx.clone();
        bad[3].judgment = None;
        assert!(assemble_fewshot(&bad, &example(None), PromptType::ALL[0]).is_err());
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_vlm_output("Yes."), VlmJudgment::Mistake);
        assert_eq!(parse_vlm_output("not a mistake"), VlmJudgment::NotMistake);
        assert_eq!(parse_vlm_output("This is NOT a mistake."), VlmJudgment::NotMistake);
        assert_eq!(parse_vlm_output("It is a mistake"), VlmJudgment::Mistake);
        assert_eq!(parse_vlm_output("no"), VlmJudgment::NotMistake);
        assert_eq!(parse_vlm_output("maybe"), VlmJudgment::Unparseable);
        assert_eq!(parse_vlm_output(""), VlmJudgment::Unparseable);
        assert_eq!(parse_vlm_output("nothing\nyes"), VlmJudgment::Unparseable);
        assert_eq!(parse_vlm_output("\n  yes, it is"), VlmJudgment::Mistake);
        assert_eq!(parse_vlm_output("Noted"), VlmJudgment::Unparseable);
    }

    #[test]
    fn prompt_type_keys() {
        for t in PromptType::ALL {
            assert_eq!(t.to_string().parse::<PromptType>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<PromptType>(&json).unwrap(), t);
        }
        assert!("weird".parse::<PromptType>().is_err());
    }

    fn request(id: &str, ty: PromptType, label: bool) -> VlmRequest {
        VlmRequest {
            id: id.into(),
            prompt: String::new(),
            image_ref: "i".into(),
            context_image_refs: vec![],
            overlay: example(None).overlay,
            prompt_type: ty,
            label: Some(label),
        }
    }

    #[test]
    fn scoring() {
        let reqs: Vec<VlmRequest> = PromptType::ALL
            .iter()
            .flat_map(|&t| {
                [
                    request(&format!("a/{t}"), t, true),
                    request(&format!("b/{t}"), t, false),
                ]
            })
            .collect();
        let perfect: Vec<VlmResponse> = reqs
            .iter()
            .map(|r| VlmResponse {
                id: r.id.clone(),
                text: if r.label == Some(true) { "Yes." } else { "No." }.into(),
            })
            .collect();
        let report = score_vlm_run(&reqs, &perfect).unwrap();
        assert!(report.grid.is_complete());
        assert!(report.grid.cells.iter().all(|c| c.metrics.unwrap().f_score == 1.0));
        assert_eq!(report.coverage, 1.0);

        let empty = score_vlm_run(&reqs, &[]).unwrap();
        assert!(empty.zero_coverage);
        assert_eq!(empty.missing_responses.len(), reqs.len());
        assert!(empty.grid.cells.iter().all(|c| c.metrics.is_none()));

        let garbled = vec![VlmResponse {
            id: reqs[0].id.clone(),
            text: "hmm".into(),
        }];
        let r = score_vlm_run(&reqs, &garbled).unwrap();
        let stats = &r.cells[&PromptType::ALL[0].to_string()];
        assert_eq!((stats.unparseable, stats.confusion.fn_), (1, 1));
    }
}
