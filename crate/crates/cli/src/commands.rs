use std::path::{Path, PathBuf};

use serde::Serialize;

use hmd_core::corpus::{
    filter_by_target_size, read_games, write_games, GameRecord, GameStatus, ParseMode, DEFAULT_TAU,
};
use hmd_core::detector::{
    finetune_stage, pretrain_stage, random_gradient_check, Architecture, FeatureStore, ModelConfig, OversampleMode,
    PretrainStage, TrainConfig,
};
use hmd_core::eval::{assemble_report, RunRecord};
use hmd_core::fixtures::{planted_signal, turn_fixture_jsonl, PlantedConfig};
use hmd_core::prompts::{
    build_requests, prompt_examples_from_games, score_vlm_run, PromptType, VlmRequest, VlmResponse,
};
use hmd_core::qtype::{classify_question, KeywordTable, QuestionType};
use hmd_core::stats::{
    build_contingency, fisher_exact, fisher_mc, last_turn_counts, mistake_rate_by_type, mistake_turn_histogram,
    ContingencyTable, LastTurnCount, MistakeRateReport, MonteCarloFisher, TurnHistogram, DEFAULT_BINS,
    DEFAULT_REPLICATES,
};
use hmd_core::synth::{generate_synthetic, FlipPolicy};

use crate::config::{ConfigFile, Pair, Settings, Widths};
use crate::error::CliError;
use crate::output::Job;
use crate::{
    AnalyzeArgs, Cli, Command, EvalArgs, FilterArgs, FinetuneArgs, FixtureCommand, GradcheckArgs, IngestArgs,
    LabelTypesArgs, ModelArgs, PretrainArgs, PromptsBuildArgs, PromptsCommand, PromptsScoreArgs, PseudoFeaturesArgs,
    StatusFilter, SynthArgs, TrainArgs,
};

pub const ANALYSIS_SCHEMA_VERSION: u32 = 1;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const DEFAULT_P_FLIP: f64 = 0.15;
const DEFAULT_FEATURE_DIM: usize = 64;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut s = Settings::new(ConfigFile::load(cli.config.as_deref())?);
    let force = cli.force;
    match cli.command {
        Command::Ingest(a) => ingest(a, &mut s, force),
        Command::Filter(a) => filter(a, &mut s, force),
        Command::LabelTypes(a) => label_types(a, &mut s, force),
        Command::Analyze(a) => analyze(a, &mut s, force),
        Command::Synth(a) => synth(a, &mut s, force),
        Command::Pretrain(a) => pretrain(a, &mut s, force),
        Command::Finetune(a) => finetune(a, &mut s, force),
        Command::Eval(a) => eval(a, &mut s, force),
        Command::Prompts(PromptsCommand::Build(a)) => prompts_build(a, &mut s, force),
        Command::Prompts(PromptsCommand::Score(a)) => prompts_score(a, &mut s, force),
        Command::Gradcheck(a) => gradcheck(a, &mut s, force),
        Command::Fixture(FixtureCommand::Turns(a)) => {
            let mut job = Job::start("fixture turns", std::slice::from_ref(&a.output), force)?;
            job.write(&a.output, turn_fixture_jsonl().into_bytes());
            job.commit(&s).map(drop)
        }
        Command::Fixture(FixtureCommand::Planted(a)) => {
            let seed = s.seed(a.seed, PlantedConfig::default().seed)?;
            let outputs = [a.synthetic.clone(), a.human.clone(), a.features.clone()];
            let mut job = Job::start("fixture planted", &outputs, force)?;
            let corpus = planted_signal(&PlantedConfig {
                seed,
                ..PlantedConfig::default()
            })?;
            job.write(&a.synthetic, games_bytes(&corpus.synthetic)?);
            job.write(&a.human, games_bytes(&corpus.human)?);
            job.write(&a.features, features_bytes(&corpus.features)?);
            job.commit(&s).map(drop)
        }
        Command::Fixture(FixtureCommand::PseudoFeatures(a)) => pseudo_features(a, &mut s, force),
    }
}

fn games_bytes(games: &[GameRecord]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_games(&mut buf, games).map_err(|e| CliError::data("writing corpus", e))?;
    Ok(buf)
}

fn features_bytes(store: &FeatureStore) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    store.write(&mut buf)?;
    Ok(buf)
}

fn json_lines<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    buf
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut buf = serde_json::to_vec_pretty(value).expect("report serializes");
    buf.push(b'\n');
    buf
}

fn parse_json_lines<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("{}:{}", path.display(), i + 1), e)))
        .collect()
}

/// Hashes the corpus into the manifest and parses it.
fn load_games(job: &mut Job, path: &Path, mode: ParseMode) -> Result<Vec<GameRecord>, CliError> {
    job.read(path)?;
    let parsed = read_games(path, mode).map_err(|e| CliError::data(path.display(), e))?;
    for err in &parsed.skipped {
        log::warn!("{}: skipped {err}", path.display());
    }
    Ok(parsed.games)
}

fn load_features(job: &mut Job, path: &Path) -> Result<FeatureStore, CliError> {
    let bytes = job.read(path)?;
    FeatureStore::read(bytes.as_slice()).map_err(|e| CliError::data(path.display(), e))
}

fn load_keywords(job: &mut Job, s: &mut Settings, flag: Option<PathBuf>) -> Result<KeywordTable, CliError> {
    match s.optional_path("keywords", flag) {
        None => Ok(KeywordTable::default()),
        Some(p) => {
            let text = job.read_string(&p)?;
            KeywordTable::parse(&text).map_err(|e| CliError::data(p.display(), e))
        }
    }
}

fn ingest(a: IngestArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let strict = s.flag("strict", a.strict)?;
    let mut job = Job::start("ingest", std::slice::from_ref(&a.output), force)?;
    let mode = if strict { ParseMode::Strict } else { ParseMode::Skip };
    let games = load_games(&mut job, &a.input, mode)?;
    log::info!("ingested {} games", games.len());
    job.write(&a.output, games_bytes(&games)?);
    job.commit(s).map(drop)
}

fn filter(a: FilterArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let tau = s.value("tau", a.tau, DEFAULT_TAU)?;
    let status = s.value("status", a.status, StatusFilter::Any)?;
    let mut job = Job::start("filter", std::slice::from_ref(&a.output), force)?;
    let games = load_games(&mut job, &a.input, ParseMode::Strict)?;
    let wanted = match status {
        StatusFilter::Any => None,
        StatusFilter::Success => Some(GameStatus::Success),
        StatusFilter::Failure => Some(GameStatus::Failure),
        StatusFilter::Incomplete => Some(GameStatus::Incomplete),
    };
    let by_status: Vec<GameRecord> = games
        .into_iter()
        .filter(|g| wanted.is_none_or(|w| g.status == w))
        .collect();
    let kept = filter_by_target_size(&by_status, tau).map_err(|e| CliError::Usage(e.to_string()))?;
    log::info!("kept {} of {} games", kept.len(), by_status.len());
    job.write(&a.output, games_bytes(&kept)?);
    job.commit(s).map(drop)
}

#[derive(Serialize)]
struct TypedQuestion<'a> {
    game_id: &'a str,
    turn: usize,
    question: &'a str,
    qtype: QuestionType,
}

fn label_types(a: LabelTypesArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let mut job = Job::start("label-types", std::slice::from_ref(&a.output), force)?;
    let table = load_keywords(&mut job, s, a.keywords)?;
    let games = load_games(&mut job, &a.input, ParseMode::Strict)?;
    let rows: Vec<TypedQuestion> = games
        .iter()
        .flat_map(|g| {
            g.qas.iter().enumerate().map(|(i, qa)| TypedQuestion {
                game_id: &g.game_id,
                turn: i + 1,
                question: &qa.question,
                qtype: classify_question(&qa.question, &table),
            })
        })
        .collect();
    job.write(&a.output, json_lines(&rows));
    job.commit(s).map(drop)
}

#[derive(Serialize)]
struct AnalysisReport {
    schema_version: u32,
    games: usize,
    labeled_answers: usize,
    last_turn: LastTurnCount,
    /// `last_turn / mistakes` written as a ratio of integers.
    last_turn_ratio: String,
    last_turn_fraction: f64,
    histogram: TurnHistogram,
    rate_by_type: MistakeRateReport,
    contingency: ContingencyTable,
    fisher_exact: Option<f64>,
    fisher_exact_error: Option<String>,
    fisher_mc: MonteCarloFisher,
}

fn analyze(a: AnalyzeArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let bins = s.value("bins", a.bins, DEFAULT_BINS)?;
    let replicates = s.value("replicates", a.replicates, DEFAULT_REPLICATES)?;
    let seed = s.seed(a.seed, 0)?;
    let mut job = Job::start("analyze", std::slice::from_ref(&a.output), force)?;
    let table = load_keywords(&mut job, s, a.keywords)?;
    let games = load_games(&mut job, &a.input, ParseMode::Strict)?;
    let stats_err = |e: hmd_core::stats::StatsError| CliError::Data(e.to_string());
    let last_turn = last_turn_counts(&games).map_err(stats_err)?;
    let histogram = mistake_turn_histogram(&games, bins).map_err(|e| CliError::Usage(e.to_string()))?;
    let contingency = build_contingency(&games, &table);
    let (exact, exact_error) = match fisher_exact(&contingency) {
        Ok(p) => (Some(p), None),
        Err(e) => {
            log::warn!("exact Fisher test skipped: {e}");
            (None, Some(e.to_string()))
        }
    };
    let mc = fisher_mc(&contingency, replicates, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = AnalysisReport {
        schema_version: ANALYSIS_SCHEMA_VERSION,
        games: games.len(),
        labeled_answers: games
            .iter()
            .flat_map(|g| &g.qas)
            .filter(|q| q.mistake_label.is_some())
            .count(),
        last_turn_ratio: format!("{}/{}", last_turn.last_turn, last_turn.mistakes),
        last_turn_fraction: last_turn.fraction(),
        last_turn,
        histogram,
        rate_by_type: mistake_rate_by_type(&games, &table),
        contingency,
        fisher_exact: exact,
        fisher_exact_error: exact_error,
        fisher_mc: mc,
    };
    job.write(&a.output, pretty_json(&report));
    job.commit(s).map(drop)
}

fn synth(a: SynthArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let policy = FlipPolicy {
        p_flip: s.value("p-flip", a.p_flip, DEFAULT_P_FLIP)?,
        min_flips_per_game: s.value("min-flips", a.min_flips, 0)?,
        seed: s.seed(a.seed, 0)?,
    };
    policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut job = Job::start("synth", std::slice::from_ref(&a.output), force)?;
    let games = load_games(&mut job, &a.input, ParseMode::Strict)?;
    let out = generate_synthetic(&games, &policy, ParseMode::Skip).map_err(|e| CliError::data("synth", e))?;
    for (id, err) in &out.skipped {
        log::warn!("skipped {id}: {err}");
    }
    log::info!("wrote {} synthetic games", out.games.len());
    job.write(&a.output, games_bytes(&out.games)?);
    job.commit(s).map(drop)
}

fn model_config(m: &ModelArgs, s: &mut Settings, visual_dim: usize) -> Result<ModelConfig, CliError> {
    let d = ModelConfig::new(Architecture::Baseline, visual_dim);
    s.note("visual-dim", visual_dim);
    let config = ModelConfig {
        word_emb_dim: s.value("word-emb-dim", m.word_emb_dim, d.word_emb_dim)?,
        lstm_hidden_dim: s.value("lstm-hidden-dim", m.lstm_hidden_dim, d.lstm_hidden_dim)?,
        answer_emb_dim: s.value("answer-emb-dim", m.answer_emb_dim, d.answer_emb_dim)?,
        qtype_emb_dim: s.value("qtype-emb-dim", m.qtype_emb_dim, d.qtype_emb_dim)?,
        turn_emb_dim: s.value("turn-emb-dim", m.turn_emb_dim, d.turn_emb_dim)?,
        mlp_m_hidden: s
            .value("mlp-m-hidden", m.mlp_m_hidden.clone(), Widths(d.mlp_m_hidden.clone()))?
            .0,
        q_mean_dim: s.value("q-mean-dim", m.q_mean_dim, d.q_mean_dim)?,
        mlp_c_hidden: s
            .value("mlp-c-hidden", m.mlp_c_hidden.clone(), Widths(d.mlp_c_hidden.clone()))?
            .0,
        threshold: s.value("threshold", m.threshold, d.threshold)?,
        ..d
    };
    config.validate()?;
    Ok(config)
}

fn train_config(t: &TrainArgs, s: &mut Settings) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let oversample = s.value("oversample", t.oversample.clone(), d.oversample.to_string())?;
    let config = TrainConfig {
        pretrain_lr: s.value("pretrain-lr", t.pretrain_lr, d.pretrain_lr)?,
        finetune_lr: s.value("finetune-lr", t.finetune_lr, d.finetune_lr)?,
        k: s.value("k", t.k, d.k)?,
        pretrain_epochs: s.value("pretrain-epochs", t.pretrain_epochs, d.pretrain_epochs)?,
        finetune_epochs: s.value("finetune-epochs", t.finetune_epochs, d.finetune_epochs)?,
        patience: s.value("patience", t.patience, d.patience)?,
        batch_size: s.value("batch-size", t.batch_size, d.batch_size)?,
        seed: s.seed(t.seed, d.seed)?,
        oversample: oversample.parse::<OversampleMode>()?,
        pretrain_split: s.value("pretrain-split", t.pretrain_split, Pair(d.pretrain_split))?.0,
        same_image_test_fraction: s.value(
            "same-image-test-fraction",
            t.same_image_test_fraction,
            d.same_image_test_fraction,
        )?,
    };
    config.validate()?;
    Ok(config)
}

fn pretrain(a: PretrainArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let synthetic = s.path("synthetic", a.synthetic)?;
    let features_path = s.path("features", a.features)?;
    let cfg = train_config(&a.train, s)?;
    let mut job = Job::start("pretrain", std::slice::from_ref(&a.output), force)?;
    let features = load_features(&mut job, &features_path)?;
    let model = model_config(&a.model, s, features.dim())?;
    let table = load_keywords(&mut job, s, a.train.keywords.clone())?;
    let games = load_games(&mut job, &synthetic, ParseMode::Strict)?;
    let stage = pretrain_stage::<f64>(&games, &features, &model, &table, &cfg)?;
    job.write(&a.output, stage.to_json()?.into_bytes());
    job.commit(s).map(drop)
}

fn finetune(a: FinetuneArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let human = s.path("human", a.human)?;
    let features_path = s.path("features", a.features)?;
    s.note("pretrained", a.pretrained.display());
    let cfg = train_config(&a.train, s)?;
    let mut job = Job::start("finetune", std::slice::from_ref(&a.output), force)?;
    let stage = PretrainStage::<f64>::from_json(&job.read_string(&a.pretrained)?)
        .map_err(|e| CliError::data(a.pretrained.display(), e))?;
    let features = load_features(&mut job, &features_path)?;
    let table = load_keywords(&mut job, s, a.train.keywords.clone())?;
    let games = load_games(&mut job, &human, ParseMode::Strict)?;
    let runs = finetune_stage(&stage, &games, &features, &table, &cfg)?;
    job.write(&a.output, pretty_json(&runs));
    job.commit(s).map(drop)
}

fn eval(a: EvalArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    if a.runs.is_empty() {
        return Err(CliError::Usage("--runs is required".into()));
    }
    s.note("require-complete", a.require_complete);
    let mut outputs = vec![a.output.clone()];
    outputs.extend(a.text.clone());
    let mut job = Job::start("eval", &outputs, force)?;
    let mut runs: Vec<RunRecord> = Vec::new();
    for path in &a.runs {
        let text = job.read_string(path)?;
        let mut part: Vec<RunRecord> = serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))?;
        runs.append(&mut part);
    }
    let report = assemble_report(&runs).map_err(|e| CliError::Data(e.to_string()))?;
    job.write(&a.output, report.to_json().into_bytes());
    if let Some(text) = &a.text {
        job.write(text, report.render_text().into_bytes());
    }
    job.commit(s)?;
    if !report.is_complete() {
        let msg = format!("report has empty cells: {}", report.missing.join(", "));
        if a.require_complete {
            return Err(CliError::Verification(msg));
        }
        log::warn!("{msg}");
    }
    Ok(())
}

fn parse_types(spec: &str) -> Result<Vec<PromptType>, CliError> {
    if spec.trim() == "all" {
        return Ok(PromptType::ALL.to_vec());
    }
    spec.split(',')
        .map(|t| {
            t.trim()
                .parse::<PromptType>()
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn prompts_build(a: PromptsBuildArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let types = parse_types(&s.value("types", a.types, "all".to_string())?)?;
    let seed = s.seed(a.seed, 0)?;
    let mut job = Job::start("prompts build", std::slice::from_ref(&a.output), force)?;
    let table = load_keywords(&mut job, s, a.keywords)?;
    let queries = prompt_examples_from_games(&load_games(&mut job, &a.queries, ParseMode::Strict)?, &table);
    let pool = match &a.pool {
        Some(p) => prompt_examples_from_games(&load_games(&mut job, p, ParseMode::Strict)?, &table),
        None => queries.clone(),
    };
    let requests = build_requests(&queries, &pool, &types, seed).map_err(|e| CliError::Data(e.to_string()))?;
    log::info!("built {} requests", requests.len());
    job.write(&a.output, json_lines(&requests));
    job.commit(s).map(drop)
}

fn prompts_score(a: PromptsScoreArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let mut job = Job::start("prompts score", std::slice::from_ref(&a.output), force)?;
    let requests: Vec<VlmRequest> = parse_json_lines(&job.read_string(&a.requests)?, &a.requests)?;
    let responses: Vec<VlmResponse> = parse_json_lines(&job.read_string(&a.responses)?, &a.responses)?;
    let report = score_vlm_run(&requests, &responses).map_err(|e| CliError::Data(e.to_string()))?;
    job.write(&a.output, report.to_json().into_bytes());
    job.commit(s).map(drop)
}

#[derive(Serialize)]
struct GradcheckRow {
    architecture: Architecture,
    seed: u64,
    max_rel_error: f64,
    entries: usize,
}

fn gradcheck(a: GradcheckArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let seeds = s.value("seeds", a.seeds, 20)?;
    let first = s.seed(a.seed, 0)?;
    let mut job = match &a.output {
        Some(p) => Some(Job::start("gradcheck", std::slice::from_ref(p), force)?),
        None => None,
    };
    let mut rows = Vec::new();
    for arch in Architecture::ALL {
        for seed in first..first + seeds {
            let r = random_gradient_check(arch, seed)?;
            rows.push(GradcheckRow {
                architecture: arch,
                seed,
                max_rel_error: r.max_rel_error,
                entries: r.entries,
            });
        }
        let worst = rows
            .iter()
            .filter(|r| r.architecture == arch)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        println!("{arch}: max relative error {worst:.3e}");
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if let (Some(mut job), Some(path)) = (job.take(), &a.output) {
        job.write(path, json_lines(&rows));
        job.commit(s)?;
    }
    if worst > GRADCHECK_TOLERANCE {
        return Err(CliError::Verification(format!(
            "gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}

fn pseudo_features(a: PseudoFeaturesArgs, s: &mut Settings, force: bool) -> Result<(), CliError> {
    let dim = s.value("dim", a.dim, DEFAULT_FEATURE_DIM)?;
    let seed = s.seed(a.seed, 0)?;
    if dim == 0 {
        return Err(CliError::Usage("--dim must be positive".into()));
    }
    let mut job = Job::start("fixture pseudo-features", std::slice::from_ref(&a.output), force)?;
    let mut games = Vec::new();
    for p in &a.input {
        games.extend(load_games(&mut job, p, ParseMode::Strict)?);
    }
    let store = FeatureStore::pseudo_for_games(&games, dim, seed);
    job.write(&a.output, features_bytes(&store)?);
    job.commit(s).map(drop)
}
