//! Training protocol: pretraining on synthetic dialogues, then oversampled
//! k-fold fine-tuning on human mistakes.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    classify, spatial_features, Architecture, DetectorError, DetectorInput, DetectorModel, ExtraInput, FeatureStore,
    ModelConfig, SpatialFeatures, Vocabulary,
};
use crate::corpus::{fraction_split, kfold_indices, split_same_different, Answer, GameRecord};
use crate::eval::{
    config_hash, slice_last_turn, Confusion, FoldRecord, Metrics, Prediction, RunRecord, REPORT_SCHEMA_VERSION,
};
use crate::nn::{bce_loss, Adam, AdamConfig, Graph};
use crate::qtype::{normalize_question, KeywordTable, QuestionType};
use crate::scalar::Scalar;

/// One labeled QA pair with everything the detectors read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub game_id: String,
    pub image_id: String,
    pub turn: usize,
    pub total: usize,
    pub image_key: String,
    pub crop_key: String,
    pub spatial: SpatialFeatures,
    pub tokens: Vec<String>,
    pub answer: Answer,
    pub qtype: QuestionType,
    pub label: bool,
}

impl Example {
    pub fn normalized_turn(&self) -> f64 {
        self.turn as f64 / self.total as f64
    }

    pub fn extra(&self, architecture: Architecture) -> ExtraInput {
        match architecture {
            Architecture::Baseline => ExtraInput::None,
            Architecture::QaTurn => ExtraInput::Turn(self.normalized_turn()),
            Architecture::QuestionType => ExtraInput::QuestionType(self.qtype),
        }
    }
}

/// Every labeled QA pair of `games`, in corpus order. Questions that
/// normalize to no tokens are skipped with a warning.
pub fn examples_from_games(games: &[GameRecord], table: &KeywordTable) -> Result<Vec<Example>, DetectorError> {
    let mut out = Vec::new();
    for g in games {
        let target = g.target().ok_or_else(|| DetectorError::NoTarget(g.game_id.clone()))?;
        let spatial = spatial_features(&target.bbox, &g.image)?;
        let total = g.total_turns();
        for (i, qa) in g.qas.iter().enumerate() {
            let Some(label) = qa.mistake_label else { continue };
            let tokens = normalize_question(&qa.question);
            if tokens.is_empty() {
                log::warn!("game {} turn {}: question has no tokens, skipped", g.game_id, i + 1);
                continue;
            }
            out.push(Example {
                game_id: g.game_id.clone(),
                image_id: g.image.image_id.clone(),
                turn: i + 1,
                total,
                image_key: g.image.feature_key().to_string(),
                crop_key: g.crop_feature_key(),
                spatial,
                qtype: crate::qtype::classify_tokens(&tokens, table),
                tokens,
                answer: qa.answer,
                label,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OversampleMode {
    None,
    ClassBalance,
    #[default]
    QTypeBalance,
}

impl std::fmt::Display for OversampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OversampleMode::None => "none",
            OversampleMode::ClassBalance => "class-balance",
            OversampleMode::QTypeBalance => "qtype-balance",
        })
    }
}

impl std::str::FromStr for OversampleMode {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "none" => Ok(OversampleMode::None),
            "class-balance" => Ok(OversampleMode::ClassBalance),
            "qtype-balance" => Ok(OversampleMode::QTypeBalance),
            _ => Err(DetectorError::Config(format!("unknown oversample mode {s:?}"))),
        }
    }
}

fn balance_by<K: Ord + std::fmt::Debug>(
    samples: &[Example],
    key: impl Fn(&Example) -> K,
    required: &[K],
    seed: u64,
) -> Result<Vec<Example>, DetectorError> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(key(s)).or_default().push(i);
    }
    if let Some(k) = required.iter().find(|k| !groups.contains_key(k)) {
        return Err(DetectorError::EmptyCategory(format!("{k:?}")));
    }
    let Some(max) = groups.values().map(Vec::len).max() else {
        return Err(DetectorError::EmptyCategory("any".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = samples.to_vec();
    for members in groups.values() {
        for _ in members.len()..max {
            let pick = members[rng.random_range(0..members.len())];
            out.push(samples[pick].clone());
        }
    }
    Ok(out)
}

/// Appends random duplicates (with replacement) until every category has as
/// many samples as the largest one. The originals come first, unchanged.
pub fn oversample(samples: &[Example], mode: OversampleMode, seed: u64) -> Result<Vec<Example>, DetectorError> {
    match mode {
        OversampleMode::None => Ok(samples.to_vec()),
        OversampleMode::ClassBalance => balance_by(samples, |s| s.label, &[false, true], seed),
        OversampleMode::QTypeBalance => balance_by(samples, |s| s.qtype, &[], seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub k: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Epochs without a better validation F before training stops.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub oversample: OversampleMode,
    /// Train and validation fractions of the synthetic corpus.
    pub pretrain_split: [f64; 2],
    /// Fraction of the same-image games held out for testing.
    pub same_image_test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_lr: 1e-4,
            finetune_lr: 1e-5,
            k: 4,
            pretrain_epochs: 5,
            finetune_epochs: 20,
            patience: 3,
            batch_size: 64,
            seed: 0,
            oversample: OversampleMode::QTypeBalance,
            pretrain_split: [0.70, 0.15],
            same_image_test_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if !(self.pretrain_lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        let [tr, va] = self.pretrain_split;
        if !(tr > 0.0 && va > 0.0 && tr + va <= 1.0 + 1e-9) {
            return bad(format!("invalid pretrain split {tr}/{va}"));
        }
        if !(self.same_image_test_fraction > 0.0 && self.same_image_test_fraction < 1.0) {
            return bad(format!("invalid test fraction {}", self.same_image_test_fraction));
        }
        Ok(())
    }
}

/// Optimization settings for one call of [`train_epochs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's minibatches, measured before each update.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

struct Prepared<'a> {
    ex: &'a Example,
    ids: Vec<usize>,
    image: &'a [f64],
    crop: &'a [f64],
}

impl Prepared<'_> {
    fn input(&self, architecture: Architecture) -> DetectorInput<'_> {
        DetectorInput {
            image: self.image,
            crop: self.crop,
            spatial: self.ex.spatial,
            tokens: &self.ids,
            answer: self.ex.answer,
            extra: self.ex.extra(architecture),
        }
    }
}

fn prepare<'a, T: Scalar>(
    model: &DetectorModel<T>,
    examples: &'a [Example],
    features: &'a FeatureStore,
) -> Result<Vec<Prepared<'a>>, DetectorError> {
    let mut missing: Vec<String> = examples
        .iter()
        .flat_map(|e| [&e.image_key, &e.crop_key])
        .filter(|k| features.get(k).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(DetectorError::MissingFeatures(missing));
    }
    examples
        .iter()
        .map(|ex| {
            if ex.tokens.is_empty() {
                return Err(DetectorError::EmptyQuestion);
            }
            Ok(Prepared {
                ex,
                ids: model.vocab.encode(&ex.tokens),
                image: features.lookup(&ex.image_key)?,
                crop: features.lookup(&ex.crop_key)?,
            })
        })
        .collect()
}

fn probabilities<T: Scalar>(model: &DetectorModel<T>, prepared: &[Prepared<'_>]) -> Result<Vec<f64>, DetectorError> {
    let arch = model.architecture();
    prepared
        .par_iter()
        .map(|p| model.forward(&p.input(arch)).map(|v| v.to_real()))
        .collect()
}

fn to_predictions(prepared: &[Prepared<'_>], probs: &[f64], threshold: f64) -> Vec<Prediction> {
    prepared
        .iter()
        .zip(probs)
        .map(|(p, &prob)| Prediction {
            game_id: p.ex.game_id.clone(),
            turn: p.ex.turn,
            total: p.ex.total,
            label: p.ex.label,
            probability: prob,
            predicted: classify(prob, threshold) == 1,
        })
        .collect()
}

/// Scores `examples` with a frozen model; evaluation fans out per example.
pub fn evaluate<T: Scalar>(
    model: &DetectorModel<T>,
    examples: &[Example],
    features: &FeatureStore,
) -> Result<Vec<Prediction>, DetectorError> {
    let prepared = prepare(model, examples, features)?;
    let probs = probabilities(model, &prepared)?;
    Ok(to_predictions(&prepared, &probs, model.config.threshold))
}

fn confusion_of(predictions: &[Prediction]) -> Confusion {
    slice_last_turn(predictions).overall()
}

/// Minibatch Adam on per-example BCE. After every epoch the model is scored
/// on `validation`; the parameters with the best validation F (lower
/// validation loss breaks ties) are restored at the end.
pub fn train_epochs<T: Scalar>(
    model: &mut DetectorModel<T>,
    train: &[Example],
    validation: &[Example],
    features: &FeatureStore,
    schedule: Schedule,
) -> Result<TrainOutcome, DetectorError> {
    let mut outcome = TrainOutcome::default();
    if schedule.epochs == 0 {
        return Ok(outcome);
    }
    if train.is_empty() || validation.is_empty() {
        return Err(DetectorError::Data(format!(
            "training needs examples in both splits (train {}, validation {})",
            train.len(),
            validation.len()
        )));
    }
    if schedule.batch_size == 0 || !(schedule.lr > 0.0) {
        return Err(DetectorError::Config(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let arch = model.architecture();
    let train_p = prepare(model, train, features)?;
    let val_p = prepare(model, validation, features)?;
    let mut adam = Adam::new(AdamConfig::with_lr(schedule.lr));
    let mut best: Option<(f64, f64, crate::nn::ParamStore<T>)> = None;
    let mut since_best = 0;

    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..train_p.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            for &i in batch {
                let p = &train_p[i];
                let mut graph = Graph::new();
                let prob = model.forward_graph(&mut graph, &p.input(arch))?;
                let loss = graph.bce(prob, p.ex.label)?;
                loss_sum += graph.scalar(loss).to_real();
                graph.backward(loss, &mut model.params)?;
            }
            model.params.scale_grad(T::one() / T::from_count(batch.len()));
            adam.step(&mut model.params);
        }

        let probs = probabilities(model, &val_p)?;
        let validation_loss = val_p
            .iter()
            .zip(&probs)
            .map(|(p, &q)| bce_loss(q, p.ex.label))
            .sum::<f64>()
            / val_p.len() as f64;
        let metrics = confusion_of(&to_predictions(&val_p, &probs, model.config.threshold)).metrics();
        log::info!(
            "epoch {}: train loss {:.5}, validation loss {:.5}, validation F {:.4}",
            epoch + 1,
            loss_sum / train_p.len() as f64,
            validation_loss,
            metrics.f_score
        );
        outcome.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_p.len() as f64,
            validation_loss,
            validation: metrics,
        });

        let improved = match &best {
            None => true,
            Some((f, l, _)) => metrics.f_score > *f || (metrics.f_score == *f && validation_loss < *l),
        };
        if improved {
            best = Some((metrics.f_score, validation_loss, model.params.clone()));
            outcome.best_epoch = Some(epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= schedule.patience.max(1) {
                outcome.stopped_early = epoch + 1 < schedule.epochs;
                break;
            }
        }
    }
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    Ok(outcome)
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub training: TrainOutcome,
    pub train_games: Vec<String>,
    pub validation_games: Vec<String>,
}

/// Trains on the first part of a shuffled split of `games` and keeps the
/// checkpoint that scores best on the second part.
pub fn pretrain<T: Scalar>(
    model: &mut DetectorModel<T>,
    games: &[GameRecord],
    features: &FeatureStore,
    table: &KeywordTable,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome, DetectorError> {
    cfg.validate()?;
    features.ensure_covers(games)?;
    let parts = fraction_split(games, &cfg.pretrain_split, cfg.seed)?;
    let ids = |gs: &[GameRecord]| gs.iter().map(|g| g.game_id.clone()).collect::<Vec<_>>();
    let train = examples_from_games(&parts[0], table)?;
    let validation = examples_from_games(&parts[1], table)?;
    log::info!(
        "pretraining {} on {} examples, validating on {}",
        model.architecture(),
        train.len(),
        validation.len()
    );
    let training = train_epochs(
        model,
        &train,
        &validation,
        features,
        Schedule {
            lr: cfg.pretrain_lr,
            epochs: cfg.pretrain_epochs,
            patience: cfg.patience,
            batch_size: cfg.batch_size,
            seed: derive_seed(cfg.seed, 0),
        },
    )?;
    Ok(PretrainOutcome {
        training,
        train_games: ids(&parts[0]),
        validation_games: ids(&parts[1]),
    })
}

/// Example sets consumed by [`finetune_kfold`].
#[derive(Debug, Clone, Copy)]
pub struct FinetuneData<'a> {
    /// Cross-validated pool (the non-test part of the same-image games).
    pub pool: &'a [Example],
    pub same_test: &'a [Example],
    pub different: &'a [Example],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Training size after oversampling.
    pub train_size: usize,
    pub validation_size: usize,
    pub single_class: bool,
    pub training: TrainOutcome,
    pub validation: Vec<Prediction>,
    pub same_image: Vec<Prediction>,
    pub different_image: Vec<Prediction>,
}

impl FoldOutcome {
    pub fn record(&self) -> FoldRecord {
        FoldRecord {
            fold: self.fold,
            single_class: self.single_class,
            validation: confusion_of(&self.validation),
            same_image: slice_last_turn(&self.same_image),
            different_image: slice_last_turn(&self.different_image),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KFoldOutcome<T> {
    pub folds: Vec<FoldOutcome>,
    pub models: Vec<DetectorModel<T>>,
}

impl<T> KFoldOutcome<T> {
    pub fn mean_validation(&self) -> Option<Metrics> {
        let m: Vec<Metrics> = self
            .folds
            .iter()
            .map(|f| confusion_of(&f.validation).metrics())
            .collect();
        Metrics::mean(&m)
    }
}

fn has_both_classes(examples: &[Example]) -> bool {
    examples.iter().any(|e| e.label) && examples.iter().any(|e| !e.label)
}

/// Trains one copy of `base` per fold on the other `k - 1` folds and scores
/// it on the held-out fold and on both test sets. Folds run in parallel.
pub fn finetune_kfold<T: Scalar>(
    base: &DetectorModel<T>,
    data: FinetuneData<'_>,
    features: &FeatureStore,
    cfg: &TrainConfig,
) -> Result<KFoldOutcome<T>, DetectorError> {
    cfg.validate()?;
    if !has_both_classes(data.pool) {
        return Err(DetectorError::Data(
            "fine-tuning pool needs both correct and mistaken answers".into(),
        ));
    }
    let folds = kfold_indices(data.pool.len(), cfg.k, cfg.seed)?;
    let results: Vec<(FoldOutcome, DetectorModel<T>)> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let held: HashSet<usize> = held.iter().copied().collect();
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (i, ex) in data.pool.iter().enumerate() {
                if held.contains(&i) {
                    val.push(ex.clone())
                } else {
                    train.push(ex.clone())
                }
            }
            let single_class = !has_both_classes(&train) || !has_both_classes(&val);
            if single_class {
                log::warn!("fold {}: a split holds a single class, fold metrics are flagged", f + 1);
            }
            let seed = derive_seed(cfg.seed, 100 + f as u64);
            let train = match oversample(&train, cfg.oversample, seed) {
                Ok(t) => t,
                Err(DetectorError::EmptyCategory(c)) => {
                    log::warn!("fold {}: cannot oversample, category {c} is empty", f + 1);
                    train
                }
                Err(e) => return Err(e),
            };
            let mut model = base.clone();
            let training = train_epochs(
                &mut model,
                &train,
                &val,
                features,
                Schedule {
                    lr: cfg.finetune_lr,
                    epochs: cfg.finetune_epochs,
                    patience: cfg.patience,
                    batch_size: cfg.batch_size,
                    seed,
                },
            )?;
            let outcome = FoldOutcome {
                fold: f,
                train_size: train.len(),
                validation_size: val.len(),
                single_class,
                training,
                validation: evaluate(&model, &val, features)?,
                same_image: evaluate(&model, data.same_test, features)?,
                different_image: evaluate(&model, data.different, features)?,
            };
            Ok((outcome, model))
        })
        .collect::<Result<_, DetectorError>>()?;
    let (folds, models) = results.into_iter().unzip();
    Ok(KFoldOutcome { folds, models })
}

/// Input corpora of a full experiment.
#[derive(Debug, Clone, Default)]
pub struct ExperimentData {
    /// Labeled synthetic dialogues used for pretraining.
    pub synthetic: Vec<GameRecord>,
    /// Human-labeled failure dialogues.
    pub human: Vec<GameRecord>,
}

/// One model leaving the pretraining stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedModel<T> {
    pub pretrained: bool,
    pub model: DetectorModel<T>,
    /// Pretraining split membership, empty when not pretrained.
    pub split_ids: BTreeMap<String, Vec<String>>,
}

/// Output of [`pretrain_stage`], consumed by [`finetune_stage`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStage<T> {
    pub model_config: ModelConfig,
    /// Images seen during pretraining; decides the same-image set.
    pub image_ids: BTreeSet<String>,
    pub models: Vec<StagedModel<T>>,
}

pub const STAGE_FORMAT: &str = "hmd-pretrain";
pub const STAGE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StageFile {
    format: String,
    version: u32,
    model_config: ModelConfig,
    image_ids: BTreeSet<String>,
    models: Vec<StagedFile>,
}

#[derive(Serialize, Deserialize)]
struct StagedFile {
    pretrained: bool,
    split_ids: BTreeMap<String, Vec<String>>,
    checkpoint: serde_json::Value,
}

impl<T: Scalar> PretrainStage<T> {
    /// JSON bundle holding every staged checkpoint.
    pub fn to_json(&self) -> Result<String, DetectorError> {
        let models = self
            .models
            .iter()
            .map(|m| {
                Ok(StagedFile {
                    pretrained: m.pretrained,
                    split_ids: m.split_ids.clone(),
                    checkpoint: serde_json::from_str(&m.model.save_json()?)?,
                })
            })
            .collect::<Result<_, DetectorError>>()?;
        let file = StageFile {
            format: STAGE_FORMAT.into(),
            version: STAGE_VERSION,
            model_config: self.model_config.clone(),
            image_ids: self.image_ids.clone(),
            models,
        };
        let mut s = serde_json::to_string(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let file: StageFile = serde_json::from_str(text)?;
        if file.format != STAGE_FORMAT {
            return Err(DetectorError::Checkpoint(format!(
                "unexpected format {:?}",
                file.format
            )));
        }
        if file.version != STAGE_VERSION {
            return Err(DetectorError::Checkpoint(format!(
                "pretrain bundle version {}, expected {STAGE_VERSION}",
                file.version
            )));
        }
        let models = file
            .models
            .into_iter()
            .map(|m| {
                Ok(StagedModel {
                    pretrained: m.pretrained,
                    split_ids: m.split_ids,
                    model: DetectorModel::load_json(&m.checkpoint.to_string())?,
                })
            })
            .collect::<Result<_, DetectorError>>()?;
        Ok(PretrainStage {
            model_config: file.model_config,
            image_ids: file.image_ids,
            models,
        })
    }
}

/// Pretrains every architecture on the synthetic corpus and adds an
/// untrained baseline with the same vocabulary and initialization seed.
pub fn pretrain_stage<T: Scalar>(
    synthetic: &[GameRecord],
    features: &FeatureStore,
    model_config: &ModelConfig,
    table: &KeywordTable,
    cfg: &TrainConfig,
) -> Result<PretrainStage<T>, DetectorError> {
    cfg.validate()?;
    model_config.validate()?;
    check_dim(model_config, features)?;
    features.ensure_covers(synthetic)?;
    let vocab = Vocabulary::build(synthetic.iter().flat_map(|g| g.qas.iter().map(|q| q.question.as_str())));

    let mut plan: Vec<(Architecture, bool)> = Architecture::ALL.iter().map(|&a| (a, true)).collect();
    plan.push((Architecture::Baseline, false));
    let mut models = Vec::with_capacity(plan.len());
    for (arch, pretrained) in plan {
        let mut config = model_config.clone();
        config.architecture = arch;
        let mut model = DetectorModel::<T>::new(config, vocab.clone(), cfg.seed)?;
        let mut split_ids = BTreeMap::new();
        if pretrained {
            let pre = pretrain(&mut model, synthetic, features, table, cfg)?;
            split_ids.insert("pretrain-train".to_string(), pre.train_games);
            split_ids.insert("pretrain-validation".to_string(), pre.validation_games);
        }
        models.push(StagedModel {
            pretrained,
            model,
            split_ids,
        });
    }
    Ok(PretrainStage {
        model_config: model_config.clone(),
        image_ids: synthetic.iter().map(|g| g.image.image_id.clone()).collect(),
        models,
    })
}

/// Cross-validates every staged model on the human corpus.
///
/// Human games whose image was seen in pretraining form the same-image set,
/// which is split into a cross-validation pool and a test part; the rest
/// form the different-image set.
pub fn finetune_stage<T: Scalar>(
    stage: &PretrainStage<T>,
    human: &[GameRecord],
    features: &FeatureStore,
    table: &KeywordTable,
    cfg: &TrainConfig,
) -> Result<Vec<RunRecord>, DetectorError> {
    cfg.validate()?;
    for m in &stage.models {
        check_dim(&m.model.config, features)?;
    }
    features.ensure_covers(human)?;

    let seen: HashSet<String> = stage.image_ids.iter().cloned().collect();
    let (same, different) = split_same_different(human.to_vec(), &seen);
    let test_fraction = cfg.same_image_test_fraction;
    let parts = fraction_split(&same, &[1.0 - test_fraction, test_fraction], derive_seed(cfg.seed, 1))?;
    let (pool_games, test_games) = (&parts[0], &parts[1]);
    log::info!(
        "same-image pool {} games, same-image test {}, different-image {}",
        pool_games.len(),
        test_games.len(),
        different.len()
    );
    let pool = examples_from_games(pool_games, table)?;
    let same_test = examples_from_games(test_games, table)?;
    let different_ex = examples_from_games(&different, table)?;
    let data = FinetuneData {
        pool: &pool,
        same_test: &same_test,
        different: &different_ex,
    };

    let ids = |gs: &[GameRecord]| gs.iter().map(|g| g.game_id.clone()).collect::<Vec<_>>();
    let hash = config_hash(&(&stage.model_config, cfg));
    let mut runs = Vec::with_capacity(stage.models.len());
    for staged in &stage.models {
        let arch = staged.model.architecture();
        let mut split_ids = staged.split_ids.clone();
        split_ids.insert("same-image-pool".to_string(), ids(pool_games));
        split_ids.insert("same-image-test".to_string(), ids(test_games));
        split_ids.insert("different-image".to_string(), ids(&different));
        log::info!("fine-tuning {arch} (pretrained: {})", staged.pretrained);
        let kfold = finetune_kfold(&staged.model, data, features, cfg)?;
        runs.push(RunRecord {
            schema_version: REPORT_SCHEMA_VERSION,
            model: arch.key().to_string(),
            pretrained: staged.pretrained,
            seed: cfg.seed,
            config_hash: hash.clone(),
            split_ids,
            folds: kfold.folds.iter().map(FoldOutcome::record).collect(),
        });
    }
    Ok(runs)
}

/// Runs [`pretrain_stage`] on the synthetic corpus followed by
/// [`finetune_stage`] on the human corpus.
pub fn run_experiment<T: Scalar>(
    data: &ExperimentData,
    features: &FeatureStore,
    model_config: &ModelConfig,
    table: &KeywordTable,
    cfg: &TrainConfig,
) -> Result<Vec<RunRecord>, DetectorError> {
    let stage = pretrain_stage::<T>(&data.synthetic, features, model_config, table, cfg)?;
    finetune_stage(&stage, &data.human, features, table, cfg)
}

fn check_dim(config: &ModelConfig, features: &FeatureStore) -> Result<(), DetectorError> {
    if config.visual_dim != features.dim() {
        return Err(DetectorError::Config(format!(
            "model expects {}-dim features, store has {}",
            config.visual_dim,
            features.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(label: bool, qtype: QuestionType, id: usize) -> Example {
        Example {
            game_id: format!("g{id}"),
            image_id: "img".into(),
            turn: 1,
            total: 2,
            image_key: "img".into(),
            crop_key: format!("img/{id}"),
            spatial: SpatialFeatures([0.0; 8]),
            tokens: vec!["is".into(), "it".into()],
            answer: Answer::Yes,
            qtype,
            label,
        }
    }

    fn is_sub_multiset(small: &[Example], big: &[Example]) -> bool {
        let key = |e: &Example| serde_json::to_string(e).unwrap();
        let mut counts: BTreeMap<String, i64> = BTreeMap::new();
        big.iter().for_each(|e| *counts.entry(key(e)).or_default() += 1);
        small.iter().all(|e| {
            let c = counts.entry(key(e)).or_default();
            *c -= 1;
            *c >= 0
        })
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let s = vec![ex(true, QuestionType::Color, 0), ex(false, QuestionType::Spatial, 1)];
        assert_eq!(oversample(&s, OversampleMode::ClassBalance, 3).unwrap(), s);
        assert_eq!(oversample(&s, OversampleMode::QTypeBalance, 3).unwrap(), s);
        assert_eq!(oversample(&s, OversampleMode::None, 3).unwrap(), s);
    }

    #[test]
    fn class_balance_counts() {
        let mut s: Vec<Example> = (0..2).map(|i| ex(true, QuestionType::Color, i)).collect();
        s.extend((2..8).map(|i| ex(false, QuestionType::Color, i)));
        let out = oversample(&s, OversampleMode::ClassBalance, 1).unwrap();
        assert_eq!(out.iter().filter(|e| e.label).count(), 6);
        assert_eq!(out.iter().filter(|e| !e.label).count(), 6);
        assert_eq!(&out[..8], &s[..]);
        assert!(out[8..].iter().all(|e| e.label));
        assert_eq!(out, oversample(&s, OversampleMode::ClassBalance, 1).unwrap());
    }

    #[test]
    fn qtype_balance_counts() {
        let mut s = Vec::new();
        let mut id = 0;
        for (t, n) in [
            (QuestionType::Color, 5),
            (QuestionType::Size, 3),
            (QuestionType::Action, 1),
        ] {
            for _ in 0..n {
                s.push(ex(id % 2 == 0, t, id));
                id += 1;
            }
        }
        let out = oversample(&s, OversampleMode::QTypeBalance, 2).unwrap();
        for t in [QuestionType::Color, QuestionType::Size, QuestionType::Action] {
            assert_eq!(out.iter().filter(|e| e.qtype == t).count(), 5);
        }
        assert!(is_sub_multiset(&s, &out));
    }

    #[test]
    fn missing_class_is_an_error() {
        let s: Vec<Example> = (0..3).map(|i| ex(false, QuestionType::Color, i)).collect();
        assert!(matches!(
            oversample(&s, OversampleMode::ClassBalance, 0),
            Err(DetectorError::EmptyCategory(_))
        ));
        assert!(oversample(&[], OversampleMode::QTypeBalance, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            k: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            finetune_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            "class_balance".parse::<OversampleMode>().unwrap(),
            OversampleMode::ClassBalance
        );
    }
}
