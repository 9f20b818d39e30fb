//! Answer-mistake detectors.
//!
//! All three architectures share one forward pass:
//!
//! ```text
//! q_mean = MLP_m([image; crop; spatial; lstm(question) (; extra)])
//! p      = sigmoid(MLP_c([q_mean; answer_embedding]))
//! ```
//!
//! where `extra` is absent for [`Architecture::Baseline`], a question-type
//! embedding for [`Architecture::QuestionType`] and a tanh projection of the
//! normalized turn for [`Architecture::QaTurn`]. The target's category name
//! is never an input.

mod check;
mod features;
mod train;
mod vocab;

pub use check::{random_gradient_check, GRADCHECK_STEP};
pub use features::{pseudo_feature, spatial_features, FeatureStore, SpatialFeatures};
pub use train::{
    evaluate, examples_from_games, finetune_kfold, finetune_stage, oversample, pretrain, pretrain_stage,
    run_experiment, train_epochs, EpochRecord, Example, ExperimentData, FinetuneData, FoldOutcome, KFoldOutcome,
    OversampleMode, PretrainOutcome, PretrainStage, Schedule, StagedModel, TrainConfig, TrainOutcome, STAGE_FORMAT,
    STAGE_VERSION,
};
pub use vocab::{Vocabulary, UNKNOWN_TOKEN};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Answer, CorpusError};
use crate::nn::{Embedding, Graph, Linear, LstmCell, Mlp, NnError, NodeId, ParamRecord, ParamStore};
use crate::qtype::QuestionType;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "hmd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("image has degenerate size {width}x{height}")]
    DegenerateImage { width: f64, height: f64 },
    #[error("feature vector {key} has length {got}, expected {expected}")]
    FeatureDim { key: String, expected: usize, got: usize },
    #[error("feature file line {line}: {message}")]
    FeatureFile { line: usize, message: String },
    #[error("missing feature vectors for keys: {}", .0.join(", "))]
    MissingFeatures(Vec<String>),
    #[error("{architecture} model cannot take input {extra}")]
    ExtraMismatch {
        architecture: Architecture,
        extra: &'static str,
    },
    #[error("question has no tokens")]
    EmptyQuestion,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("game {0} has no target object")]
    NoTarget(String),
    #[error("no samples in category {0}")]
    EmptyCategory(String),
    #[error("{0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Baseline,
    QaTurn,
    QuestionType,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Baseline, Architecture::QaTurn, Architecture::QuestionType];

    pub fn key(self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::QaTurn => "qa-turn",
            Architecture::QuestionType => "question-type",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Architecture {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.key() == s.trim().to_lowercase().replace('_', "-"))
            .ok_or_else(|| DetectorError::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Length of the whole-image and crop feature vectors.
    pub visual_dim: usize,
    pub word_emb_dim: usize,
    pub lstm_hidden_dim: usize,
    pub answer_emb_dim: usize,
    pub qtype_emb_dim: usize,
    pub turn_emb_dim: usize,
    pub mlp_m_hidden: Vec<usize>,
    pub q_mean_dim: usize,
    pub mlp_c_hidden: Vec<usize>,
    pub threshold: f64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, visual_dim: usize) -> Self {
        ModelConfig {
            architecture,
            visual_dim,
            word_emb_dim: 64,
            lstm_hidden_dim: 128,
            answer_emb_dim: 16,
            qtype_emb_dim: 8,
            turn_emb_dim: 8,
            mlp_m_hidden: vec![256],
            q_mean_dim: 128,
            mlp_c_hidden: vec![64],
            threshold: 0.5,
        }
    }

    /// Every width at most 8; used by gradient checks and fast tests.
    pub fn tiny(architecture: Architecture, visual_dim: usize) -> Self {
        ModelConfig {
            architecture,
            visual_dim,
            word_emb_dim: 4,
            lstm_hidden_dim: 5,
            answer_emb_dim: 3,
            qtype_emb_dim: 3,
            turn_emb_dim: 3,
            mlp_m_hidden: vec![8],
            q_mean_dim: 6,
            mlp_c_hidden: vec![4],
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let dims = [
            ("visual_dim", self.visual_dim),
            ("word_emb_dim", self.word_emb_dim),
            ("lstm_hidden_dim", self.lstm_hidden_dim),
            ("answer_emb_dim", self.answer_emb_dim),
            ("qtype_emb_dim", self.qtype_emb_dim),
            ("turn_emb_dim", self.turn_emb_dim),
            ("q_mean_dim", self.q_mean_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(DetectorError::Config(format!("{name} must be at least 1")));
        }
        if self.mlp_m_hidden.iter().chain(&self.mlp_c_hidden).any(|&d| d == 0) {
            return Err(DetectorError::Config("hidden sizes must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DetectorError::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    fn extra_dim(&self) -> usize {
        match self.architecture {
            Architecture::Baseline => 0,
            Architecture::QaTurn => self.turn_emb_dim,
            Architecture::QuestionType => self.qtype_emb_dim,
        }
    }

    pub fn mlp_m_input_dim(&self) -> usize {
        2 * self.visual_dim + 8 + self.lstm_hidden_dim + self.extra_dim()
    }
}

/// The architecture-specific input on top of the shared ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtraInput {
    None,
    QuestionType(QuestionType),
    /// Normalized turn in (0, 1].
    Turn(f64),
}

impl ExtraInput {
    fn name(&self) -> &'static str {
        match self {
            ExtraInput::None => "no extra input",
            ExtraInput::QuestionType(_) => "a question type",
            ExtraInput::Turn(_) => "a QA turn",
        }
    }
}

/// Everything one forward pass consumes.
#[derive(Debug, Clone, Copy)]
pub struct DetectorInput<'a> {
    pub image: &'a [f64],
    pub crop: &'a [f64],
    pub spatial: SpatialFeatures,
    pub tokens: &'a [usize],
    pub answer: Answer,
    pub extra: ExtraInput,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    word_emb: Embedding,
    lstm: LstmCell,
    answer_emb: Embedding,
    qtype_emb: Option<Embedding>,
    turn_proj: Option<Linear>,
    mlp_m: Mlp,
    mlp_c: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    scalar: String,
    config: ModelConfig,
    vocab: Vocabulary,
    params: Vec<ParamRecord>,
}

impl<T: Scalar> DetectorModel<T> {
    /// Freshly initialized model; the same `(config, vocab, seed)` always
    /// gives the same parameters.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let word_emb = Embedding::new(&mut p, "word_emb", vocab.len(), c.word_emb_dim, &mut rng)?;
        let lstm = LstmCell::new(&mut p, "lstm", c.word_emb_dim, c.lstm_hidden_dim, &mut rng)?;
        let answer_emb = Embedding::new(&mut p, "answer_emb", 3, c.answer_emb_dim, &mut rng)?;
        let qtype_emb = match c.architecture {
            Architecture::QuestionType => Some(Embedding::new(
                &mut p,
                "qtype_emb",
                QuestionType::ALL.len(),
                c.qtype_emb_dim,
                &mut rng,
            )?),
            _ => None,
        };
        let turn_proj = match c.architecture {
            Architecture::QaTurn => Some(Linear::new(&mut p, "turn_proj", 1, c.turn_emb_dim, &mut rng)?),
            _ => None,
        };
        let mut m_sizes = vec![c.mlp_m_input_dim()];
        m_sizes.extend(&c.mlp_m_hidden);
        m_sizes.push(c.q_mean_dim);
        let mlp_m = Mlp::new(&mut p, "mlp_m", &m_sizes, true, &mut rng)?;
        let mut c_sizes = vec![c.q_mean_dim + c.answer_emb_dim];
        c_sizes.extend(&c.mlp_c_hidden);
        c_sizes.push(1);
        let mlp_c = Mlp::new(&mut p, "mlp_c", &c_sizes, false, &mut rng)?;

        Ok(DetectorModel {
            config,
            vocab,
            params: p,
            layers: Layers {
                word_emb,
                lstm,
                answer_emb,
                qtype_emb,
                turn_proj,
                mlp_m,
                mlp_c,
            },
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Final LSTM hidden state over `tokens`, starting from zeros.
    pub fn encode_question(&self, graph: &mut Graph<T>, tokens: &[usize]) -> Result<NodeId, DetectorError> {
        if tokens.is_empty() {
            return Err(DetectorError::EmptyQuestion);
        }
        let l = &self.layers;
        let (mut h, mut c) = l.lstm.zero_state(graph);
        for &tok in tokens {
            let x = l.word_emb.forward(graph, &self.params, tok)?;
            (h, c) = crate::nn::lstm_step(graph, &self.params, &l.lstm, x, h, c)?;
        }
        Ok(h)
    }

    fn vector(&self, graph: &mut Graph<T>, values: &[f64], key: &str) -> Result<NodeId, DetectorError> {
        if values.len() != self.config.visual_dim {
            return Err(DetectorError::FeatureDim {
                key: key.into(),
                expected: self.config.visual_dim,
                got: values.len(),
            });
        }
        Ok(graph.input(values.iter().map(|&v| T::from_real(v)).collect()))
    }

    /// Builds the forward pass on `graph` and returns the probability node.
    pub fn forward_graph(&self, graph: &mut Graph<T>, input: &DetectorInput<'_>) -> Result<NodeId, DetectorError> {
        let l = &self.layers;
        let p = &self.params;
        let extra = match (self.config.architecture, input.extra) {
            (Architecture::Baseline, ExtraInput::None) => None,
            (Architecture::QuestionType, ExtraInput::QuestionType(t)) => {
                let emb = l.qtype_emb.as_ref().expect("question-type model has a type embedding");
                Some(emb.forward(graph, p, t.index())?)
            }
            (Architecture::QaTurn, ExtraInput::Turn(turn)) => {
                let proj = l.turn_proj.as_ref().expect("qa-turn model has a turn projection");
                let x = graph.input(vec![T::from_real(turn)]);
                let y = proj.forward(graph, p, x)?;
                Some(graph.tanh(y))
            }
            (architecture, extra) => {
                return Err(DetectorError::ExtraMismatch {
                    architecture,
                    extra: extra.name(),
                })
            }
        };

        let image = self.vector(graph, input.image, "image")?;
        let crop = self.vector(graph, input.crop, "crop")?;
        let spatial = graph.input(input.spatial.0.iter().map(|&v| T::from_real(v)).collect());
        let question = self.encode_question(graph, input.tokens)?;
        let mut parts = vec![image, crop, spatial, question];
        parts.extend(extra);
        let joint = graph.concat(&parts);
        let q_mean = l.mlp_m.forward(graph, p, joint)?;

        let answer = l.answer_emb.forward(graph, p, input.answer.index())?;
        let judged = graph.concat(&[q_mean, answer]);
        let logit = l.mlp_c.forward(graph, p, judged)?;
        Ok(graph.sigmoid(logit))
    }

    /// Probability that the answer is a mistake.
    pub fn forward(&self, input: &DetectorInput<'_>) -> Result<T, DetectorError> {
        let mut graph = Graph::new();
        let out = self.forward_graph(&mut graph, input)?;
        Ok(graph.scalar(out))
    }

    pub fn save_json(&self) -> Result<String, DetectorError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.to_records(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    /// Restores a model written by [`DetectorModel::save_json`]. The scalar
    /// type may differ from the one the checkpoint was written with.
    pub fn load_json(text: &str) -> Result<Self, DetectorError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(DetectorError::Checkpoint(format!(
                "unexpected format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(DetectorError::Checkpoint(format!(
                "schema version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut model = DetectorModel::new(ckpt.config, ckpt.vocab, 0)?;
        model.params.load_records(&ckpt.params)?;
        Ok(model)
    }
}

/// 1 (mistake) iff `p > threshold`; a probability exactly at the threshold
/// counts as a correct answer.
pub fn classify<T: Scalar>(p: T, threshold: T) -> u8 {
    u8::from(p > threshold)
}
