//! Generated corpora for tests and demonstrations.
//!
//! [`turn_fixture`] reproduces the turn statistics of the human mistake
//! set (365 failure dialogues, 431 mistakes, 231 of them in the final turn).
//! [`planted_signal`] builds a corpus whose labels are fully determined by one
//! dimension of the crop feature vectors, so a working training stack must
//! learn it.

use crate::corpus::{Answer, BBox, GameRecord, GameStatus, ImageInfo, ObjectRef, ParseMode, QAPair};
use crate::detector::{Architecture, DetectorError, FeatureStore, ModelConfig, TrainConfig};
use crate::prompts::{HistoryTurn, Overlay, PromptExample, OVERLAY_COLOR};
use crate::qtype::QuestionType;
use crate::synth::{generate_synthetic, FlipPolicy};

pub const FIXTURE_GAMES: usize = 365;
pub const FIXTURE_MISTAKES: u64 = 431;
pub const FIXTURE_LAST_TURN_MISTAKES: u64 = 231;

/// The turn fixture as shipped in the repository.
pub const TURN_FIXTURE_JSONL: &str = include_str!("../fixtures/turns.jsonl");

const QUESTIONS: [&str; 12] = [
    "is it on the left?",
    "is it red?",
    "is it a person?",
    "is it big?",
    "is it round?",
    "is it made of wood?",
    "is he holding something?",
    "is it an animal?",
    "is it a cup?",
    "is it in the back?",
    "is it white?",
    "is it the one near the window?",
];

fn answer_for(i: usize, t: usize) -> Answer {
    if (i + t).is_multiple_of(2) {
        Answer::Yes
    } else {
        Answer::No
    }
}

fn game_shell(
    game_id: String,
    status: GameStatus,
    image_id: String,
    target: String,
    turns: usize,
    i: usize,
) -> GameRecord {
    let w = 640.0;
    let h = 480.0;
    let x = (i % 7) as f64 * 40.0;
    let y = (i % 5) as f64 * 30.0;
    GameRecord {
        game_id,
        status,
        image: ImageInfo {
            image_id,
            width: w,
            height: h,
            feature_key: None,
        },
        objects: vec![
            ObjectRef {
                object_id: target.clone(),
                category_name: ["cat", "cup", "person", "chair"][i % 4].into(),
                bbox: BBox::new(x, y, 120.0 + (i % 3) as f64 * 20.0, 100.0),
            },
            ObjectRef {
                object_id: format!("{target}-other"),
                category_name: "table".into(),
                bbox: BBox::new(300.0, 200.0, 200.0, 150.0),
            },
        ],
        target_object_id: target,
        qas: (0..turns)
            .map(|t| QAPair::new(QUESTIONS[(i + t) % QUESTIONS.len()], answer_for(i, t)))
            .collect(),
    }
}

/// 365 labeled failure games with 431 mistakes, 231 of them in the last
/// turn. Games `0..231` have a final-turn mistake and games `165..365` one
/// earlier mistake, so every game holds at least one.
pub fn turn_fixture() -> Vec<GameRecord> {
    (0..FIXTURE_GAMES)
        .map(|i| {
            let turns = 3 + i % 6;
            let mut g = game_shell(
                format!("hm{i:03}"),
                GameStatus::Failure,
                format!("coco{:03}", i % 97),
                format!("t{i:03}"),
                turns,
                i,
            );
            let mid = i % (turns - 1);
            for (t, qa) in g.qas.iter_mut().enumerate() {
                let last = t + 1 == turns;
                let mistake = (last && i < 231) || (t == mid && i >= 165);
                qa.mistake_label = Some(mistake);
            }
            g
        })
        .collect()
}

/// JSON-lines text of [`turn_fixture`].
pub fn turn_fixture_jsonl() -> String {
    let mut buf = Vec::new();
    crate::corpus::write_games(&mut buf, &turn_fixture()).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub synthetic_games: usize,
    pub human_games: usize,
    pub turns: usize,
    pub feature_dim: usize,
    /// Crop-feature dimension carrying the signal.
    pub signal_dim: usize,
    /// Every n-th game is mistaken throughout.
    pub mistake_every: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            synthetic_games: 240,
            human_games: 160,
            turns: 4,
            feature_dim: 8,
            signal_dim: 0,
            mistake_every: 3,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub synthetic: Vec<GameRecord>,
    pub human: Vec<GameRecord>,
    pub features: FeatureStore,
}

/// A corpus where a game is either mistaken in every answer or in none, and
/// crop feature `signal_dim` is +1 for mistaken games and -1 otherwise.
///
/// Synthetic games come from the real flip generator (policy `p_flip = 1` or
/// `0`). Half of the human games reuse synthetic images, so both the
/// same-image and different-image sets are populated.
pub fn planted_signal(cfg: &PlantedConfig) -> Result<PlantedCorpus, DetectorError> {
    if cfg.signal_dim >= cfg.feature_dim || cfg.mistake_every == 0 || cfg.turns == 0 {
        return Err(DetectorError::Config("invalid planted-signal configuration".into()));
    }
    let n_images = cfg.synthetic_games.div_ceil(2).max(1);
    let source: Vec<GameRecord> = (0..cfg.synthetic_games)
        .map(|i| {
            game_shell(
                format!("ps{i:04}"),
                GameStatus::Success,
                format!("pimg{:04}", i % n_images),
                format!("ps{i:04}-t"),
                cfg.turns,
                i,
            )
        })
        .collect();
    let (flip, keep): (Vec<_>, Vec<_>) = source
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % cfg.mistake_every == 0);
    let strip = |v: Vec<(usize, GameRecord)>| v.into_iter().map(|(_, g)| g).collect::<Vec<_>>();
    let always = FlipPolicy {
        p_flip: 1.0,
        min_flips_per_game: 0,
        seed: cfg.seed,
    };
    let never = FlipPolicy { p_flip: 0.0, ..always };
    let synth_err = |e: crate::synth::SynthError| DetectorError::Data(e.to_string());
    let mut synthetic = generate_synthetic(&strip(flip), &always, ParseMode::Strict)
        .map_err(synth_err)?
        .games;
    synthetic.extend(
        generate_synthetic(&strip(keep), &never, ParseMode::Strict)
            .map_err(synth_err)?
            .games,
    );
    synthetic.sort_by(|a, b| a.game_id.cmp(&b.game_id));

    let human: Vec<GameRecord> = (0..cfg.human_games)
        .map(|i| {
            let image = if i % 2 == 0 {
                format!("pimg{:04}", (i / 2) % n_images)
            } else {
                format!("pnew{i:04}")
            };
            let mut g = game_shell(
                format!("ph{i:04}"),
                GameStatus::Failure,
                image,
                format!("ph{i:04}-t"),
                cfg.turns,
                i + 1,
            );
            let mistaken = i % cfg.mistake_every == 0;
            g.qas.iter_mut().for_each(|qa| qa.mistake_label = Some(mistaken));
            g
        })
        .collect();

    let all: Vec<GameRecord> = synthetic.iter().chain(&human).cloned().collect();
    let mut features = FeatureStore::pseudo_for_games(&all, cfg.feature_dim, cfg.seed);
    for g in &all {
        let mistaken = g.qas.iter().any(|q| q.mistake_label == Some(true));
        let v = features
            .get_mut(&g.crop_feature_key())
            .expect("pseudo features cover every game");
        v[cfg.signal_dim] = if mistaken { 1.0 } else { -1.0 };
    }
    Ok(PlantedCorpus {
        synthetic,
        human,
        features,
    })
}

/// Model size used with the planted-signal corpus: default widths scaled
/// down so a full experiment runs in seconds.
pub fn planted_model_config(architecture: Architecture, visual_dim: usize) -> ModelConfig {
    ModelConfig {
        word_emb_dim: 16,
        lstm_hidden_dim: 32,
        mlp_m_hidden: vec![64],
        q_mean_dim: 32,
        mlp_c_hidden: vec![16],
        ..ModelConfig::new(architecture, visual_dim)
    }
}

/// Default training settings (learning rates, epochs, folds) with minibatches
/// of 16, which the few hundred planted examples need to get enough updates.
pub fn planted_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

/// The example behind the shipped prompt goldens (`fixtures/prompts/`).
pub fn prompt_example(judgment: Option<bool>) -> PromptExample {
    PromptExample {
        id: "golden#3".into(),
        image_ref: "COCO_val2014_000000000042".into(),
        overlay: Overlay {
            bbox: BBox::new(212.0, 95.5, 140.0, 180.25),
            color: OVERLAY_COLOR.into(),
        },
        category: "donut".into(),
        history: vec![
            HistoryTurn {
                question: "Is it food?".into(),
                answer: Answer::Yes,
            },
            HistoryTurn {
                question: "Is it in the front?".into(),
                answer: Answer::No,
            },
        ],
        question: "Is it pink?".into(),
        answer: Answer::Yes,
        qtype: Some(QuestionType::Color),
        turn: Some(0.75),
        judgment,
    }
}

/// Eight completed context examples for the few-shot golden.
pub fn prompt_context() -> Vec<PromptExample> {
    let objects = ["vase", "cat", "person", "cup", "chair", "car", "dog", "bowl"];
    let questions = [
        "Is it on the left?",
        "Is it black?",
        "Is he walking?",
        "Is it small?",
        "Is it made of wood?",
        "Is it round?",
        "Is it an animal?",
        "Is it the one in the middle?",
    ];
    let types = [
        QuestionType::Spatial,
        QuestionType::Color,
        QuestionType::Action,
        QuestionType::Size,
        QuestionType::Texture,
        QuestionType::Shape,
        QuestionType::SuperCategory,
        QuestionType::Others,
    ];
    (0..8)
        .map(|i| PromptExample {
            id: format!("ctx{i}#2"),
            image_ref: format!("COCO_train2014_{:012}", 100 + i),
            overlay: Overlay {
                bbox: BBox::new(10.0 * i as f64, 5.0, 50.0, 60.0),
                color: OVERLAY_COLOR.into(),
            },
            category: objects[i].into(),
            history: vec![HistoryTurn {
                question: "Is it an object?".into(),
                answer: if i % 2 == 0 { Answer::Yes } else { Answer::No },
            }],
            question: questions[i].into(),
            answer: if i % 3 == 0 { Answer::No } else { Answer::Yes },
            qtype: Some(types[i]),
            turn: Some([0.5, 2.0 / 3.0, 1.0, 0.25][i % 4]),
            judgment: Some(i % 4 == 1),
        })
        .collect()
}

/// File name of the golden for a prompt type, e.g. `qtype-hint_history.txt`.
pub fn prompt_golden_name(ty: crate::prompts::PromptType) -> String {
    ty.to_string().replace('+', "_") + ".txt"
}
