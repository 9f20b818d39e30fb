//! Synthetic mistake corpus: Yes/No answers of successful dialogues are
//! flipped at random and the flipped turns are labeled as mistakes.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{GameRecord, GameStatus, ParseMode};

/// Suffix appended to the id of every synthetic game.
pub const SYNTH_SUFFIX: &str = "-synth";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("flip probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("game {0} is not a successful dialogue")]
    NotSuccess(String),
    #[error("game {0} has no Yes/No answer to flip")]
    NothingToFlip(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipPolicy {
    pub p_flip: f64,
    pub min_flips_per_game: usize,
    pub seed: u64,
}

impl Default for FlipPolicy {
    fn default() -> Self {
        FlipPolicy {
            p_flip: 0.15,
            min_flips_per_game: 0,
            seed: 0,
        }
    }
}

impl FlipPolicy {
    pub fn validate(&self) -> Result<(), SynthError> {
        if (0.0..=1.0).contains(&self.p_flip) {
            Ok(())
        } else {
            Err(SynthError::InvalidProbability(self.p_flip))
        }
    }

    /// Random stream for one game, keyed on `(seed, game_id)` so the output
    /// does not depend on input order.
    pub fn rng_for(&self, game_id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(game_id.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// Flips each Yes/No answer with probability `p_flip`, then tops up to
/// `min_flips_per_game` with uniformly chosen unflipped positions. Yes/No
/// answers are labeled `true` iff flipped; N/A answers are left unlabeled.
pub fn flip_answers<R: Rng + ?Sized>(
    game: &GameRecord,
    policy: &FlipPolicy,
    rng: &mut R,
) -> Result<GameRecord, SynthError> {
    policy.validate()?;
    if game.status != GameStatus::Success {
        return Err(SynthError::NotSuccess(game.game_id.clone()));
    }
    let candidates: Vec<usize> = game
        .qas
        .iter()
        .enumerate()
        .filter(|(_, qa)| qa.answer.is_yes_no())
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(SynthError::NothingToFlip(game.game_id.clone()));
    }

    let mut flip: Vec<bool> = candidates.iter().map(|_| rng.random_bool(policy.p_flip)).collect();
    let flipped = flip.iter().filter(|&&f| f).count();
    let floor = policy.min_flips_per_game.min(candidates.len());
    if flipped < floor {
        let unflipped: Vec<usize> = (0..flip.len()).filter(|&i| !flip[i]).collect();
        for pick in index::sample(rng, unflipped.len(), floor - flipped) {
            flip[unflipped[pick]] = true;
        }
    }

    let mut out = game.clone();
    for qa in &mut out.qas {
        qa.mistake_label = None;
    }
    for (&pos, &f) in candidates.iter().zip(&flip) {
        let qa = &mut out.qas[pos];
        if f {
            qa.answer = qa.answer.flipped();
        }
        qa.mistake_label = Some(f);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub games: Vec<GameRecord>,
    /// `(game_id, error)` for every skipped input game.
    pub skipped: Vec<(String, SynthError)>,
}

/// One synthetic game per input game, ids suffixed with [`SYNTH_SUFFIX`].
pub fn generate_synthetic(
    games: &[GameRecord],
    policy: &FlipPolicy,
    mode: ParseMode,
) -> Result<SyntheticCorpus, SynthError> {
    policy.validate()?;
    let results: Vec<_> = games
        .par_iter()
        .map(|g| {
            let mut rng = policy.rng_for(&g.game_id);
            flip_answers(g, policy, &mut rng).map(|mut out| {
                out.game_id.push_str(SYNTH_SUFFIX);
                out
            })
        })
        .collect();

    let mut corpus = SyntheticCorpus::default();
    for (game, result) in games.iter().zip(results) {
        match result {
            Ok(g) => corpus.games.push(g),
            Err(e) if mode == ParseMode::Strict => return Err(e),
            Err(e) => {
                log::warn!("skipping game {}: {e}", game.game_id);
                corpus.skipped.push((game.game_id.clone(), e));
            }
        }
    }
    Ok(corpus)
}
