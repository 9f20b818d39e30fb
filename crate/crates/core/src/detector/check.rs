use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Architecture, DetectorError, DetectorInput, DetectorModel, ExtraInput, ModelConfig, SpatialFeatures, Vocabulary,
};
use crate::corpus::Answer;
use crate::nn::{gradient_check, GradCheckReport, NnError};
use crate::qtype::QuestionType;

/// Finite-difference step used by [`random_gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Compares analytic and numeric gradients of the BCE loss for a tiny
/// randomly initialized detector on a random input drawn from `seed`.
pub fn random_gradient_check(arch: Architecture, seed: u64) -> Result<GradCheckReport, DetectorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x67726164);
    let dim = rng.random_range(2..=8);
    let vocab = Vocabulary::build(["is it the one on the left", "a red cup"]);
    let mut model = DetectorModel::<f64>::new(ModelConfig::tiny(arch, dim), vocab.clone(), seed)?;
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let image = draw(dim);
    let crop = draw(dim);
    let spatial: [f64; 8] = draw(8).try_into().expect("eight values");
    let tokens: Vec<usize> = (0..rng.random_range(1..=5))
        .map(|_| rng.random_range(0..vocab.len()))
        .collect();
    let answer = if rng.random_bool(0.5) { Answer::Yes } else { Answer::No };
    let extra = match arch {
        Architecture::Baseline => ExtraInput::None,
        Architecture::QaTurn => ExtraInput::Turn(rng.random_range(0.05..=1.0)),
        Architecture::QuestionType => ExtraInput::QuestionType(QuestionType::ALL[rng.random_range(0..9)]),
    };
    let label = rng.random_bool(0.5);
    let base = model.clone();
    let report = gradient_check(&mut model.params, GRADCHECK_STEP, |g, params| {
        let mut m = base.clone();
        m.params = params.clone();
        let input = DetectorInput {
            image: &image,
            crop: &crop,
            spatial: SpatialFeatures(spatial),
            tokens: &tokens,
            answer,
            extra,
        };
        let p = m
            .forward_graph(g, &input)
            .map_err(|e| NnError::NonFinite(e.to_string()))?;
        g.bce(p, label)
    })?;
    Ok(report)
}
