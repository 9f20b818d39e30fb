use std::time::{Duration, Instant};

use hmd_core::corpus::Answer;
use hmd_core::detector::{
    Architecture, DetectorInput, DetectorModel, ExtraInput, ModelConfig, SpatialFeatures, Vocabulary,
};
use hmd_core::nn::{gradient_check, NnError};
use hmd_core::qtype::QuestionType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative gradient error of a randomly initialized tiny detector on
/// a random input.
pub fn detector_gradient_error(arch: Architecture, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=6);
    let vocab = Vocabulary::build(["is it the red cup on the left", "a small round one"]);
    let config = ModelConfig::tiny(arch, dim);
    let mut model = DetectorModel::<f64>::new(config, vocab.clone(), seed).unwrap();
    let image: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let crop: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut spatial = [0.0; 8];
    spatial.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let tokens: Vec<usize> = (0..rng.random_range(1..=4))
        .map(|_| rng.random_range(0..vocab.len()))
        .collect();
    let answer = [Answer::Yes, Answer::No][rng.random_range(0..2)];
    let extra = match arch {
        Architecture::Baseline => ExtraInput::None,
        Architecture::QaTurn => ExtraInput::Turn(rng.random_range(0.05..1.0)),
        Architecture::QuestionType => ExtraInput::QuestionType(QuestionType::ALL[rng.random_range(0..9)]),
    };
    let label = rng.random_bool(0.5);
    let frozen = model.clone();
    let report = gradient_check(&mut model.params, 1e-5, |g, params| {
        let mut view = frozen.clone();
        view.params = params.clone();
        let input = DetectorInput {
            image: &image,
            crop: &crop,
            spatial: SpatialFeatures(spatial),
            tokens: &tokens,
            answer,
            extra,
        };
        let p = view
            .forward_graph(g, &input)
            .map_err(|e| NnError::NonFinite(e.to_string()))?;
        g.bce(p, label)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_architecture_over_twenty_seeds() {
    let start = Instant::now();
    for arch in Architecture::ALL {
        for seed in 0..20 {
            let err = detector_gradient_error(arch, seed);
            assert!(err <= 1e-4, "{arch} seed {seed}: {err}");
        }
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}
