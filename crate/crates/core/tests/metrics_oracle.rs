use hmd_core::eval::{confusion, f_score, precision, recall, Confusion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Straight from the definitions, with the zero-denominator convention.
fn oracle(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if tp > 0.0 {
        2.0 * tp / (2.0 * tp + fp + fn_)
    } else {
        0.0
    };
    (p, r, f)
}

#[test]
fn random_confusions_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let max = if i % 10 == 0 { 3 } else { 1000 };
        let c = Confusion {
            tp: rng.random_range(0..max),
            fp: rng.random_range(0..max),
            fn_: rng.random_range(0..max),
            tn: rng.random_range(0..max),
        };
        let (p, r, f) = oracle(c.tp as f64, c.fp as f64, c.fn_ as f64);
        assert!((precision(&c) - p).abs() <= 1e-12, "{c:?}");
        assert!((recall(&c) - r).abs() <= 1e-12, "{c:?}");
        assert!((f_score(&c) - f).abs() <= 1e-12, "{c:?}");
        if c.tp == 0 {
            assert_eq!(f_score(&c), 0.0);
        }
    }
}

#[test]
fn confusion_from_sequences_matches_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(0..50);
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let c = confusion(&preds, &labels).unwrap();
        let count = |p: u8, l: u8| preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == l).count() as u64;
        assert_eq!(
            c,
            Confusion {
                tp: count(1, 1),
                fp: count(1, 0),
                fn_: count(0, 1),
                tn: count(0, 0)
            }
        );
    }
}
