use std::path::PathBuf;

use hmd_core::corpus::{read_games, ParseMode};
use hmd_core::stats::{last_turn_counts, last_turn_fraction, mistake_turn_histogram};

fn shipped() -> Vec<hmd_core::corpus::GameRecord> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/turns.jsonl");
    let parsed = read_games(&path, ParseMode::Strict).unwrap();
    assert!(parsed.skipped.is_empty());
    parsed.games
}

#[test]
fn last_turn_fraction_is_exact() {
    let games = shipped();
    assert_eq!(games.len(), 365);
    let counts = last_turn_counts(&games).unwrap();
    assert_eq!((counts.last_turn, counts.mistakes), (231, 431));
    assert_eq!(last_turn_fraction(&games).unwrap(), 231.0 / 431.0);
}

#[test]
fn histogram_mass_is_preserved() {
    let games = shipped();
    for bins in [5, 10, 20] {
        let h = mistake_turn_histogram(&games, bins).unwrap();
        assert_eq!(h.counts.len(), bins);
        assert_eq!(h.counts.iter().sum::<u64>(), 431);
        // every final-turn mistake lands in the top bin
        assert!(h.counts[bins - 1] >= 231);
    }
}
