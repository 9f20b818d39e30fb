use std::collections::BTreeSet;

use hmd_core::corpus::{
    fraction_split, kfold_indices, parse_games, write_games, Answer, BBox, GameRecord, GameStatus, ImageInfo,
    ObjectRef, ParseMode, QAPair,
};
use proptest::prelude::*;

proptest! {
    #[test]
    fn folds_partition_the_indices(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let folds = kfold_indices(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let all: Vec<usize> = folds.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.iter().copied().collect::<BTreeSet<_>>().len(), n);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, kfold_indices(n, k, seed).unwrap());
    }

    #[test]
    fn fraction_parts_are_disjoint(n in 0usize..300, a in 0.0f64..0.6, b in 0.0f64..0.4, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let parts = fraction_split(&items, &[a, b], seed).unwrap();
        let union: BTreeSet<usize> = parts.iter().flatten().copied().collect();
        prop_assert_eq!(union.len(), parts[0].len() + parts[1].len());
        prop_assert!((parts[0].len() as f64 - a * n as f64).abs() <= 1.0);
    }

    #[test]
    fn records_round_trip(answers in prop::collection::vec(0u8..3, 1..6), w in 10.0f64..2000.0, h in 10.0f64..2000.0) {
        let qas = answers
            .iter()
            .enumerate()
            .map(|(i, &a)| match a {
                0 => QAPair::labeled(format!("q{i}?"), Answer::Yes, i % 2 == 0),
                1 => QAPair::new(format!("q{i}?"), Answer::No),
                _ => QAPair::new(format!("q{i}?"), Answer::NA),
            })
            .collect();
        let game = GameRecord {
            game_id: "g".into(),
            status: GameStatus::Failure,
            image: ImageInfo { image_id: "i".into(), width: w, height: h, feature_key: None },
            objects: vec![ObjectRef { object_id: "o".into(), category_name: "dog".into(), bbox: BBox::new(0.0, 0.0, w / 2.0, h / 3.0) }],
            target_object_id: "o".into(),
            qas,
        };
        let mut buf = Vec::new();
        write_games(&mut buf, std::slice::from_ref(&game)).unwrap();
        let parsed = parse_games(&buf[..], ParseMode::Strict).unwrap();
        prop_assert_eq!(parsed.games, vec![game]);
    }
}
