use std::collections::BTreeMap;

use hmd_core::corpus::Answer;
use hmd_core::detector::{oversample, Example, OversampleMode, SpatialFeatures};
use hmd_core::qtype::QuestionType;
use proptest::prelude::*;

fn example(i: usize, label: bool, qtype: QuestionType) -> Example {
    Example {
        game_id: format!("g{i}"),
        image_id: "img".into(),
        turn: 1,
        total: 1,
        image_key: "img".into(),
        crop_key: format!("img/{i}"),
        spatial: SpatialFeatures([0.0; 8]),
        tokens: vec!["is".into()],
        answer: Answer::No,
        qtype,
        label,
    }
}

fn samples() -> impl Strategy<Value = Vec<Example>> {
    prop::collection::vec((any::<bool>(), 0usize..9), 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (l, t))| example(i, l, QuestionType::ALL[t]))
            .collect()
    })
}

fn multiset(items: &[Example]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in items {
        *m.entry(serde_json::to_string(e).unwrap()).or_default() += 1;
    }
    m
}

fn contains(big: &[Example], small: &[Example]) -> bool {
    let b = multiset(big);
    multiset(small)
        .iter()
        .all(|(k, n)| b.get(k).copied().unwrap_or(0) >= *n)
}

proptest! {
    #[test]
    fn class_balance_equalizes_labels(s in samples(), seed in any::<u64>()) {
        let both = s.iter().any(|e| e.label) && s.iter().any(|e| !e.label);
        match oversample(&s, OversampleMode::ClassBalance, seed) {
            Ok(out) => {
                prop_assert!(both);
                let pos = out.iter().filter(|e| e.label).count();
                prop_assert_eq!(pos, out.len() - pos);
                prop_assert!(contains(&out, &s));
                prop_assert_eq!(&out[..s.len()], &s[..]);
            }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn qtype_balance_equalizes_types(s in samples(), seed in any::<u64>()) {
        let out = oversample(&s, OversampleMode::QTypeBalance, seed).unwrap();
        let mut counts: BTreeMap<QuestionType, usize> = BTreeMap::new();
        out.iter().for_each(|e| *counts.entry(e.qtype).or_default() += 1);
        let first = *counts.values().next().unwrap();
        prop_assert!(counts.values().all(|&c| c == first));
        prop_assert!(contains(&out, &s));
        prop_assert_eq!(out.clone(), oversample(&s, OversampleMode::QTypeBalance, seed).unwrap());
    }
}
