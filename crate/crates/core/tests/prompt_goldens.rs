use std::path::PathBuf;

use hmd_core::fixtures::{prompt_context, prompt_example, prompt_golden_name};
use hmd_core::prompts::{assemble_fewshot, build_prompt, PromptKind, PromptType};

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/prompts")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn every_template_matches_its_golden() {
    for ty in PromptType::ALL {
        let rendered = build_prompt(&prompt_example(Some(true)), ty).unwrap();
        assert_eq!(rendered, golden(&prompt_golden_name(ty)), "{ty}");
    }
}

#[test]
fn fewshot_assemblies_match_goldens() {
    let query = prompt_example(None);
    let normal = assemble_fewshot(&prompt_context(), &query, PromptType::new(PromptKind::Normal, false)).unwrap();
    assert_eq!(normal, golden("fewshot_normal.txt"));
    let time = assemble_fewshot(&prompt_context(), &query, PromptType::new(PromptKind::TimeHint, true)).unwrap();
    assert_eq!(time, golden("fewshot_time-hint_history.txt"));
    for s in [&normal, &time] {
        assert_eq!(s.matches("<image>").count(), 9);
        assert_eq!(s.matches(".<EOC>").count(), 8);
        assert!(s.ends_with("\nOutput:"));
    }
}

#[test]
fn rendering_is_repeatable() {
    for ty in PromptType::ALL {
        let a = assemble_fewshot(&prompt_context(), &prompt_example(None), ty).unwrap();
        let b = assemble_fewshot(&prompt_context(), &prompt_example(None), ty).unwrap();
        assert_eq!(a, b);
    }
}
