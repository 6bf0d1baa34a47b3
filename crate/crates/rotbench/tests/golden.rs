mod common;

use std::fs;

use common::{demo_catalog, fixture, DEMO_SEED};
use rotbench_core::prompt::{build_prompt, ChatMessage, Role};
use rotbench_core::{build_environment, NoiseLevel};

fn render(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            format!("### {role}\n{}\n", m.content)
        })
        .collect()
}

/// Set `UPDATE_GOLDEN=1` to rewrite the files after an intended change.
fn check(level: NoiseLevel, case_id: &str, file: &str) {
    let env = build_environment(&demo_catalog().cases, level, DEMO_SEED).unwrap();
    let case = env.iter().find(|c| c.id == case_id).unwrap();
    let got = render(&build_prompt(case));
    let path = fixture("golden").join(file);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &got).unwrap();
    }
    let want = fs::read_to_string(&path).unwrap();
    assert_eq!(got, want, "prompt for {case_id} drifted from {}", path.display());
}

#[test]
fn clean_multi_turn_prompt() {
    check(NoiseLevel::Clean, "c4", "prompt_c4_clean.txt");
}

#[test]
fn heavy_addendum_prompt() {
    check(NoiseLevel::Heavy, "c1/heavy-params", "prompt_c1_heavy_params.txt");
}

#[test]
fn union_prompt_renames_prior_turns() {
    check(NoiseLevel::Union, "c4/union-both", "prompt_c4_union.txt");
}
