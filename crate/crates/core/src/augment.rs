//! Training-data augmentation: near-duplicate query filtering, rewriting
//! clean trajectories into noisy environments, per-level sampling and
//! export of one training record per interaction turn.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{TestCase, Tool};
use crate::eval::Turn;
use crate::noise::{
    derive_seed, perturb_case, NoiseError, NoiseLevel, PerturbationTarget, PerturbedCase,
    UnknownName,
};
use crate::prompt::{build_messages, render_action, ChatMessage};

/// Longest tool-use trajectory accepted.
pub const MAX_TURNS: usize = 9;

/// Candidates scoring above this against any kept query are dropped.
pub const DEDUP_THRESHOLD: f64 = 0.55;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub source_case: String,
    pub query: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub final_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewriteError {
    #[error("trajectory `{id}` has {turns} turns, more than {MAX_TURNS}")]
    TooManyTurns { id: String, turns: usize },
    #[error("trajectory `{id}` comes from case `{expected}` but the environment is for `{found}`")]
    SourceMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("trajectory `{id}`, turn {turn}: {source}")]
    UnknownName {
        id: String,
        turn: usize,
        #[source]
        source: UnknownName,
    },
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Rouge-L F1 (β = 1) over token sequences.
pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Rouge-L F1 over lowercased whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Keep each candidate whose Rouge-L against every pool item and every
/// previously kept candidate is at most `threshold`.
pub fn dedup_queries(candidates: &[String], pool: &[String], threshold: f64) -> Vec<String> {
    let mut seen: Vec<Vec<String>> = pool.iter().map(|p| tokenize(p)).collect();
    let mut kept = Vec::new();
    for c in candidates {
        let tokens = tokenize(c);
        if seen.iter().all(|s| rouge_l_tokens(&tokens, s) <= threshold) {
            seen.push(tokens);
            kept.push(c.clone());
        }
    }
    kept
}

/// Re-express a clean-environment trajectory in a perturbed environment:
/// tool and parameter names go through the mapping, calls to a tool that
/// gained an addendum parameter get it with its required value, and exact
/// tool-name tokens in thoughts, observations and the answer are renamed.
pub fn rewrite_trajectory(
    trajectory: &Trajectory,
    perturbed: &PerturbedCase,
) -> Result<Trajectory, RewriteError> {
    if trajectory.turns.len() > MAX_TURNS {
        return Err(RewriteError::TooManyTurns {
            id: trajectory.id.clone(),
            turns: trajectory.turns.len(),
        });
    }
    if trajectory.source_case != perturbed.base {
        return Err(RewriteError::SourceMismatch {
            id: trajectory.id.clone(),
            expected: trajectory.source_case.clone(),
            found: perturbed.base.clone(),
        });
    }
    let originals = perturbed.original_tools();
    let mapping = &perturbed.mapping;
    let turns = trajectory
        .turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            let action = mapping
                .try_rename_action(&turn.action, &originals)
                .map_err(|source| RewriteError::UnknownName {
                    id: trajectory.id.clone(),
                    turn: i + 1,
                    source,
                })?;
            Ok(Turn {
                action,
                observation: mapping.rename_text(&turn.observation),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory {
        id: trajectory.id.clone(),
        source_case: trajectory.source_case.clone(),
        query: trajectory.query.clone(),
        turns,
        final_answer: mapping.rename_text(&trajectory.final_answer),
    })
}

/// How many trajectories to augment per noisy level. Clean always keeps
/// every trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub counts: BTreeMap<NoiseLevel, usize>,
}

impl AugmentationPlan {
    pub fn new(slight: usize, medium: usize, heavy: usize, union: usize) -> Self {
        Self {
            counts: [
                (NoiseLevel::Slight, slight),
                (NoiseLevel::Medium, medium),
                (NoiseLevel::Heavy, heavy),
                (NoiseLevel::Union, union),
            ]
            .into_iter()
            .collect(),
        }
    }

    /// 3000 each for Slight, Medium and Heavy; 1500 for Union.
    pub fn standard() -> Self {
        Self::new(3000, 3000, 3000, 1500)
    }

    /// Shrink proportionally (rounding down) so no level asks for more
    /// than `available` trajectories.
    pub fn fit_to(&self, available: usize) -> Self {
        let max = self.counts.values().copied().max().unwrap_or(0);
        if max <= available {
            return self.clone();
        }
        Self {
            counts: self
                .counts
                .iter()
                .map(|(&l, &c)| (l, c * available / max))
                .collect(),
        }
    }
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self::standard()
    }
}

fn level_rng(seed: u64, level: NoiseLevel) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, "rotbench/plan", level, None))
}

/// Seeded sampling without replacement per level; sampled trajectories keep
/// their input order. The same trajectory may be drawn for several levels.
pub fn sample_plan(
    trajectories: &[Trajectory],
    plan: &AugmentationPlan,
    seed: u64,
) -> BTreeMap<NoiseLevel, Vec<Trajectory>> {
    let plan = plan.fit_to(trajectories.len());
    let mut out = BTreeMap::new();
    out.insert(NoiseLevel::Clean, trajectories.to_vec());
    for (&level, &count) in &plan.counts {
        if level == NoiseLevel::Clean {
            continue;
        }
        let mut picked = index::sample(&mut level_rng(seed, level), trajectories.len(), count).into_vec();
        picked.sort_unstable();
        out.insert(level, picked.into_iter().map(|i| trajectories[i].clone()).collect());
    }
    out
}

/// The noisy environment a sampled trajectory is rewritten into. Single
/// method levels pick the tool or parameter variant by seed.
pub fn environment_for(
    trajectory: &Trajectory,
    case: &TestCase,
    level: NoiseLevel,
    seed: u64,
) -> Result<PerturbedCase, NoiseError> {
    let target = match level {
        NoiseLevel::Clean => None,
        NoiseLevel::Union => Some(PerturbationTarget::Both),
        _ => {
            if derive_seed(seed, &trajectory.id, level, None) & 1 == 0 {
                Some(PerturbationTarget::Tools)
            } else {
                Some(PerturbationTarget::Params)
            }
        }
    };
    perturb_case(case, level, target, derive_seed(seed, &trajectory.id, level, target))
}

/// A trajectory placed in the environment whose tool documents it is
/// trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedTrajectory {
    pub level: NoiseLevel,
    pub trajectory: Trajectory,
    pub tools: Vec<Tool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub messages: Vec<ChatMessage>,
    pub target: String,
}

/// One record per turn: the prompt holds every earlier turn as context and
/// the target is that turn's rendered action.
pub fn export_records(items: &[AugmentedTrajectory]) -> Vec<TrainingRecord> {
    let mut out = Vec::new();
    for item in items {
        let t = &item.trajectory;
        for (k, turn) in t.turns.iter().enumerate() {
            out.push(TrainingRecord {
                messages: build_messages(&item.tools, &t.query, &t.turns[..k]),
                target: render_action(&turn.action),
            });
        }
    }
    out
}

/// Clean trajectories need no rewriting; wrap them with their case's tools.
pub fn clean_items(trajectories: &[Trajectory], cases: &[TestCase]) -> Vec<AugmentedTrajectory> {
    trajectories
        .iter()
        .filter_map(|t| {
            let case = cases.iter().find(|c| c.id == t.source_case)?;
            Some(AugmentedTrajectory {
                level: NoiseLevel::Clean,
                trajectory: t.clone(),
                tools: case.tools.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use crate::catalog::fixtures::weather_case;
    use crate::eval::ModelAction;
    use crate::noise::{InjectedParam, NameMapping};

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b c", "d e f"), 0.0);
        assert!((rouge_l("a b c d", "a c d") - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("", ""), 1.0);
        assert_eq!(rouge_l("", "a"), 0.0);
        assert_eq!(rouge_l("A  B", "a b"), 1.0);
    }

    #[test]
    fn dedup_examples() {
        let pool = [s("what is the weather in paris today")];
        let kept = dedup_queries(
            &[s("What is the weather in Paris today"), s("convert ten dollars to euros")],
            &pool,
            DEDUP_THRESHOLD,
        );
        assert_eq!(kept, [s("convert ten dollars to euros")]);
        // Near-duplicates among the candidates themselves are dropped too.
        let kept = dedup_queries(&[s("one two three four"), s("one two three five")], &[], DEDUP_THRESHOLD);
        assert_eq!(kept.len(), 1);
    }

    fn traj(turns: Vec<Turn>) -> Trajectory {
        Trajectory {
            id: s("t1"),
            source_case: s("c1"),
            query: s("q"),
            turns,
            final_answer: s("done"),
        }
    }

    fn turn(tool: &str, args: &[(&str, &str)], obs: &str) -> Turn {
        Turn {
            action: ModelAction {
                thought: Some(alloc::format!("use {tool}")),
                ..ModelAction::new(tool, args.iter().copied())
            },
            observation: s(obs),
        }
    }

    fn perturbed_with(mapping: NameMapping) -> PerturbedCase {
        let case = weather_case();
        let mut p = perturb_case(&case, NoiseLevel::Clean, None, 0).unwrap();
        for t in &mut p.tools {
            t.name = mapping.tool_name(&t.name).to_string();
            for prm in &mut t.parameters {
                let orig_tool = mapping.original_tool_name(&t.name).to_string();
                prm.name = mapping.param_name(&orig_tool, &prm.name).to_string();
            }
        }
        for (tool, inj) in &mapping.injected_params {
            let name = mapping.tool_name(tool).to_string();
            p.tools.iter_mut().find(|t| t.name == name).unwrap().parameters.push(inj.parameter.clone());
        }
        p.gold = crate::noise::remap_gold(&case.gold, &mapping);
        p.mapping = mapping;
        p
    }

    #[test]
    fn identity_rewrite_is_noop() {
        let t = traj(alloc::vec![turn("get_weather", &[("city", "Paris")], "sunny")]);
        let p = perturbed_with(NameMapping::default());
        assert_eq!(rewrite_trajectory(&t, &p).unwrap(), t);
    }

    #[test]
    fn rename_reaches_every_turn() {
        let t = traj(alloc::vec![
            turn("get_weather", &[("city", "Paris")], "get_weather says sunny"),
            turn("get_weather", &[("city", "Lyon")], "rain"),
        ]);
        let mut m = NameMapping::default();
        m.tool_renames.insert(s("get_weather"), s("qz"));
        let r = rewrite_trajectory(&t, &perturbed_with(m)).unwrap();
        assert!(r.turns.iter().all(|t| t.action.tool_name == "qz"));
        assert_eq!(r.turns[0].action.thought.as_deref(), Some("use qz"));
        assert_eq!(r.turns[0].observation, "qz says sunny");
    }

    #[test]
    fn addendum_param_is_filled() {
        let t = traj(alloc::vec![turn("get_weather", &[("city", "Paris")], "ok")]);
        let mut m = NameMapping::default();
        m.injected_params.insert(
            s("get_weather"),
            InjectedParam {
                parameter: crate::catalog::Parameter::new(
                    "zq",
                    crate::noise::addendum_description("7"),
                    crate::catalog::ValueType::String,
                    true,
                ),
                gold_content: s("7"),
            },
        );
        let r = rewrite_trajectory(&t, &perturbed_with(m)).unwrap();
        assert_eq!(r.turns[0].action.arguments["zq"], "7");
        assert_eq!(r.turns[0].action.arguments["city"], "Paris");
    }

    #[test]
    fn rewrite_errors() {
        let p = perturbed_with(NameMapping::default());
        let bad = traj(alloc::vec![turn("get_weather", &[], "x"), turn("nope", &[], "x")]);
        assert!(matches!(
            rewrite_trajectory(&bad, &p),
            Err(RewriteError::UnknownName { turn: 2, .. })
        ));
        let long = traj((0..10).map(|_| turn("get_weather", &[], "x")).collect());
        assert!(matches!(rewrite_trajectory(&long, &p), Err(RewriteError::TooManyTurns { .. })));
        let mut other = traj(Vec::new());
        other.source_case = s("c9");
        assert!(matches!(rewrite_trajectory(&other, &p), Err(RewriteError::SourceMismatch { .. })));
    }

    #[test]
    fn plan_counts_and_scaling() {
        let ts: Vec<_> = (0..10)
            .map(|i| Trajectory { id: alloc::format!("t{i}"), ..traj(Vec::new()) })
            .collect();
        let out = sample_plan(&ts, &AugmentationPlan::new(3, 3, 3, 1), 42);
        let counts: Vec<usize> = out.values().map(Vec::len).collect();
        assert_eq!(counts, [10, 3, 3, 3, 1]);
        assert_eq!(out, sample_plan(&ts, &AugmentationPlan::new(3, 3, 3, 1), 42));

        let zeros = sample_plan(&ts, &AugmentationPlan::new(0, 0, 0, 0), 1);
        assert!(zeros.iter().filter(|(l, _)| **l != NoiseLevel::Clean).all(|(_, v)| v.is_empty()));

        let fitted = AugmentationPlan::standard().fit_to(10);
        assert_eq!(fitted, AugmentationPlan::new(10, 10, 10, 5));
    }

    #[test]
    fn records_carry_prior_turns() {
        let t = traj(alloc::vec![
            turn("get_weather", &[("city", "Paris")], "sunny"),
            turn("get_weather", &[("city", "Lyon")], "rain"),
            turn("finish", &[("answer", "done")], ""),
        ]);
        let items = [AugmentedTrajectory {
            level: NoiseLevel::Clean,
            trajectory: t.clone(),
            tools: weather_case().tools,
        }];
        let recs = export_records(&items);
        assert_eq!(recs.len(), 3);
        for (k, r) in recs.iter().enumerate() {
            assert_eq!(r.messages.len(), 2 + 2 * k);
            assert_eq!(r.target, render_action(&t.turns[k].action));
        }
        assert!(recs[2].messages[4].content.contains("Lyon"));
        assert!(export_records(&[]).is_empty());
    }
}
