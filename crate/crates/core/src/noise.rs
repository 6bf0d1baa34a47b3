//! Name-noise transformations and the five environment levels.
//!
//! Noise only ever touches tool and parameter *names*; descriptions are
//! carried over byte for byte. Every perturbation records a [`NameMapping`]
//! from original to perturbed names, and gold labels are re-expressed in the
//! perturbed names so that a model "correcting" a noisy name scores zero.
//!
//! | level  | tool-name method                 | parameter method                         |
//! |--------|----------------------------------|------------------------------------------|
//! | Slight | insert/omit/substitute ≤ ⌊len/3⌋ | same, on half of each tool's parameters   |
//! | Medium | reverse or nonsense (≤ 10 chars) | reverse or nonsense (≤ 5 chars)           |
//! | Heavy  | derangement of all tool names    | addendum parameter or shuffled names      |
//! | Union  | one tool method + one param method, drawn per case from the three above     |

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{validate_case, GoldCall, Parameter, TestCase, Tool, ValueType, Violation};
use crate::eval::{ModelAction, Turn};
use crate::text::rename_tokens;

/// Upper bound on rejection-sampling draws before giving up.
pub const MAX_DRAWS: usize = 1000;

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
const LOWERCASE: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const CONTENT_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Insertion,
    Omission,
    Substitution,
    Reversal,
    Nonsense,
    Exchange,
    Addendum,
}

impl NoiseKind {
    pub fn applies_to_tools(self) -> bool {
        self != NoiseKind::Addendum
    }

    pub fn applies_to_params(self) -> bool {
        self != NoiseKind::Exchange
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    Clean,
    Slight,
    Medium,
    Heavy,
    Union,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 5] = [
        NoiseLevel::Clean,
        NoiseLevel::Slight,
        NoiseLevel::Medium,
        NoiseLevel::Heavy,
        NoiseLevel::Union,
    ];

    /// The three levels whose methods Union draws from.
    pub const SINGLE_METHOD: [NoiseLevel; 3] =
        [NoiseLevel::Slight, NoiseLevel::Medium, NoiseLevel::Heavy];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseLevel::Clean => "clean",
            NoiseLevel::Slight => "slight",
            NoiseLevel::Medium => "medium",
            NoiseLevel::Heavy => "heavy",
            NoiseLevel::Union => "union",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NoiseLevel::Clean => "Clean",
            NoiseLevel::Slight => "Slight",
            NoiseLevel::Medium => "Medium",
            NoiseLevel::Heavy => "Heavy",
            NoiseLevel::Union => "Union",
        }
    }

    /// Targets generated per input case at this level.
    pub fn targets(self) -> &'static [Option<PerturbationTarget>] {
        match self {
            NoiseLevel::Clean => &[None],
            NoiseLevel::Union => &[Some(PerturbationTarget::Both)],
            _ => &[
                Some(PerturbationTarget::Tools),
                Some(PerturbationTarget::Params),
            ],
        }
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NoiseLevel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown noise level `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationTarget {
    Tools,
    Params,
    Both,
}

impl PerturbationTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationTarget::Tools => "tools",
            PerturbationTarget::Params => "params",
            PerturbationTarget::Both => "both",
        }
    }
}

/// Length range for random replacement names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonsenseBounds {
    pub min_len: usize,
    pub max_len: usize,
}

impl NonsenseBounds {
    pub const TOOL: NonsenseBounds = NonsenseBounds {
        min_len: 3,
        max_len: 10,
    };
    pub const PARAM: NonsenseBounds = NonsenseBounds {
        min_len: 2,
        max_len: 5,
    };

    pub fn up_to(max_len: usize) -> Self {
        Self { min_len: 1, max_len }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedParam {
    pub parameter: Parameter,
    pub gold_content: String,
}

/// Provenance of a perturbation, keyed by original names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameMapping {
    #[serde(default)]
    pub tool_renames: BTreeMap<String, String>,
    /// original tool name → original parameter name → perturbed name
    #[serde(default)]
    pub param_renames: BTreeMap<String, BTreeMap<String, String>>,
    /// original tool name → injected mandatory parameter
    #[serde(default)]
    pub injected_params: BTreeMap<String, InjectedParam>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnknownName {
    #[error("tool `{0}` is not in the environment")]
    Tool(String),
    #[error("parameter `{param}` is not a parameter of `{tool}`")]
    Parameter { tool: String, param: String },
}

impl NameMapping {
    pub fn is_identity(&self) -> bool {
        self.tool_renames.iter().all(|(k, v)| k == v)
            && self
                .param_renames
                .values()
                .all(|m| m.iter().all(|(k, v)| k == v))
            && self.injected_params.is_empty()
    }

    pub fn tool_name<'a>(&'a self, original: &'a str) -> &'a str {
        self.tool_renames
            .get(original)
            .map(String::as_str)
            .unwrap_or(original)
    }

    pub fn param_name<'a>(&'a self, original_tool: &str, original_param: &'a str) -> &'a str {
        self.param_renames
            .get(original_tool)
            .and_then(|m| m.get(original_param))
            .map(String::as_str)
            .unwrap_or(original_param)
    }

    /// Inverse of [`NameMapping::tool_name`].
    pub fn original_tool_name<'a>(&'a self, perturbed: &'a str) -> &'a str {
        self.tool_renames
            .iter()
            .find(|(_, v)| v.as_str() == perturbed)
            .map(|(k, _)| k.as_str())
            .unwrap_or(perturbed)
    }

    /// `name` is the pre-noise name of a tool that was renamed to something else.
    pub fn is_renamed_original_tool(&self, name: &str) -> bool {
        self.tool_renames.get(name).is_some_and(|v| v != name)
    }

    fn tool_token_map(&self) -> BTreeMap<&str, &str> {
        self.tool_renames
            .iter()
            .filter(|(k, v)| k != v)
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect()
    }

    /// Rewrite a call made against the original environment so it targets
    /// the perturbed one. Names outside the mapping pass through unchanged.
    pub fn rename_action(&self, action: &ModelAction) -> ModelAction {
        self.rewrite(action, None)
            .expect("lenient rewrite never fails")
    }

    /// Like [`NameMapping::rename_action`] but every non-meta tool and
    /// parameter must exist in `original_tools`.
    pub fn try_rename_action(
        &self,
        action: &ModelAction,
        original_tools: &[Tool],
    ) -> Result<ModelAction, UnknownName> {
        self.rewrite(action, Some(original_tools))
    }

    fn rewrite(
        &self,
        action: &ModelAction,
        strict: Option<&[Tool]>,
    ) -> Result<ModelAction, UnknownName> {
        let tool = action.tool_name.as_str();
        if crate::is_meta_tool(tool) {
            let mut out = action.clone();
            out.thought = action
                .thought
                .as_ref()
                .map(|t| rename_tokens(t, &self.tool_token_map()));
            out.raw.clear();
            return Ok(out);
        }
        if let Some(tools) = strict {
            let original = tools
                .iter()
                .find(|t| t.name == tool)
                .ok_or_else(|| UnknownName::Tool(tool.to_string()))?;
            for k in action.arguments.keys() {
                if original.parameter(k).is_none() {
                    return Err(UnknownName::Parameter {
                        tool: tool.to_string(),
                        param: k.clone(),
                    });
                }
            }
        }

        let mut arguments: BTreeMap<String, String> = action
            .arguments
            .iter()
            .map(|(k, v)| (self.param_name(tool, k).to_string(), v.clone()))
            .collect();
        if let Some(injected) = self.injected_params.get(tool) {
            arguments
                .entry(injected.parameter.name.clone())
                .or_insert_with(|| injected.gold_content.clone());
        }
        Ok(ModelAction {
            thought: action
                .thought
                .as_ref()
                .map(|t| rename_tokens(t, &self.tool_token_map())),
            tool_name: self.tool_name(tool).to_string(),
            arguments,
            raw: String::new(),
        })
    }

    /// Rewrite a whole turn, including exact tool-name mentions in the
    /// observation text.
    pub fn rename_turn(&self, turn: &Turn) -> Turn {
        Turn {
            action: self.rename_action(&turn.action),
            observation: rename_tokens(&turn.observation, &self.tool_token_map()),
        }
    }

    pub(crate) fn rename_text(&self, text: &str) -> String {
        rename_tokens(text, &self.tool_token_map())
    }
}

/// A test case after noise injection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedCase {
    pub id: String,
    pub base: String,
    pub scenario: String,
    pub query: String,
    pub level: NoiseLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PerturbationTarget>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_method: Option<NoiseLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_method: Option<NoiseLevel>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub kinds: BTreeSet<NoiseKind>,
    pub tools: Vec<Tool>,
    pub gold: GoldCall,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_turns: Vec<Turn>,
    pub mapping: NameMapping,
}

impl PerturbedCase {
    /// Reconstruct the clean tool list by inverting the mapping.
    pub fn original_tools(&self) -> Vec<Tool> {
        self.tools
            .iter()
            .map(|tool| {
                let name = self.mapping.original_tool_name(&tool.name).to_string();
                let renames = self.mapping.param_renames.get(&name);
                let injected = self.mapping.injected_params.get(&name);
                let parameters = tool
                    .parameters
                    .iter()
                    .filter(|p| injected.is_none_or(|i| i.parameter.name != p.name))
                    .map(|p| {
                        let original = renames
                            .and_then(|m| m.iter().find(|(_, v)| **v == p.name))
                            .map(|(k, _)| k.clone())
                            .unwrap_or_else(|| p.name.clone());
                        Parameter {
                            name: original,
                            ..p.clone()
                        }
                    })
                    .collect();
                Tool {
                    name,
                    description: tool.description.clone(),
                    parameters,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NoiseError {
    #[error("case `{case_id}` is invalid: {}", .violations.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidCase {
        case_id: String,
        violations: Vec<Violation>,
    },
    #[error("exchange needs at least two tools, got {count}")]
    TooFewTools { count: usize },
    #[error("no fresh name found after {0} draws")]
    Exhausted(usize),
    #[error("target `{target:?}` is not valid at level {level}")]
    InvalidTarget {
        level: NoiseLevel,
        target: Option<PerturbationTarget>,
    },
    #[error("cannot perturb an empty name")]
    EmptyName,
    #[error("case `{case_id}`: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<NoiseError>,
    },
}

fn pick<R: Rng + ?Sized>(rng: &mut R, alphabet: &[u8]) -> char {
    alphabet[rng.random_range(0..alphabet.len())] as char
}

/// Up to a third of the characters get an insertion, omission or
/// substitution each, at distinct positions. Never returns `name` itself
/// or an empty string.
pub fn slight_perturb_name<R: Rng + ?Sized>(name: &str, rng: &mut R) -> String {
    slight_edit(name, rng).0
}

fn slight_edit<R: Rng + ?Sized>(name: &str, rng: &mut R) -> (String, BTreeSet<NoiseKind>) {
    let chars: Vec<char> = name.chars().collect();
    let len = chars.len();
    if len == 0 {
        let c = pick(rng, LETTERS);
        return (c.to_string(), [NoiseKind::Insertion].into_iter().collect());
    }
    let max_edits = core::cmp::max(1, len / 3);

    for _ in 0..MAX_DRAWS {
        let k = rng.random_range(1..=max_edits);
        let mut positions = index::sample(rng, len, k).into_vec();
        positions.sort_unstable();
        let mut kinds = BTreeSet::new();
        let mut out = String::with_capacity(len + k);
        let mut next = positions.iter().peekable();
        for (i, &c) in chars.iter().enumerate() {
            if next.peek() != Some(&&i) {
                out.push(c);
                continue;
            }
            next.next();
            match rng.random_range(0..3u8) {
                0 => {
                    kinds.insert(NoiseKind::Insertion);
                    out.push(pick(rng, LETTERS));
                    out.push(c);
                }
                1 => {
                    kinds.insert(NoiseKind::Omission);
                }
                _ => {
                    kinds.insert(NoiseKind::Substitution);
                    out.push(different_letter(c, rng));
                }
            }
        }
        if !out.is_empty() && out != name {
            return (out, kinds);
        }
    }

    // Unreachable in practice; a single substitution always differs.
    let mut out: String = chars.iter().collect();
    let first = chars[0];
    out.replace_range(..first.len_utf8(), different_letter(first, rng).encode_utf8(&mut [0; 4]));
    (out, [NoiseKind::Substitution].into_iter().collect())
}

fn different_letter<R: Rng + ?Sized>(c: char, rng: &mut R) -> char {
    loop {
        let d = pick(rng, LETTERS);
        if d != c {
            return d;
        }
    }
}

fn slight_unique<R: Rng + ?Sized>(
    name: &str,
    rng: &mut R,
    existing: &BTreeSet<String>,
) -> Result<(String, BTreeSet<NoiseKind>), NoiseError> {
    for _ in 0..MAX_DRAWS {
        let (candidate, kinds) = slight_edit(name, rng);
        if !existing.contains(&candidate) {
            return Ok((candidate, kinds));
        }
    }
    Err(NoiseError::Exhausted(MAX_DRAWS))
}

/// A lowercase string with length in `bounds`, absent from `existing`.
pub fn nonsense_string<R: Rng + ?Sized>(
    rng: &mut R,
    bounds: NonsenseBounds,
    existing: &BTreeSet<String>,
) -> Result<String, NoiseError> {
    let max_len = bounds.max_len.max(1);
    let min_len = bounds.min_len.clamp(1, max_len);
    for _ in 0..MAX_DRAWS {
        let len = rng.random_range(min_len..=max_len);
        let s: String = (0..len).map(|_| pick(rng, LOWERCASE)).collect();
        if !existing.contains(&s) {
            return Ok(s);
        }
    }
    Err(NoiseError::Exhausted(MAX_DRAWS))
}

/// With probability 1/2 the reversed name, otherwise a nonsense string.
/// A reversal that leaves the name unchanged (or collides with `existing`)
/// falls through to the nonsense branch.
pub fn reverse_or_nonsense<R: Rng + ?Sized>(
    name: &str,
    rng: &mut R,
    bounds: NonsenseBounds,
    existing: &BTreeSet<String>,
) -> Result<String, NoiseError> {
    reverse_or_nonsense_kind(name, rng, bounds, existing).map(|(s, _)| s)
}

fn reverse_or_nonsense_kind<R: Rng + ?Sized>(
    name: &str,
    rng: &mut R,
    bounds: NonsenseBounds,
    existing: &BTreeSet<String>,
) -> Result<(String, NoiseKind), NoiseError> {
    if name.is_empty() {
        return Err(NoiseError::EmptyName);
    }
    if rng.random_bool(0.5) {
        let reversed: String = name.chars().rev().collect();
        if reversed != name && !existing.contains(&reversed) {
            return Ok((reversed, NoiseKind::Reversal));
        }
    }
    let mut avoid;
    let existing = if existing.contains(name) {
        existing
    } else {
        avoid = existing.clone();
        avoid.insert(name.to_string());
        &avoid
    };
    nonsense_string(rng, bounds, existing).map(|s| (s, NoiseKind::Nonsense))
}

/// A uniformly random permutation of `0..n` with no fixed point.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>, NoiseError> {
    use rand::seq::SliceRandom;
    if n < 2 {
        return Err(NoiseError::TooFewTools { count: n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Shuffle all tool names so that no tool keeps its own name.
pub fn exchange_tool_names<R: Rng + ?Sized>(
    tools: &[Tool],
    rng: &mut R,
) -> Result<NameMapping, NoiseError> {
    let perm = derangement(tools.len(), rng)?;
    let tool_renames = tools
        .iter()
        .zip(&perm)
        .map(|(t, &p)| (t.name.clone(), tools[p].name.clone()))
        .collect();
    Ok(NameMapping {
        tool_renames,
        ..NameMapping::default()
    })
}

const ADDENDUM_PREFIX: &str = "A mandatory parameter. To use this tool you must set it to exactly '";
const ADDENDUM_SUFFIX: &str = "'.";

pub fn addendum_description(content: &str) -> String {
    format!("{ADDENDUM_PREFIX}{content}{ADDENDUM_SUFFIX}")
}

/// Recover the required value from an addendum parameter's description.
pub fn addendum_content(description: &str) -> Option<&str> {
    description
        .strip_prefix(ADDENDUM_PREFIX)?
        .strip_suffix(ADDENDUM_SUFFIX)
}

/// A new mandatory string parameter with a nonsense name (≤ 5 chars) whose
/// description dictates an exact value of 1 to 3 characters.
pub fn inject_addendum_param<R: Rng + ?Sized>(
    tool: &Tool,
    rng: &mut R,
) -> Result<InjectedParam, NoiseError> {
    let existing = tool.parameters.iter().map(|p| p.name.clone()).collect();
    inject_avoiding(rng, &existing)
}

fn inject_avoiding<R: Rng + ?Sized>(
    rng: &mut R,
    existing: &BTreeSet<String>,
) -> Result<InjectedParam, NoiseError> {
    let name = nonsense_string(rng, NonsenseBounds::PARAM, existing)?;
    let len = rng.random_range(1..=3);
    let gold_content: String = (0..len).map(|_| pick(rng, CONTENT_ALPHABET)).collect();
    Ok(InjectedParam {
        parameter: Parameter::new(name, addendum_description(&gold_content), ValueType::String, true),
        gold_content,
    })
}

/// Express `gold` in the perturbed environment's names.
pub fn remap_gold(gold: &GoldCall, mapping: &NameMapping) -> GoldCall {
    let tool = gold.tool_name.as_str();
    let mut out = GoldCall {
        tool_name: mapping.tool_name(tool).to_string(),
        parameters: gold
            .parameters
            .iter()
            .map(|p| mapping.param_name(tool, p).to_string())
            .collect(),
        contents: gold
            .contents
            .iter()
            .map(|(p, c)| (mapping.param_name(tool, p).to_string(), c.clone()))
            .collect(),
    };
    if let Some(injected) = mapping.injected_params.get(tool) {
        out.parameters.insert(injected.parameter.name.clone());
        out.contents
            .insert(injected.parameter.name.clone(), injected.gold_content.clone());
    }
    out
}

/// Per-case seed, stable under insertion or removal of other cases.
pub fn derive_seed(
    run_seed: u64,
    case_id: &str,
    level: NoiseLevel,
    target: Option<PerturbationTarget>,
) -> u64 {
    let mut h = Sha256::new();
    h.update(b"rotbench/case-seed/v1\0");
    h.update(run_seed.to_le_bytes());
    h.update((case_id.len() as u64).to_le_bytes());
    h.update(case_id.as_bytes());
    h.update(level.as_str().as_bytes());
    h.update([0u8]);
    h.update(target.map_or("none", PerturbationTarget::as_str).as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// `c1` stays `c1` at Clean; noisy variants become e.g. `c1/slight-tools`,
/// unique across levels.
pub fn perturbed_id(base: &str, level: NoiseLevel, target: Option<PerturbationTarget>) -> String {
    match target {
        None => base.to_string(),
        Some(t) => format!("{base}/{}-{}", level.as_str(), t.as_str()),
    }
}

fn pick_half<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut picked = index::sample(rng, n, n.div_ceil(2)).into_vec();
    picked.sort_unstable();
    picked
}

/// Apply one level's noise to a single case. `seed` seeds this case only;
/// see [`derive_seed`].
pub fn perturb_case(
    case: &TestCase,
    level: NoiseLevel,
    target: Option<PerturbationTarget>,
    seed: u64,
) -> Result<PerturbedCase, NoiseError> {
    use NoiseLevel::*;
    use PerturbationTarget::*;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tool_method, param_method) = match (level, target) {
        (Clean, None) => (None, None),
        (Slight | Medium | Heavy, Some(Tools)) => (Some(level), None),
        (Slight | Medium | Heavy, Some(Params)) => (None, Some(level)),
        (Union, Some(Both)) => {
            let t = NoiseLevel::SINGLE_METHOD[rng.random_range(0..3)];
            let p = NoiseLevel::SINGLE_METHOD[rng.random_range(0..3)];
            (Some(t), Some(p))
        }
        _ => return Err(NoiseError::InvalidTarget { level, target }),
    };

    let mut env = Env {
        originals: &case.tools,
        tools: case.tools.clone(),
        mapping: NameMapping::default(),
        kinds: BTreeSet::new(),
    };
    if let Some(method) = tool_method {
        env.tool_noise(method, &mut rng)?;
    }
    if let Some(method) = param_method {
        env.param_noise(method, &mut rng)?;
    }

    let Env {
        tools,
        mapping,
        kinds,
        ..
    } = env;
    Ok(PerturbedCase {
        id: perturbed_id(&case.id, level, target),
        base: case.id.clone(),
        scenario: case.scenario.clone(),
        query: case.query.clone(),
        level,
        target,
        seed,
        tool_method,
        param_method,
        kinds,
        gold: remap_gold(&case.gold, &mapping),
        prior_turns: case.prior_turns.iter().map(|t| mapping.rename_turn(t)).collect(),
        tools,
        mapping,
    })
}

struct Env<'a> {
    originals: &'a [Tool],
    tools: Vec<Tool>,
    mapping: NameMapping,
    kinds: BTreeSet<NoiseKind>,
}

impl Env<'_> {
    /// Names a fresh tool name must avoid: every current and original tool
    /// name plus the meta tools.
    fn taken_tool_names(&self) -> BTreeSet<String> {
        self.tools
            .iter()
            .chain(self.originals)
            .map(|t| t.name.clone())
            .chain(crate::META_TOOLS.iter().map(|s| s.to_string()))
            .collect()
    }

    fn taken_param_names(&self, ti: usize) -> BTreeSet<String> {
        self.tools[ti]
            .parameters
            .iter()
            .chain(&self.originals[ti].parameters)
            .map(|p| p.name.clone())
            .collect()
    }

    fn tool_noise<R: Rng + ?Sized>(&mut self, method: NoiseLevel, rng: &mut R) -> Result<(), NoiseError> {
        match method {
            NoiseLevel::Slight | NoiseLevel::Medium => {
                for ti in pick_half(self.tools.len(), rng) {
                    let taken = self.taken_tool_names();
                    let original = &self.originals[ti].name;
                    let new = if method == NoiseLevel::Slight {
                        let (name, kinds) = slight_unique(original, rng, &taken)?;
                        self.kinds.extend(kinds);
                        name
                    } else {
                        let (name, kind) =
                            reverse_or_nonsense_kind(original, rng, NonsenseBounds::TOOL, &taken)?;
                        self.kinds.insert(kind);
                        name
                    };
                    self.mapping.tool_renames.insert(original.clone(), new.clone());
                    self.tools[ti].name = new;
                }
            }
            NoiseLevel::Heavy => {
                let mapping = exchange_tool_names(self.originals, rng)?;
                for (tool, original) in self.tools.iter_mut().zip(self.originals) {
                    tool.name = mapping.tool_renames[&original.name].clone();
                }
                self.mapping.tool_renames = mapping.tool_renames;
                self.kinds.insert(NoiseKind::Exchange);
            }
            NoiseLevel::Clean | NoiseLevel::Union => unreachable!("not a single method"),
        }
        Ok(())
    }

    fn param_noise<R: Rng + ?Sized>(&mut self, method: NoiseLevel, rng: &mut R) -> Result<(), NoiseError> {
        match method {
            NoiseLevel::Slight | NoiseLevel::Medium => {
                for ti in 0..self.tools.len() {
                    let tool_key = self.originals[ti].name.clone();
                    for pi in pick_half(self.tools[ti].parameters.len(), rng) {
                        let taken = self.taken_param_names(ti);
                        let original = &self.originals[ti].parameters[pi].name;
                        let new = if method == NoiseLevel::Slight {
                            let (name, kinds) = slight_unique(original, rng, &taken)?;
                            self.kinds.extend(kinds);
                            name
                        } else {
                            let (name, kind) =
                                reverse_or_nonsense_kind(original, rng, NonsenseBounds::PARAM, &taken)?;
                            self.kinds.insert(kind);
                            name
                        };
                        self.mapping
                            .param_renames
                            .entry(tool_key.clone())
                            .or_default()
                            .insert(original.clone(), new.clone());
                        self.tools[ti].parameters[pi].name = new;
                    }
                }
            }
            NoiseLevel::Heavy => {
                for ti in pick_half(self.tools.len(), rng) {
                    let tool_key = self.originals[ti].name.clone();
                    let count = self.tools[ti].parameters.len();
                    // Addendum family: inject a new mandatory parameter, or
                    // shuffle the existing names. Fewer than two parameters
                    // leaves nothing to shuffle, so those always get one.
                    if count < 2 || rng.random_bool(0.5) {
                        let injected = inject_avoiding(rng, &self.taken_param_names(ti))?;
                        self.tools[ti].parameters.push(injected.parameter.clone());
                        self.mapping.injected_params.insert(tool_key, injected);
                    } else {
                        let perm = derangement(count, rng)?;
                        let originals = &self.originals[ti].parameters;
                        let renames = self.mapping.param_renames.entry(tool_key).or_default();
                        for (pi, &src) in perm.iter().enumerate() {
                            let new = originals[src].name.clone();
                            renames.insert(originals[pi].name.clone(), new.clone());
                            self.tools[ti].parameters[pi].name = new;
                        }
                    }
                    self.kinds.insert(NoiseKind::Addendum);
                }
            }
            NoiseLevel::Clean | NoiseLevel::Union => unreachable!("not a single method"),
        }
        Ok(())
    }
}

/// Generate one environment level from clean cases: two variants per case
/// (tool-name noise, parameter noise) at Slight/Medium/Heavy, one at
/// Clean and Union. Output order follows input order.
pub fn build_environment(
    cases: &[TestCase],
    level: NoiseLevel,
    seed: u64,
) -> Result<Vec<PerturbedCase>, NoiseError> {
    for case in cases {
        let violations = validate_case(case);
        if !violations.is_empty() {
            return Err(NoiseError::InvalidCase {
                case_id: case.id.clone(),
                violations,
            });
        }
    }
    let mut out = Vec::with_capacity(cases.len() * level.targets().len());
    for case in cases {
        for &target in level.targets() {
            let sub_seed = derive_seed(seed, &case.id, level, target);
            let perturbed = perturb_case(case, level, target, sub_seed).map_err(|e| NoiseError::Case {
                case_id: case.id.clone(),
                source: Box::new(e),
            })?;
            out.push(perturbed);
        }
    }
    Ok(out)
}
