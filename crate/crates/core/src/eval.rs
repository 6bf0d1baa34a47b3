//! Parsing model output and scoring it in three gated stages.
//!
//! A case scores `s_ts = 1` when the emitted tool name equals the gold name
//! of the environment the model saw, `s_pi = s_ts` when additionally the
//! emitted argument keys equal the gold parameter set, and `s_cf = s_pi`
//! when additionally every gold parameter's content matches after trimming
//! outer whitespace.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalog::{GoldCall, Tool};
use crate::noise::{NoiseLevel, PerturbedCase};

/// A single tool call emitted by a model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    #[serde(rename = "action")]
    pub tool_name: String,
    #[serde(rename = "action_input", default)]
    pub arguments: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub raw: String,
}

impl ModelAction {
    pub fn new<K, V>(tool_name: impl Into<String>, arguments: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            thought: None,
            tool_name: tool_name.into(),
            arguments: arguments
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            raw: String::new(),
        }
    }

    /// Build an action from a structured function call. `arguments` may be
    /// an object or a string holding a JSON object.
    pub fn from_function_call(name: &str, arguments: &Value) -> Result<Self, ParseError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ParseError::EmptyToolName);
        }
        let object = match arguments {
            Value::Object(map) => map.clone(),
            Value::String(s) if s.trim().is_empty() => serde_json::Map::new(),
            Value::String(s) => match serde_json::from_str::<Value>(s) {
                Ok(Value::Object(map)) => map,
                _ => return Err(ParseError::InvalidActionInput(s.clone())),
            },
            Value::Null => serde_json::Map::new(),
            other => return Err(ParseError::InvalidActionInput(other.to_string())),
        };
        Ok(Self {
            thought: None,
            tool_name: name.to_string(),
            arguments: object
                .into_iter()
                .map(|(k, v)| (k, value_to_string(v)))
                .collect(),
            raw: String::new(),
        })
    }
}

/// One interaction turn: the model's action and the observation it got back.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(flatten)]
    pub action: ModelAction,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no `Action:` line found")]
    MissingAction,
    #[error("no `Action Input:` after the last action")]
    MissingActionInput,
    #[error("action input is not a parameter dict: {0}")]
    InvalidActionInput(String),
    #[error("empty tool name")]
    EmptyToolName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ToolSelection,
    ParameterIdentification,
    ContentFilling,
}

impl Stage {
    pub const ALL: [Stage; 3] = [
        Stage::ToolSelection,
        Stage::ParameterIdentification,
        Stage::ContentFilling,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::ToolSelection => "Tool Selection",
            Stage::ParameterIdentification => "Parameter Identification",
            Stage::ContentFilling => "Content Filling",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Stage::ToolSelection => "ts",
            Stage::ParameterIdentification => "pi",
            Stage::ContentFilling => "cf",
        }
    }
}

impl core::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ts" | "tool_selection" => Ok(Stage::ToolSelection),
            "pi" | "parameter_identification" => Ok(Stage::ParameterIdentification),
            "cf" | "content_filling" => Ok(Stage::ContentFilling),
            other => Err(alloc::format!("unknown stage `{other}` (expected ts, pi or cf)")),
        }
    }
}

/// Gated 0/1 stage scores; `s_cf <= s_pi <= s_ts` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageScores {
    pub s_ts: u8,
    pub s_pi: u8,
    pub s_cf: u8,
}

impl StageScores {
    pub const ZERO: StageScores = StageScores {
        s_ts: 0,
        s_pi: 0,
        s_cf: 0,
    };

    pub fn get(&self, stage: Stage) -> u8 {
        match stage {
            Stage::ToolSelection => self.s_ts,
            Stage::ParameterIdentification => self.s_pi,
            Stage::ContentFilling => self.s_cf,
        }
    }

    pub fn is_gated(&self) -> bool {
        self.s_cf <= self.s_pi && self.s_pi <= self.s_ts && self.s_ts <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub base: String,
    pub scenario: String,
    pub level: NoiseLevel,
    pub scores: StageScores,
    pub hallucinated: bool,
    /// The model answered a tool's pre-noise name instead of the one shown.
    pub noise_corrected: bool,
    /// Same, for parameter names of the gold tool.
    pub param_noise_corrected: bool,
    pub parse_failed: bool,
}

pub fn score_tool_selection(action: &ModelAction, gold: &GoldCall) -> u8 {
    u8::from(action.tool_name == gold.tool_name)
}

pub fn score_parameter_identification(s_ts: u8, action: &ModelAction, gold: &GoldCall) -> u8 {
    let same_set = action.arguments.len() == gold.parameters.len()
        && gold.parameters.iter().all(|p| action.arguments.contains_key(p));
    s_ts * u8::from(same_set)
}

pub fn score_content_filling(s_pi: u8, action: &ModelAction, gold: &GoldCall) -> u8 {
    let all_match = gold.parameters.iter().all(|p| {
        match (action.arguments.get(p), gold.contents.get(p)) {
            (Some(got), Some(want)) => got.trim() == want.trim(),
            _ => false,
        }
    });
    s_pi * u8::from(all_match)
}

pub fn score_action(action: &ModelAction, gold: &GoldCall) -> StageScores {
    let s_ts = score_tool_selection(action, gold);
    let s_pi = score_parameter_identification(s_ts, action, gold);
    let s_cf = score_content_filling(s_pi, action, gold);
    StageScores { s_ts, s_pi, s_cf }
}

/// True when the emitted tool is neither in `tools` nor a meta tool.
pub fn detect_hallucination(action: &ModelAction, tools: &[Tool]) -> bool {
    !crate::is_meta_tool(&action.tool_name) && !tools.iter().any(|t| t.name == action.tool_name)
}

/// Parse, score and diagnose one model output against a perturbed case.
pub fn evaluate_case(perturbed: &PerturbedCase, output: &str) -> EvalRecord {
    evaluate_action(perturbed, parse_react(output).as_ref().ok())
}

/// Score an already-parsed action; `None` records a parse failure.
pub fn evaluate_action(perturbed: &PerturbedCase, action: Option<&ModelAction>) -> EvalRecord {
    let mut record = EvalRecord {
        case_id: perturbed.id.clone(),
        base: perturbed.base.clone(),
        scenario: perturbed.scenario.clone(),
        level: perturbed.level,
        scores: StageScores::ZERO,
        hallucinated: false,
        noise_corrected: false,
        param_noise_corrected: false,
        parse_failed: false,
    };
    let Some(action) = action else {
        record.parse_failed = true;
        return record;
    };

    let mapping = &perturbed.mapping;
    record.scores = score_action(action, &perturbed.gold);
    record.hallucinated = detect_hallucination(action, &perturbed.tools);
    record.noise_corrected = record.hallucinated && mapping.is_renamed_original_tool(&action.tool_name);

    if record.scores.s_ts == 1 {
        let original_tool = mapping.original_tool_name(&perturbed.gold.tool_name);
        if let Some(renames) = mapping.param_renames.get(original_tool) {
            let shown: Vec<&str> = perturbed
                .tools
                .iter()
                .find(|t| t.name == perturbed.gold.tool_name)
                .map(|t| t.parameters.iter().map(|p| p.name.as_str()).collect())
                .unwrap_or_default();
            record.param_noise_corrected = action.arguments.keys().any(|k| {
                !shown.contains(&k.as_str())
                    && renames.iter().any(|(orig, new)| orig == k && new != k)
            });
        }
    }
    record
}

/// Extract the last Thought / Action / Action Input block from free text.
pub fn parse_react(text: &str) -> Result<ModelAction, ParseError> {
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect();

    let action_idx = lines
        .iter()
        .rposition(|l| strip_label(l, "action").is_some())
        .ok_or(ParseError::MissingAction)?;
    let tool_name = clean_tool_name(strip_label(lines[action_idx], "action").unwrap_or(""));
    if tool_name.is_empty() {
        return Err(ParseError::EmptyToolName);
    }

    // Thought belongs to this block if it appears after the previous block's end.
    let mut thought = None;
    for i in (0..action_idx).rev() {
        let l = lines[i];
        if let Some(rest) = strip_label(l, "thought") {
            let mut parts: Vec<&str> = Vec::new();
            parts.push(rest.trim());
            parts.extend(lines[i + 1..action_idx].iter().map(|l| l.trim()));
            let joined = parts
                .into_iter()
                .filter(|p| !p.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            thought = Some(joined);
            break;
        }
        if strip_label(l, "action input").is_some() || strip_label(l, "observation").is_some() {
            break;
        }
    }

    let mut input_text = None;
    for (i, l) in lines.iter().enumerate().skip(action_idx + 1) {
        if let Some(rest) = strip_label(l, "action input") {
            let mut buf = String::from(rest);
            for more in &lines[i + 1..] {
                if is_block_boundary(more) {
                    break;
                }
                buf.push('\n');
                buf.push_str(more);
            }
            input_text = Some(buf);
            break;
        }
        if is_block_boundary(l) {
            break;
        }
    }
    let input_text = input_text.ok_or(ParseError::MissingActionInput)?;
    let arguments = parse_arguments(&input_text)?;

    Ok(ModelAction {
        thought,
        tool_name,
        arguments,
        raw: text.to_string(),
    })
}

fn is_block_boundary(line: &str) -> bool {
    ["thought", "action", "observation", "final answer"]
        .iter()
        .any(|label| strip_label(line, label).is_some())
}

/// If `line` starts with `label:` (ASCII case-insensitive, after leading
/// whitespace), return what follows the colon. `action` does not match
/// `Action Input:`.
fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let trimmed = line.trim_start();
    let n = label.len();
    let head = trimmed.get(..n)?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    trimmed[n..].trim_start_matches([' ', '\t']).strip_prefix(':')
}

fn clean_tool_name(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c| matches!(c, '`' | '"' | '\'' | '*'))
        .trim()
        .to_string()
}

fn parse_arguments(text: &str) -> Result<BTreeMap<String, String>, ParseError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(BTreeMap::new());
    }
    let Some(start) = trimmed.find('{') else {
        return Err(ParseError::InvalidActionInput(trimmed.to_string()));
    };
    let Some(end) = matching_brace(trimmed, start) else {
        return Err(ParseError::InvalidActionInput(trimmed.to_string()));
    };
    let object = &trimmed[start..=end];
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(object) {
        return Ok(map
            .into_iter()
            .map(|(k, v)| (k, value_to_string(v)))
            .collect());
    }
    parse_loose_dict(object).ok_or_else(|| ParseError::InvalidActionInput(object.to_string()))
}

/// Index of the brace closing the one at `open`, skipping quoted strings.
fn matching_brace(s: &str, open: usize) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut i = open;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if b == b'\\' {
                    i += 1;
                } else if b == q {
                    quote = None;
                }
            }
            None => match b {
                b'"' | b'\'' => quote = Some(b),
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i);
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    None
}

fn value_to_string(v: Value) -> String {
    match v {
        Value::String(s) => s,
        Value::Null => "null".to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        other => other.to_string(),
    }
}

/// Python-style dicts: single or double quotes, or bare keys and values.
fn parse_loose_dict(object: &str) -> Option<BTreeMap<String, String>> {
    let inner = object.strip_prefix('{')?.strip_suffix('}')?;
    let mut out = BTreeMap::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let (key, after) = take_token(rest, &[':'])?;
        rest = after.trim_start().strip_prefix(':')?.trim_start();
        let (value, after) = take_token(rest, &[',', '}'])?;
        out.insert(key, value);
        rest = after.trim_start();
        match rest.strip_prefix(',') {
            Some(r) => rest = r.trim_start(),
            None if rest.is_empty() => {}
            None => return None,
        }
    }
    Some(out)
}

/// A quoted string, a bracketed literal, or bare text up to a terminator.
fn take_token<'a>(s: &'a str, terminators: &[char]) -> Option<(String, &'a str)> {
    let first = s.chars().next()?;
    if first == '"' || first == '\'' {
        let mut out = String::new();
        let mut chars = s.char_indices().skip(1);
        while let Some((i, c)) = chars.next() {
            if c == '\\' {
                let (_, esc) = chars.next()?;
                out.push(match esc {
                    'n' => '\n',
                    't' => '\t',
                    other => other,
                });
            } else if c == first {
                return Some((out, &s[i + c.len_utf8()..]));
            } else {
                out.push(c);
            }
        }
        return None;
    }
    if first == '[' || first == '{' {
        let close = if first == '[' { ']' } else { '}' };
        let mut depth = 0usize;
        for (i, c) in s.char_indices() {
            if c == first {
                depth += 1;
            } else if c == close {
                depth -= 1;
                if depth == 0 {
                    return Some((s[..=i].to_string(), &s[i + 1..]));
                }
            }
        }
        return None;
    }
    let end = s.find(|c| terminators.contains(&c)).unwrap_or(s.len());
    let token = s[..end].trim();
    if token.is_empty() {
        return None;
    }
    Some((token.to_string(), &s[end..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn gold(tool: &str, contents: &[(&str, &str)]) -> GoldCall {
        GoldCall {
            tool_name: tool.into(),
            parameters: contents.iter().map(|(k, _)| k.to_string()).collect::<BTreeSet<_>>(),
            contents: contents
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    #[test]
    fn parses_basic_block() {
        let a = parse_react("Thought: x\nAction: get_quotes\nAction Input: {\"symbols\": \"AAPL\"}")
            .unwrap();
        assert_eq!(a.tool_name, "get_quotes");
        assert_eq!(a.thought.as_deref(), Some("x"));
        assert_eq!(a.arguments.get("symbols").map(String::as_str), Some("AAPL"));
    }

    #[test]
    fn missing_action_is_a_failure() {
        assert_eq!(
            parse_react("Thought: I should answer directly."),
            Err(ParseError::MissingAction)
        );
        assert_eq!(
            parse_react("Action: get_quotes\nThought: hmm"),
            Err(ParseError::MissingActionInput)
        );
    }

    #[test]
    fn last_block_wins() {
        let text = "Thought: first\nAction: a_tool\nAction Input: {\"x\": \"1\"}\n\
                    Observation: ok\n\
                    Thought: second\nAction: b_tool\nAction Input: {\"y\": \"2\"}\n";
        let a = parse_react(text).unwrap();
        assert_eq!(a.tool_name, "b_tool");
        assert_eq!(a.thought.as_deref(), Some("second"));
        assert_eq!(a, ModelAction { thought: a.thought.clone(), raw: text.into(), ..ModelAction::new("b_tool", [("y", "2")]) });
    }

    #[test]
    fn tolerates_fences_prose_and_multiline_json() {
        let text = "Sure! Here is my step.\n```\nThought: look up\nthe price\nAction: `get_quotes`\n\
                    Action Input: {\n  \"symbols\": \"AAPL\",\n  \"limit\": 3,\n  \"live\": true\n}\n```\n";
        let a = parse_react(text).unwrap();
        assert_eq!(a.tool_name, "get_quotes");
        assert_eq!(a.thought.as_deref(), Some("look up the price"));
        assert_eq!(a.arguments["limit"], "3");
        assert_eq!(a.arguments["live"], "true");
    }

    #[test]
    fn python_style_dict() {
        let a = parse_react("Action: f\nAction Input: {'a': 'x, y', b: 2, \"c\": [1, 2]}").unwrap();
        assert_eq!(a.arguments["a"], "x, y");
        assert_eq!(a.arguments["b"], "2");
        assert_eq!(a.arguments["c"], "[1, 2]");
    }

    #[test]
    fn non_dict_input_fails() {
        assert!(matches!(
            parse_react("Action: f\nAction Input: just words"),
            Err(ParseError::InvalidActionInput(_))
        ));
        assert!(matches!(
            parse_react("Action: f\nAction Input: {\"a\": \"unterminated"),
            Err(ParseError::InvalidActionInput(_))
        ));
    }

    #[test]
    fn empty_input_is_empty_arguments() {
        let a = parse_react("Action: finish\nAction Input: {}").unwrap();
        assert!(a.arguments.is_empty());
    }

    #[test]
    fn function_call_form() {
        let args = serde_json::json!("{\"city\": \"Paris\", \"days\": 2}");
        let a = ModelAction::from_function_call("get_weather", &args).unwrap();
        assert_eq!(a.arguments["days"], "2");
        assert!(ModelAction::from_function_call(" ", &Value::Null).is_err());
    }

    #[test]
    fn tool_selection_examples() {
        let g = gold("predOict_aTge", &[]);
        assert_eq!(score_tool_selection(&ModelAction::new("predOict_aTge", [("", ""); 0]), &g), 1);
        assert_eq!(score_tool_selection(&ModelAction::new("predict_age", [("", ""); 0]), &g), 0);
        let g = gold("ABC", &[]);
        assert_eq!(score_tool_selection(&ModelAction::new("ABC", [("", ""); 0]), &g), 1);
    }

    #[test]
    fn parameter_identification_examples() {
        let g = gold("t", &[("a", "1"), ("b", "2")]);
        assert_eq!(score_parameter_identification(0, &ModelAction::new("t", [("a", "1"), ("b", "2")]), &g), 0);
        assert_eq!(score_parameter_identification(1, &ModelAction::new("t", [("a", "1")]), &g), 0);
        assert_eq!(score_parameter_identification(1, &ModelAction::new("t", [("b", "2"), ("a", "1")]), &g), 1);
        assert_eq!(
            score_parameter_identification(1, &ModelAction::new("t", [("b", "2"), ("a", "1"), ("c", "3")]), &g),
            0
        );
    }

    #[test]
    fn content_filling_examples() {
        let g = gold("t", &[("a", "1"), ("zq", "xq")]);
        assert_eq!(score_content_filling(1, &ModelAction::new("t", [("a", "1"), ("zq", "xq")]), &g), 1);
        assert_eq!(score_content_filling(1, &ModelAction::new("t", [("a", "2"), ("zq", "xq")]), &g), 0);
        assert_eq!(score_content_filling(1, &ModelAction::new("t", [("a", "1"), ("zq", "xq ")]), &g), 1);
        assert_eq!(score_content_filling(1, &ModelAction::new("t", [("a", "1"), ("zq", "XQ")]), &g), 0);
        assert_eq!(score_content_filling(1, &ModelAction::new("t", [("a", "2.0"), ("zq", "xq")]), &gold("t", &[("a", "2"), ("zq", "xq")])), 0);
        assert_eq!(score_content_filling(0, &ModelAction::new("t", [("a", "1"), ("zq", "xq")]), &g), 0);
    }

    #[test]
    fn hallucination() {
        let tools = [Tool { name: "get_quotes".into(), description: String::new(), parameters: Vec::new() }];
        assert!(!detect_hallucination(&ModelAction::new("get_quotes", [("", ""); 0]), &tools));
        assert!(!detect_hallucination(&ModelAction::new("finish", [("", ""); 0]), &tools));
        assert!(detect_hallucination(&ModelAction::new("made_up_tool", [("", ""); 0]), &tools));
    }

    #[test]
    fn turn_serializes_flat() {
        let turn = Turn {
            action: ModelAction::new("f", [("a", "1")]),
            observation: "ok".into(),
        };
        let s = serde_json::to_string(&turn).unwrap();
        assert_eq!(s, r#"{"action":"f","action_input":{"a":"1"},"observation":"ok"}"#);
        let back: Turn = serde_json::from_str(&s).unwrap();
        assert_eq!(back, turn);
    }
}
