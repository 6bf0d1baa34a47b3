//! Tool catalog and test-case data model.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::eval::Turn;

/// Declared type of a parameter's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    String,
    Integer,
    Number,
    Boolean,
    Enum,
}

impl ValueType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::String => "string",
            ValueType::Integer => "integer",
            ValueType::Number => "number",
            ValueType::Boolean => "boolean",
            ValueType::Enum => "enum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub description: String,
    #[serde(rename = "type")]
    pub value_type: ValueType,
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
}

impl Parameter {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        value_type: ValueType,
        required: bool,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            value_type,
            required,
            enum_values: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<Parameter>,
}

impl Tool {
    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// An application scenario that groups test cases for reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub label: String,
}

/// The labeled correct invocation for a test case.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldCall {
    #[serde(rename = "tool")]
    pub tool_name: String,
    pub parameters: BTreeSet<String>,
    pub contents: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub scenario: String,
    pub query: String,
    pub tools: Vec<Tool>,
    pub gold: GoldCall,
    /// Earlier turns of the conversation, for evaluating a later turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_turns: Vec<Turn>,
}

impl TestCase {
    pub fn tool(&self, name: &str) -> Option<&Tool> {
        self.tools.iter().find(|t| t.name == name)
    }
}

/// A whole catalog document: optional scenario table plus the cases.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenarios: Vec<Scenario>,
    pub cases: Vec<TestCase>,
}

/// One broken invariant, located by case id and field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub case_id: String,
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case `{}`, {}: {}", self.case_id, self.field, self.rule)
    }
}

/// Printable ASCII, non-empty.
pub fn is_valid_identifier(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| (0x20..0x7f).contains(&b))
}

struct Collector<'a> {
    case_id: &'a str,
    out: Vec<Violation>,
}

impl Collector<'_> {
    fn push(&mut self, field: impl Into<String>, rule: impl Into<String>) {
        self.out.push(Violation {
            case_id: self.case_id.to_string(),
            field: field.into(),
            rule: rule.into(),
        });
    }
}

/// Check every type invariant of a single case. Empty means valid.
pub fn validate_case(case: &TestCase) -> Vec<Violation> {
    let mut v = Collector {
        case_id: &case.id,
        out: Vec::new(),
    };

    if case.id.is_empty() {
        v.push("id", "must be non-empty");
    }

    let mut tool_names = BTreeSet::new();
    for (ti, tool) in case.tools.iter().enumerate() {
        let path = format!("tools[{ti}]");
        if !is_valid_identifier(&tool.name) {
            v.push(format!("{path}.name"), "must be non-empty printable ASCII");
        }
        if !tool_names.insert(tool.name.as_str()) {
            v.push(format!("{path}.name"), format!("duplicate tool name `{}`", tool.name));
        }

        let mut param_names = BTreeSet::new();
        for (pi, param) in tool.parameters.iter().enumerate() {
            let ppath = format!("{path}.parameters[{pi}]");
            if !is_valid_identifier(&param.name) {
                v.push(format!("{ppath}.name"), "must be non-empty printable ASCII");
            }
            if !param_names.insert(param.name.as_str()) {
                v.push(
                    format!("{ppath}.name"),
                    format!("duplicate parameter name `{}`", param.name),
                );
            }
            let is_enum = param.value_type == ValueType::Enum;
            match (&param.enum_values, is_enum) {
                (Some(values), true) if values.is_empty() => {
                    v.push(format!("{ppath}.enum_values"), "must be non-empty for enum type")
                }
                (None, true) => v.push(format!("{ppath}.enum_values"), "required for enum type"),
                (Some(_), false) => v.push(
                    format!("{ppath}.enum_values"),
                    "only allowed for enum type",
                ),
                _ => {}
            }
        }
    }

    let gold = &case.gold;
    match case.tool(&gold.tool_name) {
        None => v.push(
            "gold.tool",
            format!("tool `{}` is not in the case's tools", gold.tool_name),
        ),
        Some(tool) => {
            for p in &gold.parameters {
                if tool.parameter(p).is_none() {
                    v.push(
                        "gold.parameters",
                        format!("`{p}` is not a parameter of `{}`", tool.name),
                    );
                }
            }
            for p in tool.parameters.iter().filter(|p| p.required) {
                if !gold.parameters.contains(&p.name) {
                    v.push(
                        "gold.parameters",
                        format!("required parameter `{}` is missing", p.name),
                    );
                }
            }
        }
    }
    for p in &gold.parameters {
        if !gold.contents.contains_key(p) {
            v.push("gold.contents", format!("no content for parameter `{p}`"));
        }
    }
    for k in gold.contents.keys() {
        if !gold.parameters.contains(k) {
            v.push("gold.contents", format!("`{k}` is not in gold.parameters"));
        }
    }

    v.out
}

/// Validate every case plus the catalog-wide rules (unique case ids,
/// unique scenario ids, scenario references resolve when a table is given).
pub fn validate_catalog(catalog: &Catalog) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut scenario_ids = BTreeSet::new();
    for s in &catalog.scenarios {
        if !scenario_ids.insert(s.id.as_str()) {
            out.push(Violation {
                case_id: String::new(),
                field: "scenarios".into(),
                rule: format!("duplicate scenario id `{}`", s.id),
            });
        }
    }
    let mut case_ids = BTreeSet::new();
    for case in &catalog.cases {
        if !case_ids.insert(case.id.as_str()) {
            out.push(Violation {
                case_id: case.id.clone(),
                field: "id".into(),
                rule: "duplicate case id".into(),
            });
        }
        if !scenario_ids.is_empty() && !scenario_ids.contains(case.scenario.as_str()) {
            out.push(Violation {
                case_id: case.id.clone(),
                field: "scenario".into(),
                rule: format!("unknown scenario `{}`", case.scenario),
            });
        }
        out.extend(validate_case(case));
    }
    out
}
