//! Prompt templates and tool-document rendering.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::catalog::Tool;
use crate::eval::{ModelAction, Turn};
use crate::noise::PerturbedCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

pub const TOOL_DOCUMENT_SLOT: &str = "{Tool Document}";
pub const QUERY_SLOT: &str = "{Query}";
pub const EXAMPLES_SLOT: &str = "{Examples}";

/// System prompt for ReAct-style inference.
pub const INFERENCE_SYSTEM_TEMPLATE: &str = "\
You are an expert in using tools to handle real-time queries from users.
First I will give you the task description, and your task start.
At each step, your task is to give your thought to analyze the current state, decide the next step, with a function call to actually execute your step.
After the call, you will get the call result, and you are now in a new state.
Then you will analyze your status now, then decide what to do next...
After many (Thought-call) pairs, you finally perform the task, then you can give your final answer.

Desired format:
Thought: <The thought>
Action: <The tool you decide to use>
Action Input: <The parameters for the tool>

Remember:
1. You should ALWAYS think about what to do, but all the thought is short, at most in 3 sentences.
2. The action to take should be one of the given tools below.
3. The \"Action Input\" needs to provide a dict similar to {parameter_1: value_1, parameter_2: value_2} to call action.
4. Always use the \"finish\" tool upon task completion. The final answer should be comprehensive enough for the user. If the task is unmanageable, use the \"finish\" tool and respond with \"I cannot handle the task.\"

Task description: You should use tools to help handle the real time user queries. Specifically, you have access of the following tools:
{Tool Document}

Let's Begin!";

pub const INFERENCE_USER_TEMPLATE: &str = "{Query}\nBegin!";

/// System prompt for generating new user queries from a tool subset.
pub const QUERY_EXPANSION_SYSTEM_TEMPLATE: &str = "\
As an expert, your assignment is to utilize the comprehensive documentation of various tools to develop a series of problem scenarios that these tools can resolve. Ideally, each scenario should necessitate the sequential use of multiple tools for its resolution.

Remember:
1. The tools employed to address a problem should be a subset of the tools detailed in the provided documentation; ideally, each problem should require the use of more than one tool.
2. The parameter values needed by each tool can either be directly extracted from the query or obtained by invoking the specified other tool.
3. The problem scenario should be expressed in a way that is understandable to humans, while also showcasing the diverse functions of the provided tools and their interrelationships.

Here is the documentation of various tools: {Tool Document}";

pub const QUERY_EXPANSION_USER_TEMPLATE: &str =
    "Please generate {Count} diverse queries according to the documentation.\n\nExamples:\n{Examples}";

/// System prompt for generating trajectories with a function-calling model.
pub const TRAJECTORY_SYSTEM_TEMPLATE: &str = "\
You are an expert in using tools to handle real-time queries from users.
At each step, your task is to give your thought to analyze the current state, decide the next step, with a function call to actually execute your step.
After the call, you will get the call result, and you are now in a new state.
Then you will analyze your status now, then decide what to do next...
After a series of these thought-action pairs, you will complete the task and provide the final answer.

Remember:
1. You must ALWAYS select a specific function to execute your idea at each step.
2. Before calling any function, you should ALWAYS give your thought, but limit it to a maximum of three sentences.
3. ALWAYS use the \"finish\" tool upon task completion. The final answer should be comprehensive enough for the user. If the task is unmanageable, use the \"finish\" tool and respond with \"I cannot handle the task\".

Let's begin!";

/// Render tools as a numbered list with one line per parameter:
///
/// ```text
/// 1. get_weather: Current weather for a city.
///    Parameters:
///    - city (string, required): City name.
///    - unit (enum: celsius | fahrenheit, optional): Temperature unit.
/// ```
pub fn render_tool_document(tools: &[Tool]) -> String {
    let mut out = String::new();
    for (i, tool) in tools.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{}. {}: {}", i + 1, tool.name, tool.description);
        if tool.parameters.is_empty() {
            out.push_str("   Parameters: none\n");
            continue;
        }
        out.push_str("   Parameters:\n");
        for p in &tool.parameters {
            let ty = match &p.enum_values {
                Some(values) => format!("enum: {}", values.join(" | ")),
                None => String::from(p.value_type.as_str()),
            };
            let req = if p.required { "required" } else { "optional" };
            let _ = writeln!(out, "   - {} ({ty}, {req}): {}", p.name, p.description);
        }
    }
    out.truncate(out.trim_end().len());
    out
}

/// Canonical ReAct rendering of an action, as a model is asked to emit it.
pub fn render_action(action: &ModelAction) -> String {
    let input = serde_json::to_string(&action.arguments).unwrap_or_else(|_| String::from("{}"));
    format!(
        "Thought: {}\nAction: {}\nAction Input: {input}",
        action.thought.as_deref().unwrap_or(""),
        action.tool_name,
    )
}

pub fn render_observation(observation: &str) -> String {
    format!("Observation: {observation}")
}

/// System + user messages followed by one assistant/user pair per prior turn.
pub fn build_messages(tools: &[Tool], query: &str, prior_turns: &[Turn]) -> Vec<ChatMessage> {
    let system = INFERENCE_SYSTEM_TEMPLATE.replace(TOOL_DOCUMENT_SLOT, &render_tool_document(tools));
    let user = INFERENCE_USER_TEMPLATE.replace(QUERY_SLOT, query);
    let mut messages = Vec::with_capacity(2 + 2 * prior_turns.len());
    messages.push(ChatMessage::new(Role::System, system));
    messages.push(ChatMessage::new(Role::User, user));
    for turn in prior_turns {
        messages.push(ChatMessage::new(Role::Assistant, render_action(&turn.action)));
        messages.push(ChatMessage::new(Role::User, render_observation(&turn.observation)));
    }
    messages
}

pub fn build_prompt(case: &PerturbedCase) -> Vec<ChatMessage> {
    build_messages(&case.tools, &case.query, &case.prior_turns)
}

pub fn build_query_expansion_prompt(tools: &[Tool], examples: &[String], count: usize) -> Vec<ChatMessage> {
    let examples = examples
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {e}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let count = format!("{count}");
    alloc::vec![
        ChatMessage::new(
            Role::System,
            QUERY_EXPANSION_SYSTEM_TEMPLATE.replace(TOOL_DOCUMENT_SLOT, &render_tool_document(tools)),
        ),
        ChatMessage::new(
            Role::User,
            QUERY_EXPANSION_USER_TEMPLATE
                .replace("{Count}", &count)
                .replace(EXAMPLES_SLOT, &examples),
        ),
    ]
}

pub fn build_trajectory_prompt(query: &str) -> Vec<ChatMessage> {
    alloc::vec![
        ChatMessage::new(Role::System, TRAJECTORY_SYSTEM_TEMPLATE),
        ChatMessage::new(Role::User, INFERENCE_USER_TEMPLATE.replace(QUERY_SLOT, query)),
    ]
}

/// Pull queries out of a generated numbered or bulleted list.
pub fn parse_generated_queries(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            let l = l.trim();
            let l = l.trim_start_matches(|c: char| c.is_ascii_digit());
            let l = l.trim_start_matches(['.', ')', '-', '*', ':']);
            l.trim()
        })
        .filter(|l| !l.is_empty() && !l.ends_with(':'))
        .map(String::from)
        .collect()
}
