//! Templated instruction vocabulary: six reserved words followed by one token
//! per catalog event type.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::catalog::Catalog;
use crate::error::{Error, Result};

pub const ADD: usize = 0;
pub const REMOVE: usize = 1;
pub const REPLACE: usize = 2;
pub const WITH: usize = 3;
pub const NULL: usize = 4;
pub const PAD: usize = 5;
pub const RESERVED: [&str; 6] = ["ADD", "REMOVE", "REPLACE", "WITH", "NULL", "PAD"];

pub fn vocab_size(catalog: &Catalog) -> usize {
    RESERVED.len() + catalog.len()
}

pub fn event_token(event_type: usize) -> usize {
    RESERVED.len() + event_type
}

pub fn token_event(token: usize) -> Option<usize> {
    token.checked_sub(RESERVED.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Add,
    Remove,
    Replace,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Add, Task::Remove, Task::Replace];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("task index {i}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Add => "add",
            Task::Remove => "remove",
            Task::Replace => "replace",
        })
    }
}

/// `[ADD a]`, `[REMOVE a]` or `[REPLACE a WITH b]`.
pub fn tokenize_instruction(
    task: Task,
    event_a: usize,
    event_b: Option<usize>,
) -> Result<Vec<usize>> {
    match (task, event_b) {
        (Task::Add, _) => Ok(vec![ADD, event_token(event_a)]),
        (Task::Remove, _) => Ok(vec![REMOVE, event_token(event_a)]),
        (Task::Replace, Some(b)) => Ok(vec![REPLACE, event_token(event_a), WITH, event_token(b)]),
        (Task::Replace, None) => Err(Error::InvalidTriplet("replace needs a second event".into())),
    }
}

/// Inverse of [`tokenize_instruction`].
pub fn detokenize(tokens: &[usize]) -> Result<(Task, usize, Option<usize>)> {
    let ev = |t: usize| {
        token_event(t).ok_or_else(|| Error::UnknownToken(format!("{t} is not an event token")))
    };
    match tokens {
        [ADD, a] => Ok((Task::Add, ev(*a)?, None)),
        [REMOVE, a] => Ok((Task::Remove, ev(*a)?, None)),
        [REPLACE, a, WITH, b] => Ok((Task::Replace, ev(*a)?, Some(ev(*b)?))),
        _ => Err(Error::UnknownToken(format!(
            "no template matches {tokens:?}"
        ))),
    }
}

/// Parses "add dog", "remove siren", "replace dog with siren" (case-insensitive).
pub fn parse_instruction(text: &str, catalog: &Catalog) -> Result<Vec<usize>> {
    let words: Vec<String> = text
        .split_whitespace()
        .map(str::to_ascii_lowercase)
        .collect();
    let event = |w: &str| {
        catalog
            .by_name(w)
            .map(|t| t.id)
            .ok_or_else(|| Error::UnknownToken(w.to_string()))
    };
    let words: Vec<&str> = words.iter().map(String::as_str).collect();
    match words.as_slice() {
        ["add", a] => tokenize_instruction(Task::Add, event(a)?, None),
        ["remove", a] => tokenize_instruction(Task::Remove, event(a)?, None),
        ["replace", a, "with", b] => {
            tokenize_instruction(Task::Replace, event(a)?, Some(event(b)?))
        }
        _ => Err(Error::UnknownToken(format!(
            "cannot parse instruction {text:?}"
        ))),
    }
}

pub fn render_tokens(tokens: &[usize], catalog: &Catalog) -> String {
    tokens
        .iter()
        .map(|&t| match token_event(t) {
            Some(e) => catalog
                .types
                .get(e)
                .map_or_else(|| format!("<{t}>"), |ty| ty.name.clone()),
            None => RESERVED[t].to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}
