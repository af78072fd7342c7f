//! Model files: four named sections, one prefix expression each.
//!
//! ```text
//! [P1]
//! (add (mul (const -0.05) (var P1dot)) (const 0))
//! [P2]
//! (const 0)
//! [P3]
//! (const 0)
//! [RA]
//! (const 0)
//! ```
//!
//! Lines starting with `#` are comments. Expressions may span several lines.

use thiserror::Error;

use super::DeSystem;
use crate::expr::{format_prefix, parse_prefix, ExpressionTree, ParseError};
use crate::genotype::TREES;

pub const SECTION_NAMES: [&str; TREES] = ["P1", "P2", "P3", "RA"];

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("line {0}: text outside of a section")]
    OutsideSection(usize),
    #[error("line {line}: unknown section `{name}`")]
    UnknownSection { line: usize, name: String },
    #[error("section `{0}` appears twice")]
    DuplicateSection(&'static str),
    #[error("section `{0}` is missing")]
    MissingSection(&'static str),
    #[error("section `{section}`: {source}")]
    Expression {
        section: &'static str,
        source: ParseError,
    },
}

pub fn format_model(system: &DeSystem) -> String {
    let mut out = String::new();
    for (name, tree) in SECTION_NAMES.iter().zip(&system.trees) {
        out.push('[');
        out.push_str(name);
        out.push_str("]\n");
        out.push_str(&format_prefix(tree));
        out.push('\n');
    }
    out
}

pub fn parse_model(text: &str) -> Result<DeSystem, ModelError> {
    let mut bodies: [Option<String>; TREES] = Default::default();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = inner.trim();
            let slot = SECTION_NAMES
                .iter()
                .position(|s| *s == name)
                .ok_or_else(|| ModelError::UnknownSection {
                    line: i + 1,
                    name: name.to_string(),
                })?;
            if bodies[slot].is_some() {
                return Err(ModelError::DuplicateSection(SECTION_NAMES[slot]));
            }
            bodies[slot] = Some(String::new());
            current = Some(slot);
            continue;
        }
        let slot = current.ok_or(ModelError::OutsideSection(i + 1))?;
        let body = bodies[slot].as_mut().unwrap();
        body.push(' ');
        body.push_str(line);
    }
    let mut trees: Vec<ExpressionTree> = Vec::with_capacity(TREES);
    for (slot, body) in bodies.into_iter().enumerate() {
        let section = SECTION_NAMES[slot];
        let body = body.ok_or(ModelError::MissingSection(section))?;
        let tree =
            parse_prefix(&body).map_err(|source| ModelError::Expression { section, source })?;
        trees.push(tree);
    }
    Ok(DeSystem::new(trees.try_into().expect("four sections")))
}
