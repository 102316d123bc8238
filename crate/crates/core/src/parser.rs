//! Rendering and strict parsing of the tagged verdict format.
//!
//! A verdict is an optional reasoning block followed by exactly one answer
//! block holding a JSON payload:
//!
//! ```text
//! <think>reasoning</think><answer>{"classification": "image manipulated", "region": [{"bbox": [0, 0, 10, 10]}]}</answer>
//! ```
//!
//! Whitespace around the blocks and inside the payload is ignored. Anything
//! else outside the blocks, a second block of either kind, or a think block
//! after the answer makes the text invalid.

use std::fmt::{self, Write as _};

use num_traits::FromPrimitive;
use serde::Deserialize;
use thiserror::Error;

use crate::domain::{BBox, Category};
use crate::scalar::Coord;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Why a text failed the format check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum FormatError {
    #[error("MissingAnswerTag")]
    MissingAnswerTag,
    #[error("MalformedPayload")]
    MalformedPayload,
    #[error("UnknownLabel")]
    UnknownLabel,
    #[error("BadBox")]
    BadBox,
    #[error("TrailingGarbage")]
    TrailingGarbage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormatVerdict {
    pub is_valid: bool,
    pub failure_reason: Option<FormatError>,
}

impl FormatVerdict {
    pub fn from_result<T>(result: &Result<T, FormatError>) -> Self {
        match result {
            Ok(_) => FormatVerdict { is_valid: true, failure_reason: None },
            Err(e) => FormatVerdict { is_valid: false, failure_reason: Some(*e) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidThink;

impl fmt::Display for InvalidThink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "reasoning text must not contain {THINK_CLOSE}")
    }
}

impl std::error::Error for InvalidThink {}

/// A parsed verdict: optional reasoning, the category and the tampered regions.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOutput<T> {
    think: Option<String>,
    category: Category,
    boxes: Vec<BBox<T>>,
}

impl<T: Coord> StructuredOutput<T> {
    /// Reasoning text is stored trimmed, since surrounding whitespace is not
    /// significant in the wire format.
    pub fn new(think: Option<String>, category: Category, boxes: Vec<BBox<T>>) -> Result<Self, InvalidThink> {
        let think = think.map(|t| t.trim().to_string());
        if think.as_deref().is_some_and(|t| t.contains(THINK_CLOSE)) {
            return Err(InvalidThink);
        }
        Ok(StructuredOutput { think, category, boxes })
    }

    pub fn think(&self) -> Option<&str> {
        self.think.as_deref()
    }
    pub fn category(&self) -> Category {
        self.category
    }
    pub fn boxes(&self) -> &[BBox<T>] {
        &self.boxes
    }
}

/// Formats a coordinate with at most six decimals and no exponent.
pub fn format_number(x: f64) -> String {
    let mut s = format!("{x:.6}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

pub fn render_output<T: Coord>(out: &StructuredOutput<T>) -> String {
    let mut text = String::new();
    if let Some(think) = &out.think {
        let _ = write!(text, "{THINK_OPEN}{think}{THINK_CLOSE}");
    }
    let regions: Vec<String> = out
        .boxes
        .iter()
        .map(|b| {
            let coords: Vec<String> =
                b.to_array().iter().map(|c| format_number(c.to_f64().unwrap_or(f64::NAN))).collect();
            format!("{{\"bbox\": [{}]}}", coords.join(", "))
        })
        .collect();
    let _ = write!(
        text,
        "{ANSWER_OPEN}{{\"classification\": \"{}\", \"region\": [{}]}}{ANSWER_CLOSE}",
        out.category.label(),
        regions.join(", ")
    );
    text
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    classification: String,
    region: Vec<RegionEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionEntry {
    bbox: [f64; 4],
}

/// Splits the text into its optional think body and its answer body.
fn split_blocks(text: &str) -> Result<(Option<&str>, &str), FormatError> {
    let mut rest = text.trim_start();
    let mut think = None;
    if let Some(after) = rest.strip_prefix(THINK_OPEN) {
        let end = after.find(THINK_CLOSE).ok_or(FormatError::MissingAnswerTag)?;
        think = Some(&after[..end]);
        rest = after[end + THINK_CLOSE.len()..].trim_start();
    }
    let Some(after) = rest.strip_prefix(ANSWER_OPEN) else {
        return Err(if rest.contains(ANSWER_OPEN) {
            FormatError::TrailingGarbage
        } else {
            FormatError::MissingAnswerTag
        });
    };
    let end = after.find(ANSWER_CLOSE).ok_or(FormatError::MissingAnswerTag)?;
    let payload = &after[..end];
    if !after[end + ANSWER_CLOSE.len()..].trim().is_empty() {
        return Err(FormatError::TrailingGarbage);
    }
    Ok((think, payload))
}

pub fn parse_output<T: Coord + FromPrimitive>(text: &str) -> Result<StructuredOutput<T>, FormatError> {
    let (think, payload) = split_blocks(text)?;
    let payload: Payload = serde_json::from_str(payload).map_err(|_| FormatError::MalformedPayload)?;
    let category = Category::from_label(&payload.classification).ok_or(FormatError::UnknownLabel)?;
    let boxes = payload
        .region
        .iter()
        .map(|entry| {
            let mut coords = [T::zero(); 4];
            for (dst, &src) in coords.iter_mut().zip(&entry.bbox) {
                *dst = T::from_f64(src).ok_or(FormatError::BadBox)?;
            }
            BBox::from_array(coords).map_err(|_| FormatError::BadBox)
        })
        .collect::<Result<Vec<_>, _>>()?;
    StructuredOutput::new(think.map(str::to_string), category, boxes).map_err(|_| FormatError::TrailingGarbage)
}

pub fn check_format(text: &str) -> FormatVerdict {
    FormatVerdict::from_result(&parse_output::<f64>(text))
}
