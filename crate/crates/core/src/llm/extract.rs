//! Pulls code and explanation out of a free-form model reply.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::patch::Scan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionRule {
    FencedBlock,
    WholeMessage,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub code: Option<String>,
    pub explanation: Option<String>,
    pub extraction_rule_fired: ExtractionRule,
    /// The reply looked cut off (unclosed fence or unbalanced braces).
    #[serde(default)]
    pub truncated: bool,
}

impl ExtractionResult {
    fn none(explanation: Option<String>, truncated: bool) -> Self {
        ExtractionResult { code: None, explanation, extraction_rule_fired: ExtractionRule::None, truncated }
    }
}

const TYPE_WORDS: &[&str] = &[
    "int", "void", "double", "float", "char", "long", "short", "unsigned", "signed", "static", "const", "struct",
    "typedef", "extern", "inline", "template", "namespace", "using", "class", "bool", "size_t", "auto", "enum",
    "union",
];

struct Fence {
    body: Range<usize>,
    outer: Range<usize>,
}

/// Splits `text` into lines with their byte offsets (line content without
/// the terminator, and the offset just past the terminator).
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str, usize)> {
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= text.len() {
            return None;
        }
        let start = pos;
        let (line, next) = match text[start..].find('\n') {
            Some(i) => (&text[start..start + i], start + i + 1),
            None => (&text[start..], text.len()),
        };
        pos = next;
        Some((start, line.strip_suffix('\r').unwrap_or(line), next))
    })
}

fn fence_marker(line: &str) -> Option<&str> {
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    line[indent..].strip_prefix("```").map(|rest| rest.trim())
}

/// Returns closed fences and whether an unclosed fence was seen.
fn fences(text: &str) -> (Vec<Fence>, bool) {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (start, line, next) in lines_with_offsets(text) {
        let Some(info) = fence_marker(line) else { continue };
        match open {
            None => open = Some((start, next)),
            Some((outer_start, body_start)) if info.is_empty() => {
                out.push(Fence { body: body_start..start, outer: outer_start..next });
                open = None;
            }
            // An info string on a fence inside a block opens nothing new.
            Some(_) => {}
        }
    }
    (out, open.is_some())
}

fn looks_like_source(text: &str) -> bool {
    let t = text.trim_start();
    if t.starts_with('#') || t.starts_with("//") || t.starts_with("/*") {
        return true;
    }
    let word: String = t.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
    TYPE_WORDS.contains(&word.as_str())
}

fn braces_cut_off(code: &str) -> bool {
    Scan::new(code).brace_balance().1 > 0
}

fn explanation_around(text: &str, outer: Range<usize>) -> Option<String> {
    let before = text[..outer.start].trim();
    let after = text[outer.end..].trim();
    let joined = match (before.is_empty(), after.is_empty()) {
        (true, true) => return None,
        (false, true) => before.to_string(),
        (true, false) => after.to_string(),
        (false, false) => format!("{before}\n{after}"),
    };
    Some(joined)
}

/// Picks the largest fenced block (first one on ties), else the whole
/// message when it reads like a translation unit, else nothing.
pub fn extract_code(raw_text: &str) -> ExtractionResult {
    let (blocks, unclosed) = fences(raw_text);
    let best = blocks
        .iter()
        .filter(|f| !raw_text[f.body.clone()].trim().is_empty())
        .fold(None::<&Fence>, |best, f| match best {
            Some(b) if b.body.len() >= f.body.len() => Some(b),
            _ => Some(f),
        });
    if unclosed {
        let explanation = best.and_then(|f| explanation_around(raw_text, f.outer.clone()));
        return ExtractionResult::none(explanation, true);
    }
    if let Some(f) = best {
        let code = &raw_text[f.body.clone()];
        let explanation = explanation_around(raw_text, f.outer.clone());
        if braces_cut_off(code) {
            return ExtractionResult::none(explanation, true);
        }
        return ExtractionResult {
            code: Some(code.to_string()),
            explanation,
            extraction_rule_fired: ExtractionRule::FencedBlock,
            truncated: false,
        };
    }
    if blocks.is_empty() && looks_like_source(raw_text) {
        let code = raw_text.trim();
        if braces_cut_off(code) {
            return ExtractionResult::none(None, true);
        }
        return ExtractionResult {
            code: Some(code.to_string()),
            explanation: None,
            extraction_rule_fired: ExtractionRule::WholeMessage,
            truncated: false,
        };
    }
    let prose = raw_text.trim();
    ExtractionResult::none((!prose.is_empty()).then(|| prose.to_string()), false)
}
