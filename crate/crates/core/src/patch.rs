//! Locating and replacing C/C++ function definitions by name.
//!
//! This is a lexical scanner, not a parser. It understands comments, string
//! and character literals (including escapes and C++ raw strings), and
//! preprocessor directive lines, which is enough to find where a function
//! definition starts and which closing brace ends it. Text inside `#if 0`
//! regions is scanned like any other text.
//!
//! A definition is recognized at file scope (or inside `namespace` and
//! `extern "C"` blocks) as an identifier followed by a parenthesized
//! parameter list and an opening brace. Identifiers in member position
//! (after `.`, `->` or `::`) never match, so out-of-line C++ member
//! definitions are not located.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("function `{0}` not found")]
    NotFound(String),
    #[error("function `{name}` is defined {count} times")]
    Ambiguous { name: String, count: usize },
    #[error("source has unbalanced braces")]
    UnbalancedBraces,
    #[error("replacement text has unbalanced braces")]
    UnbalancedReplacement,
}

/// A located function definition.
///
/// `byte_start` is the first token of the declaration (return type,
/// storage class or attribute); `byte_end` is one past the closing brace,
/// so `&source[byte_start..byte_end]` is the whole definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSpan {
    pub name: String,
    pub byte_start: usize,
    pub byte_end: usize,
    pub signature_text: String,
}

impl FunctionSpan {
    pub fn range(&self) -> Range<usize> {
        self.byte_start..self.byte_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Ident,
    Punct,
    Literal,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    kind: Kind,
    start: usize,
    end: usize,
}

/// Result of lexing one source text.
#[derive(Debug, Clone)]
pub struct Scan<'a> {
    source: &'a str,
    tokens: Vec<Token>,
    directives: Vec<Range<usize>>,
}

fn is_ident_start(b: u8) -> bool {
    b == b'_' || b.is_ascii_alphabetic() || b >= 0x80
}

fn is_ident_continue(b: u8) -> bool {
    is_ident_start(b) || b.is_ascii_digit()
}

const RAW_PREFIXES: [&str; 5] = ["R", "LR", "uR", "UR", "u8R"];

impl<'a> Scan<'a> {
    pub fn new(source: &'a str) -> Self {
        let bytes = source.as_bytes();
        let len = bytes.len();
        let mut tokens = Vec::new();
        let mut directives = Vec::new();
        let mut i = 0;
        // true while only whitespace has been seen on the current line
        let mut line_start = true;

        while i < len {
            let b = bytes[i];
            if b == b'\n' {
                line_start = true;
                i += 1;
                continue;
            }
            if b.is_ascii_whitespace() {
                i += 1;
                continue;
            }
            if b == b'/' && i + 1 < len && bytes[i + 1] == b'/' {
                i = skip_line_comment(bytes, i);
                continue;
            }
            if b == b'/' && i + 1 < len && bytes[i + 1] == b'*' {
                i = skip_block_comment(bytes, i);
                continue;
            }
            if b == b'#' && line_start {
                let end = skip_directive(bytes, i);
                directives.push(i..end);
                i = end;
                continue;
            }
            line_start = false;
            if b == b'"' {
                let end = skip_quoted(bytes, i, b'"');
                tokens.push(Token { kind: Kind::Literal, start: i, end });
                i = end;
            } else if b == b'\'' {
                let end = skip_quoted(bytes, i, b'\'');
                tokens.push(Token { kind: Kind::Literal, start: i, end });
                i = end;
            } else if b.is_ascii_digit() || (b == b'.' && i + 1 < len && bytes[i + 1].is_ascii_digit()) {
                let end = skip_number(bytes, i);
                tokens.push(Token { kind: Kind::Literal, start: i, end });
                i = end;
            } else if is_ident_start(b) {
                let mut end = i + 1;
                while end < len && is_ident_continue(bytes[end]) {
                    end += 1;
                }
                let word = &source[i..end];
                if end < len && bytes[end] == b'"' && RAW_PREFIXES.contains(&word) {
                    let lit_end = skip_raw_string(bytes, end);
                    tokens.push(Token { kind: Kind::Literal, start: i, end: lit_end });
                    i = lit_end;
                } else if end < len
                    && (bytes[end] == b'"' || bytes[end] == b'\'')
                    && matches!(word, "L" | "u" | "U" | "u8")
                {
                    let lit_end = skip_quoted(bytes, end, bytes[end]);
                    tokens.push(Token { kind: Kind::Literal, start: i, end: lit_end });
                    i = lit_end;
                } else {
                    tokens.push(Token { kind: Kind::Ident, start: i, end });
                    i = end;
                }
            } else {
                let two = i + 1 < len && matches!((b, bytes[i + 1]), (b'-', b'>') | (b':', b':'));
                let end = if two { i + 2 } else { i + 1 };
                tokens.push(Token { kind: Kind::Punct, start: i, end });
                i = end;
            }
        }
        Scan { source, tokens, directives }
    }

    fn text(&self, t: &Token) -> &'a str {
        &self.source[t.start..t.end]
    }

    fn is_punct(&self, t: &Token, p: &str) -> bool {
        t.kind == Kind::Punct && self.text(t) == p
    }

    /// Minimum running brace depth and final depth over the code tokens.
    pub fn brace_balance(&self) -> (i64, i64) {
        let mut depth = 0i64;
        let mut min = 0i64;
        for t in &self.tokens {
            if self.is_punct(t, "{") {
                depth += 1;
            } else if self.is_punct(t, "}") {
                depth -= 1;
                min = min.min(depth);
            }
        }
        (min, depth)
    }

    pub fn braces_balanced(&self) -> bool {
        self.brace_balance() == (0, 0)
    }

    /// Identifiers outside comments, literals and directives, in order.
    pub fn identifiers(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.tokens
            .iter()
            .filter(|t| t.kind == Kind::Ident)
            .map(|t| self.text(t))
    }

    /// Adjacent identifier pairs joined by `::`, e.g. `std::thread`.
    pub fn qualified_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for w in self.tokens.windows(3) {
            if w[0].kind == Kind::Ident && self.is_punct(&w[1], "::") && w[2].kind == Kind::Ident {
                out.push(format!("{}::{}", self.text(&w[0]), self.text(&w[2])));
            }
        }
        out
    }

    /// Raw text of every preprocessor directive, continuation lines included.
    pub fn directives(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.directives.iter().map(|r| &self.source[r.clone()])
    }

    /// `#include` targets, e.g. `<stdio.h>` or `"kernel.h"`.
    pub fn includes(&self) -> Vec<String> {
        self.directives()
            .filter_map(|d| {
                let rest = d.trim_start_matches('#').trim_start();
                let rest = rest.strip_prefix("include")?.trim_start();
                let close = match rest.chars().next()? {
                    '<' => '>',
                    '"' => '"',
                    _ => return None,
                };
                let end = rest[1..].find(close)? + 2;
                Some(rest[..end].to_string())
            })
            .collect()
    }

    /// Whether any `#pragma omp` directive (or `_Pragma("omp ...")`) is present.
    pub fn has_omp_pragma(&self) -> bool {
        let directive = self.directives().any(|d| {
            let mut words = d.trim_start_matches('#').split_whitespace();
            words.next() == Some("pragma") && words.next() == Some("omp")
        });
        if directive {
            return true;
        }
        self.tokens.windows(3).any(|w| {
            w[0].kind == Kind::Ident
                && self.text(&w[0]) == "_Pragma"
                && self.is_punct(&w[1], "(")
                && w[2].kind == Kind::Literal
                && self.text(&w[2]).trim_matches('"').trim_start().starts_with("omp")
        })
    }

    /// All function definitions visible at file or namespace scope.
    pub fn functions(&self) -> Result<Vec<FunctionSpan>, PatchError> {
        let matching = self.match_braces()?;
        let toks = &self.tokens;
        let mut spans = Vec::new();
        // one entry per open brace: true when transparent (namespace, extern "C")
        let mut scopes: Vec<bool> = Vec::new();
        let mut opaque_depth = 0usize;
        let mut decl_start = 0usize;
        let mut idx = 0usize;

        while idx < toks.len() {
            let t = &toks[idx];
            if self.is_punct(t, ";") && opaque_depth == 0 {
                decl_start = idx + 1;
            } else if self.is_punct(t, "{") {
                if opaque_depth == 0 {
                    let decl = &toks[decl_start..idx];
                    if self.is_transparent(decl) {
                        scopes.push(true);
                        decl_start = idx + 1;
                        idx += 1;
                        continue;
                    }
                    if let Some(name_at) = self.function_name(decl) {
                        let close = matching[idx];
                        let first = &toks[decl_start];
                        let name = self.text(&decl[name_at]).to_string();
                        let signature_text = self.source[first.start..t.start].trim_end().to_string();
                        spans.push(FunctionSpan {
                            name,
                            byte_start: first.start,
                            byte_end: toks[close].end,
                            signature_text,
                        });
                        idx = close + 1;
                        decl_start = idx;
                        continue;
                    }
                }
                scopes.push(false);
                opaque_depth += 1;
            } else if self.is_punct(t, "}") {
                match scopes.pop() {
                    Some(true) => decl_start = idx + 1,
                    Some(false) => opaque_depth -= 1,
                    None => return Err(PatchError::UnbalancedBraces),
                }
            }
            idx += 1;
        }
        Ok(spans)
    }

    fn match_braces(&self) -> Result<Vec<usize>, PatchError> {
        let mut matching = vec![usize::MAX; self.tokens.len()];
        let mut stack = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.is_punct(t, "{") {
                stack.push(i);
            } else if self.is_punct(t, "}") {
                let open = stack.pop().ok_or(PatchError::UnbalancedBraces)?;
                matching[open] = i;
                matching[i] = open;
            }
        }
        if stack.is_empty() {
            Ok(matching)
        } else {
            Err(PatchError::UnbalancedBraces)
        }
    }

    fn is_transparent(&self, decl: &[Token]) -> bool {
        match decl {
            [first, ..] if first.kind == Kind::Ident && self.text(first) == "namespace" => true,
            [a, b, ..]
                if a.kind == Kind::Ident
                    && self.text(a) == "inline"
                    && b.kind == Kind::Ident
                    && self.text(b) == "namespace" =>
            {
                true
            }
            [a, b] => a.kind == Kind::Ident && self.text(a) == "extern" && b.kind == Kind::Literal,
            _ => false,
        }
    }

    /// Index (within `decl`) of the defined function's name, if `decl` is
    /// the head of a function definition.
    fn function_name(&self, decl: &[Token]) -> Option<usize> {
        if decl.is_empty() {
            return None;
        }
        if decl[0].kind == Kind::Ident && self.text(&decl[0]) == "typedef" {
            return None;
        }
        let mut depth = 0i32;
        for (j, t) in decl.iter().enumerate() {
            if self.is_punct(t, "(") {
                if depth == 0 && j > 0 && self.is_candidate(decl, j - 1) {
                    let close = self.close_paren(decl, j)?;
                    if self.is_trailer(&decl[close + 1..]) {
                        return Some(j - 1);
                    }
                }
                depth += 1;
            } else if self.is_punct(t, ")") {
                depth -= 1;
            } else if depth == 0 && self.is_punct(t, "=") {
                return None;
            }
        }
        None
    }

    fn is_candidate(&self, decl: &[Token], at: usize) -> bool {
        let t = &decl[at];
        if t.kind != Kind::Ident || NOT_A_NAME.contains(&self.text(t)) {
            return false;
        }
        if at > 0 {
            let prev = &decl[at - 1];
            if prev.kind == Kind::Punct && matches!(self.text(prev), "." | "->" | "::" | "~") {
                return false;
            }
        }
        true
    }

    fn close_paren(&self, decl: &[Token], open: usize) -> Option<usize> {
        let mut depth = 0i32;
        for (k, t) in decl.iter().enumerate().skip(open) {
            if self.is_punct(t, "(") {
                depth += 1;
            } else if self.is_punct(t, ")") {
                depth -= 1;
                if depth == 0 {
                    return Some(k);
                }
            }
        }
        None
    }

    /// Tokens allowed between a parameter list and the body:
    /// qualifiers, attributes, trailing return types, initializer lists.
    fn is_trailer(&self, tail: &[Token]) -> bool {
        let mut depth = 0i32;
        for t in tail {
            if self.is_punct(t, "(") {
                depth += 1;
                continue;
            }
            if self.is_punct(t, ")") {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
                continue;
            }
            if depth > 0 {
                continue;
            }
            let ok = match t.kind {
                Kind::Ident => true,
                Kind::Literal => false,
                Kind::Punct => matches!(
                    self.text(t),
                    "->" | "::" | "<" | ">" | "*" | "&" | "," | ":" | "[" | "]"
                ),
            };
            if !ok {
                return false;
            }
        }
        depth == 0
    }
}

const NOT_A_NAME: [&str; 22] = [
    "__attribute__",
    "__attribute",
    "__declspec",
    "alignas",
    "_Alignas",
    "__asm__",
    "__asm",
    "asm",
    "decltype",
    "__typeof__",
    "typeof",
    "sizeof",
    "noexcept",
    "throw",
    "if",
    "while",
    "for",
    "switch",
    "return",
    "_Pragma",
    "__pragma",
    "operator",
];

fn skip_line_comment(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() && bytes[i] != b'\n' {
        if bytes[i] == b'\\' && i + 1 < bytes.len() && bytes[i + 1] == b'\n' {
            i += 2;
            continue;
        }
        i += 1;
    }
    i
}

fn skip_block_comment(bytes: &[u8], i: usize) -> usize {
    let mut j = i + 2;
    while j + 1 < bytes.len() {
        if bytes[j] == b'*' && bytes[j + 1] == b'/' {
            return j + 2;
        }
        j += 1;
    }
    bytes.len()
}

fn skip_directive(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() {
        match bytes[i] {
            b'\n' => return i,
            b'\\' if i + 1 < bytes.len() && bytes[i + 1] == b'\n' => i += 2,
            b'\\' if i + 2 < bytes.len() && bytes[i + 1] == b'\r' && bytes[i + 2] == b'\n' => i += 3,
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'*' => i = skip_block_comment(bytes, i),
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => return skip_line_comment(bytes, i),
            _ => i += 1,
        }
    }
    i
}

/// Skips a quoted literal starting at `i`. Unterminated literals stop at
/// the end of the line.
fn skip_quoted(bytes: &[u8], i: usize, quote: u8) -> usize {
    let mut j = i + 1;
    while j < bytes.len() {
        match bytes[j] {
            b'\\' => j += 2,
            b'\n' => return j,
            b if b == quote => return j + 1,
            _ => j += 1,
        }
    }
    bytes.len()
}

/// `i` points at the opening quote of `R"delim( ... )delim"`.
fn skip_raw_string(bytes: &[u8], i: usize) -> usize {
    let mut j = i + 1;
    while j < bytes.len() && bytes[j] != b'(' {
        if bytes[j] == b'\n' || bytes[j] == b'"' || j - i > 17 {
            return skip_quoted(bytes, i, b'"');
        }
        j += 1;
    }
    if j >= bytes.len() {
        return bytes.len();
    }
    let delim = &bytes[i + 1..j];
    let mut k = j + 1;
    while k < bytes.len() {
        if bytes[k] == b')'
            && bytes[k + 1..].starts_with(delim)
            && bytes.get(k + 1 + delim.len()) == Some(&b'"')
        {
            return k + 2 + delim.len();
        }
        k += 1;
    }
    bytes.len()
}

fn skip_number(bytes: &[u8], i: usize) -> usize {
    let mut j = i;
    while j < bytes.len() {
        let b = bytes[j];
        let exp_sign = (b == b'+' || b == b'-')
            && j > i
            && matches!(bytes[j - 1], b'e' | b'E' | b'p' | b'P');
        if b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'\'' || exp_sign {
            j += 1;
        } else {
            break;
        }
    }
    j
}

/// Lists every function definition found in `source`.
pub fn list_functions(source: &str) -> Result<Vec<FunctionSpan>, PatchError> {
    Scan::new(source).functions()
}

pub fn locate_function(source: &str, name: &str) -> Result<FunctionSpan, PatchError> {
    let mut found: Vec<FunctionSpan> = list_functions(source)?
        .into_iter()
        .filter(|f| f.name == name)
        .collect();
    match found.len() {
        0 => Err(PatchError::NotFound(name.to_string())),
        1 => Ok(found.pop().expect("one element")),
        count => Err(PatchError::Ambiguous { name: name.to_string(), count }),
    }
}

pub fn extract_function(source: &str, name: &str) -> Result<String, PatchError> {
    let span = locate_function(source, name)?;
    Ok(source[span.range()].to_string())
}

/// Substitutes the definition of `name` with `new_definition`, leaving
/// every byte outside the located span untouched.
pub fn replace_function(source: &str, name: &str, new_definition: &str) -> Result<String, PatchError> {
    if !Scan::new(new_definition).braces_balanced() {
        return Err(PatchError::UnbalancedReplacement);
    }
    let span = locate_function(source, name)?;
    let mut out = String::with_capacity(source.len() - (span.byte_end - span.byte_start) + new_definition.len());
    out.push_str(&source[..span.byte_start]);
    out.push_str(new_definition);
    out.push_str(&source[span.byte_end..]);
    Ok(out)
}
