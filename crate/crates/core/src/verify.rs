//! Output comparison and the correctness taxonomy for optimization attempts.

use std::collections::BTreeSet;
use std::fmt;

use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ConstraintViolation, ExtractionResult};
use crate::manifest::{ValidationMode, ValidationPolicy};
use crate::toolchain::{BuildOutcome, RunError, RunSample};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("inconsistent attempt evidence: {0}")]
    InconsistentInputs(&'static str),
    #[error("pass@1 of an empty list")]
    EmptyList,
}

/// Outcome of one optimization attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CorrectnessCategory {
    Correct,
    CompilationError,
    NoGeneratedCode,
    OutputMismatch,
    FailedToFollowInstructions,
}

impl CorrectnessCategory {
    pub const ALL: [CorrectnessCategory; 5] = [
        CorrectnessCategory::CompilationError,
        CorrectnessCategory::NoGeneratedCode,
        CorrectnessCategory::OutputMismatch,
        CorrectnessCategory::FailedToFollowInstructions,
        CorrectnessCategory::Correct,
    ];

    pub fn is_correct(self) -> bool {
        self == CorrectnessCategory::Correct
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorrectnessCategory::Correct => "Correct",
            CorrectnessCategory::CompilationError => "CompilationError",
            CorrectnessCategory::NoGeneratedCode => "NoGeneratedCode",
            CorrectnessCategory::OutputMismatch => "OutputMismatch",
            CorrectnessCategory::FailedToFollowInstructions => "FailedToFollowInstructions",
        }
    }

    /// Row label used in correctness tables.
    pub fn describe(self) -> &'static str {
        match self {
            CorrectnessCategory::Correct => "Correct",
            CorrectnessCategory::CompilationError => "Compilation errors",
            CorrectnessCategory::NoGeneratedCode => "No generated code",
            CorrectnessCategory::OutputMismatch => "Incorrect results - Output mismatch",
            CorrectnessCategory::FailedToFollowInstructions => "Failed to follow instructions",
        }
    }
}

impl fmt::Display for CorrectnessCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    /// 1-based line in the filtered reference output.
    pub line: usize,
    /// 1-based byte column (exact mode) or token index (numeric mode).
    pub index: usize,
    pub reference_excerpt: String,
    pub candidate_excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched: bool,
    pub first_divergence: Option<Divergence>,
    /// Tokens compared in numeric mode, lines compared in exact mode.
    pub compared_tokens: usize,
}

fn filter_lines(text: &[u8], patterns: &[Regex]) -> Vec<u8> {
    if patterns.is_empty() {
        return text.to_vec();
    }
    let mut out = Vec::with_capacity(text.len());
    for line in text.split_inclusive(|&b| b == b'\n') {
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        let body = body.strip_suffix(b"\r").unwrap_or(body);
        if !patterns.iter().any(|p| p.is_match(body)) {
            out.extend_from_slice(line);
        }
    }
    out
}

fn excerpt(bytes: &[u8], at: usize) -> String {
    let start = at.saturating_sub(20);
    let end = (at + 20).min(bytes.len());
    String::from_utf8_lossy(&bytes[start.min(end)..end]).into_owned()
}

fn compare_exact(r: &[u8], c: &[u8]) -> MatchReport {
    let lines = r.split(|&b| b == b'\n').count();
    let Some(pos) = r.iter().zip(c).position(|(a, b)| a != b).or_else(|| (r.len() != c.len()).then(|| r.len().min(c.len()))) else {
        return MatchReport { matched: true, first_divergence: None, compared_tokens: lines };
    };
    let line_start = r[..pos].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let line = r[..pos].iter().filter(|&&b| b == b'\n').count() + 1;
    MatchReport {
        matched: false,
        first_divergence: Some(Divergence {
            line,
            index: pos - line_start + 1,
            reference_excerpt: excerpt(r, pos),
            candidate_excerpt: excerpt(c, pos),
        }),
        compared_tokens: line,
    }
}

/// Whitespace-separated tokens paired with their 1-based line number.
fn tokens(text: &[u8]) -> Vec<(&[u8], usize)> {
    let mut out = Vec::new();
    for (n, line) in text.split(|&b| b == b'\n').enumerate() {
        for tok in line.split(|b| b.is_ascii_whitespace()).filter(|t| !t.is_empty()) {
            out.push((tok, n + 1));
        }
    }
    out
}

fn as_number(tok: &[u8]) -> Option<f64> {
    let v: f64 = std::str::from_utf8(tok).ok()?.parse().ok()?;
    v.is_finite().then_some(v)
}

fn tokens_match(r: &[u8], c: &[u8], abs_tol: f64, rel_tol: f64) -> bool {
    match (as_number(r), as_number(c)) {
        (Some(a), Some(b)) => (a - b).abs() <= abs_tol + rel_tol * a.abs(),
        _ => r == c,
    }
}

fn compare_numeric(r: &[u8], c: &[u8], abs_tol: f64, rel_tol: f64) -> MatchReport {
    let rt = tokens(r);
    let ct = tokens(c);
    let n = rt.len().min(ct.len());
    for i in 0..n {
        if !tokens_match(rt[i].0, ct[i].0, abs_tol, rel_tol) {
            return MatchReport {
                matched: false,
                first_divergence: Some(Divergence {
                    line: rt[i].1,
                    index: i + 1,
                    reference_excerpt: String::from_utf8_lossy(rt[i].0).into_owned(),
                    candidate_excerpt: String::from_utf8_lossy(ct[i].0).into_owned(),
                }),
                compared_tokens: i + 1,
            };
        }
    }
    if rt.len() != ct.len() {
        let show = |t: &[(&[u8], usize)]| t.get(n).map(|(s, _)| String::from_utf8_lossy(s).into_owned()).unwrap_or_default();
        return MatchReport {
            matched: false,
            first_divergence: Some(Divergence {
                line: rt.get(n).or(rt.last()).map_or(1, |t| t.1),
                index: n + 1,
                reference_excerpt: show(&rt),
                candidate_excerpt: show(&ct),
            }),
            compared_tokens: n,
        };
    }
    MatchReport { matched: true, first_divergence: None, compared_tokens: n }
}

/// Compares a candidate's output with the reference output under `policy`.
///
/// Lines matching any ignore pattern are dropped from both sides first.
/// Numeric tokens `r` (reference) and `c` match when
/// `|r - c| <= abs_tol + rel_tol * |r|`; other tokens must be identical.
pub fn compare_outputs(reference: &[u8], candidate: &[u8], policy: &ValidationPolicy) -> MatchReport {
    let patterns: Vec<Regex> = policy
        .ignore_patterns
        .iter()
        .filter_map(|p| match Regex::new(p) {
            Ok(re) => Some(re),
            Err(e) => {
                log::warn!("ignoring invalid output filter `{p}`: {e}");
                None
            }
        })
        .collect();
    let r = filter_lines(reference, &patterns);
    let c = filter_lines(candidate, &patterns);
    match policy.mode {
        ValidationMode::ExactBytes => compare_exact(&r, &c),
        ValidationMode::NumericTokens => compare_numeric(&r, &c, policy.abs_tol, policy.rel_tol),
    }
}

/// Maps the evidence gathered for one attempt to a single category.
///
/// Precedence: no usable code, then compile failure, then instruction
/// violations, then a failed or mismatching run, and only then Correct.
pub fn classify_attempt(
    build: Option<&BuildOutcome>,
    extraction: &ExtractionResult,
    run: Option<&Result<RunSample, RunError>>,
    report: Option<&MatchReport>,
    constraint_flags: &BTreeSet<ConstraintViolation>,
) -> Result<CorrectnessCategory, VerifyError> {
    let built = build.map(BuildOutcome::is_ok);
    if built == Some(false) && run.is_some() {
        return Err(VerifyError::InconsistentInputs("run present for a failed build"));
    }
    if build.is_none() && run.is_some() {
        return Err(VerifyError::InconsistentInputs("run present without a build"));
    }
    if run.is_none() && report.is_some() {
        return Err(VerifyError::InconsistentInputs("match report present without a run"));
    }
    if matches!(run, Some(Err(_))) && report.is_some() {
        return Err(VerifyError::InconsistentInputs("match report present for a failed run"));
    }

    if extraction.code.is_none() {
        return Ok(CorrectnessCategory::NoGeneratedCode);
    }
    match built {
        Some(false) => return Ok(CorrectnessCategory::CompilationError),
        None if constraint_flags.is_empty() => {
            return Err(VerifyError::InconsistentInputs("code extracted but never built"));
        }
        _ => {}
    }
    if !constraint_flags.is_empty() {
        return Ok(CorrectnessCategory::FailedToFollowInstructions);
    }
    match (run, report) {
        (Some(Err(_)), _) => Ok(CorrectnessCategory::OutputMismatch),
        (Some(Ok(_)), Some(r)) if r.matched => Ok(CorrectnessCategory::Correct),
        (Some(Ok(_)), Some(_)) => Ok(CorrectnessCategory::OutputMismatch),
        (Some(Ok(_)), None) => Err(VerifyError::InconsistentInputs("successful run without a match report")),
        (None, _) => Err(VerifyError::InconsistentInputs("build succeeded but no run recorded")),
    }
}

/// Fraction of attempts whose single (top-1) variant is Correct.
pub fn pass_at_1(categories: &[CorrectnessCategory]) -> Result<f64, VerifyError> {
    if categories.is_empty() {
        return Err(VerifyError::EmptyList);
    }
    let correct = categories.iter().filter(|c| c.is_correct()).count();
    Ok(correct as f64 / categories.len() as f64)
}

/// Per-category tallies in table order.
pub fn category_counts(categories: &[CorrectnessCategory]) -> Vec<(CorrectnessCategory, usize)> {
    CorrectnessCategory::ALL
        .iter()
        .map(|&cat| (cat, categories.iter().filter(|&&c| c == cat).count()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ExtractionRule;
    use crate::toolchain::{BuildStatus, ExitKind};

    fn numeric(abs_tol: f64, rel_tol: f64) -> ValidationPolicy {
        ValidationPolicy { mode: ValidationMode::NumericTokens, abs_tol, rel_tol, ignore_patterns: Vec::new() }
    }

    #[test]
    fn numeric_within_tolerance() {
        let r = compare_outputs(b"1.000 2.000", b"1.0001 2.0", &numeric(1e-3, 0.0));
        assert!(r.matched);
        assert_eq!(r.compared_tokens, 2);
    }

    #[test]
    fn numeric_mismatch_reports_token() {
        let r = compare_outputs(b"3 4", b"3 5", &numeric(0.0, 0.0));
        assert!(!r.matched);
        let d = r.first_divergence.unwrap();
        assert_eq!((d.line, d.index), (1, 2));
        assert_eq!((d.reference_excerpt.as_str(), d.candidate_excerpt.as_str()), ("4", "5"));
    }

    #[test]
    fn numeric_token_count_must_agree() {
        let r = compare_outputs(b"1 2\n3", b"1 2", &numeric(1.0, 1.0));
        assert!(!r.matched);
        assert_eq!(r.first_divergence.unwrap().index, 3);
    }

    #[test]
    fn non_numeric_tokens_compare_bytes() {
        assert!(compare_outputs(b"sum: 1.0", b"sum: 1.0000001", &numeric(1e-3, 0.0)).matched);
        assert!(!compare_outputs(b"sum: 1.0", b"Sum: 1.0", &numeric(1e-3, 0.0)).matched);
        assert!(compare_outputs(b"nan inf", b"nan inf", &numeric(0.0, 0.0)).matched);
    }

    #[test]
    fn relative_tolerance_scales_with_reference() {
        assert!(compare_outputs(b"1000000", b"1000001", &numeric(0.0, 1e-6)).matched);
        assert!(!compare_outputs(b"1", b"1.000002", &numeric(0.0, 1e-6)).matched);
    }

    #[test]
    fn exact_mode_with_filters() {
        let policy = ValidationPolicy { ignore_patterns: vec!["^Time".into()], ..ValidationPolicy::default() };
        assert!(compare_outputs(b"a\nTime 1.2s\nb\n", b"a\nTime 9.9s\nb\n", &policy).matched);
        let r = compare_outputs(b"a\nbcd\n", b"a\nbXd\n", &policy);
        let d = r.first_divergence.unwrap();
        assert_eq!((d.line, d.index), (2, 2));
        assert!(!compare_outputs(b"abc", b"abcd", &policy).matched);
    }

    fn extraction(code: Option<&str>) -> ExtractionResult {
        ExtractionResult {
            code: code.map(str::to_string),
            explanation: None,
            extraction_rule_fired: if code.is_some() { ExtractionRule::FencedBlock } else { ExtractionRule::None },
            truncated: false,
        }
    }

    fn build(status: BuildStatus) -> BuildOutcome {
        BuildOutcome { status, binary_path: None, command_line: String::new(), stderr: String::new(), elapsed_s: 0.1 }
    }

    fn ok_run() -> Result<RunSample, RunError> {
        Ok(RunSample { wall_times_s: vec![0.1], stdout: Vec::new(), stderr: Vec::new(), thread_count: None })
    }

    fn report(matched: bool) -> MatchReport {
        MatchReport { matched, first_divergence: None, compared_tokens: 1 }
    }

    #[test]
    fn classification_precedence() {
        let none = BTreeSet::new();
        let flags: BTreeSet<_> = [ConstraintViolation::MissingParallelConstruct].into_iter().collect();
        let ok = build(BuildStatus::Ok);
        let bad = build(BuildStatus::CompileError);
        let code = extraction(Some("int main(){}"));

        assert_eq!(classify_attempt(None, &extraction(None), None, None, &none), Ok(CorrectnessCategory::NoGeneratedCode));
        assert_eq!(classify_attempt(Some(&bad), &extraction(None), None, None, &flags), Ok(CorrectnessCategory::NoGeneratedCode));
        assert_eq!(classify_attempt(Some(&bad), &code, None, None, &flags), Ok(CorrectnessCategory::CompilationError));
        let run = ok_run();
        assert_eq!(
            classify_attempt(Some(&ok), &code, Some(&run), Some(&report(true)), &flags),
            Ok(CorrectnessCategory::FailedToFollowInstructions)
        );
        assert_eq!(classify_attempt(Some(&ok), &code, None, None, &flags), Ok(CorrectnessCategory::FailedToFollowInstructions));
        assert_eq!(
            classify_attempt(Some(&ok), &code, Some(&run), Some(&report(false)), &none),
            Ok(CorrectnessCategory::OutputMismatch)
        );
        let crash = Err(RunError::Crash { status: ExitKind::Code(1), stderr: String::new() });
        assert_eq!(classify_attempt(Some(&ok), &code, Some(&crash), None, &none), Ok(CorrectnessCategory::OutputMismatch));
        assert_eq!(
            classify_attempt(Some(&ok), &code, Some(&run), Some(&report(true)), &none),
            Ok(CorrectnessCategory::Correct)
        );
    }

    #[test]
    fn inconsistent_inputs_are_rejected() {
        let none = BTreeSet::new();
        let code = extraction(Some("x"));
        let run = ok_run();
        let bad = build(BuildStatus::CompileError);
        let ok = build(BuildStatus::Ok);
        assert!(classify_attempt(Some(&bad), &code, Some(&run), None, &none).is_err());
        assert!(classify_attempt(Some(&ok), &code, None, Some(&report(true)), &none).is_err());
        assert!(classify_attempt(Some(&ok), &code, Some(&run), None, &none).is_err());
        assert!(classify_attempt(None, &code, None, None, &none).is_err());
    }

    #[test]
    fn pass_at_1_counts_correct() {
        let mut v = vec![CorrectnessCategory::Correct; 18];
        v.extend([CorrectnessCategory::NoGeneratedCode, CorrectnessCategory::OutputMismatch]);
        assert_eq!(pass_at_1(&v), Ok(0.9));
        assert_eq!(pass_at_1(&[CorrectnessCategory::Correct; 3]), Ok(1.0));
        assert_eq!(pass_at_1(&[]), Err(VerifyError::EmptyList));
        let total: usize = category_counts(&v).iter().map(|(_, n)| n).sum();
        assert_eq!(total, v.len());
    }
}
