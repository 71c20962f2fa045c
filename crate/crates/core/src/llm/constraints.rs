//! Checks a candidate against the prompt's rules: keep every function and
//! header, add no functions or print statements, and (for EX3) actually
//! parallelize.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Experiment, LlmError};
use crate::patch::Scan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintViolation {
    RemovedFunction,
    RemovedHeader,
    AddedFunction,
    AddedPrintStatement,
    MissingParallelConstruct,
}

impl ConstraintViolation {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintViolation::RemovedFunction => "RemovedFunction",
            ConstraintViolation::RemovedHeader => "RemovedHeader",
            ConstraintViolation::AddedFunction => "AddedFunction",
            ConstraintViolation::AddedPrintStatement => "AddedPrintStatement",
            ConstraintViolation::MissingParallelConstruct => "MissingParallelConstruct",
        }
    }
}

const PRINT_IDENTS: &[&str] = &[
    "printf", "fprintf", "vprintf", "vfprintf", "puts", "fputs", "putchar", "putc", "fputc", "perror", "cout",
    "cerr", "clog", "println",
];

const THREAD_IDENTS: &[&str] = &[
    "pthread_create", "thrd_create", "jthread", "parallel_for", "parallel_reduce", "parallel_invoke",
];

const PARALLEL_QUALIFIED: &[&str] =
    &["std::thread", "std::async", "execution::par", "execution::par_unseq", "tbb::parallel_for"];

struct Summary {
    functions: BTreeSet<String>,
    includes: BTreeSet<String>,
    prints: BTreeMap<&'static str, usize>,
    parallel: bool,
}

fn summarize(text: &str) -> Result<Summary, String> {
    let scan = Scan::new(text);
    let functions = scan.functions().map_err(|e| e.to_string())?.into_iter().map(|f| f.name).collect();
    let includes = scan.includes().into_iter().map(|i| i.split_whitespace().collect::<String>()).collect();
    let mut prints = BTreeMap::new();
    let mut threads = false;
    for ident in scan.identifiers() {
        if let Some(p) = PRINT_IDENTS.iter().find(|p| **p == ident) {
            *prints.entry(*p).or_insert(0) += 1;
        }
        if THREAD_IDENTS.contains(&ident) || ident.starts_with("omp_") {
            threads = true;
        }
    }
    let parallel = threads
        || scan.has_omp_pragma()
        || scan.qualified_names().iter().any(|q| PARALLEL_QUALIFIED.iter().any(|p| q == p || q.ends_with(&format!("::{p}"))));
    Ok(Summary { functions, includes, prints, parallel })
}

/// Compares `candidate` to `original` and returns every rule it breaks.
pub fn check_constraints(
    original: &str,
    candidate: &str,
    experiment: Experiment,
) -> Result<BTreeSet<ConstraintViolation>, LlmError> {
    let before = summarize(original).map_err(|e| LlmError::UnparseableCandidate(format!("original: {e}")))?;
    let after = summarize(candidate).map_err(LlmError::UnparseableCandidate)?;
    let mut flags = BTreeSet::new();
    if before.functions.difference(&after.functions).next().is_some() {
        flags.insert(ConstraintViolation::RemovedFunction);
    }
    if after.functions.difference(&before.functions).next().is_some() {
        flags.insert(ConstraintViolation::AddedFunction);
    }
    if before.includes.difference(&after.includes).next().is_some() {
        flags.insert(ConstraintViolation::RemovedHeader);
    }
    if after.prints.iter().any(|(p, n)| *n > before.prints.get(p).copied().unwrap_or(0)) {
        flags.insert(ConstraintViolation::AddedPrintStatement);
    }
    if experiment == Experiment::Ex3 && !after.parallel {
        flags.insert(ConstraintViolation::MissingParallelConstruct);
    }
    Ok(flags)
}
