//! Build, run and validate steps shared by the experiment drivers and the
//! agent loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::llm::{check_constraints, ConstraintViolation, Experiment, ExtractionResult};
use crate::manifest::{prepare_sources, BenchmarkSpec, ManifestError, Preprocessor};
use crate::toolchain::{
    compile, run_timed, thread_sweep, BuildOptions, BuildOutcome, BuildStatus, RunError, RunSample, SpeedupStat,
    ToolchainConfig, ToolchainError, VariantDir,
};
use crate::verify::{classify_attempt, compare_outputs, CorrectnessCategory, MatchReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error("baseline of `{id}` failed to build: {stderr}")]
    BaselineBuildFailed { id: String, stderr: String },
    #[error("baseline of `{id}` failed to run: {error}")]
    BaselineRunFailed { id: String, error: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// The prepared, untouched sources of one benchmark.
#[derive(Debug, Clone)]
pub struct Original {
    pub spec: BenchmarkSpec,
    pub src_dir: PathBuf,
    /// Source file handed to the model, relative to `src_dir`.
    pub primary: PathBuf,
    pub code: String,
}

impl Original {
    pub fn prepare(spec: &BenchmarkSpec, work: &Path, pre: &Preprocessor) -> Result<Self, EvalError> {
        let dir = VariantDir::new(work, &spec.id, "original");
        let src_dir = prepare_sources(spec, &dir.src(), pre)?;
        let primary = spec.primary_source().to_path_buf();
        let path = src_dir.join(&primary);
        let code = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(Original { spec: spec.clone(), src_dir, primary, code })
    }

    /// Copies the prepared tree into `variant/src` and writes `code` over
    /// the primary source.
    pub fn materialize(&self, variant: &VariantDir, code: &str) -> Result<PathBuf, EvalError> {
        let dest = variant.src();
        copy_tree(&self.src_dir, &dest)?;
        let path = dest.join(&self.primary);
        fs::write(&path, code).map_err(io_err(&path))?;
        Ok(dest)
    }
}

pub fn copy_tree(from: &Path, to: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(to).map_err(io_err(to))?;
    for entry in WalkDir::new(from).min_depth(1) {
        let entry = entry.map_err(|e| EvalError::Io { path: from.to_path_buf(), source: e.into() })?;
        let rel = entry.path().strip_prefix(from).expect("walkdir stays under its root");
        let target = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else {
            fs::copy(entry.path(), &target).map_err(io_err(&target))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub build: BuildOutcome,
    pub binary: PathBuf,
    pub sample: RunSample,
}

pub fn run_baseline(
    original: &Original,
    toolchain: &ToolchainConfig,
    variant: &VariantDir,
    opts: &BuildOptions,
    threads: Option<u32>,
) -> Result<Baseline, EvalError> {
    let id = original.spec.id.clone();
    let src = original.materialize(variant, &original.code)?;
    let build = compile(&original.spec, &src, toolchain, variant, opts)?;
    let Some(binary) = build.binary_path.clone() else {
        return Err(EvalError::BaselineBuildFailed { id, stderr: build.stderr });
    };
    let sample = run_timed(&binary, &original.spec.run, threads)
        .map_err(|e| EvalError::BaselineRunFailed { id, error: format!("{e:?}") })?;
    Ok(Baseline { build, binary, sample })
}

/// How a candidate binary is timed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunPlan {
    Single(Option<u32>),
    Sweep(Vec<u32>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub category: CorrectnessCategory,
    pub constraint_flags: BTreeSet<ConstraintViolation>,
    pub build: Option<BuildOutcome>,
    pub run: Option<Result<RunSample, RunError>>,
    pub report: Option<MatchReport>,
    /// Present iff the category is Correct.
    pub speedup: Option<SpeedupStat>,
    /// Per thread count, for sweeps: the speedup when that count ran and
    /// matched, else `None`.
    pub thread_speedups: Option<BTreeMap<u32, Option<f64>>>,
    pub binary: Option<PathBuf>,
    pub note: Option<String>,
}

impl Evaluation {
    fn without_build(category: CorrectnessCategory, flags: BTreeSet<ConstraintViolation>, note: Option<String>) -> Self {
        Evaluation {
            category,
            constraint_flags: flags,
            build: None,
            run: None,
            report: None,
            speedup: None,
            thread_speedups: None,
            binary: None,
            note,
        }
    }
}

pub struct Candidate<'a> {
    pub extraction: &'a ExtractionResult,
    /// Full text of the primary source to build, when there is one.
    pub code: Option<&'a str>,
    /// Code the rules are checked against (what the model was given).
    pub reference_code: &'a str,
    pub experiment: Experiment,
    /// Check the prompt's rules; off for code from external tools.
    pub check_rules: bool,
    /// Tree copied over the variant sources after `code` is written.
    pub overlay: Option<&'a Path>,
}

fn compile_candidate(
    spec: &BenchmarkSpec,
    src: &Path,
    toolchain: &ToolchainConfig,
    variant: &VariantDir,
    opts: &BuildOptions,
) -> Result<BuildOutcome, ToolchainError> {
    match compile(spec, src, toolchain, variant, opts) {
        Err(ToolchainError::BuildTimeout(after)) => Ok(BuildOutcome {
            status: BuildStatus::CompileError,
            binary_path: None,
            command_line: String::new(),
            stderr: format!("build timed out after {after} s"),
            elapsed_s: after,
        }),
        other => other,
    }
}

/// Checks, builds, runs and validates one candidate against the baseline.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    original: &Original,
    candidate: &Candidate<'_>,
    toolchain: &ToolchainConfig,
    variant: &VariantDir,
    opts: &BuildOptions,
    baseline: &Baseline,
    plan: &RunPlan,
) -> Result<Evaluation, EvalError> {
    let spec = &original.spec;
    let Some(code) = candidate.code.filter(|c| !c.trim().is_empty()) else {
        return Ok(Evaluation::without_build(CorrectnessCategory::NoGeneratedCode, BTreeSet::new(), None));
    };
    let flags = if candidate.check_rules {
        match check_constraints(candidate.reference_code, code, candidate.experiment) {
            Ok(f) => f,
            Err(e) => {
                let note = Some(e.to_string());
                return Ok(Evaluation::without_build(CorrectnessCategory::NoGeneratedCode, BTreeSet::new(), note));
            }
        }
    } else {
        BTreeSet::new()
    };
    let src = original.materialize(variant, code)?;
    if let Some(tree) = candidate.overlay {
        copy_tree(tree, &src)?;
    }
    let build = compile_candidate(spec, &src, toolchain, variant, opts)?;
    let classify = |run: Option<&Result<RunSample, RunError>>, report: Option<&MatchReport>| {
        classify_attempt(Some(&build), candidate.extraction, run, report, &flags)
            .expect("evaluation evidence is consistent")
    };
    let Some(binary) = build.binary_path.clone().filter(|_| flags.is_empty()) else {
        let category = classify(None, None);
        return Ok(Evaluation { build: Some(build), ..Evaluation::without_build(category, flags, None) });
    };

    let reference = &baseline.sample.stdout;
    let (run, report, speedup, thread_speedups) = match plan {
        RunPlan::Single(threads) => {
            let run = run_timed(&binary, &spec.run, *threads);
            let report = run.as_ref().ok().map(|s| compare_outputs(reference, &s.stdout, &spec.validation));
            let speedup = match (&run, &report) {
                (Ok(s), Some(r)) if r.matched => {
                    s.mean().and_then(|m| SpeedupStat::from_means(baseline.sample.mean()?, m))
                }
                _ => None,
            };
            (run, report, speedup, None)
        }
        RunPlan::Sweep(counts) => {
            let results = thread_sweep(&binary, &spec.run, counts)?;
            let base_mean = baseline.sample.mean();
            let mut per_count = BTreeMap::new();
            let mut first_bad: Option<(Result<RunSample, RunError>, Option<MatchReport>)> = None;
            let mut first_ok: Option<(RunSample, MatchReport)> = None;
            for (n, r) in results {
                match r {
                    Ok(sample) => {
                        let rep = compare_outputs(reference, &sample.stdout, &spec.validation);
                        let s = if rep.matched {
                            sample.mean().zip(base_mean).and_then(|(m, b)| SpeedupStat::from_means(b, m)).map(|s| s.speedup)
                        } else {
                            None
                        };
                        per_count.insert(n, s);
                        if !rep.matched && first_bad.is_none() {
                            first_bad = Some((Ok(sample), Some(rep)));
                        } else if first_ok.is_none() {
                            first_ok = Some((sample, rep));
                        }
                    }
                    Err(e) => {
                        per_count.insert(n, None);
                        if first_bad.is_none() {
                            first_bad = Some((Err(e), None));
                        }
                    }
                }
            }
            let (run, report) = match (first_bad, first_ok) {
                (Some(bad), _) => bad,
                (None, Some((s, r))) => (Ok(s), Some(r)),
                (None, None) => unreachable!("a sweep has at least one count"),
            };
            let speedup = if per_count.values().all(Option::is_some) {
                let xs: Vec<f64> = per_count.values().flatten().copied().collect();
                let mean_speedup = xs.iter().sum::<f64>() / xs.len() as f64;
                base_mean.map(|b| SpeedupStat { baseline_mean_s: b, candidate_mean_s: b / mean_speedup, speedup: mean_speedup })
            } else {
                None
            };
            (run, report, speedup, Some(per_count))
        }
    };
    let category = classify(Some(&run), report.as_ref());
    let speedup = speedup.filter(|_| category.is_correct());
    Ok(Evaluation {
        category,
        constraint_flags: flags,
        build: Some(build),
        run: Some(run),
        report,
        speedup,
        thread_speedups,
        binary: Some(binary),
        note: None,
    })
}
