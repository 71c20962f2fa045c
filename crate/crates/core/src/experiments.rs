//! Experiment drivers over a benchmark selection: one-shot serial
//! optimization (EX1), a five-turn incremental conversation (EX2), parallel
//! optimization with a thread sweep (EX3), and import of code produced by
//! external tools. Also aggregation and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, Baseline, Candidate, EvalError, Evaluation, Original, RunPlan};
use crate::llm::{
    classify_explanation, extract_code, render_prompt, request, ConstraintViolation, Exchange,
    Experiment, ExtractionResult, ExtractionRule, OptimizationLabel, PromptBundle, PromptEnv, Provider,
    ProviderInfo,
};
use crate::manifest::{BenchmarkSpec, Motif, Preprocessor};
use crate::toolchain::{BuildOptions, SpeedupStat, ToolchainConfig, VariantDir};
use crate::verify::{category_counts, pass_at_1, CorrectnessCategory, MatchReport};

/// Follow-up sent when a reply has code but no explanation.
pub const EXPLANATION_REQUEST: &str = "Give me explanations for the optimizations you made.";

pub const DEFAULT_THREAD_COUNTS: [u32; 4] = [4, 8, 16, 32];

/// Turns in one EX2 conversation: the EX1 turn plus four follow-ups.
pub const EX2_TURNS: u32 = 5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("benchmark selection is empty")]
    EmptySelection,
    #[error("results table is empty")]
    EmptyTable,
    #[error("duplicate result row {0}")]
    DuplicateRow(String),
    #[error("cannot write {path}: {message}")]
    UnwritablePath { path: PathBuf, message: String },
    #[error("cannot read {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("invalid results document: {0}")]
    Format(String),
}

/// One prompt/response round inside an attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    pub variant_tag: String,
    pub category: CorrectnessCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub constraint_flags: BTreeSet<ConstraintViolation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<OptimizationLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub benchmark_id: String,
    pub motif: Motif,
    pub level: u8,
    pub experiment: Experiment,
    pub tool_id: String,
    pub variant_tag: String,
    pub category: CorrectnessCategory,
    /// Measured speedup, or exactly 1.0 when `na`.
    pub speedup: f64,
    pub na: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_stat: Option<SpeedupStat>,
    #[serde(default)]
    pub labels: Vec<OptimizationLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_results: Option<BTreeMap<u32, Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wallclock_log: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub constraint_flags: BTreeSet<ConstraintViolation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_report: Option<MatchReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AttemptRecord {
    pub fn key(&self) -> (String, Experiment, String, String) {
        (self.benchmark_id.clone(), self.experiment, self.tool_id.clone(), self.variant_tag.clone())
    }

    fn new(spec: &BenchmarkSpec, experiment: Experiment, tool_id: &str, variant_tag: String) -> Self {
        AttemptRecord {
            benchmark_id: spec.id.clone(),
            motif: spec.motif,
            level: spec.level,
            experiment,
            tool_id: tool_id.to_string(),
            variant_tag,
            category: CorrectnessCategory::NoGeneratedCode,
            speedup: 1.0,
            na: true,
            speedup_stat: None,
            labels: Vec::new(),
            thread_results: None,
            wallclock_log: None,
            constraint_flags: BTreeSet::new(),
            match_report: None,
            turns: Vec::new(),
            note: None,
        }
    }

    /// Fills category, speedup and NA flag from an evaluation.
    fn apply(&mut self, e: &Evaluation) {
        self.category = e.category;
        self.constraint_flags = e.constraint_flags.clone();
        self.match_report = e.report.clone();
        self.speedup_stat = e.speedup;
        self.na = !(e.category.is_correct() && e.speedup.is_some());
        self.speedup = if self.na { 1.0 } else { e.speedup.map(|s| s.speedup).unwrap_or(1.0) };
        if e.note.is_some() {
            self.note = e.note.clone();
        }
    }
}

/// A benchmark that could not be attempted at all (e.g. its baseline did
/// not build).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkFailure {
    pub benchmark_id: String,
    pub experiment: Experiment,
    pub tool_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolchain_versions: BTreeMap<String, String>,
    pub providers: Vec<ProviderInfo>,
    pub timestamp: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<AttemptRecord>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<BenchmarkFailure>,
}

impl ResultsTable {
    pub fn new(provenance: Provenance) -> Self {
        ResultsTable { rows: Vec::new(), provenance, failures: Vec::new() }
    }

    pub fn push(&mut self, row: AttemptRecord) -> Result<(), ExperimentError> {
        let key = row.key();
        if self.rows.iter().any(|r| r.key() == key) {
            return Err(ExperimentError::DuplicateRow(format!("{key:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Appends another table's rows, failures and provenance.
    pub fn merge(&mut self, other: ResultsTable) -> Result<(), ExperimentError> {
        for row in other.rows {
            self.push(row)?;
        }
        self.failures.extend(other.failures);
        self.provenance.toolchain_versions.extend(other.provenance.toolchain_versions);
        for p in other.provenance.providers {
            if !self.provenance.providers.contains(&p) {
                self.provenance.providers.push(p);
            }
        }
        if self.provenance.timestamp.is_empty() {
            self.provenance.timestamp = other.provenance.timestamp;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let t: ResultsTable = serde_json::from_str(text).map_err(|e| ExperimentError::Format(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for r in &t.rows {
            if !seen.insert(r.key()) {
                return Err(ExperimentError::DuplicateRow(format!("{:?}", r.key())));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Unreadable { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        write_file(path, &self.to_json())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessOptions {
    pub preprocessor: Preprocessor,
    pub thread_counts: Vec<u32>,
    /// Ask for an explanation when a reply carries code but none.
    pub ask_explanations: bool,
    pub compiler_override: Option<String>,
    /// Fixed provenance timestamp; the current time when unset.
    pub timestamp: Option<String>,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            preprocessor: Preprocessor::default(),
            thread_counts: DEFAULT_THREAD_COUNTS.to_vec(),
            ask_explanations: true,
            compiler_override: None,
            timestamp: None,
        }
    }
}

pub struct Harness<'a> {
    pub toolchain: &'a ToolchainConfig,
    pub work_dir: PathBuf,
    pub prompt_env: PromptEnv,
    pub options: HarnessOptions,
}

struct Reply {
    user_text: String,
    raw_text: String,
    extraction: ExtractionResult,
    explanation: Option<String>,
    followup: Option<Exchange>,
    error: Option<String>,
}

fn sanitize(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn labels_for(reply: &Reply) -> Vec<OptimizationLabel> {
    if reply.extraction.code.is_none() {
        return Vec::new();
    }
    classify_explanation(reply.explanation.as_deref().unwrap_or(""))
}

impl<'a> Harness<'a> {
    pub fn new(toolchain: &'a ToolchainConfig, work_dir: &Path, prompt_env: PromptEnv, options: HarnessOptions) -> Self {
        let work_dir = std::path::absolute(work_dir).unwrap_or_else(|_| work_dir.to_path_buf());
        Harness { toolchain, work_dir, prompt_env, options }
    }

    fn provenance(&self, providers: Vec<ProviderInfo>) -> Provenance {
        let timestamp = self
            .options
            .timestamp
            .clone()
            .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        Provenance { toolchain_versions: self.toolchain.versions(), providers, timestamp }
    }

    fn build_options(&self, openmp: bool) -> BuildOptions {
        BuildOptions { openmp, extra_flags: Vec::new(), compiler_override: self.options.compiler_override.clone() }
    }

    fn root(&self, experiment: Experiment, tool_id: &str) -> PathBuf {
        self.work_dir.join(experiment.as_str().to_ascii_lowercase()).join(sanitize(tool_id))
    }

    fn setup(
        &self,
        spec: &BenchmarkSpec,
        root: &Path,
        opts: &BuildOptions,
        threads: Option<u32>,
    ) -> Result<(Original, Baseline), EvalError> {
        let original = Original::prepare(spec, root, &self.options.preprocessor)?;
        let variant = VariantDir::new(root, &spec.id, "baseline");
        let baseline = eval::run_baseline(&original, self.toolchain, &variant, opts, threads)?;
        Ok((original, baseline))
    }

    fn ask(&self, provider: &dyn Provider, bundle: &PromptBundle, history: &[Exchange]) -> Reply {
        let response = request(provider, bundle, history);
        let (raw_text, error) = match response {
            Ok(r) => (r.raw_text, None),
            Err(e) => {
                log::warn!("{} request failed: {e}", bundle.experiment);
                (String::new(), Some(e.to_string()))
            }
        };
        let extraction = extract_code(&raw_text);
        let mut explanation = extraction.explanation.clone();
        let mut followup = None;
        if self.options.ask_explanations && error.is_none() && extraction.code.is_some() && explanation.is_none() {
            let mut h = history.to_vec();
            h.push(Exchange { user: bundle.user_text.clone(), assistant: raw_text.clone() });
            let follow = PromptBundle { user_text: EXPLANATION_REQUEST.to_string(), ..bundle.clone() };
            match request(provider, &follow, &h) {
                Ok(r) => {
                    let text = r.raw_text.trim().to_string();
                    explanation = (!text.is_empty()).then_some(text);
                    followup = Some(Exchange { user: EXPLANATION_REQUEST.to_string(), assistant: r.raw_text });
                }
                Err(e) => log::warn!("explanation request failed: {e}"),
            }
        }
        Reply { user_text: bundle.user_text.clone(), raw_text, extraction, explanation, followup, error }
    }

    fn fail(table: &mut ResultsTable, spec: &BenchmarkSpec, experiment: Experiment, tool_id: &str, reason: String) {
        log::error!("{}: {reason}", spec.id);
        table.failures.push(BenchmarkFailure {
            benchmark_id: spec.id.clone(),
            experiment,
            tool_id: tool_id.to_string(),
            reason,
        });
    }

    /// Single-shot serial optimization of each benchmark.
    pub fn run_ex1(&self, selection: &[BenchmarkSpec], provider: &dyn Provider) -> Result<ResultsTable, ExperimentError> {
        self.single_shot(selection, provider, Experiment::Ex1)
    }

    /// Parallel optimization, swept over the configured thread counts
    /// against the original code on one thread.
    pub fn run_ex3(&self, selection: &[BenchmarkSpec], provider: &dyn Provider) -> Result<ResultsTable, ExperimentError> {
        self.single_shot(selection, provider, Experiment::Ex3)
    }

    fn single_shot(
        &self,
        selection: &[BenchmarkSpec],
        provider: &dyn Provider,
        experiment: Experiment,
    ) -> Result<ResultsTable, ExperimentError> {
        if selection.is_empty() {
            return Err(ExperimentError::EmptySelection);
        }
        let tool_id = provider.id();
        let mut table = ResultsTable::new(self.provenance(vec![provider.info()]));
        let root = self.root(experiment, &tool_id);
        let parallel = experiment == Experiment::Ex3;
        let opts = self.build_options(parallel);
        let (base_threads, plan) = if parallel {
            (Some(1), RunPlan::Sweep(self.options.thread_counts.clone()))
        } else {
            (None, RunPlan::Single(None))
        };
        let tag = experiment.as_str().to_ascii_lowercase();
        for spec in selection {
            let (original, baseline) = match self.setup(spec, &root, &opts, base_threads) {
                Ok(x) => x,
                Err(e) => {
                    Self::fail(&mut table, spec, experiment, &tool_id, e.to_string());
                    continue;
                }
            };
            let bundle = match render_prompt(experiment, spec, &original.code, &self.prompt_env) {
                Ok(b) => b,
                Err(e) => {
                    Self::fail(&mut table, spec, experiment, &tool_id, e.to_string());
                    continue;
                }
            };
            let reply = self.ask(provider, &bundle, &[]);
            let candidate = Candidate {
                extraction: &reply.extraction,
                code: reply.extraction.code.as_deref(),
                reference_code: &original.code,
                experiment,
                check_rules: true,
                overlay: None,
            };
            let variant = VariantDir::new(&root, &spec.id, &tag);
            let evaluation =
                match eval::evaluate(&original, &candidate, self.toolchain, &variant, &opts, &baseline, &plan) {
                    Ok(e) => e,
                    Err(e) => {
                        Self::fail(&mut table, spec, experiment, &tool_id, e.to_string());
                        continue;
                    }
                };
            let mut row = AttemptRecord::new(spec, experiment, &tool_id, tag.clone());
            row.apply(&evaluation);
            row.note = reply.error.clone().or(row.note);
            row.labels = labels_for(&reply);
            if let RunPlan::Sweep(counts) = &plan {
                let mut per_count: BTreeMap<u32, Option<f64>> = counts.iter().map(|c| (*c, None)).collect();
                if row.category.is_correct() {
                    per_count.extend(evaluation.thread_speedups.clone().unwrap_or_default());
                }
                row.thread_results = Some(per_count);
            }
            table.push(row)?;
        }
        Ok(table)
    }

    /// One conversation per benchmark: the EX1 turn, then four requests
    /// for further optimizations of the latest code. The row keeps the
    /// fastest Correct turn.
    pub fn run_ex2(&self, selection: &[BenchmarkSpec], provider: &dyn Provider) -> Result<ResultsTable, ExperimentError> {
        if selection.is_empty() {
            return Err(ExperimentError::EmptySelection);
        }
        let tool_id = provider.id();
        let mut table = ResultsTable::new(self.provenance(vec![provider.info()]));
        let root = self.root(Experiment::Ex2, &tool_id);
        let opts = self.build_options(false);
        'bench: for spec in selection {
            let (original, baseline) = match self.setup(spec, &root, &opts, None) {
                Ok(x) => x,
                Err(e) => {
                    Self::fail(&mut table, spec, Experiment::Ex2, &tool_id, e.to_string());
                    continue;
                }
            };
            let mut history: Vec<Exchange> = Vec::new();
            let mut attached = original.code.clone();
            let mut turns: Vec<(TurnRecord, Evaluation)> = Vec::new();
            for turn in 1..=EX2_TURNS {
                let exp = if turn == 1 { Experiment::Ex1 } else { Experiment::Ex2 };
                let bundle = match render_prompt(exp, spec, &attached, &self.prompt_env) {
                    Ok(b) => b,
                    Err(e) => {
                        Self::fail(&mut table, spec, Experiment::Ex2, &tool_id, e.to_string());
                        continue 'bench;
                    }
                };
                let reply = self.ask(provider, &bundle, &history);
                let tag = format!("ex2-turn{turn}");
                let candidate = Candidate {
                    extraction: &reply.extraction,
                    code: reply.extraction.code.as_deref(),
                    reference_code: &attached,
                    experiment: exp,
                    check_rules: true,
                    overlay: None,
                };
                let variant = VariantDir::new(&root, &spec.id, &tag);
                let evaluation = match eval::evaluate(
                    &original,
                    &candidate,
                    self.toolchain,
                    &variant,
                    &opts,
                    &baseline,
                    &RunPlan::Single(None),
                ) {
                    Ok(e) => e,
                    Err(e) => {
                        Self::fail(&mut table, spec, Experiment::Ex2, &tool_id, e.to_string());
                        continue 'bench;
                    }
                };
                turns.push((
                    TurnRecord {
                        turn,
                        variant_tag: tag,
                        category: evaluation.category,
                        speedup: evaluation.speedup.map(|s| s.speedup),
                        constraint_flags: evaluation.constraint_flags.clone(),
                        labels: labels_for(&reply),
                        note: reply.error.clone().or_else(|| evaluation.note.clone()),
                    },
                    evaluation,
                ));
                history.push(Exchange { user: reply.user_text, assistant: reply.raw_text });
                history.extend(reply.followup);
                if let Some(code) = reply.extraction.code {
                    attached = code;
                }
            }
            let chosen = select_ex2_turn(&turns.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>());
            let pick = chosen.unwrap_or(turns.len() - 1);
            let (turn, evaluation) = &turns[pick];
            let mut row = AttemptRecord::new(spec, Experiment::Ex2, &tool_id, turn.variant_tag.clone());
            row.apply(evaluation);
            row.labels = turn.labels.clone();
            row.note = turn.note.clone();
            row.turns = turns.into_iter().map(|(t, _)| t).collect();
            table.push(row)?;
        }
        Ok(table)
    }

    /// Builds and validates code produced by an external tool, one
    /// directory per benchmark id under `dir`, overlaid on the original
    /// sources.
    pub fn import_external_tool_results(
        &self,
        selection: &[BenchmarkSpec],
        dir: &Path,
        tool_id: &str,
        experiment: Experiment,
    ) -> Result<ResultsTable, ExperimentError> {
        let info = ProviderInfo {
            provider_id: tool_id.to_string(),
            kind: crate::llm::ProviderKind::Replay,
            model: None,
            temperature: None,
            max_output_tokens: None,
        };
        let mut table = ResultsTable::new(self.provenance(vec![info]));
        let entries = fs::read_dir(dir)
            .map_err(|e| ExperimentError::Unreadable { path: dir.to_path_buf(), message: e.to_string() })?;
        let mut names: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .collect();
        names.sort();
        let root = self.root(experiment, tool_id);
        let opts = self.build_options(experiment == Experiment::Ex3);
        let tag = sanitize(tool_id);
        for name in names {
            let Some(spec) = selection.iter().find(|s| s.id == name) else {
                log::warn!("{}: no benchmark named `{name}`, skipped", dir.display());
                continue;
            };
            let (original, baseline) = match self.setup(spec, &root, &opts, None) {
                Ok(x) => x,
                Err(e) => {
                    Self::fail(&mut table, spec, experiment, tool_id, e.to_string());
                    continue;
                }
            };
            let tree = dir.join(&name);
            let code = fs::read_to_string(tree.join(&original.primary)).unwrap_or_else(|_| original.code.clone());
            let extraction = ExtractionResult {
                code: Some(code.clone()),
                explanation: None,
                extraction_rule_fired: ExtractionRule::WholeMessage,
                truncated: false,
            };
            let candidate = Candidate {
                extraction: &extraction,
                code: Some(&code),
                reference_code: &original.code,
                experiment,
                check_rules: false,
                overlay: Some(&tree),
            };
            let variant = VariantDir::new(&root, &spec.id, &tag);
            let evaluation = match eval::evaluate(
                &original,
                &candidate,
                self.toolchain,
                &variant,
                &opts,
                &baseline,
                &RunPlan::Single(None),
            ) {
                Ok(e) => e,
                Err(e) => {
                    Self::fail(&mut table, spec, experiment, tool_id, e.to_string());
                    continue;
                }
            };
            let mut row = AttemptRecord::new(spec, experiment, tool_id, tag.clone());
            row.apply(&evaluation);
            table.push(row)?;
        }
        Ok(table)
    }
}

/// Index of the fastest Correct turn (earliest on ties), if any.
pub fn select_ex2_turn(turns: &[TurnRecord]) -> Option<usize> {
    turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.category.is_correct())
        .filter_map(|(i, t)| Some((i, t.speedup?)))
        .fold(None::<(usize, f64)>, |best, (i, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}

/// Messages a conversation sends for its `turn`-th user request.
pub fn conversation_length(turn: usize) -> usize {
    1 + 2 * turn.saturating_sub(1) + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanKind {
    Arithmetic,
    Geometric,
}

impl MeanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MeanKind::Arithmetic => "arithmetic",
            MeanKind::Geometric => "geometric",
        }
    }

    pub fn of(self, xs: &[f64]) -> f64 {
        match self {
            MeanKind::Arithmetic => xs.iter().sum::<f64>() / xs.len() as f64,
            MeanKind::Geometric => (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupBy {
    pub tool: bool,
    pub motif: bool,
    pub experiment: bool,
}

impl GroupBy {
    pub const ALL: GroupBy = GroupBy { tool: true, motif: true, experiment: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub tool_id: Option<String>,
    pub motif: Option<Motif>,
    pub experiment: Option<Experiment>,
    pub n: usize,
    pub mean_speedup: f64,
    pub mean_kind: MeanKind,
    pub pass_at_1: f64,
    pub category_counts: BTreeMap<CorrectnessCategory, usize>,
}

type GroupKey = (Option<String>, Option<Experiment>, Option<Motif>);

/// Mean speedup (NA rows count as 1.0) and pass@1 per group.
pub fn aggregate(table: &ResultsTable, group_by: GroupBy, mean: MeanKind) -> Result<Vec<SummaryRow>, ExperimentError> {
    if table.rows.is_empty() {
        return Err(ExperimentError::EmptyTable);
    }
    let mut groups: BTreeMap<GroupKey, Vec<&AttemptRecord>> = BTreeMap::new();
    for r in &table.rows {
        let key = (
            group_by.tool.then(|| r.tool_id.clone()),
            group_by.experiment.then_some(r.experiment),
            group_by.motif.then_some(r.motif),
        );
        groups.entry(key).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((tool_id, experiment, motif), rows)| {
            let speedups: Vec<f64> = rows.iter().map(|r| if r.na { 1.0 } else { r.speedup }).collect();
            let categories: Vec<CorrectnessCategory> = rows.iter().map(|r| r.category).collect();
            SummaryRow {
                tool_id,
                motif,
                experiment,
                n: rows.len(),
                mean_speedup: mean.of(&speedups),
                mean_kind: mean,
                pass_at_1: pass_at_1(&categories).expect("groups are non-empty"),
                category_counts: category_counts(&categories).into_iter().collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

pub const CSV_COLUMNS: [&str; 14] = [
    "benchmark_id",
    "motif",
    "level",
    "experiment",
    "tool_id",
    "variant_tag",
    "category",
    "speedup",
    "na_flag",
    "thread_4",
    "thread_8",
    "thread_16",
    "thread_32",
    "labels",
];

const SUMMARY_COLUMNS: [&str; 8] = ["tool_id", "experiment", "motif", "n", "mean_speedup", "mean_kind", "pass_at_1", "correct"];

fn fmt_speedup(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing to memory cannot fail");
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

/// Sorted for stable output regardless of insertion order.
fn sorted_rows(table: &ResultsTable) -> Vec<&AttemptRecord> {
    let mut rows: Vec<&AttemptRecord> = table.rows.iter().collect();
    rows.sort_by_key(|r| r.key());
    rows
}

pub fn render_results_csv(table: &ResultsTable) -> String {
    csv_string(|w| {
        w.write_record(CSV_COLUMNS)?;
        for r in sorted_rows(table) {
            let thread = |n: u32| match r.thread_results.as_ref().and_then(|t| t.get(&n)) {
                None => String::new(),
                Some(None) => "NA".to_string(),
                Some(Some(s)) => fmt_speedup(*s),
            };
            let labels: Vec<&str> = r.labels.iter().map(|l| l.label.as_str()).collect();
            w.write_record([
                r.benchmark_id.clone(),
                r.motif.to_string(),
                r.level.to_string(),
                r.experiment.to_string(),
                r.tool_id.clone(),
                r.variant_tag.clone(),
                r.category.to_string(),
                fmt_speedup(r.speedup),
                r.na.to_string(),
                thread(4),
                thread(8),
                thread(16),
                thread(32),
                labels.join(";"),
            ])?;
        }
        Ok(())
    })
}

fn opt_str<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(ToString::to_string).unwrap_or_else(|| "*".into())
}

pub fn render_summary_csv(summaries: &[SummaryRow]) -> String {
    csv_string(|w| {
        w.write_record(SUMMARY_COLUMNS)?;
        for s in summaries {
            w.write_record([
                opt_str(&s.tool_id),
                opt_str(&s.experiment),
                opt_str(&s.motif),
                s.n.to_string(),
                fmt_speedup(s.mean_speedup),
                s.mean_kind.as_str().to_string(),
                format!("{:.4}", s.pass_at_1),
                s.category_counts.get(&CorrectnessCategory::Correct).copied().unwrap_or(0).to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn render_markdown(table: &ResultsTable, summaries: &[SummaryRow]) -> String {
    let mut md = String::from("# Optimization results\n\n");
    let _ = writeln!(md, "Generated: {}\n", table.provenance.timestamp);

    // correctness taxonomy, one column per (tool, experiment)
    let columns: BTreeSet<(String, Experiment)> = table.rows.iter().map(|r| (r.tool_id.clone(), r.experiment)).collect();
    md.push_str("## Correctness\n\n| Category |");
    for (tool, exp) in &columns {
        let _ = write!(md, " {tool} {exp} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(columns.len()));
    md.push('\n');
    let count = |cat: Option<CorrectnessCategory>, tool: &str, exp: Experiment| {
        table
            .rows
            .iter()
            .filter(|r| r.tool_id == tool && r.experiment == exp && cat.is_none_or(|c| r.category == c))
            .count()
    };
    for cat in CorrectnessCategory::ALL {
        let _ = write!(md, "| {} |", cat.describe());
        for (tool, exp) in &columns {
            let _ = write!(md, " {} |", count(Some(cat), tool, *exp));
        }
        md.push('\n');
    }
    md.push_str("| Total |");
    for (tool, exp) in &columns {
        let _ = write!(md, " {} |", count(None, tool, *exp));
    }
    md.push_str("\n\n");

    // mean speedup per motif from the summaries that carry a motif
    let by_motif: Vec<&SummaryRow> = summaries.iter().filter(|s| s.motif.is_some()).collect();
    let cols: BTreeSet<(String, String)> =
        by_motif.iter().map(|s| (opt_str(&s.tool_id), opt_str(&s.experiment))).collect();
    md.push_str("## Mean speedup by motif\n\n| Motif |");
    for (tool, exp) in &cols {
        let _ = write!(md, " {tool} {exp} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(cols.len()));
    md.push('\n');
    let motifs: BTreeSet<Motif> = by_motif.iter().filter_map(|s| s.motif).collect();
    for m in motifs {
        let _ = write!(md, "| {m} |");
        for (tool, exp) in &cols {
            let cell = by_motif
                .iter()
                .find(|s| s.motif == Some(m) && opt_str(&s.tool_id) == *tool && opt_str(&s.experiment) == *exp)
                .map(|s| format!("{:.2}", s.mean_speedup))
                .unwrap_or_else(|| "-".into());
            let _ = write!(md, " {cell} |");
        }
        md.push('\n');
    }
    md.push('\n');

    md.push_str("## Summary\n\n| Tool | Experiment | Motif | n | Mean speedup | pass@1 |\n|---|---|---|---:|---:|---:|\n");
    for s in summaries {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.2} | {:.2} |",
            opt_str(&s.tool_id),
            opt_str(&s.experiment),
            opt_str(&s.motif),
            s.n,
            s.mean_speedup,
            s.pass_at_1
        );
    }
    md.push('\n');

    let kinds: BTreeSet<&str> = summaries.iter().map(|s| s.mean_kind.as_str()).collect();
    md.push_str("## Notes\n\n");
    if !kinds.is_empty() {
        let _ = writeln!(md, "- Mean speedups are {} means.", kinds.into_iter().collect::<Vec<_>>().join("/"));
    }
    md.push_str("- Attempts that are not Correct count as speedup 1.0 (the original code is kept).\n");
    md.push_str("- \"Failed to follow instructions\" comes from automated source checks and is heuristic.\n");
    for p in &table.provenance.providers {
        let temp = p.temperature.map(|t| t.to_string()).unwrap_or_else(|| "provider default".into());
        let model = p.model.clone().unwrap_or_else(|| "-".into());
        let _ = writeln!(md, "- Provider `{}`: model {model}, temperature {temp}.", p.provider_id);
    }
    for (id, version) in &table.provenance.toolchain_versions {
        let _ = writeln!(md, "- Compiler `{id}`: {version}.");
    }
    if !table.failures.is_empty() {
        md.push_str("\n## Not attempted\n\n");
        for f in &table.failures {
            let _ = writeln!(md, "- {} ({} {}): {}", f.benchmark_id, f.tool_id, f.experiment, f.reason.lines().next().unwrap_or(""));
        }
    }
    md
}

pub fn render_json(table: &ResultsTable, summaries: &[SummaryRow]) -> String {
    let rows: Vec<&AttemptRecord> = sorted_rows(table);
    let doc = serde_json::json!({
        "provenance": table.provenance,
        "rows": rows,
        "failures": table.failures,
        "summaries": summaries,
    });
    serde_json::to_string_pretty(&doc).expect("report serializes")
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    let unwritable = |e: std::io::Error| ExperimentError::UnwritablePath { path: path.to_path_buf(), message: e.to_string() };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(unwritable)?;
    }
    fs::write(path, text).map_err(unwritable)
}

/// Writes the report files for `format` into `out_dir` and returns their
/// paths: `results.csv` and `summary.csv`, `report.md`, or `report.json`.
pub fn emit_report(
    table: &ResultsTable,
    summaries: &[SummaryRow],
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let files: Vec<(&str, String)> = match format {
        ReportFormat::Csv => {
            vec![("results.csv", render_results_csv(table)), ("summary.csv", render_summary_csv(summaries))]
        }
        ReportFormat::Markdown => vec![("report.md", render_markdown(table, summaries))],
        ReportFormat::Json => vec![("report.json", render_json(table, summaries))],
    };
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out_dir.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}
