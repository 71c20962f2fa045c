//! Profile-guided optimization loop: profile the current version, show the
//! model its hotspot with the profile summary and a digest of earlier
//! attempts, splice the returned function back in, rebuild, validate,
//! time, and repeat.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, Baseline, Candidate, EvalError, Original, RunPlan};
use crate::llm::{
    extract_code, request, ConstraintViolation, Experiment, ExtractionResult, ModelResponse,
    PromptBundle, PromptEnv, Provider,
};
use crate::manifest::{BenchmarkSpec, Preprocessor};
use crate::patch::{self, Scan};
use crate::profile::{
    diff_metrics, fit_to_budget, hotspot, import_profile, summarize_for_model, Frame, MetricDelta, MetricInfo,
    MetricKind, ProfileError, ProfileNode, ProfileTree, RunContext, SummaryOptions,
};
use crate::toolchain::{BuildOptions, RunSample, SpeedupStat, ToolchainConfig, VariantDir};
use crate::verify::CorrectnessCategory;

pub const DEFAULT_DECLINE_SENTINEL: &str = "NO FURTHER OPTIMIZATIONS";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("max_iterations must be at least 1")]
    InvalidConfig,
    #[error("baseline failed to build: {0}")]
    BaselineBuildFailed(String),
    #[error("baseline failed to run: {0}")]
    BaselineRunFailed(String),
    #[error("no hotspot function could be determined for `{0}`")]
    NoHotspot(String),
    #[error(transparent)]
    Eval(EvalError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl From<EvalError> for AgentError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BaselineBuildFailed { stderr, .. } => AgentError::BaselineBuildFailed(stderr),
            EvalError::BaselineRunFailed { error, .. } => AgentError::BaselineRunFailed(error),
            other => AgentError::Eval(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricRequestPolicy {
    /// Profile the metrics the model asks for.
    HonorModelRequests,
    /// Always profile the same metrics.
    FixedSet(Vec<String>),
}

/// Which version the next iteration starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasePolicy {
    LastCorrect,
    BestCorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub max_iterations: u32,
    pub provider_id: String,
    pub top_k_hotspots: usize,
    pub env_context: RunContext,
    pub metric_request_policy: MetricRequestPolicy,
    pub decline_sentinel: String,
    pub base_policy: BasePolicy,
    pub hotspot_metric: String,
    pub summary_budget: usize,
    pub memory_budget: usize,
    pub thread_count: Option<u32>,
    pub openmp: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_iterations: 3,
            provider_id: String::new(),
            top_k_hotspots: 3,
            env_context: RunContext::default(),
            metric_request_policy: MetricRequestPolicy::HonorModelRequests,
            decline_sentinel: DEFAULT_DECLINE_SENTINEL.into(),
            base_policy: BasePolicy::LastCorrect,
            hotspot_metric: "time_excl".into(),
            summary_budget: 4000,
            memory_budget: 4000,
            thread_count: None,
            openmp: false,
        }
    }
}

/// What a profiler is asked to measure.
pub struct ProfileRequest<'a> {
    pub spec: &'a BenchmarkSpec,
    pub binary: &'a Path,
    /// `baseline` or `iter<N>`.
    pub variant_tag: &'a str,
    pub metrics: &'a [String],
    /// Timing already collected for this binary.
    pub sample: &'a RunSample,
}

pub trait ProfileSource {
    fn profile(&self, req: &ProfileRequest<'_>) -> Result<ProfileTree, ProfileError>;
}

/// Canned profiles keyed by variant tag, falling back to `default`.
#[derive(Debug, Clone, Default)]
pub struct FixtureProfiles {
    pub by_variant: std::collections::BTreeMap<String, ProfileTree>,
    pub default: Option<ProfileTree>,
}

impl ProfileSource for FixtureProfiles {
    fn profile(&self, req: &ProfileRequest<'_>) -> Result<ProfileTree, ProfileError> {
        self.by_variant
            .get(req.variant_tag)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| ProfileError::NodeNotFound(req.variant_tag.to_string()))
    }
}

/// One-node profile built from the measured wall time, attributed to the
/// manifest's hotspot; used when no profiler is configured.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimingOnlyProfile;

impl ProfileSource for TimingOnlyProfile {
    fn profile(&self, req: &ProfileRequest<'_>) -> Result<ProfileTree, ProfileError> {
        let name = req.spec.entry_hotspot.clone().unwrap_or_else(|| "main".into());
        let t = req.sample.mean().unwrap_or(0.0);
        let metric = |k| MetricInfo { unit: "s".into(), kind: k, pair: None };
        Ok(ProfileTree {
            roots: vec![ProfileNode {
                frame: Frame { function: name, file: Some(req.spec.primary_source().display().to_string()), line: None },
                metrics: [("time_excl".to_string(), t)].into_iter().collect(),
                children: vec![],
            }],
            metric_catalog: [("time_excl".to_string(), metric(MetricKind::Exclusive))].into_iter().collect(),
            total: [("time_excl".to_string(), t)].into_iter().collect(),
        })
    }
}

/// Runs an external profiler that writes a `cct-v1` document.
///
/// Arguments may contain `{binary}`, `{output}` and `{metrics}` (comma
/// separated ids); a lone `{args}` argument expands to the run arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandProfiler {
    pub program: String,
    pub args: Vec<String>,
    pub output_dir: PathBuf,
}

impl ProfileSource for CommandProfiler {
    fn profile(&self, req: &ProfileRequest<'_>) -> Result<ProfileTree, ProfileError> {
        let fail = ProfileError::ProfilerFailed;
        fs::create_dir_all(&self.output_dir).map_err(|e| fail(e.to_string()))?;
        let output = self.output_dir.join(format!("{}-{}.json", req.spec.id, req.variant_tag));
        let metrics = req.metrics.join(",");
        let mut args = Vec::new();
        for a in &self.args {
            if a == "{args}" {
                args.extend(req.spec.run.args.iter().cloned());
            } else {
                args.push(
                    a.replace("{binary}", &req.binary.to_string_lossy())
                        .replace("{output}", &output.to_string_lossy())
                        .replace("{metrics}", &metrics),
                );
            }
        }
        let mut cmd = Command::new(&self.program);
        cmd.args(&args).envs(&req.spec.run.env);
        if let Some(cwd) = &req.spec.run.cwd {
            cmd.current_dir(cwd);
        }
        let status = cmd.status().map_err(|e| fail(format!("{}: {e}", self.program)))?;
        if !status.success() {
            return Err(fail(format!("{} exited with {status}", self.program)));
        }
        let bytes = fs::read(&output).map_err(|e| fail(format!("{}: {e}", output.display())))?;
        import_profile(&bytes)
    }
}

/// Known metric ids and the phrases that name them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCatalog {
    pub entries: Vec<(String, Vec<String>)>,
}

impl Default for MetricCatalog {
    fn default() -> Self {
        let e = |id: &str, aliases: &[&str]| (id.to_string(), aliases.iter().map(|s| s.to_string()).collect());
        MetricCatalog {
            entries: vec![
                e("time_excl", &["cpu time", "execution time", "exclusive time", "time_excl"]),
                e("time_incl", &["inclusive time", "time_incl"]),
                e(
                    "l1_dcache_miss",
                    &["l1 cache misses", "l1 cache miss", "l1 data cache misses", "l1 data cache load misses", "l1d misses", "l1 misses", "l1 miss rate", "l1_dcache_miss"],
                ),
                e("l2_cache_miss", &["l2 cache misses", "l2 misses", "l2_cache_miss"]),
                e("llc_miss", &["last level cache misses", "llc misses", "l3 cache misses", "l3 misses", "llc_miss"]),
                e(
                    "fp_ops",
                    &["floating-point instructions", "floating point instructions", "floating-point operations", "floating point operations", "flops", "fp_ops"],
                ),
                e("instructions", &["instructions retired", "instruction count", "total instructions"]),
                e("cycles", &["cpu cycles", "cycle count", "cycles"]),
                e("branch_miss", &["branch misses", "branch mispredictions", "branch_miss"]),
                e("tlb_miss", &["tlb misses", "dtlb misses", "tlb_miss"]),
                e("mem_bandwidth", &["memory bandwidth", "mem_bandwidth"]),
            ],
        }
    }
}

fn alias_pattern(alias: &str) -> String {
    let words: Vec<String> = alias.split(|c: char| c.is_whitespace() || c == '-').filter(|w| !w.is_empty()).map(regex::escape).collect();
    format!(r"(?i)\b{}\b", words.join(r"[\s-]+"))
}

static REQUEST_VERB: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:measure|collect|profile|record|track|monitor)\s+(?:the\s+)?([^.;,\n]+)").expect("valid regex")
});

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRequests {
    pub ids: Vec<String>,
    pub notes: Vec<String>,
}

/// Finds metric names in `text`; longer phrases win over their substrings.
/// Requests for things outside the catalog are noted and ignored.
pub fn parse_metric_requests(text: &str, catalog: &MetricCatalog) -> MetricRequests {
    let mut aliases: Vec<(&str, &str)> =
        catalog.entries.iter().flat_map(|(id, al)| al.iter().map(move |a| (id.as_str(), a.as_str()))).collect();
    aliases.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.1.cmp(b.1)));
    let mut taken: Vec<std::ops::Range<usize>> = Vec::new();
    let mut found: Vec<(usize, &str)> = Vec::new();
    for (id, alias) in aliases {
        let re = Regex::new(&alias_pattern(alias)).expect("escaped alias compiles");
        for m in re.find_iter(text) {
            if taken.iter().any(|r| r.start < m.end() && m.start() < r.end) {
                continue;
            }
            taken.push(m.range());
            found.push((m.start(), id));
        }
    }
    found.sort();
    let mut ids = Vec::new();
    for (_, id) in found {
        if !ids.iter().any(|x| x == id) {
            ids.push(id.to_string());
        }
    }
    let mut notes = Vec::new();
    for cap in REQUEST_VERB.captures_iter(text) {
        let span = cap.get(1).expect("group 1 always participates");
        if !taken.iter().any(|r| r.start < span.end() && span.start() < r.end) {
            let note = format!("unrecognized metric request: {}", span.as_str().trim());
            log::info!("{note}");
            notes.push(note);
        }
    }
    MetricRequests { ids, notes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub context_sent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ModelResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_error: Option<String>,
    pub extraction: ExtractionResult,
    pub category: CorrectnessCategory,
    pub constraint_flags: BTreeSet<ConstraintViolation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_vs_original: Option<SpeedupStat>,
    pub requested_metrics: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metric_notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_delta: Option<MetricDelta>,
    pub declined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    ThresholdReached,
    ModelDeclined,
    FatalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub benchmark_id: String,
    pub hotspot: String,
    pub baseline: RunSample,
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatal_error: Option<String>,
    pub best_iteration: Option<u32>,
}

impl AgentTrace {
    pub fn best_speedup(&self) -> Option<f64> {
        let i = self.best_iteration?;
        self.iterations.iter().find(|r| r.index == i)?.speedup_vs_original.map(|s| s.speedup)
    }
}

/// Index of the Correct iteration with the lowest candidate mean time
/// (earliest on ties).
pub fn best_iteration(records: &[IterationRecord]) -> Option<u32> {
    records
        .iter()
        .filter(|r| r.category.is_correct())
        .filter_map(|r| Some((r.index, r.speedup_vs_original?.candidate_mean_s)))
        .fold(None::<(u32, f64)>, |best, (i, t)| match best {
            Some((_, bt)) if bt <= t => best,
            _ => Some((i, t)),
        })
        .map(|(i, _)| i)
}

/// Most-recent-first summary of earlier iterations for the next prompt.
pub fn build_memory_digest(records: &[IterationRecord], budget: usize) -> String {
    if records.is_empty() {
        return String::new();
    }
    let mut text = String::new();
    for r in records.iter().rev() {
        let summary = r
            .extraction
            .explanation
            .as_deref()
            .and_then(|e| e.lines().map(str::trim).find(|l| !l.is_empty()))
            .unwrap_or("(no explanation)");
        let _ = write!(text, "Iteration {}: {summary} | result: {}", r.index, r.category);
        match &r.speedup_vs_original {
            Some(s) => {
                let _ = write!(text, " | speedup {:.2}x ({:.4} s)", s.speedup, s.candidate_mean_s);
            }
            None => text.push_str(" | speedup n/a"),
        }
        if !r.constraint_flags.is_empty() {
            let flags: Vec<&str> = r.constraint_flags.iter().map(|f| f.as_str()).collect();
            let _ = write!(text, " | violations: {}", flags.join(","));
        }
        if let Some(d) = &r.profile_delta {
            let parts: Vec<String> = d
                .metrics
                .iter()
                .filter_map(|(id, c)| c.relative_change.map(|rc| format!("{id} {:+.1}%", 100.0 * rc)))
                .collect();
            if !parts.is_empty() {
                let _ = write!(text, " | {}", parts.join(", "));
            }
        }
        text.push('\n');
    }
    fit_to_budget(&text, budget)
}

static AFFIRMS_NO_CHANGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bno\s+(further|additional|more)\s+(meaningful\s+|significant\s+)?optimi[sz]ations?\b")
        .expect("valid regex")
});

fn is_decline(response: &str, extraction: &ExtractionResult, sentinel: &str) -> bool {
    if !sentinel.is_empty() && response.to_lowercase().contains(&sentinel.to_lowercase()) {
        return true;
    }
    extraction.code.is_none() && !response.contains("```") && AFFIRMS_NO_CHANGE.is_match(response)
}

/// Text of the agent's request for one iteration.
pub fn agent_prompt(
    spec: &BenchmarkSpec,
    hotspot_name: &str,
    function_code: &str,
    profile_summary: &str,
    memory: &str,
    catalog: &MetricCatalog,
    sentinel: &str,
) -> String {
    let tag = crate::llm::fence_tag(spec.language);
    let metrics: Vec<&str> = catalog.entries.iter().map(|(id, _)| id.as_str()).collect();
    let mut text = format!(
        "Optimize the function `{hotspot_name}` of the program `{}`, which the profile identifies as the hotspot.\n\n\
         Profile:\n{profile_summary}\n",
        spec.id
    );
    if !memory.is_empty() {
        let _ = write!(text, "\nEarlier iterations, most recent first:\n{memory}\n");
    }
    let _ = write!(
        text,
        "\nCurrent definition:\n```{tag}\n{function_code}\n```\n\n\
         Reply with the complete optimized definition of `{hotspot_name}` in a single fenced code block, keeping its \
         name and signature, followed by a short explanation of the optimization. Do not add new functions or print \
         statements. To have additional metrics measured in the next iteration, name them (available: {}). If no \
         further optimizations are worthwhile, reply with {sentinel}.",
        metrics.join(", ")
    );
    text
}

/// Splices `hotspot` from the model's code into `base`, adding any
/// `#include` lines the new code brings along.
fn patch_in(base: &str, model_code: &str, hotspot_name: &str) -> Option<String> {
    let new_def = patch::extract_function(model_code, hotspot_name).ok()?;
    let mut patched = patch::replace_function(base, hotspot_name, &new_def).ok()?;
    let have: BTreeSet<String> = Scan::new(base).includes().into_iter().collect();
    let extra: Vec<String> =
        Scan::new(model_code).includes().into_iter().filter(|i| !have.contains(i)).map(|i| format!("#include {i}\n")).collect();
    if !extra.is_empty() {
        patched = extra.concat() + &patched;
    }
    Some(patched)
}

pub struct AgentContext<'a> {
    pub toolchain: &'a ToolchainConfig,
    pub work_dir: &'a Path,
    pub preprocessor: &'a Preprocessor,
    pub prompt_env: &'a PromptEnv,
    pub catalog: &'a MetricCatalog,
}

struct Base {
    code: String,
    profile: Option<ProfileTree>,
    binary: PathBuf,
    sample: RunSample,
    tag: String,
}

fn resolve_hotspot(original: &Original, profile: Option<&ProfileTree>, metric: &str) -> Option<String> {
    let defined = |name: &str| patch::locate_function(&original.code, name).is_ok();
    profile
        .and_then(|p| hotspot(p, metric).ok())
        .map(|h| h.function().to_string())
        .filter(|n| defined(n))
        .or_else(|| original.spec.entry_hotspot.clone().filter(|n| defined(n)))
}

/// Runs the optimization loop on one benchmark and writes
/// `<work>/<id>/agent/trace.json`.
pub fn run_agent(
    spec: &BenchmarkSpec,
    profiles: &dyn ProfileSource,
    provider: &dyn Provider,
    cfg: &AgentConfig,
    ctx: &AgentContext<'_>,
) -> Result<AgentTrace, AgentError> {
    if cfg.max_iterations == 0 {
        return Err(AgentError::InvalidConfig);
    }
    let agent_dir = ctx.work_dir.join(&spec.id).join("agent");
    let original = Original::prepare(spec, &agent_dir, ctx.preprocessor)?;
    let opts = BuildOptions { openmp: cfg.openmp, ..Default::default() };
    let baseline_dir = VariantDir::at(agent_dir.join("baseline"));
    let baseline: Baseline = eval::run_baseline(&original, ctx.toolchain, &baseline_dir, &opts, cfg.thread_count)?;

    let fixed = match &cfg.metric_request_policy {
        MetricRequestPolicy::FixedSet(m) => Some(m.clone()),
        MetricRequestPolicy::HonorModelRequests => None,
    };
    let mut requested: Vec<String> = fixed.clone().unwrap_or_default();
    let profile = profiles
        .profile(&ProfileRequest {
            spec,
            binary: &baseline.binary,
            variant_tag: "baseline",
            metrics: &requested,
            sample: &baseline.sample,
        })
        .map_err(|e| log::warn!("baseline profile unavailable: {e}"))
        .ok();
    let hotspot_name = resolve_hotspot(&original, profile.as_ref(), &cfg.hotspot_metric)
        .ok_or_else(|| AgentError::NoHotspot(spec.id.clone()))?;

    let mut base = Base {
        code: original.code.clone(),
        profile,
        binary: baseline.binary.clone(),
        sample: baseline.sample.clone(),
        tag: "baseline".into(),
    };
    let summary_opts =
        SummaryOptions { metric: cfg.hotspot_metric.clone(), top_k: cfg.top_k_hotspots.max(1), budget: cfg.summary_budget };
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut stop_reason = StopReason::ThresholdReached;
    let mut fatal_error = None;

    for index in 1..=cfg.max_iterations {
        if base.profile.is_none() {
            base.profile = profiles
                .profile(&ProfileRequest {
                    spec,
                    binary: &base.binary,
                    variant_tag: &base.tag,
                    metrics: &requested,
                    sample: &base.sample,
                })
                .map_err(|e| log::warn!("profile of {} unavailable: {e}", base.tag))
                .ok();
        }
        let summary = match &base.profile {
            Some(p) => summarize_for_model(p, &summary_opts, &cfg.env_context),
            None => "(no profile available)\n".to_string(),
        };
        let function_code =
            patch::extract_function(&base.code, &hotspot_name).map_err(|_| AgentError::NoHotspot(spec.id.clone()))?;
        let memory = build_memory_digest(&records, cfg.memory_budget);
        let context_sent =
            agent_prompt(spec, &hotspot_name, &function_code, &summary, &memory, ctx.catalog, &cfg.decline_sentinel);
        let bundle = PromptBundle {
            system_text: ctx.prompt_env.system_text(),
            user_text: context_sent.clone(),
            experiment: Experiment::Agent,
            attached_code: function_code,
        };

        let (response, provider_error) = match request(provider, &bundle, &[]) {
            Ok(r) => (Some(r), None),
            Err(e) => {
                log::warn!("iteration {index}: {e}");
                (None, Some(e.to_string()))
            }
        };
        let raw = response.as_ref().map(|r| r.raw_text.as_str()).unwrap_or("");
        let extraction = extract_code(raw);
        let declined = response.is_some() && is_decline(raw, &extraction, &cfg.decline_sentinel);
        let metric_requests = parse_metric_requests(raw, ctx.catalog);
        let this_requested = fixed.clone().unwrap_or_else(|| metric_requests.ids.clone());

        let patched = extraction.code.as_deref().map(|c| patch_in(&base.code, c, &hotspot_name));
        let variant = VariantDir::at(agent_dir.join(format!("iter{index}")));
        let mut record = IterationRecord {
            index,
            context_sent,
            response: response.clone(),
            provider_error,
            extraction: extraction.clone(),
            category: CorrectnessCategory::NoGeneratedCode,
            constraint_flags: BTreeSet::new(),
            run: None,
            speedup_vs_original: None,
            requested_metrics: this_requested.clone(),
            metric_notes: metric_requests.notes,
            profile_delta: None,
            declined,
        };
        match patched {
            None => {}
            Some(None) => {
                // code came back but the hotspot could not be spliced from it
                record.category = CorrectnessCategory::FailedToFollowInstructions;
                record.constraint_flags.insert(ConstraintViolation::RemovedFunction);
            }
            Some(Some(code)) => {
                let candidate = Candidate {
                    extraction: &extraction,
                    code: Some(&code),
                    reference_code: &base.code,
                    experiment: Experiment::Agent,
                    check_rules: true,
                    overlay: None,
                };
                let evaluation = match eval::evaluate(
                    &original,
                    &candidate,
                    ctx.toolchain,
                    &variant,
                    &opts,
                    &baseline,
                    &RunPlan::Single(cfg.thread_count),
                ) {
                    Ok(e) => e,
                    Err(e) => {
                        stop_reason = StopReason::FatalError;
                        fatal_error = Some(e.to_string());
                        records.push(record);
                        break;
                    }
                };
                record.category = evaluation.category;
                record.constraint_flags = evaluation.constraint_flags;
                record.run = evaluation.run.and_then(Result::ok);
                record.speedup_vs_original = evaluation.speedup;
                if let (true, Some(binary), Some(sample)) =
                    (record.category.is_correct(), evaluation.binary, record.run.clone())
                {
                    let tag = format!("iter{index}");
                    let new_profile = profiles
                        .profile(&ProfileRequest { spec, binary: &binary, variant_tag: &tag, metrics: &this_requested, sample: &sample })
                        .map_err(|e| log::warn!("profile of {tag} unavailable: {e}"))
                        .ok();
                    if let (Some(before), Some(after)) = (&base.profile, &new_profile) {
                        let chain = hotspot_chain(before, &hotspot_name);
                        let chain: Vec<&str> = chain.iter().map(String::as_str).collect();
                        record.profile_delta = diff_metrics(before, after, &chain)
                            .map_err(|e| log::info!("no metric delta for iteration {index}: {e}"))
                            .ok();
                    }
                    let take = match cfg.base_policy {
                        BasePolicy::LastCorrect => true,
                        BasePolicy::BestCorrect => {
                            sample.mean().zip(base.sample.mean()).is_some_and(|(new, old)| new < old)
                        }
                    };
                    if take {
                        base = Base { code, profile: new_profile, binary, sample, tag };
                    }
                }
            }
        }
        requested = this_requested;
        records.push(record);
        if declined {
            stop_reason = StopReason::ModelDeclined;
            break;
        }
    }

    let trace = AgentTrace {
        benchmark_id: spec.id.clone(),
        hotspot: hotspot_name,
        baseline: baseline.sample,
        best_iteration: best_iteration(&records),
        iterations: records,
        stop_reason,
        fatal_error,
    };
    let path = agent_dir.join("trace.json");
    let json = serde_json::to_string_pretty(&trace).expect("trace serializes");
    fs::write(&path, json).map_err(|e| AgentError::Io { path: path.clone(), message: e.to_string() })?;
    Ok(trace)
}

/// Function-name chain from a root to the first node named `name`.
fn hotspot_chain(tree: &ProfileTree, name: &str) -> Vec<String> {
    let mut found = None;
    tree.walk(|chain| {
        if found.is_none() && chain.last().is_some_and(|n| n.frame.function == name) {
            found = Some(chain.iter().map(|n| n.frame.function.clone()).collect());
        }
    });
    found.unwrap_or_else(|| vec![name.to_string()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ExtractionRule;

    fn record(index: u32, category: CorrectnessCategory, time: Option<f64>, explanation: &str) -> IterationRecord {
        IterationRecord {
            index,
            context_sent: String::new(),
            response: None,
            provider_error: None,
            extraction: ExtractionResult {
                code: None,
                explanation: Some(explanation.to_string()),
                extraction_rule_fired: ExtractionRule::FencedBlock,
                truncated: false,
            },
            category,
            constraint_flags: BTreeSet::new(),
            run: None,
            speedup_vs_original: time.and_then(|t| SpeedupStat::from_means(25.0, t)),
            requested_metrics: vec![],
            metric_notes: vec![],
            profile_delta: None,
            declined: false,
        }
    }

    #[test]
    fn best_iteration_picks_fastest_correct() {
        let rs = vec![
            record(1, CorrectnessCategory::Correct, Some(3.04), "a"),
            record(2, CorrectnessCategory::Correct, Some(5.69), "b"),
            record(3, CorrectnessCategory::Correct, Some(5.52), "c"),
        ];
        assert_eq!(best_iteration(&rs), Some(1));
        assert_eq!(format!("{:.2}", rs[0].speedup_vs_original.unwrap().speedup), "8.22");
        let rs = vec![
            record(1, CorrectnessCategory::OutputMismatch, None, "a"),
            record(2, CorrectnessCategory::Correct, Some(4.0), "b"),
            record(3, CorrectnessCategory::Correct, Some(4.0), "c"),
        ];
        assert_eq!(best_iteration(&rs), Some(2));
        assert_eq!(best_iteration(&rs[..1]), None);
    }

    #[test]
    fn metric_requests() {
        let cat = MetricCatalog::default();
        assert_eq!(parse_metric_requests("please measure L1 cache misses next", &cat).ids, ["l1_dcache_miss"]);
        assert_eq!(parse_metric_requests("", &cat), MetricRequests::default());
        let r = parse_metric_requests("measure quantum flux", &cat);
        assert!(r.ids.is_empty());
        assert_eq!(r.notes, ["unrecognized metric request: quantum flux"]);
        let r = parse_metric_requests("Next, collect L1 cache misses and the number of floating-point instructions.", &cat);
        assert_eq!(r.ids, ["l1_dcache_miss", "fp_ops"]);
        assert!(r.notes.is_empty());
    }

    #[test]
    fn digest_is_recent_first_and_budgeted() {
        assert_eq!(build_memory_digest(&[], 100), "");
        let rs = vec![
            record(1, CorrectnessCategory::Correct, Some(3.04), "Unrolled the CSR loop.\nMore detail."),
            record(2, CorrectnessCategory::Correct, Some(5.69), "Added prefetching."),
        ];
        let d = build_memory_digest(&rs, 10_000);
        let i2 = d.find("Iteration 2").unwrap();
        let i1 = d.find("Iteration 1").unwrap();
        assert!(i2 < i1);
        assert!(d.contains("8.22x") && d.contains("4.39x"));
        assert!(d.contains("Unrolled the CSR loop.") && !d.contains("More detail"));
        assert_eq!(build_memory_digest(&rs, 0), crate::profile::TRUNCATION_MARKER);
    }

    #[test]
    fn decline_detection() {
        let none = extract_code("NO FURTHER OPTIMIZATIONS");
        assert!(is_decline("NO FURTHER OPTIMIZATIONS", &none, DEFAULT_DECLINE_SENTINEL));
        let prose = "I see no further optimizations worth applying here.";
        assert!(is_decline(prose, &extract_code(prose), DEFAULT_DECLINE_SENTINEL));
        let code = "```c\nvoid f(void) {}\n```\nUnrolled.";
        assert!(!is_decline(code, &extract_code(code), DEFAULT_DECLINE_SENTINEL));
    }

    #[test]
    fn patching_merges_includes() {
        let base = "#include <stdio.h>\nstatic double k(double x) { return x * x; }\nint main(void) { printf(\"%f\\n\", k(2)); return 0; }\n";
        let model = "#include <math.h>\nstatic double k(double x) { return pow(x, 2); }\n";
        let patched = patch_in(base, model, "k").unwrap();
        assert!(patched.starts_with("#include <math.h>\n#include <stdio.h>"));
        assert!(patched.contains("return pow(x, 2);"));
        assert!(patched.contains("int main(void)"));
        assert_eq!(patch_in(base, "int other(void) { return 1; }", "k"), None);
    }
}
