//! Benchmark registry: one `benchmark.toml` per benchmark directory.
//!
//! ```toml
//! id = "matmul"
//! motif = "DenseLinearAlgebra"
//! level = 1
//! language = "C"
//! sources = ["matmul.c"]
//! entry_hotspot = "matmul"
//!
//! [build]
//! compiler_id = "gcc"
//! flags = ["-O2"]
//! timeout_s = 120
//!
//! [run]
//! args = []
//! repetitions = 10
//! timeout_s = 300
//!
//! [validation]
//! mode = "NumericTokens"
//! abs_tol = 1e-6
//! rel_tol = 1e-9
//! ignore_patterns = ["^Time"]
//!
//! [prep]
//! strip_omp_pragmas = true
//! expand_macros = false
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::patch::{self, PatchError};

pub const MANIFEST_FILE: &str = "benchmark.toml";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("missing source file {0}")]
    MissingSource(PathBuf),
    #[error("duplicate benchmark id `{0}`")]
    DuplicateId(String),
    #[error("preprocessor failed: {0}")]
    PreprocessFailure(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ManifestError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ManifestError::Io { path: path.into(), source }
    }

    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        ManifestError::MalformedManifest { path: path.to_path_buf(), reason: reason.into() }
    }
}

/// The nine computational motifs used to group benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Motif {
    DenseLinearAlgebra,
    SparseLinearAlgebra,
    SpectralMethods,
    MonteCarlo,
    DynamicProgramming,
    StructuredGrids,
    NBody,
    Stencils,
    RadiationTransport,
}

impl Motif {
    pub const ALL: [Motif; 9] = [
        Motif::DenseLinearAlgebra,
        Motif::SparseLinearAlgebra,
        Motif::SpectralMethods,
        Motif::MonteCarlo,
        Motif::DynamicProgramming,
        Motif::StructuredGrids,
        Motif::NBody,
        Motif::Stencils,
        Motif::RadiationTransport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Motif::DenseLinearAlgebra => "DenseLinearAlgebra",
            Motif::SparseLinearAlgebra => "SparseLinearAlgebra",
            Motif::SpectralMethods => "SpectralMethods",
            Motif::MonteCarlo => "MonteCarlo",
            Motif::DynamicProgramming => "DynamicProgramming",
            Motif::StructuredGrids => "StructuredGrids",
            Motif::NBody => "NBody",
            Motif::Stencils => "Stencils",
            Motif::RadiationTransport => "RadiationTransport",
        }
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Motif {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Motif::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown motif `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Language {
    C,
    #[serde(alias = "C++", alias = "CXX")]
    Cpp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildRecipe {
    pub compiler_id: String,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub extra_objects: Vec<PathBuf>,
    #[serde(default = "default_build_timeout")]
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecipe {
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin_file: Option<PathBuf>,
    /// File (relative to the working directory) holding the output to
    /// validate instead of stdout, for programs whose stdout is not stable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_file: Option<PathBuf>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_run_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Working directory of the child process. Filled in by the loader
    /// with the benchmark directory; never read from the manifest.
    #[serde(skip)]
    pub cwd: Option<PathBuf>,
}

impl Default for RunRecipe {
    fn default() -> Self {
        RunRecipe {
            args: Vec::new(),
            stdin_file: None,
            output_file: None,
            repetitions: default_repetitions(),
            timeout_s: default_run_timeout(),
            env: BTreeMap::new(),
            cwd: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationMode {
    ExactBytes,
    NumericTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationPolicy {
    pub mode: ValidationMode,
    #[serde(default)]
    pub abs_tol: f64,
    #[serde(default)]
    pub rel_tol: f64,
    #[serde(default)]
    pub ignore_patterns: Vec<String>,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            mode: ValidationMode::ExactBytes,
            abs_tol: 0.0,
            rel_tol: 0.0,
            ignore_patterns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepOptions {
    #[serde(default)]
    pub strip_omp_pragmas: bool,
    #[serde(default)]
    pub expand_macros: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub id: String,
    pub motif: Motif,
    pub level: u8,
    pub language: Language,
    #[serde(rename = "sources")]
    pub source_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_hotspot: Option<String>,
    pub build: BuildRecipe,
    #[serde(default)]
    pub run: RunRecipe,
    #[serde(default)]
    pub validation: ValidationPolicy,
    #[serde(default)]
    pub prep: PrepOptions,
    /// Directory holding the manifest; all relative paths resolve here.
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_build_timeout() -> f64 {
    300.0
}

fn default_repetitions() -> u32 {
    10
}

fn default_run_timeout() -> f64 {
    600.0
}

fn is_contained(p: &Path) -> bool {
    let mut depth = 0i32;
    for c in p.components() {
        match c {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    depth > 0
}

const TRANSLATION_UNIT_EXTS: [&str; 6] = ["c", "cc", "cpp", "cxx", "C", "c++"];

pub fn is_translation_unit(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| TRANSLATION_UNIT_EXTS.contains(&e))
}

impl BenchmarkSpec {
    /// Parses and checks a manifest without touching the filesystem.
    pub fn parse(text: &str) -> Result<BenchmarkSpec, ManifestError> {
        Self::parse_at(text, Path::new(MANIFEST_FILE))
    }

    fn parse_at(text: &str, manifest_path: &Path) -> Result<BenchmarkSpec, ManifestError> {
        let spec: BenchmarkSpec =
            toml::from_str(text).map_err(|e| ManifestError::malformed(manifest_path, e.message()))?;
        spec.check(manifest_path)?;
        Ok(spec)
    }

    fn check(&self, path: &Path) -> Result<(), ManifestError> {
        let bad = |reason: String| Err(ManifestError::malformed(path, reason));
        if self.id.trim().is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return bad(format!("invalid id `{}`", self.id));
        }
        if !(1..=3).contains(&self.level) {
            return bad(format!("level {} outside 1..=3", self.level));
        }
        if self.source_files.is_empty() {
            return bad("sources is empty".into());
        }
        let paths = self
            .source_files
            .iter()
            .chain(&self.build.extra_objects)
            .chain(&self.run.stdin_file)
            .chain(&self.run.output_file);
        for p in paths {
            if !is_contained(p) {
                return bad(format!("path {} escapes the benchmark root", p.display()));
            }
        }
        if !(self.build.timeout_s.is_finite() && self.build.timeout_s > 0.0) {
            return bad("build.timeout_s must be positive".into());
        }
        if !(self.run.timeout_s.is_finite() && self.run.timeout_s > 0.0) {
            return bad("run.timeout_s must be positive".into());
        }
        if self.run.repetitions == 0 {
            return bad("run.repetitions must be at least 1".into());
        }
        let v = &self.validation;
        if !(v.abs_tol.is_finite() && v.abs_tol >= 0.0 && v.rel_tol.is_finite() && v.rel_tol >= 0.0) {
            return bad("validation tolerances must be finite and non-negative".into());
        }
        for pat in &v.ignore_patterns {
            if let Err(e) = regex::bytes::Regex::new(pat) {
                return bad(format!("bad ignore pattern `{pat}`: {e}"));
            }
        }
        if let Some(h) = &self.entry_hotspot {
            let valid = h.bytes().next().is_some_and(|b| b == b'_' || b.is_ascii_alphabetic())
                && h.bytes().all(|b| b == b'_' || b.is_ascii_alphanumeric());
            if !valid {
                return bad(format!("entry_hotspot `{h}` is not an identifier"));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("benchmark spec serializes to toml")
    }

    pub fn source_path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// The source file handed to models: the one defining the entry
    /// hotspot when set, otherwise the first listed source.
    pub fn primary_source(&self) -> &Path {
        if let Some(name) = &self.entry_hotspot {
            for rel in &self.source_files {
                if let Ok(text) = fs::read_to_string(self.source_path(rel)) {
                    if patch::locate_function(&text, name).is_ok() {
                        return rel;
                    }
                }
            }
        }
        &self.source_files[0]
    }

    /// Reads a manifest file and verifies its sources on disk.
    pub fn load(manifest_path: &Path) -> Result<BenchmarkSpec, ManifestError> {
        let text = fs::read_to_string(manifest_path).map_err(|e| ManifestError::io(manifest_path, e))?;
        let mut spec = Self::parse_at(&text, manifest_path)?;
        spec.root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        spec.run.cwd = Some(spec.root.clone());
        spec.verify_files(manifest_path)?;
        Ok(spec)
    }

    fn verify_files(&self, manifest_path: &Path) -> Result<(), ManifestError> {
        let inputs = self.source_files.iter().chain(&self.build.extra_objects).chain(&self.run.stdin_file);
        for rel in inputs {
            let p = self.source_path(rel);
            if !p.is_file() {
                return Err(ManifestError::MissingSource(p));
            }
        }
        if let Some(name) = &self.entry_hotspot {
            let mut defining = 0usize;
            for rel in &self.source_files {
                let p = self.source_path(rel);
                let text = fs::read_to_string(&p).map_err(|e| ManifestError::io(&p, e))?;
                match patch::locate_function(&text, name) {
                    Ok(_) => defining += 1,
                    Err(PatchError::Ambiguous { count, .. }) => defining += count,
                    Err(_) => {}
                }
            }
            if defining != 1 {
                return Err(ManifestError::malformed(
                    manifest_path,
                    format!("entry_hotspot `{name}` is defined in {defining} places, expected exactly one"),
                ));
            }
        }
        Ok(())
    }
}

/// Loads every `benchmark.toml` below `root`, ordered by id.
pub fn load_manifest(root: &Path) -> Result<Vec<BenchmarkSpec>, ManifestError> {
    let mut specs = Vec::new();
    for entry in WalkDir::new(root).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            ManifestError::io(path, e.into())
        })?;
        if entry.file_type().is_file() && entry.file_name() == MANIFEST_FILE {
            specs.push(BenchmarkSpec::load(entry.path())?);
        }
    }
    specs.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in specs.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(ManifestError::DuplicateId(pair[0].id.clone()));
        }
    }
    Ok(specs)
}

/// Conjunctive benchmark filter. `None` fields do not constrain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectFilter {
    pub levels: Option<BTreeSet<u8>>,
    pub motifs: Option<BTreeSet<Motif>>,
    pub ids: Option<BTreeSet<String>>,
}

impl SelectFilter {
    pub fn matches(&self, spec: &BenchmarkSpec) -> bool {
        self.levels.as_ref().is_none_or(|l| l.contains(&spec.level))
            && self.motifs.as_ref().is_none_or(|m| m.contains(&spec.motif))
            && self.ids.as_ref().is_none_or(|i| i.contains(&spec.id))
    }

    /// Adds one `key=v1,v2` clause (`level`, `motif` or `id`).
    pub fn add_clause(&mut self, clause: &str) -> Result<(), String> {
        let (key, values) = clause
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{clause}`"))?;
        let values = values.split(',').map(str::trim).filter(|v| !v.is_empty());
        match key.trim() {
            "level" | "levels" => {
                let set = self.levels.get_or_insert_with(BTreeSet::new);
                for v in values {
                    set.insert(v.parse().map_err(|_| format!("bad level `{v}`"))?);
                }
            }
            "motif" | "motifs" => {
                let set = self.motifs.get_or_insert_with(BTreeSet::new);
                for v in values {
                    set.insert(v.parse()?);
                }
            }
            "id" | "ids" => {
                let set = self.ids.get_or_insert_with(BTreeSet::new);
                set.extend(values.map(str::to_string));
            }
            other => return Err(format!("unknown selection key `{other}`")),
        }
        Ok(())
    }
}

pub fn select(specs: &[BenchmarkSpec], filter: &SelectFilter) -> Vec<BenchmarkSpec> {
    specs.iter().filter(|s| filter.matches(s)).cloned().collect()
}

/// External preprocessor used for macro expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Preprocessor { program: "cpp".into(), args: vec!["-P".into()] }
    }
}

const INCLUDE_PLACEHOLDER: &str = "PERFAGENT_KEEP_INCLUDE_";

/// Removes whole `#pragma omp` lines, including backslash continuations.
pub fn strip_omp_pragmas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut continuing = false;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if continuing {
            continuing = body.ends_with('\\');
            continue;
        }
        let mut words = body.trim_start().strip_prefix('#').map(|r| r.split_whitespace());
        let is_omp = words
            .as_mut()
            .is_some_and(|w| w.next() == Some("pragma") && w.next() == Some("omp"));
        if is_omp {
            continuing = body.ends_with('\\');
            continue;
        }
        out.push_str(line);
    }
    out
}

fn mask_system_includes(text: &str) -> (String, Vec<String>) {
    let mut kept = Vec::new();
    let mut out = String::with_capacity(text.len());
    for line in text.split_inclusive('\n') {
        let body = line.trim_start();
        let is_system = body
            .strip_prefix('#')
            .map(str::trim_start)
            .and_then(|r| r.strip_prefix("include"))
            .is_some_and(|r| r.trim_start().starts_with('<'));
        if is_system {
            out.push_str(&format!("{INCLUDE_PLACEHOLDER}{}\n", kept.len()));
            kept.push(line.trim_end_matches(['\n', '\r']).to_string());
        } else {
            out.push_str(line);
        }
    }
    (out, kept)
}

fn unmask_includes(text: &str, kept: &[String]) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.split_inclusive('\n') {
        let restored = line
            .trim()
            .strip_prefix(INCLUDE_PLACEHOLDER)
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(|n| kept.get(n));
        match restored {
            Some(orig) => {
                out.push_str(orig);
                out.push('\n');
            }
            None => out.push_str(line),
        }
    }
    out
}

/// Runs the preprocessor over `path` with system headers left in place,
/// so only macros visible in the benchmark's own files get expanded.
fn expand_macros(path: &Path, language: Language, pre: &Preprocessor) -> Result<String, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    let (masked, kept) = mask_system_includes(&text);
    let tmp = path.with_extension("perfagent-pp");
    fs::write(&tmp, masked).map_err(|e| ManifestError::io(&tmp, e))?;
    let lang = match language {
        Language::C => "c",
        Language::Cpp => "c++",
    };
    let output = Command::new(&pre.program)
        .args(&pre.args)
        .args(["-x", lang])
        .arg(&tmp)
        .output();
    let _ = fs::remove_file(&tmp);
    let output = output.map_err(|e| ManifestError::PreprocessFailure(format!("{}: {e}", pre.program)))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let excerpt: String = stderr.chars().take(2000).collect();
        return Err(ManifestError::PreprocessFailure(excerpt));
    }
    Ok(unmask_includes(&String::from_utf8_lossy(&output.stdout), &kept))
}

/// Copies a benchmark's sources into `work_dir`, applying the manifest's
/// preparation options, and returns `work_dir`.
pub fn prepare_sources(spec: &BenchmarkSpec, work_dir: &Path, pre: &Preprocessor) -> Result<PathBuf, ManifestError> {
    fs::create_dir_all(work_dir).map_err(|e| ManifestError::io(work_dir, e))?;
    for rel in &spec.source_files {
        let from = spec.source_path(rel);
        let to = work_dir.join(rel);
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(|e| ManifestError::io(parent, e))?;
        }
        fs::copy(&from, &to).map_err(|e| ManifestError::io(&from, e))?;
    }
    if spec.prep.expand_macros {
        for rel in spec.source_files.iter().filter(|p| is_translation_unit(p)) {
            let path = work_dir.join(rel);
            let expanded = expand_macros(&path, spec.language, pre)?;
            fs::write(&path, expanded).map_err(|e| ManifestError::io(&path, e))?;
        }
    }
    if spec.prep.strip_omp_pragmas {
        for rel in &spec.source_files {
            let path = work_dir.join(rel);
            let text = fs::read_to_string(&path).map_err(|e| ManifestError::io(&path, e))?;
            let stripped = strip_omp_pragmas(&text);
            if stripped != text {
                fs::write(&path, stripped).map_err(|e| ManifestError::io(&path, e))?;
            }
        }
    }
    Ok(work_dir.to_path_buf())
}
