//! Compiling benchmark variants and timing their execution.
//!
//! Timed runs hold a process-wide lock for their whole duration so that no
//! two measurements overlap, even when several variants are being built or
//! validated concurrently.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::manifest::{is_translation_unit, BenchmarkSpec, Language, Preprocessor};

/// Environment variable carrying the thread count to OpenMP programs.
pub const OMP_NUM_THREADS: &str = "OMP_NUM_THREADS";

static TIMED_RUN_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("compiler `{0}` is not configured or not executable")]
    ToolNotFound(String),
    #[error("build timed out after {0:.1} s")]
    BuildTimeout(f64),
    #[error("cannot compute a speedup from an empty sample")]
    EmptySample,
    #[error("thread counts must be non-empty and positive")]
    InvalidThreadCounts,
    #[error("toolchain config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> ToolchainError {
    let path = path.into();
    move |source| ToolchainError::Io { path, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilerEntry {
    /// C compiler executable.
    pub c: String,
    /// C++ compiler executable.
    pub cxx: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default)]
    pub default_flags: Vec<String>,
    #[serde(default = "default_openmp_flags")]
    pub openmp_flags: Vec<String>,
}

fn default_openmp_flags() -> Vec<String> {
    vec!["-fopenmp".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolchainConfig {
    pub compilers: BTreeMap<String, CompilerEntry>,
    #[serde(default)]
    pub preprocessor: Preprocessor,
}

fn probe_version(program: &str) -> Option<String> {
    let out = Command::new(program).arg("--version").stdin(Stdio::null()).output().ok()?;
    if !out.status.success() {
        return None;
    }
    String::from_utf8_lossy(&out.stdout).lines().next().map(|l| l.trim().to_string())
}

impl ToolchainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ToolchainError> {
        let cfg: ToolchainConfig = toml::from_str(text).map_err(|e| ToolchainError::Config(e.message().to_string()))?;
        if cfg.compilers.is_empty() {
            return Err(ToolchainError::Config("no compilers configured".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ToolchainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    /// gcc and clang from `PATH`, whichever respond to `--version`.
    pub fn detect() -> Self {
        let mut compilers = BTreeMap::new();
        for (id, c, cxx) in [("gcc", "gcc", "g++"), ("clang", "clang", "clang++")] {
            if let Some(version) = probe_version(c) {
                compilers.insert(
                    id.to_string(),
                    CompilerEntry {
                        c: c.into(),
                        cxx: cxx.into(),
                        version: Some(version),
                        default_flags: Vec::new(),
                        openmp_flags: default_openmp_flags(),
                    },
                );
            }
        }
        ToolchainConfig { compilers, preprocessor: Preprocessor::default() }
    }

    pub fn compiler(&self, id: &str) -> Result<&CompilerEntry, ToolchainError> {
        self.compilers.get(id).ok_or_else(|| ToolchainError::ToolNotFound(id.to_string()))
    }

    /// Configured version string, or the first line of `--version`.
    pub fn version_string(&self, id: &str) -> Option<String> {
        let entry = self.compilers.get(id)?;
        entry.version.clone().or_else(|| probe_version(&entry.c))
    }

    pub fn versions(&self) -> BTreeMap<String, String> {
        self.compilers
            .keys()
            .map(|id| (id.clone(), self.version_string(id).unwrap_or_else(|| "unknown".into())))
            .collect()
    }
}

/// `<work>/<bench_id>/<variant_tag>/{src,bin,logs}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantDir {
    root: PathBuf,
}

impl VariantDir {
    pub fn new(work: &Path, bench_id: &str, variant_tag: &str) -> Self {
        VariantDir { root: work.join(bench_id).join(variant_tag) }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        VariantDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn src(&self) -> PathBuf {
        self.root.join("src")
    }

    pub fn bin(&self) -> PathBuf {
        self.root.join("bin")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildOptions {
    pub openmp: bool,
    pub extra_flags: Vec<String>,
    /// Use this compiler instead of the manifest's `build.compiler_id`.
    pub compiler_override: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildStatus {
    Ok,
    CompileError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOutcome {
    pub status: BuildStatus,
    pub binary_path: Option<PathBuf>,
    pub command_line: String,
    pub stderr: String,
    pub elapsed_s: f64,
}

impl BuildOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == BuildStatus::Ok
    }
}

struct ProcOutput {
    status: Option<ExitStatus>,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    elapsed: Duration,
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

/// Runs `cmd` to completion or until `timeout`; `status` is `None` when
/// the child had to be killed.
fn run_process(cmd: &mut Command, stdin: Stdio, timeout: Duration) -> io::Result<ProcOutput> {
    cmd.stdin(stdin).stdout(Stdio::piped()).stderr(Stdio::piped());
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    let status = match child.wait_timeout(timeout)? {
        Some(status) => Some(status),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            None
        }
    };
    let elapsed = start.elapsed();
    Ok(ProcOutput {
        status,
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
        elapsed,
    })
}

fn shell_join(program: &str, args: &[String]) -> String {
    std::iter::once(program)
        .chain(args.iter().map(String::as_str))
        .map(|a| {
            if a.is_empty() || a.contains(|c: char| c.is_whitespace() || c == '\'' || c == '"') {
                format!("'{}'", a.replace('\'', "'\\''"))
            } else {
                a.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Compiles the translation units of `src_dir` into `variant/bin/<id>`.
pub fn compile(
    spec: &BenchmarkSpec,
    src_dir: &Path,
    toolchain: &ToolchainConfig,
    variant: &VariantDir,
    opts: &BuildOptions,
) -> Result<BuildOutcome, ToolchainError> {
    let compiler_id = opts.compiler_override.as_deref().unwrap_or(&spec.build.compiler_id);
    let entry = toolchain.compiler(compiler_id)?;
    let program = match spec.language {
        Language::C => &entry.c,
        Language::Cpp => &entry.cxx,
    };
    let bin_dir = variant.bin();
    let log_dir = variant.logs();
    fs::create_dir_all(&bin_dir).map_err(io_err(&bin_dir))?;
    fs::create_dir_all(&log_dir).map_err(io_err(&log_dir))?;
    let binary = bin_dir.join(&spec.id);
    let _ = fs::remove_file(&binary);

    let mut args: Vec<String> = entry.default_flags.clone();
    if opts.openmp {
        args.extend(entry.openmp_flags.iter().cloned());
    }
    for rel in spec.source_files.iter().filter(|p| is_translation_unit(p)) {
        args.push(src_dir.join(rel).to_string_lossy().into_owned());
    }
    for obj in &spec.build.extra_objects {
        args.push(spec.source_path(obj).to_string_lossy().into_owned());
    }
    args.extend(spec.build.flags.iter().cloned());
    args.extend(opts.extra_flags.iter().cloned());
    args.push("-o".into());
    args.push(binary.to_string_lossy().into_owned());
    let command_line = shell_join(program, &args);

    let mut cmd = Command::new(program);
    cmd.args(&args).current_dir(src_dir);
    let timeout = Duration::from_secs_f64(spec.build.timeout_s);
    let out = match run_process(&mut cmd, Stdio::null(), timeout) {
        Ok(out) => out,
        Err(e) if e.kind() == io::ErrorKind::NotFound || e.kind() == io::ErrorKind::PermissionDenied => {
            return Err(ToolchainError::ToolNotFound(compiler_id.to_string()));
        }
        Err(e) => return Err(io_err(program.as_str())(e)),
    };
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let log = format!("$ {command_line}\n{stderr}");
    let log_path = log_dir.join("build.log");
    fs::write(&log_path, &log).map_err(io_err(&log_path))?;

    let Some(status) = out.status else {
        return Err(ToolchainError::BuildTimeout(spec.build.timeout_s));
    };
    let ok = status.success() && binary.is_file();
    Ok(BuildOutcome {
        status: if ok { BuildStatus::Ok } else { BuildStatus::CompileError },
        binary_path: ok.then_some(binary),
        command_line,
        stderr,
        elapsed_s: out.elapsed.as_secs_f64(),
    })
}

/// How a child process failed to finish normally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitKind {
    Code(i32),
    Signal(i32),
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum RunError {
    #[error("process crashed ({status:?}): {stderr}")]
    Crash { status: ExitKind, stderr: String },
    #[error("process timed out after {after_s:.1} s")]
    Timeout { after_s: f64 },
    #[error("could not run process: {0}")]
    Launch(String),
}

mod lossy_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

/// Timed repetitions of one binary. `stdout` is from the first repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSample {
    pub wall_times_s: Vec<f64>,
    #[serde(with = "lossy_bytes")]
    pub stdout: Vec<u8>,
    #[serde(with = "lossy_bytes")]
    pub stderr: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_count: Option<u32>,
}

impl RunSample {
    pub fn mean(&self) -> Option<f64> {
        if self.wall_times_s.is_empty() {
            return None;
        }
        Some(self.wall_times_s.iter().sum::<f64>() / self.wall_times_s.len() as f64)
    }

    pub fn min(&self) -> Option<f64> {
        self.wall_times_s.iter().copied().reduce(f64::min)
    }

    /// Sample standard deviation; zero for a single repetition.
    pub fn stddev(&self) -> Option<f64> {
        let mean = self.mean()?;
        let n = self.wall_times_s.len();
        if n < 2 {
            return Some(0.0);
        }
        let var = self.wall_times_s.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    }
}

#[cfg(unix)]
fn exit_kind(status: ExitStatus) -> ExitKind {
    use std::os::unix::process::ExitStatusExt;
    match status.code() {
        Some(c) => ExitKind::Code(c),
        None => ExitKind::Signal(status.signal().unwrap_or(0)),
    }
}

#[cfg(not(unix))]
fn exit_kind(status: ExitStatus) -> ExitKind {
    ExitKind::Code(status.code().unwrap_or(-1))
}

fn excerpt(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let tail: Vec<char> = text.chars().rev().take(2000).collect();
    tail.into_iter().rev().collect()
}

/// Runs `binary` `run.repetitions` times in sequence, timing each process.
pub fn run_timed(binary: &Path, run: &crate::manifest::RunRecipe, thread_count: Option<u32>) -> Result<RunSample, RunError> {
    let _guard = TIMED_RUN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let timeout = Duration::from_secs_f64(run.timeout_s);
    let cwd = run.cwd.clone();
    let mut sample = RunSample { wall_times_s: Vec::new(), stdout: Vec::new(), stderr: Vec::new(), thread_count };

    for rep in 0..run.repetitions.max(1) {
        let mut cmd = Command::new(binary);
        cmd.args(&run.args).envs(&run.env);
        if let Some(n) = thread_count {
            cmd.env(OMP_NUM_THREADS, n.to_string());
        }
        if let Some(dir) = &cwd {
            cmd.current_dir(dir);
        }
        let stdin = match &run.stdin_file {
            Some(p) => {
                let path = cwd.as_ref().map(|d| d.join(p)).unwrap_or_else(|| p.clone());
                Stdio::from(File::open(&path).map_err(|e| RunError::Launch(format!("{}: {e}", path.display())))?)
            }
            None => Stdio::null(),
        };
        let out = run_process(&mut cmd, stdin, timeout).map_err(|e| RunError::Launch(format!("{}: {e}", binary.display())))?;
        let Some(status) = out.status else {
            return Err(RunError::Timeout { after_s: run.timeout_s });
        };
        if !status.success() {
            return Err(RunError::Crash { status: exit_kind(status), stderr: excerpt(&out.stderr) });
        }
        sample.wall_times_s.push(out.elapsed.as_secs_f64().max(f64::MIN_POSITIVE));
        if rep == 0 {
            sample.stdout = match &run.output_file {
                Some(p) => {
                    let path = cwd.as_ref().map(|d| d.join(p)).unwrap_or_else(|| p.clone());
                    fs::read(&path).map_err(|e| RunError::Crash {
                        status: ExitKind::Code(0),
                        stderr: format!("output file {}: {e}", path.display()),
                    })?
                }
                None => out.stdout,
            };
            sample.stderr = out.stderr;
        }
    }
    Ok(sample)
}

/// Baseline over candidate mean wall time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupStat {
    pub baseline_mean_s: f64,
    pub candidate_mean_s: f64,
    pub speedup: f64,
}

impl SpeedupStat {
    pub fn from_means(baseline_mean_s: f64, candidate_mean_s: f64) -> Option<Self> {
        let valid = |t: f64| t.is_finite() && t > 0.0;
        (valid(baseline_mean_s) && valid(candidate_mean_s)).then(|| SpeedupStat {
            baseline_mean_s,
            candidate_mean_s,
            speedup: baseline_mean_s / candidate_mean_s,
        })
    }
}

pub fn measure_speedup(baseline: &RunSample, candidate: &RunSample) -> Result<SpeedupStat, ToolchainError> {
    let b = baseline.mean().ok_or(ToolchainError::EmptySample)?;
    let c = candidate.mean().ok_or(ToolchainError::EmptySample)?;
    SpeedupStat::from_means(b, c).ok_or(ToolchainError::EmptySample)
}

/// One timed run per thread count, ascending. A failing count does not
/// stop the others.
pub fn thread_sweep(
    binary: &Path,
    run: &crate::manifest::RunRecipe,
    counts: &[u32],
) -> Result<BTreeMap<u32, Result<RunSample, RunError>>, ToolchainError> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(ToolchainError::InvalidThreadCounts);
    }
    let mut ordered = counts.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    Ok(ordered.into_iter().map(|n| (n, run_timed(binary, run, Some(n)))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(times: &[f64]) -> RunSample {
        RunSample { wall_times_s: times.to_vec(), stdout: Vec::new(), stderr: Vec::new(), thread_count: None }
    }

    #[test]
    fn speedup_matches_reported_figures() {
        let s = measure_speedup(&sample(&[25.0]), &sample(&[4.58])).unwrap();
        assert!((s.speedup - 25.0 / 4.58).abs() < 1e-12);
        assert_eq!(format!("{:.2}", s.speedup), "5.46");
        let s = measure_speedup(&sample(&[25.0]), &sample(&[3.04])).unwrap();
        assert_eq!(format!("{:.2}", s.speedup), "8.22");
    }

    #[test]
    fn identical_samples_give_exactly_one() {
        let s = sample(&[0.3, 0.31, 0.29]);
        assert_eq!(measure_speedup(&s, &s).unwrap().speedup, 1.0);
    }

    #[test]
    fn empty_sample_is_an_error() {
        assert!(matches!(measure_speedup(&sample(&[]), &sample(&[1.0])), Err(ToolchainError::EmptySample)));
    }

    #[test]
    fn sample_statistics() {
        let s = sample(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean(), Some(2.0));
        assert_eq!(s.min(), Some(1.0));
        assert_eq!(s.stddev(), Some(1.0));
    }

    #[test]
    fn sweep_rejects_bad_counts() {
        let run = crate::manifest::RunRecipe::default();
        assert!(thread_sweep(Path::new("/bin/true"), &run, &[]).is_err());
        assert!(thread_sweep(Path::new("/bin/true"), &run, &[4, 0]).is_err());
    }

    #[test]
    fn config_parses() {
        let cfg = ToolchainConfig::from_toml_str(
            "[compilers.gcc]\nc = \"gcc\"\ncxx = \"g++\"\nversion = \"gcc 14.2.0\"\n",
        )
        .unwrap();
        assert_eq!(cfg.compiler("gcc").unwrap().openmp_flags, vec!["-fopenmp".to_string()]);
        assert_eq!(cfg.version_string("gcc").as_deref(), Some("gcc 14.2.0"));
        assert!(matches!(cfg.compiler("icc"), Err(ToolchainError::ToolNotFound(_))));
        assert!(ToolchainConfig::from_toml_str("compilers = {}").is_err());
    }
}
