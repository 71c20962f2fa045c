#![allow(dead_code)]

pub mod cgen;

use std::fs;
use std::path::{Path, PathBuf};

use perfagent_core::experiments::{Harness, HarnessOptions};
use perfagent_core::llm::PromptEnv;
use perfagent_core::manifest::{load_manifest, BenchmarkSpec};
use perfagent_core::toolchain::ToolchainConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn spec(id: &str) -> BenchmarkSpec {
    load_manifest(&fixtures().join("benchmarks"))
        .expect("fixture manifests load")
        .into_iter()
        .find(|s| s.id == id)
        .unwrap_or_else(|| panic!("no fixture benchmark `{id}`"))
}

pub fn response(name: &str) -> String {
    fs::read_to_string(fixtures().join("responses").join(name)).expect("fixture response exists")
}

pub fn toolchain() -> ToolchainConfig {
    let tc = ToolchainConfig::detect();
    assert!(tc.compilers.contains_key("gcc"), "gcc is required for the build tests");
    tc
}

pub fn env() -> PromptEnv {
    PromptEnv { os: "Linux system".into(), cpu: "x86_64 CPU".into(), compilers: "gcc".into() }
}

pub fn harness<'a>(tc: &'a ToolchainConfig, work: &Path) -> Harness<'a> {
    let options = HarnessOptions { timestamp: Some("2025-01-01T00:00:00Z".into()), ..Default::default() };
    Harness::new(tc, work, env(), options)
}

/// Source of the sleeper fixture with its pause changed to `ms`.
pub fn sleeper_code(ms: u32) -> String {
    let src = fs::read_to_string(fixtures().join("benchmarks/sleeper/sleeper.c")).unwrap();
    src.replace("pause_ms(200);", &format!("pause_ms({ms});"))
}

pub fn fenced(code: &str, explanation: &str) -> String {
    format!("```c\n{code}```\n\n{explanation}\n")
}

/// A sleeper reply that pauses `ms` milliseconds.
pub fn sleeper_reply(ms: u32) -> String {
    fenced(&sleeper_code(ms), &format!("Reduced the pause to {ms} ms by hoisting the invariant setup."))
}

/// A sleeper reply that is fast but prints a different result.
pub fn sleeper_wrong_output(ms: u32) -> String {
    let code = sleeper_code(ms).replace("acc += i % 7;", "acc += i % 5;");
    fenced(&code, "Simplified the arithmetic in the accumulation.")
}

/// A sleeper reply that does not compile.
pub fn sleeper_syntax_error() -> String {
    let code = sleeper_code(50).replace("long acc = 0;", "long acc = 0");
    fenced(&code, "Unrolled the loop.")
}
