use std::fmt;
use std::fs;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::manifest::{BenchmarkSpec, Language};
use crate::toolchain::ToolchainConfig;

/// System prompt shared by every experiment; `{os}`, `{cpu}` and
/// `{compilers}` are filled from [`PromptEnv`].
pub const SYSTEM_TEMPLATE: &str = "You are a code generation/optimization assistant. Given a prompt your output \
must only be a compilable source code. The computation environment is a {os} and a single {cpu}. The C/C++ \
language compilers available are: {compilers}";

const EX1_INSTRUCTION: &str = "Provide the C/C++ code with a single serial optimization without removing any of \
the existing functions or header files and without adding any new functions or print statements.";

const EX2_INSTRUCTION: &str = "Propose an additional serial optimization that can be applied without removing any \
of the existing functions or header files and without adding any new functions or print statements.";

const EX3_INSTRUCTION: &str = "Based on the original code, provide optimized parallel C/C++ code without removing \
any of the existing functions or header files and without adding any new functions or print statements.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "EX1")]
    Ex1,
    #[serde(rename = "EX2")]
    Ex2,
    #[serde(rename = "EX3")]
    Ex3,
    Agent,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Ex1 => "EX1",
            Experiment::Ex2 => "EX2",
            Experiment::Ex3 => "EX3",
            Experiment::Agent => "Agent",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "EX1" => Ok(Experiment::Ex1),
            "EX2" => Ok(Experiment::Ex2),
            "EX3" => Ok(Experiment::Ex3),
            "AGENT" => Ok(Experiment::Agent),
            _ => Err(LlmError::UnknownExperiment(s.to_string())),
        }
    }
}

/// Execution environment described to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnv {
    pub os: String,
    pub cpu: String,
    pub compilers: String,
}

impl PromptEnv {
    /// Describes the current host and the configured compilers.
    pub fn detect(toolchain: &ToolchainConfig) -> Self {
        let os = fs::read_to_string("/etc/os-release")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find_map(|l| l.strip_prefix("PRETTY_NAME=").map(|v| v.trim_matches('"').to_string()))
            })
            .map(|name| format!("{} system ({name})", std::env::consts::OS))
            .unwrap_or_else(|| format!("{} system", std::env::consts::OS));
        let cpu = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| format!("{} CPU", v.trim()))
            })
            .unwrap_or_else(|| format!("{} CPU", std::env::consts::ARCH));
        let compilers = toolchain.versions().into_values().collect::<Vec<_>>().join(" and ");
        PromptEnv { os, cpu, compilers }
    }

    pub fn system_text(&self) -> String {
        SYSTEM_TEMPLATE
            .replace("{os}", &self.os)
            .replace("{cpu}", &self.cpu)
            .replace("{compilers}", &self.compilers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub experiment: Experiment,
    pub attached_code: String,
}

pub(crate) fn fence_tag(language: Language) -> &'static str {
    match language {
        Language::C => "c",
        Language::Cpp => "cpp",
    }
}

/// Builds the system and user prompts for EX1, EX2 or EX3 around `code`.
pub fn render_prompt(
    experiment: Experiment,
    spec: &BenchmarkSpec,
    code: &str,
    env: &PromptEnv,
) -> Result<PromptBundle, LlmError> {
    if code.trim().is_empty() {
        return Err(LlmError::EmptyCode);
    }
    let instruction = match experiment {
        Experiment::Ex1 => EX1_INSTRUCTION,
        Experiment::Ex2 => EX2_INSTRUCTION,
        Experiment::Ex3 => EX3_INSTRUCTION,
        Experiment::Agent => return Err(LlmError::UnknownExperiment(experiment.to_string())),
    };
    let user_text = format!("{instruction}\n\n```{}\n{code}\n```\n", fence_tag(spec.language));
    Ok(PromptBundle { system_text: env.system_text(), user_text, experiment, attached_code: code.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> PromptEnv {
        PromptEnv {
            os: "Linux system (Rocky Linux 8.5 Green Obsidian)".into(),
            cpu: "AMD EPYC 7543 32-Core CPU".into(),
            compilers: "GCC/G++ v14.2.0 and CLANG/CLANG++ v19.1.5".into(),
        }
    }

    fn spec() -> BenchmarkSpec {
        BenchmarkSpec::parse(
            "id = \"m\"\nmotif = \"DenseLinearAlgebra\"\nlevel = 1\nlanguage = \"C\"\nsources = [\"m.c\"]\n[build]\ncompiler_id = \"gcc\"\n",
        )
        .unwrap()
    }

    #[test]
    fn system_text_substitutes_environment() {
        let b = render_prompt(Experiment::Ex1, &spec(), "int main(){}", &env()).unwrap();
        assert_eq!(
            b.system_text,
            "You are a code generation/optimization assistant. Given a prompt your output must only be a compilable \
             source code. The computation environment is a Linux system (Rocky Linux 8.5 Green Obsidian) and a single \
             AMD EPYC 7543 32-Core CPU. The C/C++ language compilers available are: GCC/G++ v14.2.0 and CLANG/CLANG++ \
             v19.1.5"
        );
    }

    #[test]
    fn user_texts_follow_templates() {
        let code = "int main(void) { return 0; }";
        let ex1 = render_prompt(Experiment::Ex1, &spec(), code, &env()).unwrap();
        assert!(ex1.user_text.starts_with("Provide the C/C++ code with a single serial optimization"));
        let ex2 = render_prompt(Experiment::Ex2, &spec(), code, &env()).unwrap();
        assert!(ex2.user_text.contains("Propose an additional serial optimization"));
        let ex3 = render_prompt(Experiment::Ex3, &spec(), code, &env()).unwrap();
        assert!(ex3.user_text.contains("provide optimized parallel C/C++ code"));
        for b in [&ex1, &ex2, &ex3] {
            assert_eq!(b.user_text.matches(code).count(), 1);
        }
    }

    #[test]
    fn rejects_empty_code_and_agent() {
        assert_eq!(render_prompt(Experiment::Ex1, &spec(), "  \n", &env()), Err(LlmError::EmptyCode));
        assert!(matches!(render_prompt(Experiment::Agent, &spec(), "x", &env()), Err(LlmError::UnknownExperiment(_))));
        assert!("ex4".parse::<Experiment>().is_err());
        assert_eq!("ex3".parse::<Experiment>(), Ok(Experiment::Ex3));
    }

    #[test]
    fn rendering_is_pure() {
        let a = render_prompt(Experiment::Ex3, &spec(), "void f(){}", &env()).unwrap();
        let b = render_prompt(Experiment::Ex3, &spec(), "void f(){}", &env()).unwrap();
        assert_eq!(a, b);
    }
}
