//! Benchmark harness for evaluating language-model code optimizers on
//! C/C++ HPC kernels, plus a profile-guided optimization agent.

pub mod agent;
pub mod eval;
pub mod experiments;
pub mod llm;
pub mod manifest;
pub mod patch;
pub mod profile;
pub mod toolchain;
pub mod verify;
