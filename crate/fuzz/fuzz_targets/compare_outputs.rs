#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::manifest::{ValidationMode, ValidationPolicy};
use perfagent_core::verify::compare_outputs;

// Input: reference, a NUL byte, then the candidate output.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (reference, candidate) = (&data[..split], &data[(split + 1).min(data.len())..]);
    for mode in [ValidationMode::ExactBytes, ValidationMode::NumericTokens] {
        let policy = ValidationPolicy { mode, abs_tol: 1e-6, rel_tol: 1e-6, ignore_patterns: vec![] };
        assert!(compare_outputs(reference, reference, &policy).matched);
        let _ = compare_outputs(reference, candidate, &policy);
    }
});
