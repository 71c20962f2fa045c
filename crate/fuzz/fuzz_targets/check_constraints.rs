#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::llm::{check_constraints, Experiment};

// Input: original, a NUL byte, then the candidate source.
fuzz_target!(|text: &str| {
    let Some((original, candidate)) = text.split_once('\0') else { return };
    for exp in [Experiment::Ex1, Experiment::Ex2, Experiment::Ex3] {
        if let Ok(flags) = check_constraints(original, original, exp) {
            if exp != Experiment::Ex3 {
                assert!(flags.is_empty());
            }
        }
        let _ = check_constraints(original, candidate, exp);
    }
});
