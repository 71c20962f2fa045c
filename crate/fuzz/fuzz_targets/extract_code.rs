#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::llm::extract_code;

fuzz_target!(|text: &str| {
    let r = extract_code(text);
    if let Some(code) = &r.code {
        assert!(text.contains(code.as_str()));
        assert!(!r.truncated);
    }
});
