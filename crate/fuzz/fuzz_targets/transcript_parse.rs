#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::llm::Transcript;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Transcript::from_json(data) {
        let again = Transcript::from_json(t.to_json().as_bytes()).expect("written transcript parses");
        assert_eq!(again.entries.len(), t.entries.len());
    }
});
