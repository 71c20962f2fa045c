#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::patch::{extract_function, list_functions, replace_function};

// Input: function name, a NUL byte, then the source text.
fuzz_target!(|text: &str| {
    let Some((name, source)) = text.split_once('\0') else { return };
    let Ok(spans) = list_functions(source) else { return };
    for s in &spans {
        assert!(s.byte_start < s.byte_end && s.byte_end <= source.len());
    }
    if let Ok(def) = extract_function(source, name) {
        let same = replace_function(source, name, &def).expect("own definition replaces");
        assert_eq!(same, source);
    }
});
