#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::manifest::BenchmarkSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = BenchmarkSpec::parse(text) {
            let again = BenchmarkSpec::parse(&spec.to_toml_string()).expect("serialized manifest parses");
            assert_eq!(again, spec);
        }
    }
});
