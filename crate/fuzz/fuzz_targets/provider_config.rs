#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::llm::ProviderConfig;

fuzz_target!(|text: &str| {
    let _ = ProviderConfig::from_toml_str(text);
});
