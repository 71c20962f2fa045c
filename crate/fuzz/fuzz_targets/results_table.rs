#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::experiments::ResultsTable;

fuzz_target!(|text: &str| {
    if let Ok(t) = ResultsTable::from_json(text) {
        let again = ResultsTable::from_json(&t.to_json()).expect("written table parses");
        assert_eq!(again.rows.len(), t.rows.len());
    }
});
