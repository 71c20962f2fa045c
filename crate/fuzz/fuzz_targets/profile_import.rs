#![no_main]

use libfuzzer_sys::fuzz_target;
use perfagent_core::profile::import_profile;

fuzz_target!(|data: &[u8]| {
    if let Ok(tree) = import_profile(data) {
        let again = import_profile(tree.to_json().as_bytes()).expect("exported profile imports");
        assert_eq!(again.node_count(), tree.node_count());
    }
});
