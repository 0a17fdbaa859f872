#![no_main]

use libfuzzer_sys::fuzz_target;
use pame_core::losses::DataManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = DataManifest::from_json(text);
    }
});
