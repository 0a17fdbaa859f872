#![no_main]

use libfuzzer_sys::fuzz_target;
use pame_core::pme::SparseMessage;

fuzz_target!(|data: &[u8]| {
    // First byte picks the model dimension.
    let Some((&dim, rest)) = data.split_first() else { return };
    if let Ok(text) = std::str::from_utf8(rest) {
        if let Ok(msg) = SparseMessage::from_json(text, dim as usize) {
            assert_eq!(SparseMessage::from_json(&msg.to_json(), dim as usize).expect("round trip"), msg);
        }
    }
});
