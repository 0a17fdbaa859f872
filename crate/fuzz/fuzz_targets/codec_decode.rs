#![no_main]

use libfuzzer_sys::fuzz_target;
use pame_core::codec;

fuzz_target!(|data: &[u8]| {
    // Whatever decodes must encode back to the same bytes.
    if let Ok(msg) = codec::decode(data) {
        let bytes = codec::encode(&msg).expect("decoded message re-encodes");
        assert_eq!(codec::decode(&bytes).expect("round trip"), msg);
    }
});
