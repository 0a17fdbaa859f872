#![no_main]

use libfuzzer_sys::fuzz_target;
use pame_core::losses::{parse_dataset_csv, write_dataset_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_dataset_csv(data, 0) {
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).expect("write to memory");
        assert_eq!(parse_dataset_csv(buf.as_slice(), 0).expect("round trip"), ds);
    }
});
