#![no_main]

use libfuzzer_sys::fuzz_target;
use pame_core::engine::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    // JSON text, then a NUL, then one override per line.
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (json, rest) = text.split_once('\0').unwrap_or((text, ""));
    let overrides: Vec<String> = rest.lines().map(str::to_owned).collect();
    let _ = RunConfig::from_json_with_overrides(json, &overrides);
});
