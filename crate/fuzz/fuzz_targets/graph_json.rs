#![no_main]

use libfuzzer_sys::fuzz_target;
use pame_core::topology::{communication_matrix, Graph};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = Graph::from_json(text) {
            // Keep the eigen solve cheap.
            if g.node_count() <= 64 {
                let _ = communication_matrix(&g);
            }
        }
    }
});
