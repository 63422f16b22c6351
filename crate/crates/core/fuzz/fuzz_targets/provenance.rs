#![no_main]

use libfuzzer_sys::fuzz_target;
use sporadic::io::{format_provenance, parse_provenance};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(blocks) = parse_provenance(text) {
        assert_eq!(parse_provenance(&format_provenance(&blocks)).unwrap(), blocks);
    }
});
