#![no_main]

use libfuzzer_sys::fuzz_target;
use sporadic::io::{format_supports, parse_supports};
use sporadic::oracle::SupportEstimate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sups) = parse_supports(text) {
        assert_eq!(parse_supports(&format_supports(&sups)).unwrap(), sups);
        let k = sups.iter().flatten().max().map_or(1, |&x| x.saturating_add(1));
        if k < 1 << 16 {
            let _ = SupportEstimate::from_samples(k, sups);
        }
    }
});
