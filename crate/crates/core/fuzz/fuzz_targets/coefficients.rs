#![no_main]

use libfuzzer_sys::fuzz_target;
use sporadic::io::parse_coefficients;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(x) = parse_coefficients(text) {
        let dense = x.to_dense();
        assert_eq!(dense.ncols(), x.n());
        assert!(dense.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0));
    }
});
