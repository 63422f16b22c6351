#![no_main]

use libfuzzer_sys::fuzz_target;
use sporadic::io::{parse_config, ConfigFormat};
use sporadic::ProblemConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for format in [ConfigFormat::Json, ConfigFormat::Toml] {
        if let Ok(cfg) = parse_config::<ProblemConfig>(text, format) {
            // Deserialization validates, so accepted configs are usable.
            assert!(cfg.validate().is_ok());
        }
    }
});
