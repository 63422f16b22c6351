#![no_main]

use libfuzzer_sys::fuzz_target;
use sporadic::harness::RunConfig;
use sporadic::io::ConfigFormat;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for format in [ConfigFormat::Json, ConfigFormat::Toml] {
        if let Ok(cfg) = RunConfig::parse(text, format) {
            if let Some(spec) = &cfg.experiment {
                let _ = spec.validate();
            }
            if let Some(p) = &cfg.problem {
                let _ = cfg.intersect.resolve(p.k, p.s);
            }
        }
    }
});
