#![no_main]

use absorbkit::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = RunConfig::from_json(data) {
        // anything accepted must survive its own echo (pretty output of a
        // near-limit file can outgrow the size cap)
        let json = cfg.to_json();
        if json.len() <= 1 << 20 {
            assert_eq!(RunConfig::from_json(json.as_bytes()).unwrap(), cfg);
        }
    }
});
