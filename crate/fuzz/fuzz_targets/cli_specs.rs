#![no_main]

use absorbkit::gating::MaskMode;
use absorbkit::model::TrainSelector;
use libfuzzer_sys::fuzz_target;

// `--mode` names and train selector strings
fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let _ = s.parse::<TrainSelector>();
    let (name, k) = s.split_once(':').unwrap_or((s, ""));
    let _ = MaskMode::parse(name, k.parse().ok(), 0);
});
