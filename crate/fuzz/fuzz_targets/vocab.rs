#![no_main]

use absorbkit::data::Vocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = Vocab::from_json(data) {
        assert_eq!(Vocab::from_json(v.to_json().as_bytes()).unwrap(), v);
    }
});
