#![no_main]

use absorbkit::gating::{decode_mask_file, encode_mask_file};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, mask)) = decode_mask_file(data) {
        mask.validate().unwrap();
        let again = encode_mask_file(&mask, header.seed);
        assert_eq!(decode_mask_file(&again).unwrap(), (header, mask));
    }
});
