#![no_main]

use absorbkit::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

// manifest, a NUL byte, then the tensor blob
fuzz_target!(|data: &[u8]| {
    let cut = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let blob = data.get(cut + 1..).unwrap_or(&[]);
    if let Ok(ckpt) = Checkpoint::from_bytes(&data[..cut], blob) {
        let (m, b) = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&m, &b).unwrap().bit_eq(&ckpt));
    }
});
