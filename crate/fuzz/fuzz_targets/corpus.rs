#![no_main]

use absorbkit::data::{Corpus, TokenizerKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for kind in [TokenizerKind::Byte, TokenizerKind::Word] {
        if let Ok(c) = Corpus::from_bytes(data, kind, 0.25) {
            assert!(c.ids.iter().all(|&i| i < c.vocab_size));
            assert_eq!(c.train().len() + c.valid().len(), c.ids.len());
        }
    }
});
