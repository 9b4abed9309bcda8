#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(index) = coderag::sparse::SparseIndex::from_json(text) {
        let _ = index.retrieve("parse config path", 10);
    }
});
