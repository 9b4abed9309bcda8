#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = coderag::dense::DenseIndex::from_bytes(data) {
        let bytes = index.to_bytes();
        let again = coderag::dense::DenseIndex::from_bytes(&bytes).expect("re-encoded index decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
