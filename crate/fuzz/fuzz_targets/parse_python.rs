#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    if let Ok(tree) = coderag::kb::parse_file(src, "f.py") {
        for item in coderag::kb::extract_items(&tree, src, "f.py") {
            assert!(item.line_span.start <= item.line_span.end);
        }
    }
});
