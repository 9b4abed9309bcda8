#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else { return };
    let _ = coderag::lexer::tokenize(src);
    let _ = coderag::lexer::logical_lines(src);
    let _ = coderag::eval::extract_identifiers(src);
    let _ = coderag::sparse::tokenize(src);
});
