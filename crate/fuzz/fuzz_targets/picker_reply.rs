#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else { return };
    let Ok(reply) = std::str::from_utf8(rest) else { return };
    let window = usize::from(n % 8) + 1;
    if let Ok(k) = coderag::rerank::parse_picker_reply(reply, window) {
        assert!(k < window);
    }
});
