#![no_main]

use libfuzzer_sys::fuzz_target;

// Input is the manifest, a NUL byte, then the item lines.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (manifest, items) = text.split_once('\0').unwrap_or((text, ""));
    let _ = coderag::kb::KnowledgeBase::from_persisted(manifest, items);
});
