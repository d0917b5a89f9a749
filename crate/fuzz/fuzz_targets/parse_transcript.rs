#![no_main]

use libfuzzer_sys::fuzz_target;
use memir_service::store::parse_transcript;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = parse_transcript(text) {
        assert!(!t.texts.is_empty());
    }
});
