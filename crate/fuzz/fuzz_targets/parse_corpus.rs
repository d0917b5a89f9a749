#![no_main]

use libfuzzer_sys::fuzz_target;
use memir_core::encoders::parse_corpus;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse_corpus(text) {
        // Whatever parses must survive a write/read cycle unchanged.
        assert_eq!(parse_corpus(&c.to_jsonl()).unwrap(), c);
    }
});
