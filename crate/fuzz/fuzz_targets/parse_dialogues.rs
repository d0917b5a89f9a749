#![no_main]

use libfuzzer_sys::fuzz_target;
use memir_core::evaluation::dialogue::dialogues_to_jsonl;
use memir_core::evaluation::parse_dialogues;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = parse_dialogues(text) {
        assert_eq!(parse_dialogues(&dialogues_to_jsonl(&d)).unwrap(), d);
    }
});
