#![no_main]

use libfuzzer_sys::fuzz_target;
use memir_core::encoders::tokenize;

fuzz_target!(|data: (u16, &str)| {
    let (vocab, text) = data;
    let vocab = vocab as usize;
    let t = tokenize(text, vocab);
    assert!(!t.ids.is_empty());
    assert!(t.ids.iter().all(|&i| (i as usize) < vocab.max(2)));
});
