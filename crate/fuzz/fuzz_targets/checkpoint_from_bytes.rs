#![no_main]

use libfuzzer_sys::fuzz_target;
use memir_core::training::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(again.model.params, c.model.params);
    }
});
