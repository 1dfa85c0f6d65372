#![no_main]

use backtrans::corpus::{Sentence, TokenizeOptions};
use backtrans::subword::undo_bpe;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for lowercase in [false, true] {
        for line in text.lines() {
            let s = Sentence::parse(line, TokenizeOptions { lowercase });
            assert!(s.tokens().iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
            let _ = undo_bpe(&s);
        }
    }
});
