#![no_main]

use backtrans::corpus::{Sentence, SyntheticOracle, TokenizeOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(oracle) = SyntheticOracle::parse(text) else { return };
    let again = SyntheticOracle::parse(&oracle.to_text()).expect("written oracle parses");
    assert_eq!(again.source_words(), oracle.source_words());

    let words = oracle.source_words().iter().take(8).cloned().collect::<Vec<_>>().join(" ");
    let sentence = Sentence::parse(&format!("{words} unseen"), TokenizeOptions::default());
    let _ = oracle.translate_target(&oracle.translate_source(&sentence));
});
