#![no_main]

use backtrans::subword::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&cap, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let Ok(vocab) = Vocabulary::parse(text, cap as usize) else { return };
    assert!(vocab.len() <= vocab.max_size());
    for (i, (tok, _)) in vocab.entries().iter().enumerate() {
        assert_eq!(vocab.token(vocab.id(tok)), tok.as_str(), "entry {i}");
    }
    let _ = vocab.id("not-in-any-vocabulary");
});
