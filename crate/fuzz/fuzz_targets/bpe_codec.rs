#![no_main]

use backtrans::corpus::{Sentence, TokenizeOptions};
use backtrans::subword::{apply_bpe, undo_bpe, BpeCodec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(codec) = BpeCodec::parse(text) else { return };
    let again = BpeCodec::parse(&codec.to_text()).expect("written codec parses");
    assert_eq!(again.merges(), codec.merges());

    // Segmenting and joining must give the words back for any codec.
    let sentence = Sentence::parse("lower newest low wider", TokenizeOptions::default());
    let segmented = apply_bpe(&codec, &sentence);
    assert_eq!(undo_bpe(&segmented).tokens(), sentence.tokens());
});
