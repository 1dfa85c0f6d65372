#![no_main]

use backtrans::qe::parse_external_scores;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&expected, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(scores) = parse_external_scores(text, expected as usize) {
        assert_eq!(scores.len(), expected as usize);
    }
});
