#![no_main]

use backtrans::pipelines::Strategy;
use backtrans::qe::Fraction;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = text.parse::<Fraction>() {
        let back: Fraction = f.to_string().parse().expect("displayed fraction parses");
        assert_eq!(back, f);
    }
    if let Ok(s) = text.parse::<Strategy>() {
        assert_eq!(s.to_string(), text);
    }
});
