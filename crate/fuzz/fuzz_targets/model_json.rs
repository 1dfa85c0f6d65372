#![no_main]

use backtrans::corpus::Sentence;
use backtrans::model::TranslationModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = TranslationModel::from_json(text) else { return };

    // A model that loads must also decode and score without panicking.
    let input = Sentence::from_tokens(["w1", "w2", "<unk>"]);
    if let Ok(out) = model.translate(std::slice::from_ref(&input)) {
        let _ = model.score_pair(&input, &out[0].0);
    }
    let _ = model.score_pair(&input, &Sentence::empty());
});
