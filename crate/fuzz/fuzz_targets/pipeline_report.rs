#![no_main]

use backtrans::pipelines::PipelineReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = PipelineReport::from_json(text) {
        let _ = report.validate(100, 100);
        let _ = report.without_timing().to_json();
    }
});
