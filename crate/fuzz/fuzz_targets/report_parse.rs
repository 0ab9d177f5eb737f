#![no_main]

use gain_core::eval::RunReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(r) = RunReport::from_json(s) {
            let _ = r.to_markdown(None);
        }
    }
});
