#![no_main]

use gain_core::trainer::RunLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = RunLog::from_jsonl(s);
    }
});
