#![no_main]

use gain_core::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = TrainConfig::from_json(data) {
        assert!(c.validate().is_ok());
        assert_eq!(TrainConfig::from_json(c.to_json().as_bytes()).unwrap(), c);
    }
});
