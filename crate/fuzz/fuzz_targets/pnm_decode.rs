#![no_main]

use gain_core::data::pnm::Raster;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = Raster::decode(data) {
        assert_eq!(r.pixels.len(), r.width * r.height * r.channels);
        assert_eq!(Raster::decode(&r.encode()).unwrap(), r);
    }
});
