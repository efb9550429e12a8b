#![no_main]
use gues_core::pnm::{decode, encode_pgm, encode_ppm, Pnm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that decodes must re-encode and decode to the same raster
    if let Ok(img) = decode(data) {
        let again = match &img {
            Pnm::Rgb(rgb) => decode(&encode_ppm(rgb)),
            Pnm::Gray(gray) => decode(&encode_pgm(gray)),
        };
        assert!(again.is_ok());
    }
});
