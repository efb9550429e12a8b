#![no_main]
use gues_cli::manifest::{parse_manifest, render_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_manifest(data) {
        let bytes = render_manifest(&rows).expect("valid rows render");
        assert_eq!(parse_manifest(&bytes).expect("rendered manifest parses"), rows);
    }
});
