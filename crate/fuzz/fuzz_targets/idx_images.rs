#![no_main]

use kdfm::data::{encode_idx_images, parse_idx_images};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = parse_idx_images(data) {
        assert_eq!(encode_idx_images(&images), data);
    }
});
