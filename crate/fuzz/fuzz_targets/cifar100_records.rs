#![no_main]

use kdfm::data::{encode_cifar_records, parse_cifar_records, CifarVariant};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = parse_cifar_records(data, CifarVariant::Cifar100) {
        assert_eq!(encode_cifar_records(&raw, CifarVariant::Cifar100).unwrap(), data);
    }
});
