#![no_main]

use kdfm::experiment::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::decode_header(data);
    if let Ok(ck) = Checkpoint::decode(data) {
        // Metadata JSON may be re-serialized differently, so compare a
        // second round trip instead of the raw input.
        let once = ck.encode();
        assert_eq!(Checkpoint::decode(&once).unwrap().encode(), once);
    }
});
