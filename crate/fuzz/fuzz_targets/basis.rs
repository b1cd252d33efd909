#![no_main]

use libfuzzer_sys::fuzz_target;
use sparsegrad::calib::TransitionBasis;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = TransitionBasis::from_bytes(data) {
        let again = TransitionBasis::from_bytes(&b.to_bytes()).expect("re-encoded basis parses");
        assert_eq!(again.checksum(), b.checksum());
    }
});
