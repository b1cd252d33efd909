#![no_main]

use libfuzzer_sys::fuzz_target;
use sparsegrad::sparse::SparseCoo;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = SparseCoo::from_bytes(data) {
        assert!(m.entries().iter().all(|e| (e.row as usize) < m.rows() && (e.col as usize) < m.cols()));
        assert_eq!(SparseCoo::from_bytes(&m.to_bytes()).expect("re-encoded matrix parses"), m);
    }
});
