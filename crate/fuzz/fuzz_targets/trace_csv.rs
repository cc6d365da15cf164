#![no_main]

use fxdist::sim::Trace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Trace::read_csv(data) {
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let again = Trace::read_csv(out.as_slice()).unwrap();
        assert_eq!(again.rows, t.rows);
    }
});
