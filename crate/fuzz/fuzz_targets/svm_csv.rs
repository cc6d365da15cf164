#![no_main]

use fxdist::objective::SvmDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = SvmDataset::read_csv(data) {
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let again = SvmDataset::read_csv(out.as_slice()).unwrap();
        assert_eq!(again.n_agents, ds.n_agents);
    }
});
