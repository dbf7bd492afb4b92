#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = incidental::io::read_csv(data) {
        assert_eq!(table.data.x().ncols(), table.covariates.len());
        assert!(table.data.y().iter().all(|v| v.is_finite()));
    }
});
