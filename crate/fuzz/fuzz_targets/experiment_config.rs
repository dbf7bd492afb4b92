#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = incidental::io::parse_experiment_file(text) {
            assert!(file.experiment.validate().is_ok());
        }
    }
});
