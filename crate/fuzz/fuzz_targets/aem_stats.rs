#![no_main]
use libfuzzer_sys::fuzz_target;
use seqcorr::aem::AemStats;

fuzz_target!(|data: &[u8]| {
    let Ok(stats) = AemStats::from_bytes(data) else { return };
    let bytes = stats.to_bytes();
    let again = AemStats::from_bytes(&bytes).unwrap();
    assert_eq!(again.to_bytes(), bytes);
    let _ = stats.whiten(&stats.mu);
});
