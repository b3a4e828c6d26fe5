#![no_main]
use libfuzzer_sys::fuzz_target;
use seqcorr::harness::experiment::RunRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(records) = RunRecord::from_json(data) else { return };
    let text = RunRecord::to_json(&records).unwrap();
    assert_eq!(RunRecord::from_json(text.as_bytes()).unwrap(), records);
});
