#![no_main]
use libfuzzer_sys::fuzz_target;
use seqcorr::harness::pgm::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    let Ok(img) = decode_pgm(data) else { return };
    assert!(img.values().iter().all(|v| (0.0..=1.0).contains(v)));
    let again = decode_pgm(&encode_pgm(&img)).unwrap();
    assert_eq!(again.shape(), img.shape());
    for (a, b) in img.values().iter().zip(again.values()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
    }
});
