#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = clnet::trainer::Checkpoint::from_bytes(data) {
        let _ = ckpt.network();
    }
});
