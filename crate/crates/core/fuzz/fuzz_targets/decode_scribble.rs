#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = clnet::data::decode_scribble(data) {
        let bytes = clnet::data::encode_scribble(&s).expect("decoded scribble re-encodes");
        assert_eq!(clnet::data::decode_scribble(&bytes).expect("round trip"), s);
    }
});
