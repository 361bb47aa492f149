#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = clnet::config::TrainConfig::from_toml_str(text) {
        let again = cfg.to_toml_string().expect("valid config serialises");
        assert_eq!(clnet::config::TrainConfig::from_toml_str(&again).expect("round trip"), cfg);
    }
});
