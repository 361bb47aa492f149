//! The checked-in fuzz corpus seeds are valid inputs, so fuzzing starts from
//! the accepted side of every parser.
use std::fs;
use std::path::{Path, PathBuf};

use clnet::config::TrainConfig;
use clnet::data::{decode_scribble, encode_scribble, parse_manifest};
use clnet::trainer::Checkpoint;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "{}", dir.display());
    out
}

#[test]
fn scribble_seeds_decode() {
    for (p, b) in seeds("decode_scribble") {
        let s = decode_scribble(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(decode_scribble(&encode_scribble(&s).unwrap()).unwrap(), s);
    }
}

#[test]
fn manifest_seeds_parse() {
    for (p, b) in seeds("parse_manifest") {
        let text = String::from_utf8(b).unwrap();
        let records = parse_manifest(&text, Path::new("base")).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(!records.is_empty());
    }
}

#[test]
fn config_seeds_parse() {
    for (p, b) in seeds("config_toml") {
        let text = String::from_utf8(b).unwrap();
        let cfg = TrainConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_seeds_load() {
    for (p, b) in seeds("checkpoint_bytes") {
        let ck = Checkpoint::from_bytes(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        ck.network().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
