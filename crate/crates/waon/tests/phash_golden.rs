//! pHash against golden hashes produced by the reference Python
//! implementation (see `fixtures/phash/gen_golden.py`).

use std::path::Path;

use waon::images::{decode, encode_png};
use waon_core::phash;

fn golden() -> Vec<(String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/phash");
    std::fs::read_to_string(dir.join("golden.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (name, hex) = l.split_once(' ').unwrap();
            (name.to_string(), hex.to_string())
        })
        .collect()
}

fn load(name: &str) -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("tests/fixtures/phash/{name}.png"))).unwrap()
}

#[test]
fn matches_reference_hashes() {
    let g = golden();
    assert_eq!(g.len(), 10);
    let mut mismatches = vec![];
    for (name, hex) in &g {
        let img = decode(&load(name)).unwrap();
        let got = phash(&img).to_string();
        if &got != hex {
            mismatches.push(format!("{name}: got {got}, want {hex}"));
        }
    }
    assert!(mismatches.is_empty(), "{mismatches:#?}");
}

#[test]
fn lossless_reencode_is_invariant() {
    for (name, _) in golden() {
        let img = decode(&load(&name)).unwrap();
        let again = decode(&encode_png(&img)).unwrap();
        assert_eq!(phash(&img), phash(&again), "{name}");
    }
}
