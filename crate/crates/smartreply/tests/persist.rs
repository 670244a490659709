use std::fs;

use serde_json::json;
use smartreply::io::{
    load_encoder, load_response_set, save_encoder, save_response_set, MANIFEST_FILE, RESPONSE_SET_FILE,
};
use smartreply::persist::{load_model, save_model, ModelContainer, PersistError, MIN_VERSION};
use smartreply::Error;
use smartreply_core::corpus::{build_vocabulary, desk_config, generate_synthetic, SyntheticConfig};
use smartreply_core::diversify::LexicalTables;
use smartreply_core::encoder::{EncoderConfig, EncoderParams, Side};
use smartreply_core::inference::{build_response_set, ResponseSetArtifact, ResponseSetConfig};
use smartreply_core::lm::{LmConfig, NgramLm};
use smartreply_core::{Rng, Tensor};

fn artifact(seed: u64) -> ResponseSetArtifact {
    let pairs = generate_synthetic(&SyntheticConfig { n_pairs: 800, seed, ..desk_config() }).unwrap();
    let vocab = build_vocabulary(&pairs, 1).unwrap();
    let cfg = EncoderConfig { vocab_size: vocab.len(), embed_dim: 8, hidden: 8, ..EncoderConfig::default() };
    let encoder = EncoderParams::new(cfg, &mut Rng::new(1)).unwrap();
    let replies: Vec<Vec<u32>> = pairs.iter().map(|p| vocab.encode(&p.reply)).collect();
    let lm = NgramLm::train(&replies, vocab.len(), LmConfig::default()).unwrap();
    let rs = ResponseSetConfig { lm_top: 60, ..ResponseSetConfig::default() };
    build_response_set(&pairs, &vocab, &encoder, &lm, &LexicalTables::default(), &rs, "model").unwrap().0
}

#[test]
fn rebuilding_a_response_set_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_response_set(&a, &artifact(4)).unwrap();
    save_response_set(&b, &artifact(4)).unwrap();
    for f in [RESPONSE_SET_FILE, MANIFEST_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (loaded, warnings) = load_response_set(&a).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(loaded, artifact(4));
}

#[test]
fn version_one_response_set_loads_with_singleton_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let a = artifact(5);
    save_response_set(dir.path(), &a).unwrap();
    // Older writers produced no cluster table.
    let current = load_model(&dir.path().join(RESPONSE_SET_FILE)).unwrap();
    let mut old = ModelContainer::new(current.meta.clone());
    old.version = MIN_VERSION;
    for s in current.sections.iter().filter(|s| s.name != "cluster_ids") {
        old.push(&s.name, s.tensor.clone()).unwrap();
    }
    save_model(&dir.path().join(RESPONSE_SET_FILE), &old).unwrap();

    let (loaded, warnings) = load_response_set(dir.path()).unwrap();
    assert_eq!(warnings.len(), 1, "{warnings:?}");
    assert!(warnings[0].contains("v1"));
    assert_eq!(loaded.clusters.cluster_count(), a.len());
    assert_eq!(loaded.phi_y, a.phi_y);
    assert_eq!(loaded.texts, a.texts);
}

#[test]
fn manifest_from_another_build_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    save_response_set(&x, &artifact(6)).unwrap();
    let mut other = artifact(6);
    other.meta.model_hash = "different".into();
    save_response_set(&y, &other).unwrap();
    fs::copy(y.join(MANIFEST_FILE), x.join(MANIFEST_FILE)).unwrap();
    match load_response_set(&x) {
        Err(Error::Contract(msg)) => assert!(msg.contains("different builds"), "{msg}"),
        other => panic!("expected a contract error, got {other:?}"),
    }
}

#[test]
fn encoder_round_trip_keeps_encodings_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = generate_synthetic(&SyntheticConfig { n_pairs: 300, ..desk_config() }).unwrap();
    let vocab = build_vocabulary(&pairs, 1).unwrap();
    let cfg = EncoderConfig { vocab_size: vocab.len(), embed_dim: 8, hidden: 8, ..EncoderConfig::default() };
    let enc = EncoderParams::new(cfg, &mut Rng::new(2)).unwrap();
    let path = dir.path().join("m.srm");
    save_encoder(&path, &enc, &vocab, json!({ "note": "test" })).unwrap();
    let (back, vocab2) = load_encoder(&path).unwrap();
    assert_eq!(vocab2, vocab);
    let seqs: Vec<Vec<u32>> = pairs.iter().take(50).map(|p| vocab.encode(&p.message)).collect();
    let a = enc.encode_all(Side::Message, &seqs, 16).unwrap();
    let b = back.encode_all(Side::Message, &seqs, 16).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn wrong_kind_and_missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.srm");
    let mut c = ModelContainer::new(json!({ "kind": "lm" }));
    c.push("w", Tensor::zeros(&[2, 2])).unwrap();
    save_model(&path, &c).unwrap();
    let e = load_encoder(&path).unwrap_err();
    assert!(!e.is_io());
    assert!(e.to_string().contains("matching"), "{e}");

    let missing = load_encoder(&dir.path().join("absent.srm")).unwrap_err();
    assert!(missing.is_io(), "{missing:?}");
    assert!(matches!(load_model(&dir.path().join("absent.srm")), Err(PersistError::Io { .. })));
}

#[test]
fn save_replaces_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.srm");
    let mut c = ModelContainer::new(json!({ "kind": "x" }));
    c.push("a", Tensor::row(&[1.0, 2.0])).unwrap();
    save_model(&path, &c).unwrap();
    c.push("b", Tensor::row(&[3.0])).unwrap();
    save_model(&path, &c).unwrap();
    assert_eq!(load_model(&path).unwrap(), c);
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}
