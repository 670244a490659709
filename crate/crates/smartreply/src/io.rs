//! File formats for models, the language model, the response set and
//! corpora, on top of the SRM1 container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use smartreply_core::corpus::{parse_tsv, to_tsv, MessageReplyPair, Vocabulary};
use smartreply_core::diversify::LexicalClusters;
use smartreply_core::encoder::{EncoderConfig, EncoderParams};
use smartreply_core::inference::{ArtifactMeta, ResponseSetArtifact};
use smartreply_core::lm::{LmConfig, NgramLm};
use smartreply_core::mcvae::CvaeParams;
use smartreply_core::params::Params;
use smartreply_core::rng::Rng;
use smartreply_core::tensor::Tensor;

use crate::persist::{load_model, save_model, ModelContainer, PersistError};
use crate::{Error, Result};

pub const RESPONSE_SET_FILE: &str = "response_set.srm";
pub const MANIFEST_FILE: &str = "responses.json";

/// Integers stored in f32 sections must stay below 2^24 to round-trip.
const F32_EXACT: u64 = 1 << 24;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(path, &(text + "\n"))
}

pub fn read_corpus(path: &Path, max_len: usize) -> Result<(Vec<MessageReplyPair>, usize)> {
    Ok(parse_tsv(&read_text(path)?, max_len)?)
}

pub fn write_corpus(path: &Path, pairs: &[MessageReplyPair]) -> Result<()> {
    write_text(path, &to_tsv(pairs))
}

fn save(path: &Path, c: &ModelContainer) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(save_model(path, c)?)
}

fn meta_field<T: DeserializeOwned>(c: &ModelContainer, key: &str) -> Result<T> {
    let v = c
        .meta
        .get(key)
        .ok_or_else(|| PersistError::Meta(format!("missing field {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| PersistError::Meta(format!("{key}: {e}")).into())
}

fn check_kind(c: &ModelContainer, kind: &str) -> Result<()> {
    let found: String = meta_field(c, "kind")?;
    if found != kind {
        return Err(PersistError::Meta(format!("expected a {kind} container, found {found}")).into());
    }
    Ok(())
}

fn push_params(c: &mut ModelContainer, p: &Params) -> Result<()> {
    for (name, t) in p.iter() {
        c.push(name, t.clone())?;
    }
    Ok(())
}

/// Fills a freshly initialised template from the container, requiring the
/// same names and shapes and nothing extra.
fn fill_params(c: &ModelContainer, template: &mut Params, extra: &[&str]) -> Result<()> {
    let mut allowed: Vec<&str> = template.iter().map(|(n, _)| n).collect();
    allowed.extend_from_slice(extra);
    c.check_known(&allowed)?;
    let names: Vec<String> = template.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = c.require(&name)?;
        let want = template.by_name(&name).expect("template name").shape().to_vec();
        if t.shape() != want.as_slice() {
            return Err(PersistError::BadSection {
                name,
                reason: format!("shape {:?}, expected {want:?}", t.shape()),
            }
            .into());
        }
        template.replace(&name, t.clone())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabMeta {
    surfaces: Vec<String>,
    frequencies: Vec<u64>,
    min_frequency: u64,
}

/// Matching model container: encoder weights plus the vocabulary.
pub fn encoder_container(enc: &EncoderParams, vocab: &Vocabulary, extra: serde_json::Value) -> Result<ModelContainer> {
    let mut c = ModelContainer::new(json!({
        "kind": "matching",
        "encoder": enc.config,
        "vocabulary": VocabMeta {
            surfaces: vocab.surfaces().to_vec(),
            frequencies: vocab.frequencies().to_vec(),
            min_frequency: vocab.min_frequency(),
        },
        "training": extra,
    }));
    push_params(&mut c, &enc.params)?;
    Ok(c)
}

pub fn encoder_from_container(c: &ModelContainer) -> Result<(EncoderParams, Vocabulary)> {
    check_kind(c, "matching")?;
    let config: EncoderConfig = meta_field(c, "encoder")?;
    let v: VocabMeta = meta_field(c, "vocabulary")?;
    if v.surfaces.len() != config.vocab_size || v.frequencies.len() != v.surfaces.len() {
        return Err(PersistError::Meta("vocabulary size disagrees with the encoder".into()).into());
    }
    let vocab = Vocabulary::from_parts(v.surfaces, v.frequencies, v.min_frequency);
    let mut enc = EncoderParams::new(config, &mut Rng::new(0))?;
    fill_params(c, &mut enc.params, &[])?;
    Ok((enc, vocab))
}

pub fn save_encoder(path: &Path, enc: &EncoderParams, vocab: &Vocabulary, extra: serde_json::Value) -> Result<()> {
    save(path, &encoder_container(enc, vocab, extra)?)
}

pub fn load_encoder(path: &Path) -> Result<(EncoderParams, Vocabulary)> {
    encoder_from_container(&load_model(path)?)
}

/// Top-order n-gram counts as rows of `order` token ids followed by the count.
pub fn lm_container(lm: &NgramLm) -> Result<ModelContainer> {
    let n = lm.order();
    let counts = lm.raw_counts();
    let mut data = Vec::with_capacity(counts.len() * (n + 1));
    for (gram, &count) in counts {
        if count >= F32_EXACT || gram.iter().any(|&t| t as u64 >= F32_EXACT) {
            return Err(Error::Contract(format!("n-gram {gram:?} count {count} too large for the f32 table")));
        }
        data.extend(gram.iter().map(|&t| t as f32));
        data.push(count as f32);
    }
    let mut c = ModelContainer::new(json!({
        "kind": "lm",
        "lm": lm.config(),
        "vocab_size": lm.vocab_size(),
    }));
    c.push("lm.ngrams", Tensor::new(vec![counts.len(), n + 1], data)?)?;
    Ok(c)
}

pub fn lm_from_container(c: &ModelContainer) -> Result<NgramLm> {
    check_kind(c, "lm")?;
    c.check_known(&["lm.ngrams"])?;
    let config: LmConfig = meta_field(c, "lm")?;
    let vocab_size: usize = meta_field(c, "vocab_size")?;
    let t = c.require("lm.ngrams")?;
    if t.cols() != config.order + 1 {
        return Err(PersistError::BadSection {
            name: "lm.ngrams".into(),
            reason: format!("{} columns for an order-{} model", t.cols(), config.order),
        }
        .into());
    }
    let mut raw = BTreeMap::new();
    for row in t.data().chunks(config.order + 1) {
        let gram: Vec<u32> = row[..config.order].iter().map(|&v| v as u32).collect();
        raw.insert(gram, row[config.order] as u64);
    }
    Ok(NgramLm::from_counts(raw, vocab_size, config)?)
}

pub fn save_lm(path: &Path, lm: &NgramLm) -> Result<()> {
    save(path, &lm_container(lm)?)
}

pub fn load_lm(path: &Path) -> Result<NgramLm> {
    lm_from_container(&load_model(path)?)
}

pub fn cvae_container(p: &CvaeParams, base_hash: &str, extra: serde_json::Value) -> Result<ModelContainer> {
    let mut c = ModelContainer::new(json!({
        "kind": "cvae",
        "z_dim": p.z_dim,
        "hidden": p.hidden,
        "d": p.d,
        "base_model_hash": base_hash,
        "training": extra,
    }));
    push_params(&mut c, &p.params)?;
    Ok(c)
}

/// Returns the parameters and the hash of the matching model they were
/// trained on.
pub fn cvae_from_container(c: &ModelContainer) -> Result<(CvaeParams, String)> {
    check_kind(c, "cvae")?;
    let (z, h, d): (usize, usize, usize) = (meta_field(c, "z_dim")?, meta_field(c, "hidden")?, meta_field(c, "d")?);
    let mut p = CvaeParams::zeros(d, z, h);
    fill_params(c, &mut p.params, &[])?;
    p.validate()?;
    Ok((p, meta_field(c, "base_model_hash")?))
}

pub fn save_cvae(path: &Path, p: &CvaeParams, base_hash: &str, extra: serde_json::Value) -> Result<()> {
    save(path, &cvae_container(p, base_hash, extra)?)
}

pub fn load_cvae(path: &Path) -> Result<(CvaeParams, String)> {
    cvae_from_container(&load_model(path)?)
}

/// Human-readable side of the response set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub texts: Vec<String>,
    pub intents: Vec<Option<String>>,
    pub counts: Vec<u64>,
    pub meta: ArtifactMeta,
}

/// Writes `response_set.srm` and `responses.json` into `dir`. Neither file
/// carries a timestamp, so rebuilding from the same inputs is byte-identical.
pub fn save_response_set(dir: &Path, a: &ResponseSetArtifact) -> Result<()> {
    a.validate()?;
    let r = a.len();
    let mut c = ModelContainer::new(json!({ "kind": "response-set", "meta": a.meta }));
    c.push("phi_y", a.phi_y.clone())?;
    c.push("lm_scores", Tensor::new(vec![r], a.lm_scores.clone())?)?;
    let ids: Vec<f32> = a.clusters.ids().iter().map(|&i| i as f32).collect();
    c.push("cluster_ids", Tensor::new(vec![r], ids)?)?;
    save(&dir.join(RESPONSE_SET_FILE), &c)?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            texts: a.texts.clone(),
            intents: a.intents.clone(),
            counts: a.counts.clone(),
            meta: a.meta.clone(),
        },
    )
}

/// Loads a response set; warnings report defaults filled in for sections an
/// older writer did not produce.
pub fn load_response_set(dir: &Path) -> Result<(ResponseSetArtifact, Vec<String>)> {
    let c = load_model(&dir.join(RESPONSE_SET_FILE))?;
    check_kind(&c, "response-set")?;
    c.check_known(&["phi_y", "lm_scores", "cluster_ids"])?;
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let meta: ArtifactMeta = meta_field(&c, "meta")?;
    if meta != manifest.meta {
        return Err(Error::Contract(format!(
            "{} and {} describe different builds",
            RESPONSE_SET_FILE, MANIFEST_FILE
        )));
    }
    let r = manifest.texts.len();
    let mut warnings = Vec::new();
    let clusters = match c.get("cluster_ids") {
        Some(t) => {
            if t.len() != r {
                return Err(PersistError::BadSection {
                    name: "cluster_ids".into(),
                    reason: format!("{} entries for {r} responses", t.len()),
                }
                .into());
            }
            LexicalClusters::from_ids(t.data().iter().map(|&v| v as u32).collect())
        }
        None => {
            warnings.push(format!(
                "format v{} response set has no cluster_ids; every response is its own cluster",
                c.version
            ));
            LexicalClusters::singletons(r)
        }
    };
    let a = ResponseSetArtifact {
        texts: manifest.texts,
        intents: manifest.intents,
        counts: manifest.counts,
        phi_y: c.require("phi_y")?.clone(),
        lm_scores: c.require("lm_scores")?.data().to_vec(),
        clusters,
        meta,
    };
    a.validate()?;
    Ok((a, warnings))
}
