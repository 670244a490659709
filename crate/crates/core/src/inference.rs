//! Response-set construction and the suggestion pipeline for the matching,
//! MMR and M-CVAE rankers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, MessageReplyPair, Vocabulary};
use crate::diversify::{build_clusters, dedupe, mmr_preselect, mmr_rerank, LexicalClusters, LexicalTables};
use crate::encoder::{EncoderParams, Mode, Side};
use crate::error::{contract, Error, Result};
use crate::lm::NgramLm;
use crate::matching::{raw_scores, softmax, top_k};
use crate::mcvae::{decode_batch, CvaeParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub model_hash: String,
    pub freq_top: usize,
    pub lm_top: usize,
    /// Distinct replies before the cuts.
    pub distinct_replies: usize,
    pub corpus_replies: usize,
}

/// Fixed candidate set with everything inference needs precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseSetArtifact {
    pub texts: Vec<String>,
    /// Majority reply-intent label, when the corpus carries labels.
    pub intents: Vec<Option<String>>,
    /// Occurrences in the source corpus.
    pub counts: Vec<u64>,
    pub phi_y: Tensor,
    pub lm_scores: Vec<f32>,
    pub clusters: LexicalClusters,
    pub meta: ArtifactMeta,
}

impl ResponseSetArtifact {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.phi_y.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.texts.len();
        let lens = [self.intents.len(), self.counts.len(), self.phi_y.rows(), self.lm_scores.len(), self.clusters.len()];
        if lens.iter().any(|&l| l != r) {
            return Err(contract(format!("response set arrays disagree in length: {r} texts vs {lens:?}")));
        }
        if r == 0 {
            return Err(contract("response set is empty"));
        }
        if !self.phi_y.is_finite() || self.lm_scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response set vectors or lm scores".into()));
        }
        Ok(())
    }

    fn rows(&self, ids: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.phi_y.row_slice(i));
        }
        Tensor::new(vec![ids.len(), d], data).expect("sized")
    }
}

struct Group {
    tokens: Vec<String>,
    count: u64,
    texts: BTreeMap<String, u64>,
    intents: BTreeMap<String, u64>,
}

fn majority(m: &BTreeMap<String, u64>) -> Option<String> {
    // BTreeMap order makes ties go to the lexicographically smaller key.
    let mut best: Option<(&String, u64)> = None;
    for (k, &c) in m {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseSetConfig {
    pub freq_top: usize,
    pub lm_top: usize,
    pub encode_chunk: usize,
}

impl Default for ResponseSetConfig {
    fn default() -> Self {
        Self {
            freq_top: 2000,
            lm_top: 500,
            encode_chunk: 256,
        }
    }
}

/// Frequency cut, then lm-score cut, then encoding and clustering.
/// Returns the artifact and any warnings.
#[allow(clippy::too_many_arguments)]
pub fn build_response_set(
    replies: &[MessageReplyPair],
    vocab: &Vocabulary,
    encoder: &EncoderParams,
    lm: &NgramLm,
    tables: &LexicalTables,
    config: &ResponseSetConfig,
    model_hash: &str,
) -> Result<(ResponseSetArtifact, Vec<String>)> {
    if replies.is_empty() {
        return Err(contract("reply corpus is empty"));
    }
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for p in replies {
        let key = p.reply.join(" ");
        let g = groups.entry(key).or_insert_with(|| Group {
            tokens: p.reply.clone(),
            count: 0,
            texts: BTreeMap::new(),
            intents: BTreeMap::new(),
        });
        g.count += 1;
        *g.texts.entry(p.reply_text.clone()).or_default() += 1;
        if let Some(l) = &p.intent {
            *g.intents.entry(l.reply.clone()).or_default() += 1;
        }
    }
    let distinct = groups.len();
    // Frequency descending; BTreeMap order breaks ties by token string.
    let mut by_freq: Vec<Group> = groups.into_values().collect();
    by_freq.sort_by(|a, b| b.count.cmp(&a.count));
    if by_freq.len() < config.freq_top {
        warnings.push(format!(
            "only {} distinct replies, fewer than freq_top {}; keeping all",
            by_freq.len(),
            config.freq_top
        ));
    }
    by_freq.truncate(config.freq_top);

    let mut scored: Vec<(f32, Group)> = Vec::with_capacity(by_freq.len());
    for g in by_freq {
        let ids = vocab.encode(&g.tokens);
        scored.push((lm.score(&ids)?, g));
    }
    if scored.len() < config.lm_top {
        warnings.push(format!(
            "only {} replies survive the frequency cut, fewer than lm_top {}; keeping all",
            scored.len(),
            config.lm_top
        ));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(config.lm_top);

    let texts: Vec<String> = scored.iter().map(|(_, g)| majority(&g.texts).expect("nonempty")).collect();
    let seqs: Vec<Vec<u32>> = scored.iter().map(|(_, g)| vocab.encode(&g.tokens)).collect();
    let phi_y = encoder.encode_all(Side::Reply, &seqs, config.encode_chunk)?;
    let clusters = build_clusters(&texts, tables);
    let artifact = ResponseSetArtifact {
        intents: scored.iter().map(|(_, g)| majority(&g.intents)).collect(),
        counts: scored.iter().map(|(_, g)| g.count).collect(),
        lm_scores: scored.iter().map(|(s, _)| *s).collect(),
        texts,
        phi_y,
        clusters,
        meta: ArtifactMeta {
            model_hash: model_hash.to_string(),
            freq_top: config.freq_top,
            lm_top: config.lm_top,
            distinct_replies: distinct,
            corpus_replies: replies.len(),
        },
    };
    artifact.validate()?;
    Ok((artifact, warnings))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranker {
    Matching,
    MatchingNolc,
    Mmr,
    MmrNolc,
    Mcvae,
    McvaeNolc,
    McvaeMmr,
}

impl Ranker {
    pub const ALL: [Ranker; 7] = [
        Ranker::Matching,
        Ranker::MatchingNolc,
        Ranker::Mmr,
        Ranker::MmrNolc,
        Ranker::Mcvae,
        Ranker::McvaeNolc,
        Ranker::McvaeMmr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ranker::Matching => "matching",
            Ranker::MatchingNolc => "matching-nolc",
            Ranker::Mmr => "mmr",
            Ranker::MmrNolc => "mmr-nolc",
            Ranker::Mcvae => "mcvae",
            Ranker::McvaeNolc => "mcvae-nolc",
            Ranker::McvaeMmr => "mcvae-mmr",
        }
    }

    /// Whether lexical-cluster de-duplication is applied.
    pub fn uses_lc(self) -> bool {
        !matches!(self, Ranker::MatchingNolc | Ranker::MmrNolc | Ranker::McvaeNolc)
    }

    pub fn needs_cvae(self) -> bool {
        matches!(self, Ranker::Mcvae | Ranker::McvaeNolc | Ranker::McvaeMmr)
    }
}

impl fmt::Display for Ranker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ranker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ranker::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| contract(format!("unknown ranker {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub alpha: f32,
    pub beta: f32,
    /// Candidates kept from matching (the pruned set for sampling).
    pub k: usize,
    /// Prior samples per query.
    pub samples: usize,
    pub use_mmr_preselect: bool,
    pub seed: u64,
    pub top_n: usize,
    /// Weight the lm term by α during voting too.
    pub alpha_in_vote: bool,
    /// Sample over the whole response set instead of the pruned top-K.
    pub unconstrained: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.7,
            k: 15,
            samples: 300,
            use_mmr_preselect: false,
            seed: 7,
            top_n: 3,
            alpha_in_vote: false,
            unconstrained: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(contract(format!("k = {} must be at least 3", self.k)));
        }
        if self.samples == 0 {
            return Err(contract("samples must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(contract(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(contract(format!("alpha {} must be finite and ≥ 0", self.alpha)));
        }
        if self.top_n == 0 {
            return Err(contract("top_n must be at least 1"));
        }
        Ok(())
    }
}

/// Microsecond time source; the core library has no clock of its own.
pub trait Clock {
    fn now_micros(&self) -> u64;
}

/// A clock stuck at zero.
pub struct NullClock;

impl Clock for NullClock {
    fn now_micros(&self) -> u64 {
        0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode_us: u64,
    pub score_us: u64,
    pub preselect_us: u64,
    pub sample_us: u64,
    pub vote_us: u64,
    pub dedup_us: u64,
    pub total_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: usize,
    pub text: String,
    /// Raw matching score `Φ_X·Φ_Y + α·lm`.
    pub score: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmr: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub votes: Option<u32>,
    pub cluster: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionResult {
    pub ranker: Ranker,
    pub suggestions: Vec<Suggestion>,
    /// Candidate ids in final rank order before de-duplication.
    pub ranked: Vec<usize>,
    /// Votes aligned with `ranked`; empty for rankers that do not sample.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub votes: Vec<u32>,
    pub timings: StageTimings,
    pub params: PipelineConfig,
}

/// Votes per candidate; sums to the number of samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub votes: Vec<u32>,
    pub samples: usize,
}

/// `s` prior draws decoded in one batched pass: `[s × d]`.
pub fn sample_decoded(phi_x: &[f32], cvae: &CvaeParams, samples: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut z = Tensor::zeros(&[samples, cvae.z_dim]);
    rng.fill_normal(z.data_mut());
    decode_batch(cvae, &z, phi_x)
}

/// Hard votes: each decoded row picks the candidate maximizing
/// `Φ̂_Y·Φ_Y + lm`; ties go to the lower candidate index.
pub fn vote(decoded: &Tensor, candidates: &Tensor, lm: &[f32]) -> Result<VoteTally> {
    let k = candidates.rows();
    if k == 0 || lm.len() != k {
        return Err(contract(format!("vote needs ≥ 1 candidate with lm scores, got {k} and {}", lm.len())));
    }
    let scores = decoded.matmul_t(candidates)?;
    let mut votes = vec![0u32; k];
    for row in scores.data().chunks(k) {
        let mut best = 0;
        let mut best_v = row[0] + lm[0];
        for (j, (&s, &l)) in row.iter().zip(lm).enumerate().skip(1) {
            let v = s + l;
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        votes[best] += 1;
    }
    Ok(VoteTally { votes, samples: decoded.rows() })
}

pub fn constrained_sample_vote(
    phi_x: &[f32],
    candidates: &Tensor,
    lm: &[f32],
    cvae: &CvaeParams,
    samples: usize,
    rng: &mut Rng,
) -> Result<VoteTally> {
    if samples == 0 {
        return Err(contract("samples must be at least 1"));
    }
    let decoded = sample_decoded(phi_x, cvae, samples, rng)?;
    vote(&decoded, candidates, lm)
}

/// Analytic scalar-multiply counts for one query's sampling stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub unconstrained_scoring: u64,
    pub constrained_scoring: u64,
    /// Decoder cost (identical for both): hoisted message half plus per-sample layers.
    pub decoder: u64,
    /// `R / K`.
    pub scoring_ratio: f64,
    /// Ratio including the shared decoder cost.
    pub total_ratio: f64,
}

pub fn count_multiplications(k: usize, r: usize, d: usize, z_dim: usize, hidden: usize, samples: usize) -> CostReport {
    let (k, r, d, z, h, s) = (k as u64, r as u64, d as u64, z_dim as u64, hidden as u64, samples as u64);
    let unconstrained = d * r * s;
    let constrained = d * k * s;
    let decoder = d * h + s * (z * h + h * d);
    CostReport {
        unconstrained_scoring: unconstrained,
        constrained_scoring: constrained,
        decoder,
        scoring_ratio: r as f64 / k as f64,
        total_ratio: (unconstrained + decoder) as f64 / (constrained + decoder) as f64,
    }
}

/// Everything needed to answer queries; immutable after construction.
#[derive(Clone, Debug)]
pub struct SuggestionEngine {
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
    pub artifact: ResponseSetArtifact,
    pub cvae: Option<CvaeParams>,
    /// Messages longer than this many tokens are rejected.
    pub max_len: usize,
}

impl SuggestionEngine {
    pub fn new(
        vocab: Vocabulary,
        encoder: EncoderParams,
        artifact: ResponseSetArtifact,
        cvae: Option<CvaeParams>,
        max_len: usize,
    ) -> Result<Self> {
        artifact.validate()?;
        if artifact.dim() != encoder.output_dim() {
            return Err(Error::Shape {
                op: "engine",
                left: vec![encoder.output_dim()],
                right: artifact.phi_y.shape().to_vec(),
            });
        }
        if let Some(c) = &cvae {
            c.validate()?;
            if c.d != artifact.dim() {
                return Err(contract(format!("CVAE dimension {} ≠ encoder dimension {}", c.d, artifact.dim())));
            }
        }
        Ok(Self {
            vocab,
            encoder,
            artifact,
            cvae,
            max_len,
        })
    }

    pub fn encode_message(&self, message: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(message);
        if tokens.is_empty() {
            return Err(contract("message is empty"));
        }
        if tokens.len() > self.max_len {
            return Err(contract(format!(
                "message has {} tokens, more than the maximum {}",
                tokens.len(),
                self.max_len
            )));
        }
        let ids = self.vocab.encode(&tokens);
        self.encoder.encode(Side::Message, &ids, &mut Mode::Infer)
    }

    fn suggestion(&self, id: usize, raw: &[f32]) -> Suggestion {
        Suggestion {
            id,
            text: self.artifact.texts[id].clone(),
            score: raw[id],
            mmr: None,
            votes: None,
            cluster: self.artifact.clusters.cluster_of(id),
            intent: self.artifact.intents[id].clone(),
        }
    }

    pub fn suggest(&self, message: &str, ranker: Ranker, config: &PipelineConfig, clock: &dyn Clock) -> Result<SuggestionResult> {
        config.validate()?;
        let t0 = clock.now_micros();
        let phi_x = self.encode_message(message)?;
        let t1 = clock.now_micros();
        self.suggest_encoded(&phi_x, ranker, config, clock, t0, t1)
    }

    /// Pipeline after message encoding; `t0`/`t1` bracket the encode stage.
    pub fn suggest_encoded(
        &self,
        phi_x: &[f32],
        ranker: Ranker,
        config: &PipelineConfig,
        clock: &dyn Clock,
        t0: u64,
        t1: u64,
    ) -> Result<SuggestionResult> {
        config.validate()?;
        let art = &self.artifact;
        let r = art.len();
        let k = config.k.min(r);
        let mut timings = StageTimings {
            encode_us: t1.saturating_sub(t0),
            ..StageTimings::default()
        };

        let raw = raw_scores(phi_x, &art.phi_y, &art.lm_scores, config.alpha)?;
        let pool = if ranker.needs_cvae() { (2 * k).min(r) } else { k };
        let top = top_k(&raw, pool);
        let t2 = clock.now_micros();
        timings.score_us = t2.saturating_sub(t1);

        let mut mmr_of: BTreeMap<usize, f32> = BTreeMap::new();
        let mut votes_of: BTreeMap<usize, u32> = BTreeMap::new();
        let ranked: Vec<usize> = match ranker {
            Ranker::Matching | Ranker::MatchingNolc => {
                timings.preselect_us = 0;
                top
            }
            Ranker::Mmr | Ranker::MmrNolc => {
                let top_raw: Vec<f32> = top.iter().map(|&i| raw[i]).collect();
                let probs = softmax(&top_raw);
                let vecs: Vec<&[f32]> = top.iter().map(|&i| art.phi_y.row_slice(i)).collect();
                let ranked = if top.len() >= 2 {
                    let m = mmr_rerank(&probs, &vecs, config.beta)?;
                    for (p, &id) in top.iter().enumerate() {
                        mmr_of.insert(id, m.mmr[p]);
                    }
                    m.order.iter().map(|&p| top[p]).collect()
                } else {
                    top
                };
                let t3 = clock.now_micros();
                timings.preselect_us = t3.saturating_sub(t2).max(1);
                ranked
            }
            Ranker::Mcvae | Ranker::McvaeNolc | Ranker::McvaeMmr => {
                let cvae = self
                    .cvae
                    .as_ref()
                    .ok_or_else(|| contract(format!("ranker {ranker} needs a trained CVAE")))?;
                let candidates: Vec<usize> = if config.unconstrained {
                    (0..r).collect()
                } else if ranker == Ranker::McvaeMmr || config.use_mmr_preselect {
                    let top_raw: Vec<f32> = top.iter().map(|&i| raw[i]).collect();
                    let probs = softmax(&top_raw);
                    let vecs: Vec<&[f32]> = top.iter().map(|&i| art.phi_y.row_slice(i)).collect();
                    mmr_preselect(&top, &probs, &vecs, config.beta, k)?.ids
                } else {
                    top[..k.min(top.len())].to_vec()
                };
                let cand = art.rows(&candidates);
                let lm_w = if config.alpha_in_vote { config.alpha } else { 1.0 };
                let cand_lm: Vec<f32> = candidates.iter().map(|&i| lm_w * art.lm_scores[i]).collect();
                let t3 = clock.now_micros();
                timings.preselect_us = t3.saturating_sub(t2);
                let mut rng = Rng::new(config.seed);
                let decoded = sample_decoded(phi_x, cvae, config.samples, &mut rng)?;
                let t4 = clock.now_micros();
                timings.sample_us = t4.saturating_sub(t3);
                let tally = vote(&decoded, &cand, &cand_lm)?;
                let mut order: Vec<usize> = (0..candidates.len()).collect();
                order.sort_by(|&a, &b| {
                    tally.votes[b]
                        .cmp(&tally.votes[a])
                        .then(raw[candidates[b]].total_cmp(&raw[candidates[a]]))
                        .then(candidates[a].cmp(&candidates[b]))
                });
                for (p, &id) in candidates.iter().enumerate() {
                    votes_of.insert(id, tally.votes[p]);
                }
                let t5 = clock.now_micros();
                timings.vote_us = t5.saturating_sub(t4);
                order.into_iter().map(|p| candidates[p]).collect()
            }
        };

        let t6 = clock.now_micros();
        let kept = if ranker.uses_lc() {
            dedupe(&ranked, &art.clusters, config.top_n)
        } else {
            ranked.iter().copied().take(config.top_n).collect()
        };
        let suggestions = kept
            .into_iter()
            .map(|id| {
                let mut s = self.suggestion(id, &raw);
                s.mmr = mmr_of.get(&id).copied();
                s.votes = votes_of.get(&id).copied();
                s
            })
            .collect();
        let t7 = clock.now_micros();
        timings.dedup_us = t7.saturating_sub(t6);
        timings.total_us = t7.saturating_sub(t0);
        Ok(SuggestionResult {
            ranker,
            suggestions,
            votes: if votes_of.is_empty() { Vec::new() } else { ranked.iter().map(|id| votes_of[id]).collect() },
            ranked,
            timings,
            params: config.clone(),
        })
    }
}
