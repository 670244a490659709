//! Lexical clustering of responses and one-pass MMR re-ranking.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_punctuation, tokenize};
use crate::error::{contract, Result};

/// Canonicalization tables and join guards for lexical clustering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexicalTables {
    pub contractions: BTreeMap<String, Vec<String>>,
    /// Word → class representative.
    pub synonyms: BTreeMap<String, String>,
    pub negations: Vec<String>,
    /// A one-word edit joins two responses only if they share at least this
    /// many words. Zero gives the bare edit rule.
    pub min_shared_words: usize,
}

impl Default for LexicalTables {
    fn default() -> Self {
        let contractions: &[(&str, &[&str])] = &[
            ("can't", &["cannot"]),
            ("won't", &["will", "not"]),
            ("shan't", &["shall", "not"]),
            ("i'm", &["i", "am"]),
            ("you're", &["you", "are"]),
            ("we're", &["we", "are"]),
            ("they're", &["they", "are"]),
            ("it's", &["it", "is"]),
            ("that's", &["that", "is"]),
            ("what's", &["what", "is"]),
            ("there's", &["there", "is"]),
            ("let's", &["let", "us"]),
            ("i'll", &["i", "will"]),
            ("you'll", &["you", "will"]),
            ("we'll", &["we", "will"]),
            ("i've", &["i", "have"]),
            ("i'd", &["i", "would"]),
            ("okay", &["ok"]),
            ("k", &["ok"]),
            ("omw", &["on", "my", "way"]),
        ];
        let synonyms: &[(&str, &str)] = &[
            ("yeah", "yes"),
            ("ya", "yes"),
            ("yep", "yes"),
            ("yup", "yes"),
            ("thx", "thanks"),
            ("congrats", "congratulations"),
            ("prob", "problem"),
            ("np", "no problem"),
            ("hahaha", "haha"),
            ("goodnight", "good night"),
            ("anytime", "any time"),
        ];
        Self {
            contractions: contractions
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
            synonyms: synonyms.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            negations: ["not", "n't", "no", "never", "cannot"].iter().map(|s| s.to_string()).collect(),
            min_shared_words: 2,
        }
    }
}

impl LexicalTables {
    pub fn is_negation(&self, word: &str) -> bool {
        word.ends_with("n't") || self.negations.iter().any(|n| n == word)
    }

    /// Lowercased words with punctuation dropped, contractions expanded and
    /// synonyms mapped to their representative.
    pub fn canonicalize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for tok in tokenize(text) {
            if is_punctuation(&tok) {
                continue;
            }
            let expanded: Vec<String> = match self.contractions.get(&tok) {
                Some(e) => e.clone(),
                None => match tok.strip_suffix("n't") {
                    Some(stem) if !stem.is_empty() => vec![stem.to_string(), "not".to_string()],
                    _ => vec![tok],
                },
            };
            for w in expanded {
                match self.synonyms.get(&w) {
                    Some(rep) => out.extend(rep.split_whitespace().map(str::to_string)),
                    None => out.push(w),
                }
            }
        }
        out
    }

    /// Whether two canonical forms are joined by the pairwise rules.
    pub fn joins(&self, a: &[String], b: &[String]) -> bool {
        if a == b {
            return true;
        }
        let Some(diff) = one_word_edit(a, b) else {
            return false;
        };
        let shared = a.len().min(b.len()) - usize::from(a.len() == b.len());
        shared >= self.min_shared_words && diff.iter().all(|w| !self.is_negation(w))
    }
}

/// Words that differ when `a` and `b` are exactly one word-level
/// substitution, insertion or deletion apart.
fn one_word_edit<'a>(a: &'a [String], b: &'a [String]) -> Option<Vec<&'a str>> {
    if a.len() == b.len() {
        let mut diffs = a.iter().zip(b).filter(|(x, y)| x != y);
        let (x, y) = diffs.next()?;
        return diffs.next().is_none().then(|| vec![x.as_str(), y.as_str()]);
    }
    let (long, short) = if a.len() > b.len() { (a, b) } else { (b, a) };
    if long.len() != short.len() + 1 {
        return None;
    }
    let i = long.iter().zip(short).position(|(x, y)| x != y).unwrap_or(short.len());
    (long[i + 1..] == short[i..]).then(|| vec![long[i].as_str()])
}

/// A partition of response ids. Cluster ids are dense and numbered in
/// order of each cluster's smallest member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexicalClusters {
    cluster_of: Vec<u32>,
}

impl LexicalClusters {
    pub fn from_ids(cluster_of: Vec<u32>) -> Self {
        Self { cluster_of }
    }

    /// Every response in its own cluster.
    pub fn singletons(n: usize) -> Self {
        Self {
            cluster_of: (0..n as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_of.is_empty()
    }

    pub fn cluster_of(&self, id: usize) -> u32 {
        self.cluster_of[id]
    }

    pub fn ids(&self) -> &[u32] {
        &self.cluster_of
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_of.iter().map(|&c| c as usize + 1).max().unwrap_or(0)
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.cluster_count()];
        for (i, &c) in self.cluster_of.iter().enumerate() {
            m[c as usize].push(i);
        }
        m
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the smaller id as root.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

const WILDCARD: &str = "\u{0}";

/// Clusters responses by the transitive closure of the join rules.
pub fn build_clusters<S: AsRef<str>>(responses: &[S], tables: &LexicalTables) -> LexicalClusters {
    let canon: Vec<Vec<String>> = responses.iter().map(|r| tables.canonicalize(r.as_ref())).collect();
    // Forms one edit apart share a key: a substitution shares the wildcard
    // key at the edited slot; an insertion maps the longer form's deletion
    // key onto the shorter form itself.
    let mut buckets: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, c) in canon.iter().enumerate() {
        buckets.entry(c.clone()).or_default().push(i);
        for j in 0..c.len() {
            let mut sub = c.clone();
            sub[j] = WILDCARD.to_string();
            buckets.entry(sub).or_default().push(i);
            let mut del = c.clone();
            del.remove(j);
            buckets.entry(del).or_default().push(i);
        }
    }
    let mut uf = UnionFind::new(responses.len());
    for members in buckets.values() {
        for (x, &a) in members.iter().enumerate() {
            for &b in &members[x + 1..] {
                if a != b && uf.find(a) != uf.find(b) && tables.joins(&canon[a], &canon[b]) {
                    uf.union(a, b);
                }
            }
        }
    }
    let mut numbering: BTreeMap<usize, u32> = BTreeMap::new();
    let mut cluster_of = Vec::with_capacity(responses.len());
    for i in 0..responses.len() {
        let root = uf.find(i);
        let next = numbering.len() as u32;
        cluster_of.push(*numbering.entry(root).or_insert(next));
    }
    LexicalClusters { cluster_of }
}

/// First occurrence per cluster, in order, up to `limit`.
pub fn dedupe(ranked: &[usize], clusters: &LexicalClusters, limit: usize) -> Vec<usize> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for &id in ranked {
        if out.len() == limit {
            break;
        }
        let c = clusters.cluster_of(id);
        if !seen.contains(&c) {
            seen.push(c);
            out.push(id);
        }
    }
    out
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(contract("cosine of a zero-norm vector"));
    }
    Ok((ab / libm::sqrt(aa * bb)) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmrScores {
    pub beta: f32,
    /// Mean cosine of each candidate to the others.
    pub novelty: Vec<f32>,
    pub mmr: Vec<f32>,
    /// Candidate positions sorted by MMR descending, ties by position.
    pub order: Vec<usize>,
}

/// `MMR_k = β·S_k − (1−β)·N_k` over candidates given in matching order.
pub fn mmr_rerank<V: AsRef<[f32]>>(scores: &[f32], vectors: &[V], beta: f32) -> Result<MmrScores> {
    let k = scores.len();
    if k < 2 || vectors.len() != k {
        return Err(contract(format!(
            "MMR needs at least 2 candidates with one vector each, got {k} scores and {} vectors",
            vectors.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(contract(format!("beta {beta} outside [0, 1]")));
    }
    let mut cos = vec![0.0f32; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(vectors[i].as_ref(), vectors[j].as_ref())?;
            cos[i * k + j] = c;
            cos[j * k + i] = c;
        }
    }
    let novelty: Vec<f32> = (0..k)
        .map(|i| {
            let s: f64 = (0..k).filter(|&j| j != i).map(|j| cos[i * k + j] as f64).sum();
            (s / (k - 1) as f64) as f32
        })
        .collect();
    let mmr: Vec<f32> = scores
        .iter()
        .zip(&novelty)
        .map(|(&s, &n)| beta * s - (1.0 - beta) * n)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mmr[b].total_cmp(&mmr[a]).then(a.cmp(&b)));
    Ok(MmrScores {
        beta,
        novelty,
        mmr,
        order,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preselection {
    pub ids: Vec<usize>,
    /// Fewer than `2K` candidates were available.
    pub shrunk: bool,
}

/// Picks `k` of the matching top-`2k` (`ids` in matching order with their
/// softmax scores) by MMR.
pub fn mmr_preselect<V: AsRef<[f32]>>(
    ids: &[usize],
    scores: &[f32],
    vectors: &[V],
    beta: f32,
    k: usize,
) -> Result<Preselection> {
    let shrunk = ids.len() < 2 * k;
    if ids.len() < 2 {
        return Ok(Preselection {
            ids: ids.iter().copied().take(k).collect(),
            shrunk,
        });
    }
    let m = mmr_rerank(scores, vectors, beta)?;
    Ok(Preselection {
        ids: m.order.iter().take(k).map(|&p| ids[p]).collect(),
        shrunk,
    })
}
