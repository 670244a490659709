//! Interpolated Kneser-Ney n-gram model over reply token ids, used for the
//! per-response language-model score.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmNormalize {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub discount: f64,
    pub normalize: LmNormalize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: 3,
            discount: 0.75,
            normalize: LmNormalize::Mean,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Level {
    /// Raw counts at the top order, continuation counts below it.
    counts: BTreeMap<Vec<u32>, f64>,
    /// context → (total count, number of distinct followers)
    contexts: BTreeMap<Vec<u32>, (f64, f64)>,
}

/// Token ids `0..vocab_size` come from the vocabulary (0 is padding and is
/// never predicted); `vocab_size` marks sentence start and `vocab_size + 1`
/// sentence end. The predicted alphabet therefore has `vocab_size` symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramLm {
    config: LmConfig,
    vocab_size: usize,
    raw: BTreeMap<Vec<u32>, u64>,
    levels: Vec<Level>,
}

impl NgramLm {
    pub fn bos(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn eos(&self) -> u32 {
        self.vocab_size as u32 + 1
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn train<S: AsRef<[u32]>>(replies: &[S], vocab_size: usize, config: LmConfig) -> Result<Self> {
        if replies.is_empty() {
            return Err(contract("language model needs at least one reply"));
        }
        if config.order == 0 {
            return Err(contract("language model order must be ≥ 1"));
        }
        if !(config.discount > 0.0 && config.discount < 1.0) {
            return Err(contract("discount must be in (0, 1)"));
        }
        let n = config.order;
        let (bos, eos) = (vocab_size as u32, vocab_size as u32 + 1);
        let mut raw: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
        for r in replies {
            let r = r.as_ref();
            if let Some(&bad) = r.iter().find(|&&t| t == 0 || t as usize >= vocab_size) {
                return Err(contract(format!("reply token {bad} outside the predicted alphabet")));
            }
            let mut seq = vec![bos; n - 1];
            seq.extend_from_slice(r);
            seq.push(eos);
            for w in seq.windows(n) {
                *raw.entry(w.to_vec()).or_default() += 1;
            }
        }
        Self::from_counts(raw, vocab_size, config)
    }

    /// Rebuilds the model from top-order counts; lower orders are derived.
    pub fn from_counts(raw: BTreeMap<Vec<u32>, u64>, vocab_size: usize, config: LmConfig) -> Result<Self> {
        let n = config.order;
        if raw.is_empty() || raw.keys().any(|k| k.len() != n) {
            return Err(contract(format!("language model counts must be nonempty {n}-grams")));
        }
        let mut levels = vec![Level::default(); n];
        levels[n - 1].counts = raw.iter().map(|(k, &c)| (k.clone(), c as f64)).collect();
        for k in (1..n).rev() {
            let mut cont: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            for gram in levels[k].counts.keys() {
                *cont.entry(gram[1..].to_vec()).or_default() += 1.0;
            }
            levels[k - 1].counts = cont;
        }
        for level in &mut levels {
            for (gram, &c) in &level.counts {
                let e = level.contexts.entry(gram[..gram.len() - 1].to_vec()).or_default();
                e.0 += c;
                e.1 += 1.0;
            }
        }
        Ok(Self {
            config,
            vocab_size,
            raw,
            levels,
        })
    }

    /// Top-order counts, the only state that needs persisting.
    pub fn raw_counts(&self) -> &BTreeMap<Vec<u32>, u64> {
        &self.raw
    }

    /// `p(w | history)`, using at most the last `order − 1` history tokens.
    pub fn prob(&self, history: &[u32], w: u32) -> f64 {
        let n = self.config.order;
        let start = history.len().saturating_sub(n - 1);
        self.prob_at(n, &history[start..], w)
    }

    fn prob_at(&self, k: usize, history: &[u32], w: u32) -> f64 {
        if k == 0 {
            return 1.0 / self.vocab_size as f64;
        }
        let ctx = &history[history.len().saturating_sub(k - 1)..];
        let level = &self.levels[k - 1];
        let lower = self.prob_at(k - 1, ctx, w);
        let Some(&(total, distinct)) = level.contexts.get(ctx) else {
            return lower;
        };
        let mut key = ctx.to_vec();
        key.push(w);
        let c = level.counts.get(&key).copied().unwrap_or(0.0);
        let d = self.config.discount;
        ((c - d).max(0.0) + d * distinct * lower) / total
    }

    /// Left-pads with sentence-start markers.
    fn padded(&self, tokens: &[u32]) -> Vec<u32> {
        let mut seq = vec![self.bos(); self.config.order - 1];
        seq.extend_from_slice(tokens);
        seq
    }

    /// Total log-probability of `tokens` followed by the end marker, and
    /// the number of predicted symbols.
    pub fn log_prob(&self, tokens: &[u32]) -> (f64, usize) {
        let mut seq = self.padded(tokens);
        seq.push(self.eos());
        let h = self.config.order - 1;
        let mut lp = 0.0;
        for i in h..seq.len() {
            lp += libm::log(self.prob(&seq[..i], seq[i]));
        }
        (lp, seq.len() - h)
    }

    /// Mean (or summed) per-token natural-log probability, end marker included.
    pub fn score(&self, tokens: &[u32]) -> Result<f32> {
        if tokens.is_empty() {
            return Err(contract("cannot score an empty reply"));
        }
        let (lp, count) = self.log_prob(tokens);
        let v = match self.config.normalize {
            LmNormalize::Mean => lp / count as f64,
            LmNormalize::Sum => lp,
        };
        Ok(v as f32)
    }

    /// Symbols of the predicted alphabet: ids `1..vocab_size` then the end marker.
    pub fn alphabet(&self) -> Vec<u32> {
        let mut a: Vec<u32> = (1..self.vocab_size as u32).collect();
        a.push(self.eos());
        a
    }

    /// Next-symbol distribution over [`Self::alphabet`] after `history`
    /// (sentence-start padding is added).
    pub fn distribution(&self, history: &[u32]) -> Vec<f64> {
        let seq = self.padded(history);
        self.alphabet().into_iter().map(|w| self.prob(&seq, w)).collect()
    }

    /// Per-token perplexity over held-out replies.
    pub fn perplexity<S: AsRef<[u32]>>(&self, replies: &[S]) -> f64 {
        let (mut lp, mut n) = (0.0, 0usize);
        for r in replies {
            let (l, c) = self.log_prob(r.as_ref());
            lp += l;
            n += c;
        }
        libm::exp(-lp / n.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, desk_config, generate_synthetic, split, SyntheticConfig};
    use crate::rng::Rng;

    fn lm(replies: &[Vec<u32>], v: usize, order: usize) -> NgramLm {
        let cfg = LmConfig { order, ..LmConfig::default() };
        NgramLm::train(replies, v, cfg).unwrap()
    }

    #[test]
    fn distributions_sum_to_one() {
        let mut rng = Rng::new(3);
        let replies: Vec<Vec<u32>> = (0..200)
            .map(|_| (0..1 + rng.below(6)).map(|_| 1 + rng.below(9) as u32).collect())
            .collect();
        for order in 1..=4 {
            let m = lm(&replies, 10, order);
            for _ in 0..100 {
                let ctx: Vec<u32> = (0..rng.below(4)).map(|_| 1 + rng.below(9) as u32).collect();
                let s: f64 = m.distribution(&ctx).iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "order {order} ctx {ctx:?} sum {s}");
            }
        }
    }

    #[test]
    fn repeated_sentence_is_the_best_of_its_length() {
        let m = lm(&vec![vec![2, 3, 4]; 5], 6, 3);
        let best = m.score(&[2, 3, 4]).unwrap();
        for a in 1..6 {
            for b in 1..6 {
                for c in 1..6 {
                    assert!(m.score(&[a, b, c]).unwrap() <= best);
                }
            }
        }
    }

    #[test]
    fn unigram_ignores_order() {
        let m = lm(&[vec![2, 3, 3], vec![4, 2], vec![5]], 7, 1);
        assert_eq!(m.score(&[2, 3, 4]).unwrap(), m.score(&[4, 3, 2]).unwrap());
    }

    #[test]
    fn unseen_context_is_the_lower_order_distribution() {
        let m = lm(&[vec![2, 3], vec![3, 4], vec![2, 4, 5]], 7, 3);
        // Token 6 never occurs, so neither (6, 6) nor (6) is a seen context.
        for w in m.alphabet() {
            assert_eq!(m.prob(&[6, 6], w), m.prob(&[6], w));
            assert_eq!(m.prob(&[6], w), m.prob_at(1, &[], w));
        }
    }

    #[test]
    fn rebuild_from_counts_is_identical() {
        let m = lm(&[vec![2, 3], vec![3, 4, 2]], 6, 3);
        let r = NgramLm::from_counts(m.raw_counts().clone(), 6, m.config().clone()).unwrap();
        assert_eq!(m, r);
    }

    #[test]
    fn scores_are_nonpositive_and_stable() {
        let m = lm(&[vec![2, 3], vec![3, 4, 2]], 6, 3);
        let s = m.score(&[1, 5, 5]).unwrap();
        assert!(s <= 0.0 && s.is_finite());
        assert_eq!(s, m.score(&[1, 5, 5]).unwrap());
        assert!(m.score(&[]).is_err());
    }

    fn synthetic(n: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>, crate::corpus::Vocabulary) {
        let pairs = generate_synthetic(&SyntheticConfig { n_pairs: n, ..desk_config() }).unwrap();
        let (train, val) = split(&pairs, 0.1, 1).unwrap();
        let vocab = build_vocabulary(&train, 2).unwrap();
        let enc = |ps: &[crate::corpus::MessageReplyPair]| -> Vec<Vec<u32>> {
            ps.iter().map(|p| vocab.encode(&p.reply)).collect()
        };
        (enc(&train), enc(&val), vocab)
    }

    #[test]
    fn trigram_beats_unigram_on_held_out() {
        let (train, val, vocab) = synthetic(8000);
        let p1 = lm(&train, vocab.len(), 1).perplexity(&val);
        let p3 = lm(&train, vocab.len(), 3).perplexity(&val);
        assert!(p3 < p1, "order-3 {p3} vs order-1 {p1}");
    }

    // Under mean normalization a long template reply wins: its inner
    // transitions are nearly deterministic. Summed log-probability keeps
    // the length penalty.
    #[test]
    fn frequent_short_reply_beats_rare_long_one_when_summed() {
        let (train, _, vocab) = synthetic(8000);
        let cfg = LmConfig { normalize: LmNormalize::Sum, ..LmConfig::default() };
        let m = NgramLm::train(&train, vocab.len(), cfg).unwrap();
        let ok = vocab.encode(&["ok"]);
        let mut counts: BTreeMap<&Vec<u32>, usize> = BTreeMap::new();
        for r in train.iter().filter(|r| r.len() == 9) {
            *counts.entry(r).or_default() += 1;
        }
        let rarest = counts.iter().min_by_key(|(_, &c)| c).map(|(r, _)| (*r).clone()).unwrap();
        let (s_ok, s_rare) = (m.score(&ok).unwrap(), m.score(&rarest).unwrap());
        assert!(s_ok > s_rare, "ok {s_ok} vs {:?} {s_rare}", vocab.decode(&rarest));
    }
}
