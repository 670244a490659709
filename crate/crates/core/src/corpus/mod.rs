//! Tokenization, vocabulary, message-reply pairs and the synthetic
//! intent-labelled conversation generator.

mod synthetic;
mod tokenize;
mod vocab;

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use synthetic::{
    desk_config, generate_synthetic, separable_two_intent_config, FamilyWeight, IntentTemplate,
    ReplyFamily, SyntheticConfig, Variant,
};
pub use tokenize::{detokenize, is_punctuation, tokenize};
pub use vocab::{Vocabulary, PAD, PAD_ID, UNK, UNK_ID};

use crate::error::{contract, Result};
use crate::rng::Rng;

pub const DEFAULT_MAX_LEN: usize = 30;

/// Message intent plus the reply family the reply was drawn from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntentLabel {
    pub message: String,
    pub reply: String,
}

impl IntentLabel {
    /// Parses `message_intent:reply_intent`; a bare name labels both sides.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.is_empty() {
            return None;
        }
        let (m, r) = s.split_once(':').unwrap_or((s, s));
        Some(Self {
            message: m.to_string(),
            reply: r.to_string(),
        })
    }
}

impl fmt::Display for IntentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.message, self.reply)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageReplyPair {
    pub message: Vec<String>,
    pub reply: Vec<String>,
    /// Raw reply text, kept for display in the response set.
    pub reply_text: String,
    pub intent: Option<IntentLabel>,
}

impl MessageReplyPair {
    /// Tokenizes both sides. Returns `None` when either side is empty or
    /// longer than `max_len` tokens.
    pub fn from_text(
        message: &str,
        reply: &str,
        intent: Option<IntentLabel>,
        max_len: usize,
    ) -> Option<Self> {
        let m = tokenize(message);
        let r = tokenize(reply);
        let ok = |t: &Vec<String>| !t.is_empty() && t.len() <= max_len;
        (ok(&m) && ok(&r)).then(|| Self {
            message: m,
            reply: r,
            reply_text: reply.trim().to_string(),
            intent,
        })
    }
}

/// Parses `message \t reply [\t intent]` lines. Blank lines and lines
/// starting with `#` are skipped; pairs failing the length rules are dropped.
/// Returns the pairs and the number of dropped lines.
pub fn parse_tsv(text: &str, max_len: usize) -> Result<(Vec<MessageReplyPair>, usize)> {
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(m), Some(r)) = (cols.next(), cols.next()) else {
            return Err(contract(alloc::format!(
                "line {}: expected message<TAB>reply",
                lineno + 1
            )));
        };
        let label = cols.next().and_then(IntentLabel::parse);
        match MessageReplyPair::from_text(m, r, label, max_len) {
            Some(p) => pairs.push(p),
            None => dropped += 1,
        }
    }
    Ok((pairs, dropped))
}

pub fn to_tsv(pairs: &[MessageReplyPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&detokenize(&p.message));
        s.push('\t');
        s.push_str(&p.reply_text);
        if let Some(l) = &p.intent {
            s.push('\t');
            s.push_str(&l.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn build_vocabulary(pairs: &[MessageReplyPair], min_frequency: u64) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(contract("cannot build a vocabulary from zero pairs"));
    }
    let seqs = pairs
        .iter()
        .flat_map(|p| [p.message.as_slice(), p.reply.as_slice()]);
    Ok(Vocabulary::build(seqs, min_frequency))
}

/// Seeded shuffle split. The validation side gets `round(n·fraction)`
/// pairs, clamped so neither side is empty when `n ≥ 2`.
pub fn split(
    pairs: &[MessageReplyPair],
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<MessageReplyPair>, Vec<MessageReplyPair>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(contract("validation fraction must be in (0, 1)"));
    }
    let n = pairs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let mut n_val = libm::round(n as f64 * validation_fraction) as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let (val_idx, train_idx) = idx.split_at(n_val.min(n));
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| pairs[i].clone()).collect(),
        val_idx.iter().map(|&i| pairs[i].clone()).collect(),
    ))
}

/// Drops pairs whose message or reply contains a blocklisted token.
pub fn filter_blocklist(pairs: Vec<MessageReplyPair>, blocklist: &[String]) -> Vec<MessageReplyPair> {
    if blocklist.is_empty() {
        return pairs;
    }
    let blocked: Vec<String> = blocklist.iter().map(|w| w.to_lowercase()).collect();
    pairs
        .into_iter()
        .filter(|p| {
            !p.message
                .iter()
                .chain(&p.reply)
                .any(|t| blocked.iter().any(|b| b == t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn pairs(n: usize) -> Vec<MessageReplyPair> {
        (0..n)
            .map(|i| {
                MessageReplyPair::from_text(&alloc::format!("m{i}"), "ok", None, 30).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_ninety_ten() {
        let (t, v) = split(&pairs(100), 0.1, 1).unwrap();
        assert_eq!((t.len(), v.len()), (90, 10));
    }

    #[test]
    fn split_half_of_two() {
        let (t, v) = split(&pairs(2), 0.5, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    #[test]
    fn split_is_seeded() {
        let p = pairs(50);
        assert_eq!(split(&p, 0.2, 7).unwrap(), split(&p, 0.2, 7).unwrap());
        assert!(split(&p, 1.0, 7).is_err());
        assert!(split(&p, 0.0, 7).is_err());
    }

    #[test]
    fn long_pairs_are_dropped() {
        let long = vec!["word"; 31].join(" ");
        assert!(MessageReplyPair::from_text(&long, "ok", None, 30).is_none());
        assert!(MessageReplyPair::from_text("hi", "", None, 30).is_none());
    }

    #[test]
    fn tsv_round_trip() {
        let text = "want to meet up for lunch ?\tSure!\tlunch-invite:accept\nhi\tHello\n";
        let (p, dropped) = parse_tsv(text, 30).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(p[0].intent.as_ref().unwrap().reply, "accept");
        assert_eq!(parse_tsv(&to_tsv(&p), 30).unwrap().0, p);
        assert!(parse_tsv("no tab here", 30).is_err());
    }

    #[test]
    fn blocklist_filters() {
        let p = vec![
            MessageReplyPair::from_text("hi", "darn it", None, 30).unwrap(),
            MessageReplyPair::from_text("hi", "ok", None, 30).unwrap(),
        ];
        assert_eq!(filter_blocklist(p, &["Darn".into()]).len(), 1);
    }

    #[test]
    fn zipf_head_is_about_twice_the_second() {
        // At s = 1 the expected ratio is exactly 2, so the observed count
        // sits on either side of it; check it within sampling error.
        let cfg = SyntheticConfig {
            n_pairs: 10_000,
            seed: 11,
            ..desk_config()
        };
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for p in generate_synthetic(&cfg).unwrap() {
            *counts.entry(p.intent.unwrap().message).or_default() += 1;
        }
        let mut c: Vec<usize> = counts.into_values().collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        let ratio = c[0] as f64 / c[1] as f64;
        assert!(ratio >= 1.8 && ratio <= 2.25, "ratio {ratio}");
    }

    #[test]
    fn vocabulary_is_stable_across_regeneration() {
        let cfg = SyntheticConfig {
            n_pairs: 5_000,
            ..desk_config()
        };
        let a = build_vocabulary(&generate_synthetic(&cfg).unwrap(), 2).unwrap();
        let b = build_vocabulary(&generate_synthetic(&cfg).unwrap(), 2).unwrap();
        assert_eq!(a, b);
        assert!(a.len() > 100);
    }
}
