//! Label-based duplicate, defect and coverage proxies over held-out messages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use smartreply_core::corpus::MessageReplyPair;
use smartreply_core::inference::{NullClock, PipelineConfig, Ranker, SuggestionEngine, SuggestionResult};

use crate::Result;

/// A held-out message with its ground-truth message intent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMessage {
    pub text: String,
    pub intent: String,
}

/// Distinct labelled messages, in first-seen order, capped at `limit`.
pub fn eval_messages(pairs: &[MessageReplyPair], limit: usize) -> Vec<EvalMessage> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in pairs {
        let Some(label) = &p.intent else { continue };
        let text = p.message.join(" ");
        if seen.insert(text.clone()) {
            out.push(EvalMessage {
                text,
                intent: label.message.clone(),
            });
            if out.len() == limit {
                break;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ranker: Ranker,
    /// Share of messages whose suggestions hold two replies with a common
    /// lexical cluster or reply intent.
    pub duplicate_rate: f64,
    /// Share of messages whose top suggestion's intent is incompatible.
    pub defect_rate: f64,
    /// Mean number of distinct reply intents among the suggestions.
    pub intent_coverage: f64,
    pub mean_suggestions: f64,
    pub duplicate_delta: f64,
    pub defect_delta: f64,
    /// `(rate − baseline) / baseline`; absent when the baseline rate is 0.
    pub duplicate_relative: Option<f64>,
    pub defect_relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub messages: usize,
    pub baseline: Ranker,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, ranker: Ranker) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.ranker == ranker)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MessageOutcome {
    pub duplicate: bool,
    pub defect: bool,
    pub intents: usize,
    pub suggestions: usize,
}

/// Scores one suggestion list against the compatibility table.
pub fn judge(
    result: &SuggestionResult,
    message_intent: &str,
    compatible: &BTreeMap<String, Vec<String>>,
) -> MessageOutcome {
    let s = &result.suggestions;
    let mut duplicate = false;
    for (i, a) in s.iter().enumerate() {
        for b in &s[i + 1..] {
            let same_intent = matches!((&a.intent, &b.intent), (Some(x), Some(y)) if x == y);
            duplicate |= a.cluster == b.cluster || same_intent;
        }
    }
    let ok = compatible.get(message_intent);
    let defect = match s.first() {
        Some(top) => match (&top.intent, ok) {
            (Some(i), Some(list)) => !list.contains(i),
            _ => true,
        },
        None => true,
    };
    let intents: BTreeSet<&String> = s.iter().filter_map(|x| x.intent.as_ref()).collect();
    MessageOutcome {
        duplicate,
        defect,
        intents: intents.len(),
        suggestions: s.len(),
    }
}

/// Runs every ranker over the messages; deltas are against `baseline`,
/// which is evaluated even when absent from `rankers`.
pub fn evaluate(
    engine: &SuggestionEngine,
    rankers: &[Ranker],
    baseline: Ranker,
    messages: &[EvalMessage],
    compatible: &BTreeMap<String, Vec<String>>,
    pipeline: &PipelineConfig,
) -> Result<EvalReport> {
    if messages.is_empty() {
        return Err(crate::Error::Contract("no labelled evaluation messages".into()));
    }
    let n = messages.len() as f64;
    let mut raw: BTreeMap<Ranker, (f64, f64, f64, f64)> = BTreeMap::new();
    let mut all: Vec<Ranker> = rankers.to_vec();
    if !all.contains(&baseline) {
        all.push(baseline);
    }
    for &ranker in &all {
        if raw.contains_key(&ranker) {
            continue;
        }
        let mut acc = (0.0, 0.0, 0.0, 0.0);
        for m in messages {
            let res = engine.suggest(&m.text, ranker, pipeline, &NullClock)?;
            let o = judge(&res, &m.intent, compatible);
            acc.0 += o.duplicate as u8 as f64;
            acc.1 += o.defect as u8 as f64;
            acc.2 += o.intents as f64;
            acc.3 += o.suggestions as f64;
        }
        raw.insert(ranker, (acc.0 / n, acc.1 / n, acc.2 / n, acc.3 / n));
    }
    let base = raw[&baseline];
    let relative = |v: f64, b: f64| (b > 0.0).then(|| (v - b) / b);
    let mut rows = Vec::new();
    let mut emitted = BTreeSet::new();
    for &ranker in rankers {
        if !emitted.insert(ranker) {
            continue;
        }
        let (dup, def, cov, ns) = raw[&ranker];
        rows.push(EvalRow {
            ranker,
            duplicate_rate: dup,
            defect_rate: def,
            intent_coverage: cov,
            mean_suggestions: ns,
            duplicate_delta: dup - base.0,
            defect_delta: def - base.1,
            duplicate_relative: relative(dup, base.0),
            defect_relative: relative(def, base.1),
        });
    }
    Ok(EvalReport {
        messages: messages.len(),
        baseline,
        rows,
    })
}
