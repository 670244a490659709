//! Latency harness: every ranker answers the same queries, interleaved so
//! drift affects all of them alike. Timings exclude any network.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use smartreply_core::inference::{
    count_multiplications, Clock, CostReport, PipelineConfig, Ranker, StageTimings, SuggestionEngine,
};

use crate::lifecycle::BenchConfig;
use crate::{Error, Result};

/// Microseconds since construction, from the monotonic clock.
pub struct StdClock {
    origin: Instant,
}

impl StdClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_micros(&self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }
}

pub const UNCONSTRAINED: &str = "mcvae-unconstrained";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub mean: f64,
}

/// Nearest-rank percentiles.
pub fn percentiles(values: &[u64]) -> Percentiles {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    let rank = |p: f64| v[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    Percentiles {
        p50: rank(0.50),
        p95: rank(0.95),
        p99: rank(0.99),
        mean: v.iter().sum::<u64>() as f64 / n as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ranker: String,
    pub total: Percentiles,
    pub throughput_qps: f64,
    /// Median of each stage.
    pub stages: StageTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub queries: usize,
    pub rows: Vec<BenchRow>,
    pub analytic: CostReport,
    /// Median vote (candidate scoring) time, unconstrained over constrained.
    pub scoring_speedup: Option<f64>,
    /// Same ratio over sample + vote, i.e. including the shared decoder.
    pub sample_vote_speedup: Option<f64>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.ranker == name)
    }
}

fn resolve(name: &str, base: &PipelineConfig) -> Result<(Ranker, PipelineConfig)> {
    if name == UNCONSTRAINED {
        let cfg = PipelineConfig {
            unconstrained: true,
            ..base.clone()
        };
        return Ok((Ranker::Mcvae, cfg));
    }
    Ok((name.parse()?, base.clone()))
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

pub fn bench(
    engine: &SuggestionEngine,
    messages: &[String],
    config: &BenchConfig,
    pipeline: &PipelineConfig,
) -> Result<BenchReport> {
    if messages.is_empty() || config.queries == 0 {
        return Err(Error::Contract("bench needs at least one message and one timed query".into()));
    }
    let rankers: Vec<(String, Ranker, PipelineConfig)> = config
        .rankers
        .iter()
        .map(|n| resolve(n, pipeline).map(|(r, c)| (n.clone(), r, c)))
        .collect::<Result<_>>()?;
    let clock = StdClock::new();
    for i in 0..config.warmup {
        for (_, r, c) in &rankers {
            engine.suggest(&messages[i % messages.len()], *r, c, &clock)?;
        }
    }
    let mut samples: Vec<Vec<StageTimings>> = vec![Vec::with_capacity(config.queries); rankers.len()];
    for i in 0..config.queries {
        let msg = &messages[i % messages.len()];
        for (j, (_, r, c)) in rankers.iter().enumerate() {
            samples[j].push(engine.suggest(msg, *r, c, &clock)?.timings);
        }
    }
    let mut rows = Vec::new();
    for ((name, _, _), s) in rankers.iter().zip(&samples) {
        let col = |f: fn(&StageTimings) -> u64| s.iter().map(f).collect::<Vec<u64>>();
        let total = col(|t| t.total_us);
        let busy: u64 = total.iter().sum();
        rows.push(BenchRow {
            ranker: name.clone(),
            total: percentiles(&total),
            throughput_qps: s.len() as f64 / (busy.max(1) as f64 / 1e6),
            stages: StageTimings {
                encode_us: median(&mut col(|t| t.encode_us)),
                score_us: median(&mut col(|t| t.score_us)),
                preselect_us: median(&mut col(|t| t.preselect_us)),
                sample_us: median(&mut col(|t| t.sample_us)),
                vote_us: median(&mut col(|t| t.vote_us)),
                dedup_us: median(&mut col(|t| t.dedup_us)),
                total_us: median(&mut col(|t| t.total_us)),
            },
        });
    }
    let a = &engine.artifact;
    let (z, h) = engine.cvae.as_ref().map_or((0, 0), |c| (c.z_dim, c.hidden));
    let analytic = count_multiplications(pipeline.k.min(a.len()), a.len(), a.dim(), z, h, pipeline.samples);
    let find = |n: &str| rows.iter().find(|r| r.ranker == n);
    let ratio = |f: fn(&BenchRow) -> u64| match (find(UNCONSTRAINED), find("mcvae")) {
        (Some(u), Some(c)) => Some(f(u) as f64 / f(c).max(1) as f64),
        _ => None,
    };
    Ok(BenchReport {
        warmup: config.warmup,
        queries: config.queries,
        scoring_speedup: ratio(|r| r.stages.vote_us),
        sample_vote_speedup: ratio(|r| r.stages.sample_us + r.stages.vote_us),
        rows,
        analytic,
    })
}
