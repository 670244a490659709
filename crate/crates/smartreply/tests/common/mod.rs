#![allow(dead_code)]

use std::path::Path;

use smartreply::lifecycle::LifecycleConfig;
use smartreply::workdir::Workdir;
use smartreply_core::corpus::SyntheticConfig;
use smartreply_core::encoder::EncoderConfig;

/// A configuration that trains every stage in seconds.
pub fn small_config() -> LifecycleConfig {
    let mut cfg = LifecycleConfig::default();
    cfg.corpus = SyntheticConfig { n_pairs: 1_500, ..cfg.corpus };
    cfg.encoder = EncoderConfig { embed_dim: 16, hidden: 16, ..cfg.encoder };
    cfg.matching.epochs = 1;
    cfg.response_set.lm_top = 80;
    cfg.cvae.z_dim = 16;
    cfg.cvae.epochs = 1;
    cfg.pipeline.samples = 50;
    cfg.eval.messages = 40;
    cfg.bench.warmup = 2;
    cfg.bench.queries = 10;
    cfg
}

/// Runs every training stage into `root`.
pub fn train_into(root: &Path, cfg: &LifecycleConfig) {
    let w = Workdir::new(root, cfg.clone());
    let mut quiet = |_: String| {};
    w.gen_corpus(None).unwrap();
    w.train_matching(None, &mut quiet).unwrap();
    w.train_lm(None, &mut quiet).unwrap();
    w.build_response_set(None, &mut quiet).unwrap();
    w.train_cvae(None, &mut quiet).unwrap();
}
