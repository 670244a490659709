//! Lifecycle stages over a working directory with fixed file names.

use std::path::{Path, PathBuf};

use serde_json::json;
use smartreply_core::corpus::{generate_synthetic, MessageReplyPair};
use smartreply_core::inference::{ResponseSetArtifact, SuggestionEngine};
use smartreply_core::mcvae::CvaeRun;

use crate::bench::{bench, BenchReport};
use crate::eval::{eval_messages, evaluate, EvalReport};
use crate::io;
use crate::lifecycle::{compatibility, prepare_corpus, run_cvae, run_lm, run_matching, run_response_set, Corpus, LifecycleConfig};
use crate::{Error, Result};

pub const CORPUS: &str = "corpus.tsv";
pub const MATCHING: &str = "matching.srm";
pub const LM: &str = "lm.srm";
pub const RESPONSE_SET_DIR: &str = "response_set";
pub const CVAE: &str = "cvae.srm";
pub const EVAL: &str = "eval.json";
pub const BENCH: &str = "bench.json";

pub struct Workdir {
    pub root: PathBuf,
    pub config: LifecycleConfig,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>, config: LifecycleConfig) -> Self {
        Self {
            root: root.into(),
            config,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn out_or(&self, out: Option<&Path>, name: &str) -> PathBuf {
        out.map_or_else(|| self.path(name), Path::to_path_buf)
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Contract(format!("{} not found; run `{stage}` first", p.display())));
        }
        Ok(p)
    }

    pub fn gen_corpus(&self, out: Option<&Path>) -> Result<(PathBuf, usize)> {
        let pairs = generate_synthetic(&self.config.corpus)?;
        let path = self.out_or(out, CORPUS);
        io::write_corpus(&path, &pairs)?;
        Ok((path, pairs.len()))
    }

    /// Reads the corpus and reproduces the train/validation split.
    pub fn corpus(&self, log: &mut dyn FnMut(String)) -> Result<Corpus> {
        let path = self.require(CORPUS, "gen-corpus")?;
        let (pairs, dropped) = io::read_corpus(&path, self.config.corpus.max_len)?;
        if dropped > 0 {
            log(format!("dropped {dropped} pairs with an empty side or over {} tokens", self.config.corpus.max_len));
        }
        prepare_corpus(&pairs, &self.config)
    }

    pub fn train_matching(&self, out: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<PathBuf> {
        let corpus = self.corpus(log)?;
        let run = run_matching(&corpus, &self.config, log)?;
        let corpus_hash = io::file_hash(&self.path(CORPUS))?;
        let path = self.out_or(out, MATCHING);
        io::save_encoder(
            &path,
            &run.encoder,
            &corpus.vocab,
            json!({
                "matching": self.config.matching,
                "split_seed": self.config.split_seed,
                "corpus_hash": corpus_hash,
                "val_losses": run.val_losses,
                "best_epoch": run.best_epoch,
                "created_unix": unix_now(),
            }),
        )?;
        Ok(path)
    }

    pub fn train_lm(&self, out: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<PathBuf> {
        let corpus = self.corpus_with_model_vocab(log)?;
        let lm = run_lm(&corpus, &self.config)?;
        let path = self.out_or(out, LM);
        io::save_lm(&path, &lm)?;
        Ok(path)
    }

    /// The split with the vocabulary stored in the matching model, so ids agree.
    fn corpus_with_model_vocab(&self, log: &mut dyn FnMut(String)) -> Result<Corpus> {
        let mut corpus = self.corpus(log)?;
        let (_, vocab) = io::load_encoder(&self.require(MATCHING, "train-matching")?)?;
        corpus.vocab = vocab;
        Ok(corpus)
    }

    pub fn build_response_set(&self, out: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<(PathBuf, ResponseSetArtifact)> {
        let corpus = self.corpus_with_model_vocab(log)?;
        let model = self.require(MATCHING, "train-matching")?;
        let (encoder, _) = io::load_encoder(&model)?;
        let lm = io::load_lm(&self.require(LM, "train-lm")?)?;
        let (artifact, warnings) = run_response_set(&corpus, &encoder, &lm, &self.config, &io::file_hash(&model)?)?;
        for w in warnings {
            log(format!("warning: {w}"));
        }
        let dir = self.out_or(out, RESPONSE_SET_DIR);
        io::save_response_set(&dir, &artifact)?;
        Ok((dir, artifact))
    }

    pub fn train_cvae(&self, out: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<(PathBuf, CvaeRun)> {
        let corpus = self.corpus_with_model_vocab(log)?;
        let model = self.require(MATCHING, "train-matching")?;
        let (encoder, _) = io::load_encoder(&model)?;
        let run = run_cvae(&corpus, &encoder, &self.config, log)?;
        let path = self.out_or(out, CVAE);
        io::save_cvae(
            &path,
            &run.params,
            &io::file_hash(&model)?,
            json!({
                "cvae": self.config.cvae,
                "val": run.val,
                "best_epoch": run.best_epoch,
                "collapse_warning": run.collapse_warning,
                "created_unix": unix_now(),
            }),
        )?;
        Ok((path, run))
    }

    /// Loads the matching model, response set and (when present) the CVAE,
    /// checking that all of them were built on the same matching model.
    pub fn engine(&self, need_cvae: bool, log: &mut dyn FnMut(String)) -> Result<(SuggestionEngine, String)> {
        let model = self.require(MATCHING, "train-matching")?;
        let hash = io::file_hash(&model)?;
        let (encoder, vocab) = io::load_encoder(&model)?;
        let rs_dir = self.path(RESPONSE_SET_DIR);
        if !rs_dir.join(io::RESPONSE_SET_FILE).exists() {
            return Err(Error::Contract(format!("{} not found; run `build-response-set` first", rs_dir.display())));
        }
        let (artifact, warnings) = io::load_response_set(&rs_dir)?;
        for w in warnings {
            log(format!("warning: {w}"));
        }
        if artifact.meta.model_hash != hash {
            return Err(Error::Contract("response set was built from a different matching model; rebuild it".into()));
        }
        let cvae_path = self.path(CVAE);
        let cvae = if cvae_path.exists() {
            let (p, base) = io::load_cvae(&cvae_path)?;
            if base != hash {
                return Err(Error::Contract("CVAE was trained on a different matching model; retrain it".into()));
            }
            Some(p)
        } else if need_cvae {
            return Err(Error::Contract(format!("{} not found; run `train-cvae` first", cvae_path.display())));
        } else {
            None
        };
        let engine = SuggestionEngine::new(vocab, encoder, artifact, cvae, self.config.corpus.max_len)?;
        Ok((engine, hash))
    }

    fn held_out(&self, log: &mut dyn FnMut(String)) -> Result<Vec<MessageReplyPair>> {
        Ok(self.corpus(log)?.val)
    }

    pub fn eval(&self, out: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<(PathBuf, EvalReport)> {
        let need = self.config.eval.rankers.iter().chain([&self.config.eval.baseline]).any(|r| r.needs_cvae());
        let (engine, _) = self.engine(need, log)?;
        let msgs = eval_messages(&self.held_out(log)?, self.config.eval.messages);
        let report = evaluate(
            &engine,
            &self.config.eval.rankers,
            self.config.eval.baseline,
            &msgs,
            &compatibility(&self.config),
            &self.config.pipeline,
        )?;
        let path = self.out_or(out, EVAL);
        io::write_json(&path, &report)?;
        Ok((path, report))
    }

    pub fn bench(&self, out: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<(PathBuf, BenchReport)> {
        let need = self.config.bench.rankers.iter().any(|r| r.starts_with("mcvae"));
        let (engine, _) = self.engine(need, log)?;
        let msgs: Vec<String> = eval_messages(&self.held_out(log)?, usize::MAX).into_iter().map(|m| m.text).collect();
        let report = bench(&engine, &msgs, &self.config.bench, &self.config.pipeline)?;
        let path = self.out_or(out, BENCH);
        io::write_json(&path, &report)?;
        Ok((path, report))
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}
