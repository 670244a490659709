//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line whether or not output is captured.
//! Exits non-zero when any line fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use smartreply::bench::bench;
use smartreply::eval::eval_messages;
use smartreply::io::{
    load_cvae, load_encoder, load_lm, load_response_set, save_cvae, save_encoder, save_lm, save_response_set,
    MANIFEST_FILE, RESPONSE_SET_FILE,
};
use smartreply::lifecycle::{
    prepare_corpus, run_all, run_cvae, run_lm, run_matching, run_response_set, BenchConfig, LifecycleConfig,
    LifecycleRun,
};
use smartreply::persist::{ModelContainer, PersistError};
use smartreply_core::corpus::{
    build_vocabulary, desk_config, generate_synthetic, separable_two_intent_config, SyntheticConfig,
};
use smartreply_core::diversify::{build_clusters, mmr_rerank, LexicalTables};
use smartreply_core::encoder::{EncoderConfig, EncoderKind, EncoderParams, Mode, Side};
use smartreply_core::gradcheck::grad_check;
use smartreply_core::inference::{
    build_response_set, sample_decoded, NullClock, PipelineConfig, Ranker, ResponseSetConfig, SuggestionEngine,
};
use smartreply_core::lm::{LmConfig, NgramLm};
use smartreply_core::matching::symmetric_loss;
use smartreply_core::mcvae::{elbo_on_tape, kl_divergence, reparameterize, CvaeConfig, CvaeParams};
use smartreply_core::rng::sample_gaussian;
use smartreply_core::{Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {name} ({secs:.1}s): {detail}");
            true
        }
        Err(why) => {
            println!("FAIL {name} ({secs:.1}s): {why}");
            false
        }
    }
}

fn random64(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor<f64> {
    let mut t = sample_gaussian(rng, shape).unwrap();
    t.data_mut().iter_mut().for_each(|x| *x *= scale);
    t.cast()
}

fn math_kernels() -> Outcome {
    let started = Instant::now();
    ensure!(symmetric_loss(&Tensor::scalar(3.7)).map_err(err)? == 0.0, "batch of one must give zero loss");
    let zero2 = symmetric_loss(&Tensor::zeros(&[2, 2])).map_err(err)?;
    ensure!((zero2 as f64 - 3f64.ln()).abs() < 1e-6, "all-zero batch of two gave {zero2}, expected ln 3");

    ensure!(kl_divergence(&[0.0; 8], &[1.0; 8]).map_err(err)? == 0.0, "KL(N(0,1) || N(0,1)) must be 0");
    let cases: [(&[f32], &[f32], f64); 3] = [
        (&[1.0], &[1.0], 0.5),
        (&[0.0], &[2.0], 0.5 * (3.0 - 4f64.ln())),
        (&[1.0, -2.0], &[0.5, 1.0], 0.5 * (1.0 + 0.25 - 1.0 - 0.25f64.ln()) + 0.5 * 4.0),
    ];
    for (mu, sigma, expect) in cases {
        let kl = kl_divergence(mu, sigma).map_err(err)? as f64;
        ensure!((kl - expect).abs() < 1e-6, "KL for mu {mu:?} sigma {sigma:?} was {kl}, expected {expect}");
    }

    let mu = [0.5f32, -1.0, 2.0];
    let sigma = [0.1f32, 2.0, 1.0];
    let eps = [0.3f32, -0.7, 1.1];
    ensure!(reparameterize(&mu, &sigma, &[0.0; 3]).map_err(err)? == mu, "eps = 0 must return mu");
    ensure!(reparameterize(&[0.0; 3], &[1.0; 3], &eps).map_err(err)? == eps, "mu = 0, sigma = 1 must return eps");
    let z = reparameterize(&mu, &sigma, &eps).map_err(err)?;
    ensure!(
        z.iter().zip([0.53f32, -2.4, 3.1]).all(|(a, b)| (a - b).abs() < 1e-6),
        "z = mu + sigma * eps gave {z:?}"
    );

    let mut worst: Vec<(&str, f64)> = Vec::new();
    let sq = grad_check(
        |tape, v| {
            let s = tape.mul(v[0], v[0])?;
            Ok(tape.sum_all(s))
        },
        &[Tensor::scalar(3.0)],
        1e-4,
    )
    .map_err(err)?;
    ensure!(sq.max_rel_error < 1e-6, "x^2 at 3: {:e}", sq.max_rel_error);
    worst.push(("x^2", sq.max_rel_error));

    let mut rng = Rng::new(11);
    let x = random64(&mut rng, &[4, 3], 1.0);
    let net = [
        random64(&mut rng, &[3, 5], 0.5),
        random64(&mut rng, &[1, 5], 0.1),
        random64(&mut rng, &[5, 2], 0.5),
        random64(&mut rng, &[1, 2], 0.1),
    ];
    let r = grad_check(
        |tape, v| {
            let x = tape.constant(x.clone());
            let h = tape.matmul(x, v[0])?;
            let h = tape.add_row(h, v[1])?;
            let h = tape.tanh(h);
            let o = tape.matmul(h, v[2])?;
            let o = tape.add_row(o, v[3])?;
            let o = tape.sigmoid(o);
            let sq = tape.mul(o, o)?;
            Ok(tape.sum_all(sq))
        },
        &net,
        1e-3,
    )
    .map_err(err)?;
    worst.push(("two-layer net", r.max_rel_error));

    let ops = [
        random64(&mut rng, &[3, 4], 0.7),
        random64(&mut rng, &[3, 4], 0.7),
        random64(&mut rng, &[5, 4], 0.7),
    ];
    let r = grad_check(
        |tape, v| {
            let (a, b, table) = (v[0], v[1], v[2]);
            let g = tape.gather(table, &[4, 0, 4])?;
            let s = tape.add(a, g)?;
            let m = tape.mul(s, b)?;
            let e = tape.exp(m);
            let l = tape.log(e)?;
            let c = tape.concat_cols(l, a)?;
            let sl = tape.slice_cols(c, 2, 6)?;
            let sel = tape.select_rows(&[true, false, true], sl, b)?;
            let stacked = tape.concat_rows(&[sel, a])?;
            let sr = tape.slice_rows(stacked, 1, 4)?;
            let sr = tape.tanh(sr);
            let sr = tape.sigmoid(sr);
            let t = tape.transpose(sr)?;
            let sq = tape.matmul(sr, t)?;
            let nll = tape.symmetric_nll(sq)?;
            let rows = tape.sum_rows(sel)?;
            let rows = tape.offset(rows, 2.0);
            let rows = tape.scale(rows, 0.5);
            let m = tape.mean_all(rows);
            tape.add(nll, m)
        },
        &ops,
        1e-4,
    )
    .map_err(err)?;
    worst.push(("every tape op", r.max_rel_error));

    let xy = [random64(&mut rng, &[3, 4], 1.0), random64(&mut rng, &[3, 4], 1.0)];
    let r = grad_check(
        |tape, v| {
            let yt = tape.transpose(v[1])?;
            let theta = tape.matmul(v[0], yt)?;
            tape.symmetric_nll(theta)
        },
        &xy,
        1e-3,
    )
    .map_err(err)?;
    worst.push(("symmetric loss, 3 pairs", r.max_rel_error));

    for (label, kind) in [("bilstm encoders", EncoderKind::BiLstm), ("feed-forward encoders", EncoderKind::FeedForward)] {
        let cfg = EncoderConfig {
            kind,
            vocab_size: 14,
            embed_dim: 5,
            hidden: 4,
            ff_dim: 6,
            layers: 2,
            dropout: 0.0,
            init_scale: 0.3,
            ..EncoderConfig::default()
        };
        let e = EncoderParams::new(cfg, &mut Rng::new(8)).map_err(err)?;
        let msgs: Vec<Vec<u32>> = vec![vec![2, 3, 4], vec![5], vec![6, 7]];
        let reps: Vec<Vec<u32>> = vec![vec![8, 9], vec![10, 11, 2, 3], vec![4]];
        let params: Vec<Tensor<f64>> = e.params.tensors().iter().map(|t| t.cast()).collect();
        let r = grad_check(
            |tape, vars| {
                let x = e.forward(tape, vars, Side::Message, &msgs, &mut Mode::Infer)?;
                let y = e.forward(tape, vars, Side::Reply, &reps, &mut Mode::Infer)?;
                let yt = tape.transpose(y)?;
                let theta = tape.matmul(x, yt)?;
                tape.symmetric_nll(theta)
            },
            &params,
            1e-4,
        )
        .map_err(err)?;
        worst.push((label, r.max_rel_error));
    }

    let mut rng = Rng::new(4);
    let p = CvaeParams::new(4, 3, 5, 0.6, &mut rng).map_err(err)?;
    let f32s = |rng: &mut Rng, shape: &[usize]| sample_gaussian(rng, shape).unwrap();
    let (x, y, eps) = (f32s(&mut rng, &[8, 4]), f32s(&mut rng, &[8, 4]), f32s(&mut rng, &[8, 3]));
    let params: Vec<Tensor<f64>> = p.params.tensors().iter().map(|t| t.cast()).collect();
    let r = grad_check(|tape, v| elbo_on_tape(&p, tape, v, &x, &y, &eps, 0.7), &params, 1e-4).map_err(err)?;
    worst.push(("full ELBO, frozen noise", r.max_rel_error));

    let bad: Vec<String> =
        worst.iter().filter(|(_, e)| *e >= 1e-3).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    ensure!(bad.is_empty(), "gradient checks above 1e-3: {}", bad.join(", "));
    let elapsed = started.elapsed().as_secs_f64();
    ensure!(elapsed < 60.0, "suite took {elapsed:.1}s");
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!("{} gradient checks, worst relative error {max:.2e}; loss, KL and reparameterization cases exact", worst.len()))
}

/// A complete engine on random weights over a small desk corpus.
fn random_engine() -> Result<SuggestionEngine, String> {
    let corpus = SyntheticConfig { n_pairs: 4_000, seed: 41, ..desk_config() };
    let pairs = generate_synthetic(&corpus).map_err(err)?;
    let vocab = build_vocabulary(&pairs, 1).map_err(err)?;
    let mut rng = Rng::new(42);
    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        hidden: 16,
        init_scale: 0.3,
        ..EncoderConfig::default()
    };
    let encoder = EncoderParams::new(enc_cfg, &mut rng).map_err(err)?;
    let replies: Vec<Vec<u32>> = pairs.iter().map(|p| vocab.encode(&p.reply)).collect();
    let lm = NgramLm::train(&replies, vocab.len(), LmConfig::default()).map_err(err)?;
    let (artifact, _) = build_response_set(
        &pairs,
        &vocab,
        &encoder,
        &lm,
        &LexicalTables::default(),
        &ResponseSetConfig { lm_top: 200, ..ResponseSetConfig::default() },
        "random",
    )
    .map_err(err)?;
    let cvae = CvaeParams::new(encoder.output_dim(), 16, 32, 0.5, &mut rng).map_err(err)?;
    SuggestionEngine::new(vocab, encoder, artifact, Some(cvae), 30).map_err(err)
}

/// Scores every response for every sample in f64 with plain loops.
fn reference_tally(decoded: &Tensor, responses: &Tensor, lm: &[f32]) -> Vec<u32> {
    let mut votes = vec![0u32; responses.rows()];
    for i in 0..decoded.rows() {
        let z = decoded.row_slice(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for r in 0..responses.rows() {
            let y = responses.row_slice(r);
            let mut s = lm[r] as f64;
            for j in 0..z.len() {
                s += z[j] as f64 * y[j] as f64;
            }
            if s > best.0 {
                best = (s, r);
            }
        }
        votes[best.1] += 1;
    }
    votes
}

fn equivalence_oracles() -> Outcome {
    let e = random_engine()?;
    let art = &e.artifact;
    let cvae = e.cvae.as_ref().ok_or("engine without cvae")?;
    let words = e.vocab.surfaces()[2..].to_vec();
    let mut rng = Rng::new(99);
    let mut samples_checked = 0usize;
    for m in 0..100 {
        let len = 1 + rng.below(8);
        let msg: Vec<&str> = (0..len).map(|_| words[rng.below(words.len())].as_str()).collect();
        let msg = msg.join(" ");
        let cfg = PipelineConfig { k: art.len(), samples: 300, seed: 1000 + m, ..PipelineConfig::default() };
        let res = e.suggest(&msg, Ranker::McvaeNolc, &cfg, &NullClock).map_err(err)?;
        let phi_x = e.encode_message(&msg).map_err(err)?;
        let decoded = sample_decoded(&phi_x, cvae, cfg.samples, &mut Rng::new(cfg.seed)).map_err(err)?;
        let reference = reference_tally(&decoded, &art.phi_y, &art.lm_scores);
        let mut got = vec![0u32; art.len()];
        for (&id, &v) in res.ranked.iter().zip(&res.votes) {
            got[id] = v;
        }
        ensure!(got == reference, "tally mismatch on message {m} ({msg:?})");
        samples_checked += cfg.samples as usize;
    }

    let mut rng = Rng::new(7);
    for set in 0..100 {
        let k = 2 + rng.below(29);
        let d = 1 + rng.below(16);
        let scores: Vec<f32> = (0..k).map(|_| rng.normal()).collect();
        let vectors: Vec<Vec<f32>> = (0..k).map(|_| (0..d).map(|_| rng.normal() + 0.01).collect()).collect();
        let mut matching: Vec<usize> = (0..k).collect();
        matching.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let m = mmr_rerank(&scores, &vectors, 1.0).map_err(err)?;
        ensure!(m.order == matching, "beta = 1 reordered random set {set}");
    }

    let third = 1.0 / 3.0;
    let m = mmr_rerank(&[third; 3], &[[1.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.0).map_err(err)?;
    ensure!(m.novelty == vec![0.5, 0.5, 0.0], "novelty {:?}, expected [0.5, 0.5, 0]", m.novelty);
    ensure!(m.order == vec![2, 0, 1], "beta = 0 order {:?}, expected [2, 0, 1]", m.order);

    Ok(format!(
        "K = R = {} tallies equal the reference over 100 messages ({samples_checked} samples); beta = 1 keeps matching order on 100 sets; beta = 0 example ordered [2, 0, 1]",
        art.len()
    ))
}

const LC_WORDS: &[&str] = &[
    "i", "can", "can't", "cannot", "not", "no", "never", "make", "it", "thanks", "thank", "you", "so", "very",
    "much", "ok", "okay", "yes", "yeah", "ya", "sure", "see", "at", "noon", "will", "do", "good", "great", "!",
    ".", "?", ",",
];

/// Components of the join graph by breadth-first search.
fn reference_components(texts: &[String], t: &LexicalTables) -> Vec<usize> {
    let canon: Vec<Vec<String>> = texts.iter().map(|s| t.canonicalize(s)).collect();
    let n = texts.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        let mut stack = vec![start];
        while let Some(a) = stack.pop() {
            for b in 0..n {
                if comp[b] == usize::MAX && t.joins(&canon[a], &canon[b]) {
                    comp[b] = next;
                    stack.push(b);
                }
            }
        }
        next += 1;
    }
    comp
}

fn lexical_clustering() -> Outcome {
    let t = LexicalTables::default();
    let same = |a: &str, b: &str| {
        let c = build_clusters(&[a, b], &t);
        c.cluster_of(0) == c.cluster_of(1)
    };
    ensure!(same("Thanks!", "Thanks."), "punctuation variants must join");
    ensure!(same("Thank you so much.", "Thank you very much"), "one-word edit must join");
    ensure!(!same("I can make it", "I can't make it"), "negation pair must stay apart");

    let mut rng = Rng::new(2024);
    let texts: Vec<String> = (0..1000)
        .map(|_| {
            let n = 1 + rng.below(5);
            (0..n).map(|_| LC_WORDS[rng.below(LC_WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let c = build_clusters(&texts, &t);
    ensure!(c.len() == texts.len(), "clusters cover {} of {} texts", c.len(), texts.len());
    let members = c.members();
    let total: usize = members.iter().map(Vec::len).sum();
    ensure!(total == texts.len() && members.iter().all(|m| !m.is_empty()), "members do not partition the texts");
    for (cid, m) in members.iter().enumerate() {
        ensure!(m.iter().all(|&i| c.cluster_of(i) as usize == cid), "member lists disagree with ids");
    }

    let reference = reference_components(&texts, &t);
    for a in 0..texts.len() {
        for b in a + 1..texts.len() {
            let ours = c.cluster_of(a) == c.cluster_of(b);
            ensure!(ours == (reference[a] == reference[b]), "{:?} and {:?} disagree with the closure", texts[a], texts[b]);
        }
    }

    ensure!(build_clusters(&texts, &t) == c, "rebuilding gave a different partition");
    for m in &members {
        let sub: Vec<&String> = m.iter().map(|&i| &texts[i]).collect();
        ensure!(build_clusters(&sub, &t).cluster_count() == 1, "a cluster split when rebuilt on its own");
    }
    let heads: Vec<&String> = members.iter().map(|m| &texts[m[0]]).collect();
    ensure!(
        build_clusters(&heads, &t).cluster_count() == members.len(),
        "cluster representatives merged when reclustered"
    );
    Ok(format!(
        "example pairs behave; 1000 random texts form {} clusters matching an independent closure, stable under rebuild",
        members.len()
    ))
}

struct Experiment {
    seed0: Option<(LifecycleConfig, LifecycleRun)>,
}

fn end_to_end(exp: &mut Experiment) -> Outcome {
    let started = Instant::now();
    let mut per_seed = Vec::new();
    let (mut base_dup, mut base_def, mut cvae_dup, mut cvae_def) = (0.0, 0.0, 0.0, 0.0);
    let seeds = 3u64;
    for seed in 0..seeds {
        let cfg = LifecycleConfig::default().with_seed_offset(seed);
        ensure!(cfg.corpus.intents.len() >= 8, "only {} intents", cfg.corpus.intents.len());
        ensure!(cfg.corpus.zipf_exponent > 0.0, "corpus has no Zipf skew");
        ensure!(
            cfg.pipeline.k == 15 && cfg.pipeline.samples == 300 && cfg.cvae.z_dim == 256,
            "pipeline is not K = 15, s = 300, z = 256"
        );
        let t = Instant::now();
        let mut log = |line: String| {
            if line.contains("warning") {
                eprintln!("    seed {seed}: {line}");
            }
        };
        let run = run_all(&cfg, &mut log).map_err(err)?;
        ensure!(run.engine.artifact.len() == 500, "response set has {} entries, not 500", run.engine.artifact.len());
        let base = run.report.row(cfg.eval.baseline).ok_or("baseline row missing")?;
        let mc = run.report.row(Ranker::Mcvae).ok_or("mcvae row missing")?;
        eprintln!(
            "    seed {seed}: {} pairs, {} eval messages, {}: dup {:.3} def {:.3}; mcvae: dup {:.3} def {:.3} ({:.0}s)",
            run.corpus.train.len() + run.corpus.val.len(),
            run.report.messages,
            base.ranker,
            base.duplicate_rate,
            base.defect_rate,
            mc.duplicate_rate,
            mc.defect_rate,
            t.elapsed().as_secs_f64()
        );
        for row in &run.report.rows {
            eprintln!(
                "      {:<14} dup {:.3} def {:.3} coverage {:.2}",
                row.ranker.name(),
                row.duplicate_rate,
                row.defect_rate,
                row.intent_coverage
            );
        }
        base_dup += base.duplicate_rate;
        base_def += base.defect_rate;
        cvae_dup += mc.duplicate_rate;
        cvae_def += mc.defect_rate;
        per_seed.push(format!("{:+.1}%", 100.0 * (mc.duplicate_rate - base.duplicate_rate) / base.duplicate_rate));
        if seed == 0 {
            exp.seed0 = Some((cfg, run));
        }
    }
    let n = seeds as f64;
    let (base_dup, base_def, cvae_dup, cvae_def) = (base_dup / n, base_def / n, cvae_dup / n, cvae_def / n);
    let relative = (cvae_dup - base_dup) / base_dup;
    let defect_increase = cvae_def - base_def;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let summary = format!(
        "3-seed mean duplicate proxy {base_dup:.3} -> {cvae_dup:.3} ({:+.1}% relative; per seed {}), defect {base_def:.3} -> {cvae_def:.3} ({:+.1} pp), {minutes:.1} min",
        100.0 * relative,
        per_seed.join(" "),
        100.0 * defect_increase
    );
    ensure!(relative <= -0.30, "duplicate reduction short of 30%: {summary}");
    ensure!(defect_increase <= 0.05, "defect increase above 5 pp: {summary}");
    ensure!(minutes < 30.0, "pipeline exceeded 30 minutes: {summary}");
    Ok(summary)
}

fn latency(exp: &Experiment) -> Outcome {
    let (cfg, run) = exp.seed0.as_ref().ok_or("no trained engine (end-to-end run failed)")?;
    let messages: Vec<String> = eval_messages(&run.corpus.val, 200).into_iter().map(|m| m.text).collect();
    let report = bench(&run.engine, &messages, &BenchConfig::default(), &cfg.pipeline).map_err(err)?;
    let row = |n: &str| report.row(n).ok_or(format!("bench row {n} missing"));
    let (matching, mcvae) = (row("matching")?, row("mcvae")?);
    let r = run.engine.artifact.len() as f64;
    let k = cfg.pipeline.k as f64;
    let analytic = report.analytic.scoring_ratio;
    let speedup = report.scoring_speedup.ok_or("no scoring speedup")?;
    let detail = format!(
        "R = {r}, K = {k}, s = {}: scoring stage {speedup:.1}x faster constrained (sample + vote {:.2}x), analytic multiply ratio {analytic:.1}; p50 matching {} us < mcvae {} us",
        cfg.pipeline.samples,
        report.sample_vote_speedup.unwrap_or(f64::NAN),
        matching.total.p50,
        mcvae.total.p50
    );
    ensure!((analytic - r / k).abs() < 1e-9, "analytic ratio {analytic} is not R/K: {detail}");
    ensure!(speedup >= 5.0, "constrained scoring under 5x: {detail}");
    ensure!(matching.total.p50 < mcvae.total.p50, "matching p50 not below mcvae p50: {detail}");
    Ok(detail)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(err)
}

fn persistence(exp: &Experiment) -> Outcome {
    let (cfg, run) = exp.seed0.as_ref().ok_or("no trained models (end-to-end run failed)")?;
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |name: &str| dir.path().join(name);

    let enc = &run.matching.encoder;
    save_encoder(&p("m.srm"), enc, &run.corpus.vocab, serde_json::json!({})).map_err(err)?;
    let (enc2, vocab2) = load_encoder(&p("m.srm")).map_err(err)?;
    ensure!(enc2.params.fingerprint() == enc.params.fingerprint(), "encoder weights changed in round trip");
    ensure!(vocab2 == run.corpus.vocab, "vocabulary changed in round trip");
    save_encoder(&p("m2.srm"), &enc2, &vocab2, serde_json::json!({})).map_err(err)?;
    ensure!(read(&p("m.srm"))? == read(&p("m2.srm"))?, "encoder re-save differs");

    let lm = run_lm(&run.corpus, cfg).map_err(err)?;
    save_lm(&p("lm.srm"), &lm).map_err(err)?;
    let lm2 = load_lm(&p("lm.srm")).map_err(err)?;
    ensure!(lm2.raw_counts() == lm.raw_counts(), "lm counts changed in round trip");
    save_lm(&p("lm2.srm"), &lm2).map_err(err)?;
    ensure!(read(&p("lm.srm"))? == read(&p("lm2.srm"))?, "lm re-save differs");

    let cv = &run.cvae.params;
    save_cvae(&p("c.srm"), cv, "base", serde_json::json!({})).map_err(err)?;
    let (cv2, base) = load_cvae(&p("c.srm")).map_err(err)?;
    ensure!(base == "base" && cv2.params.fingerprint() == cv.params.fingerprint(), "cvae changed in round trip");

    let (a1, _) = run_response_set(&run.corpus, enc, &lm, cfg, "hash").map_err(err)?;
    let (a2, _) = run_response_set(&run.corpus, enc, &lm, cfg, "hash").map_err(err)?;
    let (d1, d2) = (p("rs1"), p("rs2"));
    for (d, a) in [(&d1, &a1), (&d2, &a2)] {
        std::fs::create_dir_all(d).map_err(err)?;
        save_response_set(d, a).map_err(err)?;
    }
    for f in [RESPONSE_SET_FILE, MANIFEST_FILE] {
        ensure!(read(&d1.join(f))? == read(&d2.join(f))?, "rebuilt {f} differs");
    }
    let (loaded, warnings) = load_response_set(&d1).map_err(err)?;
    ensure!(warnings.is_empty(), "unexpected warnings {warnings:?}");
    ensure!(loaded == a1, "response set changed in round trip");

    let mut flips = 0;
    for file in ["m.srm", "lm.srm", "c.srm"] {
        let bytes = read(&p(file))?;
        let mut rng = Rng::new(flips as u64 + 5);
        let mut positions: Vec<usize> = (0..bytes.len().min(512)).collect();
        positions.extend((0..1500).map(|_| rng.below(bytes.len())));
        for pos in positions {
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << (pos % 8);
            ensure!(ModelContainer::from_bytes(&bad).is_err(), "{file}: flipped bit at byte {pos} went unnoticed");
            flips += 1;
        }
        for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
            ensure!(ModelContainer::from_bytes(&bytes[..cut]).is_err(), "{file}: truncation to {cut} bytes accepted");
        }
    }
    let rs = read(&d1.join(RESPONSE_SET_FILE))?;
    let mut bad = rs.clone();
    let last = bad.len() - 100;
    bad[last] ^= 0x10;
    match ModelContainer::from_bytes(&bad) {
        Err(PersistError::Checksum(section)) if section == "cluster_ids" => {}
        other => return Err(format!("corrupt cluster_ids payload reported as {other:?}")),
    }

    Ok(format!(
        "encoder, lm, cvae and response set round-trip bitwise; {flips} single-bit flips and 15 truncations all rejected; rebuilt response set byte-identical"
    ))
}

fn training() -> Outcome {
    let mut cfg = LifecycleConfig::default();
    cfg.corpus = separable_two_intent_config();
    // Small corpus, few updates per epoch: the loss sits at ln(batch) for
    // about ten epochs before the encoders separate.
    cfg.matching.epochs = 16;
    let pairs = generate_synthetic(&cfg.corpus).map_err(err)?;
    let corpus = prepare_corpus(&pairs, &cfg).map_err(err)?;
    let m = run_matching(&corpus, &cfg, &mut |_| {}).map_err(err)?;
    let (first, best) = (m.val_losses[0], m.val_losses[m.best_epoch]);
    let drop = (first - best) / first;
    ensure!(drop >= 0.5, "validation loss {first:.3} -> {best:.3} is only a {:.0}% drop", 100.0 * drop);

    let before = m.encoder.params.fingerprint();
    let probe: Vec<Vec<u32>> = corpus.val.iter().take(32).map(|p| corpus.vocab.encode(&p.reply)).collect();
    let enc_before = m.encoder.encode_all(Side::Reply, &probe, 16).map_err(err)?;
    cfg.cvae = CvaeConfig { epochs: 2, ..cfg.cvae };
    let normal = run_cvae(&corpus, &m.encoder, &cfg, &mut |_| {}).map_err(err)?;
    ensure!(m.encoder.params.fingerprint() == before, "base weights changed during CVAE training");
    let enc_after = m.encoder.encode_all(Side::Reply, &probe, 16).map_err(err)?;
    ensure!(
        enc_before.data().iter().zip(enc_after.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "base encodings changed during CVAE training"
    );

    cfg.cvae = CvaeConfig { kl_weight: 1e4, epochs: 6, ..cfg.cvae };
    let collapsed = run_cvae(&corpus, &m.encoder, &cfg, &mut |_| {}).map_err(err)?;
    let warning = collapsed.collapse_warning.clone().ok_or("collapse detector stayed silent at kl_weight 1e4")?;
    let kl = |r: &smartreply_core::mcvae::CvaeRun| r.val.last().map_or(f64::NAN, |v| v.kl);
    Ok(format!(
        "matching validation loss {first:.3} -> {best:.3} ({:.0}% drop); base weights and encodings bitwise unchanged by CVAE training; kl_weight 1e4 ends at KL {:.4} and warns ({warning}), kl_weight {} ends at KL {:.2}",
        100.0 * drop,
        kl(&collapsed),
        normal_weight(),
        kl(&normal)
    ))
}

fn normal_weight() -> f64 {
    LifecycleConfig::default().cvae.kl_weight
}

/// Top-1 by votes at s = 1000 against s = 5000 under the same seed.
fn sampling_stability(exp: &Experiment) -> Outcome {
    let (cfg, run) = exp.seed0.as_ref().ok_or("no trained engine (end-to-end run failed)")?;
    let messages = eval_messages(&run.corpus.val, 100);
    let mut agree = 0;
    for m in &messages {
        let top = |s: usize| -> Result<usize, String> {
            let c = PipelineConfig { samples: s, ..cfg.pipeline.clone() };
            let r = run.engine.suggest(&m.text, Ranker::McvaeNolc, &c, &NullClock).map_err(err)?;
            Ok(r.ranked[0])
        };
        if top(1000)? == top(5000)? {
            agree += 1;
        }
    }
    let share = agree as f64 / messages.len() as f64;
    let detail = format!("top-1 at s = 1000 equals s = 5000 on {agree}/{} messages", messages.len());
    ensure!(share >= 0.95, "{detail}");
    Ok(detail)
}

fn main() {
    let started = Instant::now();
    let mut exp = Experiment { seed0: None };
    let mut results: BTreeMap<usize, bool> = BTreeMap::new();
    results.insert(1, run("[1/7] math kernels", math_kernels));
    results.insert(2, run("[2/7] equivalence oracles", equivalence_oracles));
    results.insert(3, run("[3/7] lexical clustering", lexical_clustering));
    results.insert(4, run("[4/7] end-to-end desk experiment", || end_to_end(&mut exp)));
    results.insert(5, run("[5/7] latency", || latency(&exp)));
    results.insert(6, run("[6/7] persistence", || persistence(&exp)));
    results.insert(7, run("[7/7] training", training));
    results.insert(8, run("[invariant] sampling stability", || sampling_stability(&exp)));
    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !**ok).map(|(k, _)| *k).collect();
    println!(
        "acceptance: {} of {} passed in {:.1} min",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
