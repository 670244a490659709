//! Message and reply encoders: shared (or per-side) embeddings feeding a
//! bi-directional LSTM or a mean-of-embeddings feed-forward stack.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::Params;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    BiLstm,
    FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Message,
    Reply,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Message => "x",
            Side::Reply => "y",
        }
    }
}

/// Dropout is applied only in `Train`.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// LSTM hidden size per direction.
    pub hidden: usize,
    pub layers: usize,
    /// Width of every feed-forward layer.
    pub ff_dim: usize,
    pub dropout: f32,
    pub share_embeddings: bool,
    pub init_scale: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::BiLstm,
            vocab_size: 0,
            embed_dim: 64,
            hidden: 64,
            layers: 1,
            ff_dim: 128,
            dropout: 0.2,
            share_embeddings: true,
            init_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        match self.kind {
            EncoderKind::BiLstm => 2 * self.hidden,
            EncoderKind::FeedForward => self.ff_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.layers == 0 {
            return Err(contract("encoder needs vocab ≥ 2, embed_dim > 0, layers > 0"));
        }
        if self.output_dim() == 0 {
            return Err(contract("encoder output dimension is zero"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn embed_name(cfg: &EncoderConfig, side: Side) -> String {
    if cfg.share_embeddings {
        "embed".into()
    } else {
        format!("{}.embed", side.prefix())
    }
}

/// Weights of both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: Params,
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let s = config.init_scale;
        let mut p = Params::new();
        if config.share_embeddings {
            p.add_uniform("embed", config.vocab_size, config.embed_dim, s, rng);
        }
        for side in [Side::Message, Side::Reply] {
            let pre = side.prefix();
            if !config.share_embeddings {
                p.add_uniform(&format!("{pre}.embed"), config.vocab_size, config.embed_dim, s, rng);
            }
            match config.kind {
                EncoderKind::BiLstm => {
                    let h = config.hidden;
                    for l in 0..config.layers {
                        let din = if l == 0 { config.embed_dim } else { 2 * h };
                        for dir in ["fwd", "bwd"] {
                            p.add_uniform(&format!("{pre}.l{l}.{dir}.wx"), din, 4 * h, s, rng);
                            p.add_uniform(&format!("{pre}.l{l}.{dir}.wh"), h, 4 * h, s, rng);
                            // Gate order i, f, g, o; forget gate starts open.
                            let mut b = vec![0.0f32; 4 * h];
                            b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                            p.add(&format!("{pre}.l{l}.{dir}.b"), Tensor::row(&b));
                        }
                    }
                }
                EncoderKind::FeedForward => {
                    for l in 0..config.layers {
                        let din = if l == 0 { config.embed_dim } else { config.ff_dim };
                        p.add_uniform(&format!("{pre}.ff{l}.w"), din, config.ff_dim, s, rng);
                        p.add_zeros(&format!("{pre}.ff{l}.b"), 1, config.ff_dim);
                    }
                }
            }
        }
        Ok(Self { config, params: p })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Encodes one sequence.
    pub fn encode(&self, side: Side, tokens: &[u32], mode: &mut Mode) -> Result<Vec<f32>> {
        Ok(self.encode_batch(side, &[tokens], mode)?.into_data())
    }

    /// Encodes a batch on a forward-only tape: `[n × d]`.
    pub fn encode_batch<S: AsRef<[u32]>>(
        &self,
        side: Side,
        seqs: &[S],
        mode: &mut Mode,
    ) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(contract("encode_batch needs at least one sequence"));
        }
        let mut tape = Tape::<f32>::inference();
        let vars = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, side, seqs, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Encodes in chunks of `chunk` rows (bounds padding waste).
    pub fn encode_all<S: AsRef<[u32]>>(&self, side: Side, seqs: &[S], chunk: usize) -> Result<Tensor> {
        let d = self.output_dim();
        let mut data = Vec::with_capacity(seqs.len() * d);
        for part in seqs.chunks(chunk.max(1)) {
            data.extend_from_slice(self.encode_batch(side, part, &mut Mode::Infer)?.data());
        }
        Tensor::new(vec![seqs.len(), d], data)
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .id(name)
            .map(|id| vars[id.0])
            .ok_or_else(|| contract(format!("missing encoder parameter {name}")))
    }

    /// Records the encoder on `tape`. `vars` are this parameter set bound to
    /// the tape in order.
    pub fn forward<T: Scalar, S: AsRef<[u32]>>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        side: Side,
        seqs: &[S],
        mode: &mut Mode,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = seqs.len();
        if b == 0 {
            return Err(contract("empty batch"));
        }
        let mut lens = Vec::with_capacity(b);
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(contract("cannot encode an empty token sequence"));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            lens.push(s.len());
        }
        let steps = *lens.iter().max().expect("nonempty");

        // Time-major: row t·B + i holds token t of sequence i (padding past its end).
        let mut ids = vec![0usize; steps * b];
        for (i, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.as_ref().iter().enumerate() {
                ids[t * b + i] = tok as usize;
            }
        }
        let table = self.var(vars, &embed_name(cfg, side))?;
        let mut x = tape.gather(table, &ids)?;
        if let Mode::Train(rng) = mode {
            if cfg.dropout > 0.0 {
                let keep = 1.0 - cfg.dropout as f64;
                let scale = T::of_f64(1.0 / keep);
                let (m, n) = tape.value(x).dims2()?;
                let mask: Vec<T> = (0..m * n)
                    .map(|_| if rng.uniform() < keep { scale } else { T::zero() })
                    .collect();
                let mask = tape.constant(Tensor::new(vec![m, n], mask)?);
                x = tape.mul(x, mask)?;
            }
        }
        match cfg.kind {
            EncoderKind::BiLstm => self.bilstm(tape, vars, side, x, &lens, steps),
            EncoderKind::FeedForward => self.feed_forward(tape, vars, side, x, &lens, steps),
        }
    }

    fn feed_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        side: Side,
        x: Var,
        lens: &[usize],
        steps: usize,
    ) -> Result<Var> {
        let b = lens.len();
        let mut avg = vec![T::zero(); b * steps * b];
        for (i, &len) in lens.iter().enumerate() {
            let w = T::one() / T::of_f64(len as f64);
            for t in 0..len {
                avg[i * steps * b + t * b + i] = w;
            }
        }
        let avg = tape.constant(Tensor::new(vec![b, steps * b], avg)?);
        let mut h = tape.matmul(avg, x)?;
        let pre = side.prefix();
        for l in 0..self.config.layers {
            let w = self.var(vars, &format!("{pre}.ff{l}.w"))?;
            let bias = self.var(vars, &format!("{pre}.ff{l}.b"))?;
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, bias)?;
            h = tape.tanh(z);
        }
        Ok(h)
    }

    fn bilstm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        side: Side,
        x: Var,
        lens: &[usize],
        steps: usize,
    ) -> Result<Var> {
        let b = lens.len();
        let h = self.config.hidden;
        let layers = self.config.layers;
        // Per-sequence reversal of the valid prefix; an involution.
        let mut rev = vec![0usize; steps * b];
        for t in 0..steps {
            for (i, &len) in lens.iter().enumerate() {
                rev[t * b + i] = if t < len { (len - 1 - t) * b + i } else { t * b + i };
            }
        }
        let masks: Vec<Vec<bool>> = (0..steps)
            .map(|t| lens.iter().map(|&len| t < len).collect())
            .collect();
        let pre = side.prefix();
        let mut input = x;
        let mut finals = (input, input);
        for l in 0..layers {
            let last = l + 1 == layers;
            let reversed = tape.gather(input, &rev)?;
            let mut outs = Vec::with_capacity(2);
            for (dir, src) in [("fwd", input), ("bwd", reversed)] {
                let wx = self.var(vars, &format!("{pre}.l{l}.{dir}.wx"))?;
                let wh = self.var(vars, &format!("{pre}.l{l}.{dir}.wh"))?;
                let bias = self.var(vars, &format!("{pre}.l{l}.{dir}.b"))?;
                let xw = tape.matmul(src, wx)?;
                let xw = tape.add_row(xw, bias)?;
                outs.push(run_lstm(tape, xw, wh, &masks, b, h, !last)?);
            }
            let (fh, fseq) = core::mem::take(&mut outs[0]);
            let (bh, bseq) = core::mem::take(&mut outs[1]);
            finals = (fh.expect("steps ≥ 1"), bh.expect("steps ≥ 1"));
            if !last {
                let hf = tape.concat_rows(&fseq)?;
                let hb_rev = tape.concat_rows(&bseq)?;
                let hb = tape.gather(hb_rev, &rev)?;
                input = tape.concat_cols(hf, hb)?;
            }
        }
        tape.concat_cols(finals.0, finals.1)
    }
}

/// One LSTM direction over precomputed input projections `xw` (`[steps·B × 4h]`).
/// Rows whose mask is false keep their previous state, so the final state
/// of each sequence is the one at its true last token.
fn run_lstm<T: Scalar>(
    tape: &mut Tape<T>,
    xw: Var,
    wh: Var,
    masks: &[Vec<bool>],
    b: usize,
    h: usize,
    keep_all: bool,
) -> Result<(Option<Var>, Vec<Var>)> {
    let mut hs = tape.constant(Tensor::zeros(&[b, h]));
    let mut cs = tape.constant(Tensor::zeros(&[b, h]));
    let mut seq = Vec::new();
    for (t, mask) in masks.iter().enumerate() {
        let mut pre = tape.slice_rows(xw, t * b, (t + 1) * b)?;
        if t > 0 {
            let rec = tape.matmul(hs, wh)?;
            pre = tape.add(pre, rec)?;
        }
        let i = tape.slice_cols(pre, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(pre, h, 2 * h)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(pre, 2 * h, 3 * h)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(pre, 3 * h, 4 * h)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, cs)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        if mask.iter().all(|&m| m) {
            cs = c_new;
            hs = h_new;
        } else {
            cs = tape.select_rows(mask, c_new, cs)?;
            hs = tape.select_rows(mask, h_new, hs)?;
        }
        if keep_all {
            seq.push(hs);
        }
    }
    Ok((Some(hs), seq))
}
