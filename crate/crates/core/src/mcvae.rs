//! Conditional VAE over frozen matching encodings: recognition network,
//! reparameterized sampling, decoder and ELBO training.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Side};
use crate::error::{contract, Error, Result};
use crate::matching::{EncodedPair, MIN_BATCH};
use crate::optim::{Adadelta, AdadeltaConfig};
use crate::params::Params;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean KL (nats) under which an epoch counts towards posterior collapse.
pub const COLLAPSE_KL: f64 = 0.01;
pub const COLLAPSE_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub z_dim: usize,
    /// Hidden width of both networks; 0 means the encoding dimension.
    pub hidden: usize,
    pub kl_weight: f64,
    /// Linear KL-weight warm-up from 0 over this many steps; 0 disables it.
    pub anneal_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub adadelta: AdadeltaConfig,
    pub init_scale: f32,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            z_dim: 256,
            hidden: 0,
            kl_weight: 1.0,
            anneal_steps: 0,
            batch_size: 32,
            epochs: 6,
            steps_per_epoch: 0,
            adadelta: AdadeltaConfig::default(),
            init_scale: 0.05,
            seed: 2,
        }
    }
}

/// Recognition and decoder weights. The decoder's first layer acting on
/// `[z; Φ_X]` is stored as two blocks (`dec.w1z`, `dec.w1x`) so the
/// message half can be computed once per query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeParams {
    pub z_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub params: Params,
}

const NAMES: [&str; 11] = [
    "rec.w1", "rec.b1", "rec.wmu", "rec.bmu", "rec.wsig", "rec.bsig", "dec.w1z", "dec.w1x", "dec.b1",
    "dec.w2", "dec.b2",
];

struct Vars([Var; 11]);

impl Vars {
    fn get(&self, name: &str) -> Var {
        self.0[NAMES.iter().position(|n| *n == name).expect("known name")]
    }
}

impl CvaeParams {
    pub fn new(d: usize, z_dim: usize, hidden: usize, init_scale: f32, rng: &mut Rng) -> Result<Self> {
        if d == 0 || z_dim == 0 {
            return Err(contract("CVAE needs d > 0 and z_dim > 0"));
        }
        let hidden = if hidden == 0 { d } else { hidden };
        let s = init_scale;
        let mut p = Params::new();
        p.add_uniform("rec.w1", 2 * d, hidden, s, rng);
        p.add_zeros("rec.b1", 1, hidden);
        p.add_uniform("rec.wmu", hidden, z_dim, s, rng);
        p.add_zeros("rec.bmu", 1, z_dim);
        p.add_uniform("rec.wsig", hidden, z_dim, s, rng);
        p.add_zeros("rec.bsig", 1, z_dim);
        p.add_uniform("dec.w1z", z_dim, hidden, s, rng);
        p.add_uniform("dec.w1x", d, hidden, s, rng);
        p.add_zeros("dec.b1", 1, hidden);
        p.add_uniform("dec.w2", hidden, d, s, rng);
        p.add_zeros("dec.b2", 1, d);
        Ok(Self { z_dim, hidden, d, params: p })
    }

    /// All-zero weights and biases.
    pub fn zeros(d: usize, z_dim: usize, hidden: usize) -> Self {
        let mut p = Self::new(d, z_dim, hidden, 0.0, &mut Rng::new(0)).expect("positive sizes");
        for t in p.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    /// Checks names and shapes (used after loading).
    pub fn validate(&self) -> Result<()> {
        let expect = Self::zeros(self.d, self.z_dim, self.hidden);
        for (name, t) in expect.params.iter() {
            match self.params.by_name(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(Error::Shape {
                        op: "cvae params",
                        left: t.shape().to_vec(),
                        right: have.shape().to_vec(),
                    })
                }
                None => return Err(contract(format!("CVAE parameter {name} missing"))),
            }
        }
        Ok(())
    }

    fn t(&self, name: &str) -> &Tensor {
        self.params.by_name(name).expect("validated names")
    }

    fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vars> {
        let vars = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let mut out = [Var::default(); 11];
        for (slot, name) in out.iter_mut().zip(NAMES) {
            let id = self.params.id(name).ok_or_else(|| contract(format!("missing {name}")))?;
            *slot = vars[id.0];
        }
        Ok(Vars(out))
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Recorded recognition network: `(μ, log σ², σ)`.
fn recognize_on<T: Scalar>(tape: &mut Tape<T>, v: &Vars, x: Var, y: Var) -> Result<(Var, Var, Var)> {
    let xy = tape.concat_cols(x, y)?;
    let h = linear(tape, xy, v.get("rec.w1"), v.get("rec.b1"))?;
    let h = tape.tanh(h);
    let mu = linear(tape, h, v.get("rec.wmu"), v.get("rec.bmu"))?;
    let logvar = linear(tape, h, v.get("rec.wsig"), v.get("rec.bsig"))?;
    let half = tape.scale(logvar, T::of_f64(0.5));
    let sigma = tape.exp(half);
    Ok((mu, logvar, sigma))
}

fn decode_on<T: Scalar>(tape: &mut Tape<T>, v: &Vars, z: Var, x: Var) -> Result<Var> {
    let hz = tape.matmul(z, v.get("dec.w1z"))?;
    let hx = tape.matmul(x, v.get("dec.w1x"))?;
    let h = tape.add(hz, hx)?;
    let h = tape.add_row(h, v.get("dec.b1"))?;
    let h = tape.tanh(h);
    linear(tape, h, v.get("dec.w2"), v.get("dec.b2"))
}

/// Batch-mean of `½ Σ (μ² + σ² − 1 − ln σ²)`.
fn kl_on<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var, sigma: Var) -> Result<Var> {
    let b = tape.value(mu).rows().max(1);
    let mu2 = tape.mul(mu, mu)?;
    let s2 = tape.mul(sigma, sigma)?;
    let t = tape.add(mu2, s2)?;
    let neg_lv = tape.scale(logvar, -T::one());
    let t = tape.add(t, neg_lv)?;
    let t = tape.offset(t, -T::one());
    let s = tape.sum_all(t);
    Ok(tape.scale(s, T::of_f64(0.5 / b as f64)))
}

/// `(μ, σ)` for one message/reply encoding pair.
pub fn recognize(p: &CvaeParams, phi_x: &[f32], phi_y: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut tape = Tape::<f32>::inference();
    let v = p.bind(&mut tape, false)?;
    let x = tape.constant(Tensor::row(phi_x));
    let y = tape.constant(Tensor::row(phi_y));
    let (mu, _, sigma) = recognize_on(&mut tape, &v, x, y)?;
    Ok((tape.value(mu).data().to_vec(), tape.value(sigma).data().to_vec()))
}

/// `z = μ + σ∘ε`.
pub fn reparameterize(mu: &[f32], sigma: &[f32], eps: &[f32]) -> Result<Vec<f32>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return Err(Error::Shape {
            op: "reparameterize",
            left: vec![mu.len(), sigma.len()],
            right: vec![eps.len()],
        });
    }
    Ok(mu.iter().zip(sigma).zip(eps).map(|((&m, &s), &e)| m + s * e).collect())
}

pub fn decode(p: &CvaeParams, z: &[f32], phi_x: &[f32]) -> Result<Vec<f32>> {
    let zt = Tensor::row(z);
    Ok(decode_batch(p, &zt, phi_x)?.into_data())
}

/// Decodes every row of `z` (`[s × z_dim]`) against one message. The
/// message half of the first layer is computed once.
pub fn decode_batch(p: &CvaeParams, z: &Tensor, phi_x: &[f32]) -> Result<Tensor> {
    let (s, zd) = z.dims2()?;
    if zd != p.z_dim || phi_x.len() != p.d {
        return Err(Error::Shape {
            op: "decode",
            left: vec![p.z_dim, p.d],
            right: vec![zd, phi_x.len()],
        });
    }
    let mut xb = Tensor::row(phi_x).matmul(p.t("dec.w1x"))?;
    xb.add_row_inplace(p.t("dec.b1").data())?;
    let mut h = z.matmul(p.t("dec.w1z"))?;
    h.add_row_inplace(xb.data())?;
    h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    let mut out = h.matmul(p.t("dec.w2"))?;
    out.add_row_inplace(p.t("dec.b2").data())?;
    debug_assert_eq!(out.rows(), s);
    Ok(out)
}

/// `½ Σ (μ² + σ² − 1 − ln σ²)`, the KL from `N(μ, σ²)` to `N(0, I)`.
pub fn kl_divergence(mu: &[f32], sigma: &[f32]) -> Result<f32> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: vec![mu.len()],
            right: vec![sigma.len()],
        });
    }
    let mut kl = 0.0f64;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(contract(format!("sigma must be positive, got {s}")));
        }
        let (m, s2) = (m as f64, (s as f64) * (s as f64));
        kl += m * m + s2 - 1.0 - libm::log(s2);
    }
    Ok((0.5 * kl) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// Batch-mean KL divergence.
    pub kl: f64,
    /// Reconstruction log-likelihood, `−symmetric_loss(Φ̂_Y, Φ_Y)`.
    pub reconstruction: f64,
    /// Minimized objective `kl_weight·kl − reconstruction`.
    pub total: f64,
    pub mean_mu_sq: f64,
    pub mean_sigma_sq: f64,
}

struct Recorded {
    loss: Var,
    kl: Var,
    recon: Var,
    mu: Var,
    sigma: Var,
}

fn record_elbo<T: Scalar>(
    tape: &mut Tape<T>,
    v: &Vars,
    phi_x: Var,
    phi_y: Var,
    eps: Var,
    kl_weight: f64,
) -> Result<Recorded> {
    let (mu, logvar, sigma) = recognize_on(tape, v, phi_x, phi_y)?;
    let se = tape.mul(sigma, eps)?;
    let z = tape.add(mu, se)?;
    let y_hat = decode_on(tape, v, z, phi_x)?;
    let yt = tape.transpose(phi_y)?;
    let theta = tape.matmul(y_hat, yt)?;
    let recon = tape.symmetric_nll(theta)?;
    let kl = kl_on(tape, mu, logvar, sigma)?;
    let wkl = tape.scale(kl, T::of_f64(kl_weight));
    let loss = tape.add(wkl, recon)?;
    Ok(Recorded { loss, kl, recon, mu, sigma })
}

fn report<T: Scalar>(tape: &Tape<T>, r: &Recorded) -> ElboReport {
    let mean_sq = |v: Var| {
        let t = tape.value(v);
        t.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>() / t.len().max(1) as f64
    };
    let item = |v: Var| tape.value(v).data()[0].as_f64();
    ElboReport {
        kl: item(r.kl),
        reconstruction: -item(r.recon),
        total: item(r.loss),
        mean_mu_sq: mean_sq(r.mu),
        mean_sigma_sq: mean_sq(r.sigma),
    }
}

fn check_batch(phi_x: &Tensor, phi_y: &Tensor, d: usize) -> Result<usize> {
    let (b, dx) = phi_x.dims2()?;
    let (by, dy) = phi_y.dims2()?;
    if b != by || dx != d || dy != d {
        return Err(Error::Shape {
            op: "elbo",
            left: phi_x.shape().to_vec(),
            right: phi_y.shape().to_vec(),
        });
    }
    if b < MIN_BATCH {
        return Err(contract(format!("ELBO batch of {b} below the minimum of {MIN_BATCH}")));
    }
    Ok(b)
}

/// ELBO on a batch with one posterior sample per item.
pub fn elbo_loss(
    p: &CvaeParams,
    phi_x: &Tensor,
    phi_y: &Tensor,
    rng: &mut Rng,
    kl_weight: f64,
) -> Result<ElboReport> {
    let b = check_batch(phi_x, phi_y, p.d)?;
    let mut eps = Tensor::zeros(&[b, p.z_dim]);
    rng.fill_normal(eps.data_mut());
    elbo_loss_with_noise(p, phi_x, phi_y, &eps, kl_weight)
}

/// ELBO with caller-supplied noise `ε` (`[batch × z_dim]`).
pub fn elbo_loss_with_noise(
    p: &CvaeParams,
    phi_x: &Tensor,
    phi_y: &Tensor,
    eps: &Tensor,
    kl_weight: f64,
) -> Result<ElboReport> {
    check_batch(phi_x, phi_y, p.d)?;
    let mut tape = Tape::<f32>::inference();
    let v = p.bind(&mut tape, false)?;
    let (x, y, e) = (
        tape.constant(phi_x.clone()),
        tape.constant(phi_y.clone()),
        tape.constant(eps.clone()),
    );
    let r = record_elbo(&mut tape, &v, x, y, e, kl_weight)?;
    let out = report(&tape, &r);
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("ELBO {:?}", out)));
    }
    Ok(out)
}

/// ELBO as a differentiable function of the CVAE parameters, for gradient
/// checks. `vars` follow the parameter order of `p.params`.
pub fn elbo_on_tape<T: Scalar>(
    p: &CvaeParams,
    tape: &mut Tape<T>,
    vars: &[Var],
    phi_x: &Tensor,
    phi_y: &Tensor,
    eps: &Tensor,
    kl_weight: f64,
) -> Result<Var> {
    let mut out = [Var::default(); 11];
    for (slot, name) in out.iter_mut().zip(NAMES) {
        *slot = vars[p.params.id(name).ok_or_else(|| contract(format!("missing {name}")))?.0];
    }
    let x = tape.constant(phi_x.cast());
    let y = tape.constant(phi_y.cast());
    let e = tape.constant(eps.cast());
    Ok(record_elbo(tape, &Vars(out), x, y, e, kl_weight)?.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_kl: f64,
    pub val: ElboReport,
}

#[derive(Clone, Debug)]
pub struct CvaeRun {
    pub params: CvaeParams,
    /// Entry 0 is the validation report before training.
    pub val: Vec<ElboReport>,
    pub epochs: Vec<CvaeEpoch>,
    pub best_epoch: usize,
    /// Set when mean KL stayed below the collapse threshold for
    /// [`COLLAPSE_EPOCHS`] consecutive epochs.
    pub collapse_warning: Option<String>,
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("sized")
}

/// Validation objective at full KL weight with a fixed noise stream, so
/// epochs are compared on identical draws.
fn validate(p: &CvaeParams, x: &Tensor, y: &Tensor, batch: usize, seed: u64, kl_weight: f64) -> Result<ElboReport> {
    let n = x.rows();
    let bs = batch.min(n);
    let mut rng = Rng::new(seed);
    let mut acc = ElboReport {
        kl: 0.0,
        reconstruction: 0.0,
        total: 0.0,
        mean_mu_sq: 0.0,
        mean_sigma_sq: 0.0,
    };
    let mut count = 0.0;
    for start in (0..n).step_by(bs.max(1)) {
        if start + bs > n {
            break;
        }
        let idx: Vec<usize> = (start..start + bs).collect();
        let r = elbo_loss(p, &rows(x, &idx), &rows(y, &idx), &mut rng, kl_weight)?;
        acc.kl += r.kl;
        acc.reconstruction += r.reconstruction;
        acc.total += r.total;
        acc.mean_mu_sq += r.mean_mu_sq;
        acc.mean_sigma_sq += r.mean_sigma_sq;
        count += 1.0;
    }
    if count == 0.0 {
        return Err(contract("validation set smaller than the minimum batch"));
    }
    for v in [
        &mut acc.kl,
        &mut acc.reconstruction,
        &mut acc.total,
        &mut acc.mean_mu_sq,
        &mut acc.mean_sigma_sq,
    ] {
        *v /= count;
    }
    Ok(acc)
}

/// Trains the CVAE layers on precomputed encodings of a frozen base.
pub fn train_cvae(
    train_x: &Tensor,
    train_y: &Tensor,
    val_x: &Tensor,
    val_y: &Tensor,
    config: &CvaeConfig,
    mut on_epoch: impl FnMut(&CvaeEpoch),
) -> Result<CvaeRun> {
    let d = train_x.cols();
    check_batch(train_x, train_y, d)?;
    check_batch(val_x, val_y, d)?;
    if config.batch_size < MIN_BATCH || train_x.rows() < config.batch_size {
        return Err(contract(format!(
            "batch size {} must be ≥ {MIN_BATCH} and ≤ the {} training rows",
            config.batch_size,
            train_x.rows()
        )));
    }
    let root = Rng::new(config.seed);
    let mut p = CvaeParams::new(d, config.z_dim, config.hidden, config.init_scale, &mut root.derive(0))?;
    let mut order_rng = root.derive(1);
    let mut noise_rng = root.derive(2);
    let val_seed = root.derive(3).seed() ^ 0x5eed;
    let mut opt = Adadelta::new(config.adadelta, &p.params);

    let initial = validate(&p, val_x, val_y, config.batch_size, val_seed, config.kl_weight)?;
    let mut best = (initial.total, 0usize, p.params.clone());
    let mut val = vec![initial];
    let mut epochs = Vec::new();
    let mut low_kl_streak = 0;
    let mut collapse_warning = None;

    let n = train_x.rows();
    let batches = n / config.batch_size;
    let steps = if config.steps_per_epoch == 0 {
        batches
    } else {
        config.steps_per_epoch.min(batches)
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut global_step = 0usize;
    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut kl_sum) = (0.0, 0.0);
        for step in 0..steps {
            let idx = &order[step * config.batch_size..(step + 1) * config.batch_size];
            let (bx, by) = (rows(train_x, idx), rows(train_y, idx));
            let mut eps = Tensor::zeros(&[idx.len(), p.z_dim]);
            noise_rng.fill_normal(eps.data_mut());
            let w = if config.anneal_steps > 0 {
                config.kl_weight * (global_step as f64 / config.anneal_steps as f64).min(1.0)
            } else {
                config.kl_weight
            };
            let mut tape = Tape::new();
            let vars = p.params.bind(&mut tape);
            let loss = elbo_on_tape(&p, &mut tape, &vars, &bx, &by, &eps, w)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: lv });
            }
            loss_sum += lv;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
            opt.step(&mut p.params, &g)?;
            global_step += 1;
            if step % 16 == 0 {
                kl_sum += elbo_loss_with_noise(&p, &bx, &by, &eps, w)?.kl;
            }
        }
        let kl_samples = steps.div_ceil(16).max(1) as f64;
        let report = validate(&p, val_x, val_y, config.batch_size, val_seed, config.kl_weight)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence { epoch, step: steps, loss: report.total });
        }
        let e = CvaeEpoch {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            train_kl: kl_sum / kl_samples,
            val: report.clone(),
        };
        on_epoch(&e);
        if report.kl < COLLAPSE_KL {
            low_kl_streak += 1;
            if low_kl_streak >= COLLAPSE_EPOCHS && collapse_warning.is_none() {
                collapse_warning = Some(format!(
                    "posterior collapse: mean KL below {COLLAPSE_KL} nats for {COLLAPSE_EPOCHS} epochs (epoch {epoch}, KL {:.2e})",
                    report.kl
                ));
            }
        } else {
            low_kl_streak = 0;
        }
        if report.total < best.0 {
            best = (report.total, epoch, p.params.clone());
        }
        val.push(report);
        epochs.push(e);
    }
    p.params = best.2;
    Ok(CvaeRun {
        params: p,
        val,
        epochs,
        best_epoch: best.1,
        collapse_warning,
    })
}

/// Encodes pairs with the frozen base in inference mode.
pub fn precompute(base: &EncoderParams, pairs: &[EncodedPair], chunk: usize) -> Result<(Tensor, Tensor)> {
    let msgs: Vec<&[u32]> = pairs.iter().map(|p| p.message.as_slice()).collect();
    let reps: Vec<&[u32]> = pairs.iter().map(|p| p.reply.as_slice()).collect();
    Ok((
        base.encode_all(Side::Message, &msgs, chunk)?,
        base.encode_all(Side::Reply, &reps, chunk)?,
    ))
}
