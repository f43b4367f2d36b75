//! The latent-shift variational model.
//!
//! Generative side: `z ~ N(0, I)`, `ẑ | z ~ Student(ψ(z), I, ν0)`, and one
//! shared label decoder `φ` giving `p(y | x, z)` and `p(ŷ | x, ẑ)`.
//! Proposals: `q(ẑ | x, ŷ)` from the encoder `θ` (Student, or Normal in the
//! Gaussian ablation) and `q(z | ẑ)` from `κ`. Supervised batches also use
//! `θ(x, y)` as a Normal proposal for `z`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::classifier::{sample_predictions, LabelSampler};
use crate::distributions::{
    chi2_sample, standard_normal_vec, tape_clamped_probs, tape_log_bernoulli, tape_logpdf_normal,
    tape_logpdf_std_normal, tape_logpdf_student, BernoulliVec, DiagNormalParams, Nu, StudentCoupling,
};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundParams, Mlp, ParamStore};
use crate::optim::{shuffled_batches, TrainConfig};
use crate::rng;
use crate::tensor::{load_checkpoint, save_checkpoint, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProposalFamily {
    #[default]
    Student,
    /// Gaussian ablation: `q(ẑ | x, ŷ)` becomes a diagonal Normal.
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NuMode {
    #[default]
    Fixed,
    /// Per-instance `ν = ReLU(net(x, ŷ)) + 1`.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShiftDecoder {
    /// One hidden layer.
    Mlp,
    /// A single linear map initialized to the identity.
    #[default]
    Linear,
    /// `z + mlp(z)` with the output layer zero-initialized.
    Residual,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " `{}`"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)+ })
            }
        }
    };
}

text_enum!(ProposalFamily { Student => "student", Normal => "normal" });
text_enum!(NuMode { Fixed => "fixed", Learned => "learned" });
text_enum!(ShiftDecoder { Mlp => "mlp", Linear => "linear", Residual => "residual" });

#[derive(Clone, Debug, PartialEq)]
pub struct LsnpcConfig {
    /// Latent dimension.
    pub m: usize,
    /// Degrees of freedom of `q(ẑ | x, ŷ)` in fixed mode.
    pub nu: f64,
    /// Degrees of freedom of `p(ẑ | z)`.
    pub nu0: f64,
    /// Weight of the four latent log-density terms.
    pub beta: f64,
    /// Probability of drawing `z` from `θ(x, y)` in supervised batches.
    pub eta: f64,
    pub lambda_floor: f64,
    pub family: ProposalFamily,
    pub nu_mode: NuMode,
    pub coupling: StudentCoupling,
    pub shift_decoder: ShiftDecoder,
    pub hidden: usize,
    pub label_hidden: usize,
    pub label_embed: usize,
    /// Label vectors drawn from the base classifier per instance in training.
    pub s_y: usize,
    /// Latent samples per drawn label vector in training.
    pub s_z: usize,
    pub sampler: LabelSampler,
}

impl Default for LsnpcConfig {
    fn default() -> Self {
        LsnpcConfig {
            m: 16,
            nu: 2.01,
            nu0: 2.01,
            beta: 0.01,
            eta: 0.5,
            lambda_floor: 1e-3,
            family: ProposalFamily::Student,
            nu_mode: NuMode::Fixed,
            coupling: StudentCoupling::Joint,
            shift_decoder: ShiftDecoder::Linear,
            hidden: 64,
            label_hidden: 64,
            label_embed: 128,
            s_y: 4,
            s_z: 1,
            sampler: LabelSampler::Independent,
        }
    }
}

impl LsnpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.hidden == 0 || self.label_hidden == 0 || self.label_embed == 0 {
            return bad("latent and layer sizes must be positive".into());
        }
        if self.nu_mode == NuMode::Fixed && self.family == ProposalFamily::Student && !(self.nu > 2.0) {
            return bad(format!("fixed ν must exceed 2, got {}", self.nu));
        }
        if !(self.nu0 > 2.0) {
            return bad(format!("ν0 must exceed 2, got {}", self.nu0));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("η must lie in [0, 1], got {}", self.eta));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("β must be non-negative, got {}", self.beta));
        }
        if !(self.lambda_floor > 0.0) {
            return bad(format!("scale floor must be positive, got {}", self.lambda_floor));
        }
        if self.s_y == 0 || self.s_z == 0 {
            return bad("training sample counts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsnpcModel {
    pub cfg: LsnpcConfig,
    pub d: usize,
    pub k: usize,
    pub label_enc: Mlp,
    pub theta: Mlp,
    pub nu_net: Option<Mlp>,
    pub kappa: Mlp,
    pub psi: Mlp,
    pub phi: Mlp,
    pub params: ParamStore,
}

/// Tape handles for `θ(x, label)`.
#[derive(Clone, Copy, Debug)]
pub struct ThetaOut {
    pub mean: Var,
    pub scale: Var,
    /// Per-row ν in learned mode.
    pub nu: Option<Var>,
}

/// Mean per-row values of the loss terms (log-densities, not negated).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub log_p_yhat: f64,
    /// Supervised only.
    pub log_p_y: f64,
    pub log_p_zhat_given_z: f64,
    pub log_p_z: f64,
    pub log_q_zhat: f64,
    pub log_q_z: f64,
}

impl std::fmt::Display for LossTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "log p(ŷ|x,ẑ)={}, log p(y|x,z)={}, log p(ẑ|z)={}, log p(z)={}, log q(ẑ)={}, log q(z)={}",
            self.log_p_yhat, self.log_p_y, self.log_p_zhat_given_z, self.log_p_z, self.log_q_zhat, self.log_q_z
        )
    }
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub terms: LossTerms,
    pub grads: Gradients,
    /// Rows whose `z` came from `θ(x, y)` (supervised only).
    pub theta_branch: usize,
    pub rows: usize,
}

/// A loss still on its tape. Parameters are bound under their store names.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub terms: LossTerms,
    pub theta_branch: usize,
    pub rows: usize,
}

impl LossGraph {
    pub fn value(&self) -> Result<f64> {
        self.tape.value(self.loss).item()
    }

    pub fn evaluate(self) -> Result<LossEval> {
        let value = self.value()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                breakdown: self.terms.to_string(),
            });
        }
        let grads = self.tape.backward_scalar(self.loss)?;
        Ok(LossEval {
            value,
            terms: self.terms,
            grads,
            theta_branch: self.theta_branch,
            rows: self.rows,
        })
    }
}

/// Rows already expanded over label samples: row `r` pairs features with one
/// drawn noisy label vector (and, for supervised batches, the true labels).
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub yhat: Tensor,
    pub y: Option<Tensor>,
}

/// Exogenous randomness for one pass through the latent chain.
#[derive(Clone, Debug)]
pub struct LatentNoise {
    /// Reparameterization noise for `ẑ`, already multiplied by the Student
    /// mixing factor `sqrt(ν/χ²)`.
    pub zhat: Tensor,
    pub z: Tensor,
}

fn mlp(prefix: &str, sizes: Vec<usize>, layer_norm: bool) -> Mlp {
    Mlp::new(prefix, sizes, Activation::Gelu, layer_norm)
}

impl LsnpcModel {
    pub fn new<R: Rng>(d: usize, k: usize, cfg: LsnpcConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if d == 0 || k == 0 {
            return Err(Error::invalid("feature and label dimensions must be positive"));
        }
        let (m, h) = (cfg.m, cfg.hidden);
        let lh = cfg.label_hidden;
        let label_enc = mlp("label_enc", vec![k, lh, lh, lh, cfg.label_embed], true);
        let theta = mlp("theta", vec![d + cfg.label_embed, h, 2 * m], true);
        let nu_net = (cfg.nu_mode == NuMode::Learned).then(|| mlp("nu", vec![d + cfg.label_embed, h, 1], true));
        let kappa = mlp("kappa", vec![m, h, 2 * m], false);
        let psi = match cfg.shift_decoder {
            ShiftDecoder::Mlp | ShiftDecoder::Residual => mlp("psi", vec![m, h, m], false),
            ShiftDecoder::Linear => mlp("psi", vec![m, m], false),
        };
        let phi = mlp("phi", vec![d + m, h, h, k], false);
        let mut params = ParamStore::new();
        for net in [Some(&label_enc), Some(&theta), nu_net.as_ref(), Some(&kappa), Some(&psi), Some(&phi)]
            .into_iter()
            .flatten()
        {
            params.merge(net.init(rng))?;
        }
        match cfg.shift_decoder {
            ShiftDecoder::Linear => params.insert(psi.weight_name(0), Tensor::identity(m)),
            ShiftDecoder::Residual => params.insert(psi.weight_name(1), Tensor::zeros(vec![h, m])),
            ShiftDecoder::Mlp => {}
        }
        Ok(LsnpcModel {
            cfg,
            d,
            k,
            label_enc,
            theta,
            nu_net,
            kappa,
            psi,
            phi,
            params,
        })
    }

    pub fn m(&self) -> usize {
        self.cfg.m
    }

    fn check_cols(&self, tape: &Tape, v: Var, want: usize, what: &str) -> Result<()> {
        let got = tape.value(v).cols();
        if got != want {
            return Err(Error::Shape {
                node: what.to_string(),
                detail: format!("expected {want} columns, got {got}"),
            });
        }
        Ok(())
    }

    /// `θ(x, labels)`: label embedding joined with the features, mapped to a
    /// mean and a floored softplus scale.
    pub fn theta_forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, labels: Var) -> Result<ThetaOut> {
        self.check_cols(tape, x, self.d, "θ features")?;
        self.check_cols(tape, labels, self.k, "θ labels")?;
        // Centre the bits at ±1: an all-zero label vector would otherwise make
        // the first normalized layer see a constant row.
        let centred = tape.scale(labels, 2.0)?;
        let centred = tape.add_scalar(centred, -1.0)?;
        let emb = self.label_enc.forward(tape, p, centred)?;
        let joined = tape.concat_cols(x, emb)?;
        let out = self.theta.forward(tape, p, joined)?;
        let m = self.m();
        let mean = tape.slice_cols(out, 0, m)?;
        let raw = tape.slice_cols(out, m, 2 * m)?;
        let scale = tape.softplus(raw)?;
        let scale = tape.add_scalar(scale, self.cfg.lambda_floor)?;
        let nu = match &self.nu_net {
            Some(net) => {
                let raw = net.forward(tape, p, joined)?;
                let r = tape.relu(raw)?;
                Some(tape.add_scalar(r, 1.0)?)
            }
            None => None,
        };
        Ok(ThetaOut { mean, scale, nu })
    }

    /// `κ(ẑ)`: mean and scale of `q(z | ẑ)`. The mean is a residual on `ẑ`,
    /// so `z` starts out in the coordinates the decoder sees during training.
    pub fn kappa_forward(&self, tape: &mut Tape, p: &BoundParams, zhat: Var) -> Result<(Var, Var)> {
        self.check_cols(tape, zhat, self.m(), "κ input")?;
        let out = self.kappa.forward(tape, p, zhat)?;
        let m = self.m();
        let mean = tape.slice_cols(out, 0, m)?;
        let mean = tape.add(zhat, mean)?;
        let raw = tape.slice_cols(out, m, 2 * m)?;
        let scale = tape.softplus(raw)?;
        Ok((mean, tape.add_scalar(scale, self.cfg.lambda_floor)?))
    }

    /// `ψ(z)`: location of `p(ẑ | z)`.
    pub fn psi_forward(&self, tape: &mut Tape, p: &BoundParams, z: Var) -> Result<Var> {
        self.check_cols(tape, z, self.m(), "ψ input")?;
        let out = self.psi.forward(tape, p, z)?;
        match self.cfg.shift_decoder {
            ShiftDecoder::Residual => tape.add(z, out),
            _ => Ok(out),
        }
    }

    /// `φ(x, z)`: clamped label probabilities.
    pub fn phi_forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, z: Var) -> Result<Var> {
        self.check_cols(tape, x, self.d, "φ features")?;
        self.check_cols(tape, z, self.m(), "φ latent")?;
        let joined = tape.concat_cols(x, z)?;
        let logits = self.phi.forward(tape, p, joined)?;
        tape_clamped_probs(tape, logits)
    }

    fn single<T>(&self, f: impl FnOnce(&Self, &mut Tape, &BoundParams) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        f(self, &mut tape, &p)
    }

    /// Encodes one `(x, y)` pair to the mean and scale of `θ`.
    pub fn encode_xy(&self, x: &[f64], y: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.single(|me, t, p| {
            let xv = t.input("x", row_tensor(x, me.d, "features")?);
            let yv = t.input("y", label_row(y, me.k)?);
            let out = me.theta_forward(t, p, xv, yv)?;
            Ok((t.value(out.mean).data().to_vec(), t.value(out.scale).data().to_vec()))
        })
    }

    pub fn encode_zhat_to_z(&self, zhat: &[f64]) -> Result<DiagNormalParams> {
        self.single(|me, t, p| {
            let zv = t.input("zhat", row_tensor(zhat, me.m(), "latent")?);
            let (mu, s) = me.kappa_forward(t, p, zv)?;
            DiagNormalParams::new(t.value(mu).data().to_vec(), t.value(s).data().to_vec())
        })
    }

    pub fn decode_shift(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.single(|me, t, p| {
            let zv = t.input("z", row_tensor(z, me.m(), "latent")?);
            let out = me.psi_forward(t, p, zv)?;
            Ok(t.value(out).data().to_vec())
        })
    }

    pub fn decode_labels(&self, x: &[f64], z: &[f64]) -> Result<BernoulliVec> {
        self.single(|me, t, p| {
            let xv = t.input("x", row_tensor(x, me.d, "features")?);
            let zv = t.input("z", row_tensor(z, me.m(), "latent")?);
            let out = me.phi_forward(t, p, xv, zv)?;
            BernoulliVec::new(t.value(out).data().to_vec())
        })
    }

    /// Per-instance degrees of freedom of `q(ẑ | x, ŷ)` in learned mode.
    pub fn learned_nu(&self, x: &[f64], yhat: &[u8]) -> Result<f64> {
        if self.nu_net.is_none() {
            return Err(Error::invalid("learned_nu requires the learned ν mode"));
        }
        self.single(|me, t, p| {
            let xv = t.input("x", row_tensor(x, me.d, "features")?);
            let yv = t.input("y", label_row(yhat, me.k)?);
            let out = me.theta_forward(t, p, xv, yv)?;
            t.value(out.nu.expect("learned mode")).item()
        })
    }

    /// Draws the chain noise for `rows` rows. `nus` holds the current ν per
    /// row (ignored by the Normal family). The Gaussian draws and the χ²
    /// draws come from separate streams, so both proposal families see the
    /// same Gaussian noise for the same `rng`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, nus: &[f64], rng: &mut R) -> LatentNoise {
        let m = self.m();
        let mut eps_hat = <rng::Rng as rand::SeedableRng>::seed_from_u64(rng.next_u64());
        let mut chi2 = <rng::Rng as rand::SeedableRng>::seed_from_u64(rng.next_u64());
        let mut eps_z = <rng::Rng as rand::SeedableRng>::seed_from_u64(rng.next_u64());
        let mut zhat = Vec::with_capacity(rows * m);
        let mut z = Vec::with_capacity(rows * m);
        for &nu in nus.iter().take(rows) {
            let eps = standard_normal_vec(&mut eps_hat, m);
            zhat.extend(self.student_scaling(eps, nu, &mut chi2));
            z.extend(standard_normal_vec(&mut eps_z, m));
        }
        LatentNoise {
            zhat: Tensor::matrix(rows, m, zhat).expect("shape"),
            z: Tensor::matrix(rows, m, z).expect("shape"),
        }
    }

    /// One row of `ẑ` reparameterization noise: standard Normal, scaled by
    /// `sqrt(ν/χ²)` for the Student family.
    pub fn zhat_noise<R: Rng + ?Sized>(&self, nu: f64, rng: &mut R) -> Vec<f64> {
        let eps = standard_normal_vec(rng, self.m());
        self.student_scaling(eps, nu, rng)
    }

    fn student_scaling<R: Rng + ?Sized>(&self, eps: Vec<f64>, nu: f64, rng: &mut R) -> Vec<f64> {
        let factor = |rng: &mut R| (nu / chi2_sample(rng, nu).max(f64::MIN_POSITIVE)).sqrt();
        match (self.cfg.family, self.cfg.coupling) {
            (ProposalFamily::Normal, _) => eps,
            (ProposalFamily::Student, StudentCoupling::Joint) => {
                let f = factor(rng);
                eps.iter().map(|e| e * f).collect()
            }
            (ProposalFamily::Student, StudentCoupling::Independent) => eps.iter().map(|e| e * factor(rng)).collect(),
        }
    }

    pub(crate) fn nu_values(&self, tape: &Tape, th: &ThetaOut, rows: usize) -> Vec<f64> {
        match th.nu {
            Some(v) => tape.value(v).data().to_vec(),
            None => vec![self.cfg.nu; rows],
        }
    }

    /// `log q(ẑ | x, ŷ)` per row.
    fn log_q_zhat(&self, tape: &mut Tape, zhat: Var, th: &ThetaOut) -> Result<Var> {
        match self.cfg.family {
            ProposalFamily::Normal => tape_logpdf_normal(tape, zhat, th.mean, th.scale),
            ProposalFamily::Student => {
                let nu = match th.nu {
                    Some(v) => Nu::PerRow(v),
                    None => Nu::Fixed(self.cfg.nu),
                };
                tape_logpdf_student(tape, zhat, th.mean, Some(th.scale), nu, self.cfg.coupling)
            }
        }
    }

    /// `log p(ẑ | z)` per row: identity-scale Student around `ψ(z)`.
    fn log_p_zhat(&self, tape: &mut Tape, p: &BoundParams, zhat: Var, z: Var) -> Result<Var> {
        let loc = self.psi_forward(tape, p, z)?;
        tape_logpdf_student(tape, zhat, loc, None, Nu::Fixed(self.cfg.nu0), self.cfg.coupling)
    }

    /// Samples `ẑ ~ q(ẑ | x, ŷ)` and `z ~ q(z | ẑ)` on the tape.
    fn chain(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        yhat: Var,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Chain> {
        let th = self.theta_forward(tape, p, x, yhat)?;
        let rows = tape.value(x).rows();
        let nus = self.nu_values(tape, &th, rows);
        let noise = self.draw_noise(rows, &nus, rng);
        let e_hat = tape.constant(noise.zhat);
        let shift = tape.mul(th.scale, e_hat)?;
        let zhat = tape.add(th.mean, shift)?;
        let (kmu, ks) = self.kappa_forward(tape, p, zhat)?;
        let e_z = tape.constant(noise.z.clone());
        let shift = tape.mul(ks, e_z)?;
        let z = tape.add(kmu, shift)?;
        Ok(Chain {
            th,
            zhat,
            z,
            kappa: (kmu, ks),
            eps_z: noise.z,
        })
    }

    /// Negative ELBO on noisy rows, averaged over rows.
    pub fn unsupervised_loss(&self, batch: &Batch, rng: &mut dyn rand::RngCore) -> Result<LossEval> {
        self.unsupervised_graph(batch, rng)?.evaluate()
    }

    /// Negative supervised ELBO on clean rows. `z` comes from `θ(x, y)` with
    /// probability η per row and from `q(z | ẑ)` otherwise; the entropy term
    /// uses the log-density of the branch that produced `z`.
    pub fn supervised_loss(&self, batch: &Batch, rng: &mut dyn rand::RngCore) -> Result<LossEval> {
        self.supervised_graph(batch, rng)?.evaluate()
    }

    /// The unsupervised loss as a live tape, for inspection and gradient
    /// checks. Same randomness as [`Self::unsupervised_loss`].
    pub fn unsupervised_graph(&self, batch: &Batch, rng: &mut dyn rand::RngCore) -> Result<LossGraph> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.input("x", batch.x.clone());
        let yhat = tape.input("yhat", batch.yhat.clone());
        let c = self.chain(&mut tape, &p, x, yhat, rng)?;
        let probs = self.phi_forward(&mut tape, &p, x, c.zhat)?;
        let rec = tape_log_bernoulli(&mut tape, yhat, probs)?;
        let lp_zhat = self.log_p_zhat(&mut tape, &p, c.zhat, c.z)?;
        let lp_z = tape_logpdf_std_normal(&mut tape, c.z)?;
        let lq_zhat = self.log_q_zhat(&mut tape, c.zhat, &c.th)?;
        let lq_z = tape_logpdf_normal(&mut tape, c.z, c.kappa.0, c.kappa.1)?;
        let parts = Parts {
            rec,
            rec_y: None,
            lp_zhat,
            lp_z,
            lq_zhat,
            lq_z,
        };
        self.graph(tape, parts, 0)
    }

    /// The supervised loss as a live tape.
    pub fn supervised_graph(&self, batch: &Batch, rng: &mut dyn rand::RngCore) -> Result<LossGraph> {
        let y_t = batch
            .y
            .clone()
            .ok_or_else(|| Error::invalid("supervised batch needs true labels"))?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.input("x", batch.x.clone());
        let yhat = tape.input("yhat", batch.yhat.clone());
        let y = tape.input("y", y_t);
        let c = self.chain(&mut tape, &p, x, yhat, rng)?;
        let rows = batch.x.rows();
        let mask: Vec<f64> = (0..rows).map(|_| f64::from(u8::from(rng.gen::<f64>() < self.cfg.eta))).collect();
        let theta_branch = mask.iter().filter(|&&b| b == 1.0).count();
        let (z, lq_z) = if theta_branch == 0 {
            (c.z, tape_logpdf_normal(&mut tape, c.z, c.kappa.0, c.kappa.1)?)
        } else {
            // The θ(x, y) branch reuses the q(z | ẑ) noise.
            let ty = self.theta_forward(&mut tape, &p, x, y)?;
            let e_z = tape.constant(c.eps_z.clone());
            let shift = tape.mul(ty.scale, e_z)?;
            let z_theta = tape.add(ty.mean, shift)?;
            let mvec = Tensor::matrix(rows, 1, mask).expect("shape");
            let keep = tape.constant(mvec.clone());
            let other = tape.constant(mvec.map(|v| 1.0 - v));
            let a = tape.mul(keep, z_theta)?;
            let b = tape.mul(other, c.z)?;
            let z = tape.add(a, b)?;
            let lq_theta = tape_logpdf_normal(&mut tape, z, ty.mean, ty.scale)?;
            let lq_kappa = tape_logpdf_normal(&mut tape, z, c.kappa.0, c.kappa.1)?;
            let a = tape.mul(keep, lq_theta)?;
            let b = tape.mul(other, lq_kappa)?;
            (z, tape.add(a, b)?)
        };
        let probs_hat = self.phi_forward(&mut tape, &p, x, c.zhat)?;
        let rec = tape_log_bernoulli(&mut tape, yhat, probs_hat)?;
        let probs_y = self.phi_forward(&mut tape, &p, x, z)?;
        let rec_y = tape_log_bernoulli(&mut tape, y, probs_y)?;
        let lp_zhat = self.log_p_zhat(&mut tape, &p, c.zhat, z)?;
        let lp_z = tape_logpdf_std_normal(&mut tape, z)?;
        let lq_zhat = self.log_q_zhat(&mut tape, c.zhat, &c.th)?;
        let parts = Parts {
            rec,
            rec_y: Some(rec_y),
            lp_zhat,
            lp_z,
            lq_zhat,
            lq_z,
        };
        self.graph(tape, parts, theta_branch)
    }

    fn graph(&self, mut tape: Tape, parts: Parts, theta_branch: usize) -> Result<LossGraph> {
        let rows = tape.value(parts.rec).rows();
        let mean = |t: &Tape, v: Var| t.value(v).data().iter().sum::<f64>() / rows as f64;
        let terms = LossTerms {
            log_p_yhat: mean(&tape, parts.rec),
            log_p_y: parts.rec_y.map_or(0.0, |v| mean(&tape, v)),
            log_p_zhat_given_z: mean(&tape, parts.lp_zhat),
            log_p_z: mean(&tape, parts.lp_z),
            log_q_zhat: mean(&tape, parts.lq_zhat),
            log_q_z: mean(&tape, parts.lq_z),
        };
        let a = tape.add(parts.lp_zhat, parts.lp_z)?;
        let a = tape.sub(a, parts.lq_zhat)?;
        let a = tape.sub(a, parts.lq_z)?;
        let latent = tape.scale(a, self.cfg.beta)?;
        let mut elbo = tape.add(parts.rec, latent)?;
        if let Some(ry) = parts.rec_y {
            elbo = tape.add(elbo, ry)?;
        }
        let total = tape.mean_all(elbo)?;
        let loss = tape.neg(total)?;
        Ok(LossGraph {
            tape,
            loss,
            terms,
            theta_branch,
            rows,
        })
    }

    /// Writes the parameters and a `.meta` manifest of every hyperparameter.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.params.as_map())?;
        std::fs::write(meta_path(path), self.manifest())?;
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let c = &self.cfg;
        let entries: Vec<(&str, String)> = vec![
            ("d", self.d.to_string()),
            ("k", self.k.to_string()),
            ("m", c.m.to_string()),
            ("nu", c.nu.to_string()),
            ("nu0", c.nu0.to_string()),
            ("beta", c.beta.to_string()),
            ("eta", c.eta.to_string()),
            ("lambda_floor", c.lambda_floor.to_string()),
            ("family", c.family.to_string()),
            ("nu_mode", c.nu_mode.to_string()),
            ("chi2", c.coupling.to_string()),
            ("shift_decoder", c.shift_decoder.to_string()),
            ("hidden", c.hidden.to_string()),
            ("label_hidden", c.label_hidden.to_string()),
            ("label_embed", c.label_embed.to_string()),
            ("s_y", c.s_y.to_string()),
            ("s_z", c.s_z.to_string()),
            ("sampler", c.sampler.to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = load_checkpoint(path)?;
        let mpath = meta_path(path);
        let text = std::fs::read_to_string(&mpath)?;
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(a, b)| (a.trim(), b.trim()))
            .collect();
        let get = |key: &str| kv.get(key).copied().ok_or_else(|| Error::format(&mpath, format!("missing `{key}`")));
        fn parse<T: std::str::FromStr>(v: &str, key: &str, path: &Path) -> Result<T> {
            v.parse().map_err(|_| Error::format(path, format!("bad value for `{key}`")))
        }
        let sampler: LabelSampler = parse(get("sampler")?, "sampler", &mpath)?;
        let cfg = LsnpcConfig {
            m: parse(get("m")?, "m", &mpath)?,
            nu: parse(get("nu")?, "nu", &mpath)?,
            nu0: parse(get("nu0")?, "nu0", &mpath)?,
            beta: parse(get("beta")?, "beta", &mpath)?,
            eta: parse(get("eta")?, "eta", &mpath)?,
            lambda_floor: parse(get("lambda_floor")?, "lambda_floor", &mpath)?,
            family: get("family")?.parse()?,
            nu_mode: get("nu_mode")?.parse()?,
            coupling: get("chi2")?.parse()?,
            shift_decoder: get("shift_decoder")?.parse()?,
            hidden: parse(get("hidden")?, "hidden", &mpath)?,
            label_hidden: parse(get("label_hidden")?, "label_hidden", &mpath)?,
            label_embed: parse(get("label_embed")?, "label_embed", &mpath)?,
            s_y: parse(get("s_y")?, "s_y", &mpath)?,
            s_z: parse(get("s_z")?, "s_z", &mpath)?,
            sampler,
        };
        let d = parse(get("d")?, "d", &mpath)?;
        let k = parse(get("k")?, "k", &mpath)?;
        let mut model = LsnpcModel::new(d, k, cfg, &mut rng::stream(0, "load"))?;
        for (name, t) in model.params.iter_mut() {
            let loaded = tensors
                .get(name)
                .ok_or_else(|| Error::format(path, format!("checkpoint lacks `{name}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::format(path, format!("shape mismatch for `{name}`")));
            }
            *t = loaded.clone();
        }
        if tensors.len() != model.params.as_map().len() {
            return Err(Error::format(path, "checkpoint has unexpected tensors"));
        }
        Ok(model)
    }
}

struct Chain {
    th: ThetaOut,
    zhat: Var,
    z: Var,
    kappa: (Var, Var),
    eps_z: Tensor,
}

struct Parts {
    rec: Var,
    rec_y: Option<Var>,
    lp_zhat: Var,
    lp_z: Var,
    lq_zhat: Var,
    lq_z: Var,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn row_tensor(v: &[f64], want: usize, what: &str) -> Result<Tensor> {
    if v.len() != want {
        return Err(Error::Shape {
            node: what.to_string(),
            detail: format!("expected {want} values, got {}", v.len()),
        });
    }
    Ok(Tensor::row(v.to_vec()))
}

fn label_row(y: &[u8], k: usize) -> Result<Tensor> {
    row_tensor(&y.iter().map(|&b| b as f64).collect::<Vec<_>>(), k, "labels")
}

/// Expands `x` (B rows) and base-classifier probabilities into a batch of
/// `B·s_y·s_z` rows: `s_y` label draws per instance, each repeated `s_z`
/// times so that it gets `s_z` latent samples.
pub fn expand_batch<R: Rng>(
    x: &Tensor,
    probs: &Tensor,
    y: Option<&Labels>,
    s_y: usize,
    s_z: usize,
    sampler: LabelSampler,
    rng: &mut R,
) -> Batch {
    let (b, k) = (x.rows(), probs.cols());
    let mut yhat = Vec::with_capacity(b * s_y * s_z * k);
    for r in 0..b {
        for draw in sample_predictions(probs.row_slice(r), s_y, sampler, rng) {
            for _ in 0..s_z {
                yhat.extend(draw.iter().map(|&v| v as f64));
            }
        }
    }
    let reps = s_y * s_z;
    Batch {
        x: x.repeat_rows(reps),
        yhat: Tensor::matrix(b * reps, k, yhat).expect("shape"),
        y: y.map(|l| l.to_tensor().repeat_rows(reps)),
    }
}

/// Training rows for one part of the objective.
#[derive(Clone, Debug)]
pub struct TrainSet<'a> {
    pub x: &'a Tensor,
    /// Base-classifier probabilities for the same rows.
    pub probs: &'a Tensor,
    /// True labels (clean part only).
    pub y: Option<&'a Labels>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub unsupervised: f64,
    pub supervised: Option<f64>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LsnpcModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
}

/// Scores a model for checkpoint selection; higher is better.
pub type Selector<'a> = &'a dyn Fn(&LsnpcModel) -> Result<f64>;

/// Trains by sweeping every noisy batch with the unsupervised loss and then
/// every clean batch with the supervised loss, once per epoch. With an empty
/// clean part this is plain unsupervised training. When `select` is given,
/// the best-scoring epoch is kept.
pub fn train_semi_supervised(
    mut model: LsnpcModel,
    noisy: &TrainSet<'_>,
    clean: Option<&TrainSet<'_>>,
    cfg: &TrainConfig,
    select: Option<Selector<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clean = clean.filter(|c| c.x.rows() > 0);
    if let Some(c) = clean {
        if c.y.is_none() {
            return Err(Error::invalid("clean training rows need true labels"));
        }
    }
    let mut order = rng::stream(cfg.seed, "lsnpc-batches");
    let mut noise = rng::stream(cfg.seed, "lsnpc-noise");
    let mut opt = cfg.optimizer();
    let schedule = cfg.schedule();
    let (s_y, s_z, sampler) = (model.cfg.s_y, model.cfg.s_z, model.cfg.sampler);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        let noisy_batches = shuffled_batches(noisy.x.rows(), cfg.batch_size, &mut order);
        let clean_batches = clean.map_or_else(Vec::new, |c| shuffled_batches(c.x.rows(), cfg.batch_size, &mut order));
        let steps = (noisy_batches.len() + clean_batches.len()) as f64;
        let mut step = 0.0;
        let diverged = |e: Error| match e {
            Error::NonFiniteLoss { breakdown } => Error::Diverged {
                epoch,
                detail: breakdown,
            },
            other => other,
        };
        let mut u_sum = 0.0;
        for idx in &noisy_batches {
            let batch = expand_batch(&noisy.x.select_rows(idx), &noisy.probs.select_rows(idx), None, s_y, s_z, sampler, &mut noise);
            let eval = model.unsupervised_loss(&batch, &mut noise).map_err(diverged)?;
            u_sum += eval.value;
            opt.step(&mut model.params, &eval.grads, schedule.lr_at(epoch as f64 + step / steps))?;
            step += 1.0;
        }
        let mut l_sum = 0.0;
        if let Some(c) = clean {
            let y = c.y.expect("checked above");
            for idx in &clean_batches {
                let yb = y.select_rows(idx);
                let batch = expand_batch(&c.x.select_rows(idx), &c.probs.select_rows(idx), Some(&yb), s_y, s_z, sampler, &mut noise);
                let eval = model.supervised_loss(&batch, &mut noise).map_err(diverged)?;
                l_sum += eval.value;
                opt.step(&mut model.params, &eval.grads, schedule.lr_at(epoch as f64 + step / steps))?;
                step += 1.0;
            }
        }
        let score = select.map(|f| f(&model)).transpose()?;
        if let Some(s) = score {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, model.params.clone(), epoch + 1));
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            unsupervised: u_sum / noisy_batches.len().max(1) as f64,
            supervised: clean.map(|_| l_sum / clean_batches.len().max(1) as f64),
            score,
        };
        log::debug!("lsnpc epoch {}: U={:.4} L={:?} score={:?}", record.epoch, record.unsupervised, record.supervised, record.score);
        history.push(record);
    }
    let (best_epoch, best_score) = match best {
        Some((s, params, e)) => {
            model.params = params;
            (e, Some(s))
        }
        None => (cfg.epochs, None),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_score,
    })
}
