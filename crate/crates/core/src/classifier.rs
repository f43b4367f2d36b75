//! The noisy base classifier: a sigmoid-output MLP trained with binary
//! cross-entropy on the corrupted labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Labels;
use crate::distributions::{tape_clamped_probs, tape_log_bernoulli};
use crate::error::{Error, Result};
use crate::metrics::micro_f1;
use crate::nn::{Activation, Mlp, ParamStore};
use crate::optim::{shuffled_batches, TrainConfig};
use crate::rng;
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BaseClassifier {
    pub mlp: Mlp,
    pub params: ParamStore,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub seed: u64,
    pub val_micro_f1: Option<f64>,
}

/// How noisy label vectors are drawn from the classifier's probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum LabelSampler {
    /// Independent Bernoulli per label.
    #[default]
    Independent,
    /// Bernoulli marginals coupled through an equicorrelated Gaussian copula.
    Copula { rho: f64 },
}

impl std::str::FromStr for LabelSampler {
    type Err = Error;
    /// `independent` or `copula:<rho>` with `rho` in [0, 1].
    fn from_str(s: &str) -> Result<Self> {
        if s == "independent" {
            return Ok(LabelSampler::Independent);
        }
        let rho = s
            .strip_prefix("copula:")
            .and_then(|r| r.parse::<f64>().ok())
            .filter(|r| (0.0..=1.0).contains(r))
            .ok_or_else(|| Error::Config(format!("unknown label sampler `{s}`")))?;
        Ok(LabelSampler::Copula { rho })
    }
}

impl std::fmt::Display for LabelSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSampler::Independent => f.write_str("independent"),
            LabelSampler::Copula { rho } => write!(f, "copula:{rho}"),
        }
    }
}

impl BaseClassifier {
    pub fn new<R: Rng>(d: usize, k: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(k);
        let mlp = Mlp::new("base", sizes, Activation::Gelu, false);
        let params = mlp.init(rng);
        BaseClassifier {
            mlp,
            params,
            epochs_trained: 0,
            best_epoch: 0,
            seed: 0,
            val_micro_f1: None,
        }
    }

    pub fn d(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn k(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Writes the parameters and a `.meta` sidecar next to them.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.params.as_map())?;
        let hidden: Vec<String> = self.mlp.sizes[1..self.mlp.sizes.len() - 1].iter().map(usize::to_string).collect();
        let meta = format!(
            "d = {}\nk = {}\nhidden = {}\nepochs = {}\nbest_epoch = {}\nseed = {}\nval_micro_f1 = {}\n",
            self.d(),
            self.k(),
            hidden.join(","),
            self.epochs_trained,
            self.best_epoch,
            self.seed,
            self.val_micro_f1.map_or("none".into(), |v| v.to_string()),
        );
        std::fs::write(meta_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = load_checkpoint(path)?;
        let mpath = meta_path(path);
        let text = std::fs::read_to_string(&mpath)?;
        let meta: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(a, b)| (a.trim(), b.trim()))
            .collect();
        let get = |key: &str| meta.get(key).copied().ok_or_else(|| Error::format(&mpath, format!("missing `{key}`")));
        let num = |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| Error::format(&mpath, format!("bad `{key}`"))) };
        let mut sizes = vec![num("d")?];
        for h in get("hidden")?.split(',').filter(|s| !s.is_empty()) {
            sizes.push(h.parse().map_err(|_| Error::format(&mpath, "bad `hidden`"))?);
        }
        sizes.push(num("k")?);
        let mlp = Mlp::new("base", sizes, Activation::Gelu, false);
        let params = ParamStore::from_map(tensors);
        for l in 0..mlp.layers() {
            let w = params.require(&mlp.weight_name(l))?;
            if w.shape() != [mlp.sizes[l], mlp.sizes[l + 1]] {
                return Err(Error::format(path, "checkpoint does not match the recorded architecture"));
            }
        }
        Ok(BaseClassifier {
            mlp,
            params,
            epochs_trained: num("epochs")?,
            best_epoch: num("best_epoch")?,
            seed: get("seed")?.parse().map_err(|_| Error::format(&mpath, "bad `seed`"))?,
            val_micro_f1: get("val_micro_f1")?.parse().ok(),
        })
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Mean binary cross-entropy per cell on one batch, recorded on `tape`.
fn batch_bce(h: &BaseClassifier, tape: &mut Tape, x: Tensor, y: Tensor) -> Result<crate::tensor::Var> {
    let cells = (y.rows() * y.cols()) as f64;
    let p = h.params.bind(tape);
    let xv = tape.input("x", x);
    let yv = tape.input("y", y);
    let logits = h.mlp.forward(tape, &p, xv)?;
    let probs = tape_clamped_probs(tape, logits)?;
    let ll = tape_log_bernoulli(tape, yv, probs)?;
    let total = tape.sum_all(ll)?;
    tape.scale(total, -1.0 / cells)
}

/// Trains on `(x, y)`; when `validation` is given, keeps the epoch with the
/// best validation micro-F1 at threshold 0.5.
pub fn train_base(
    x: &Tensor,
    y: &Labels,
    validation: Option<(&Tensor, &Labels)>,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<BaseClassifier> {
    cfg.validate()?;
    if x.rows() != y.n() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            got: y.n(),
        });
    }
    let mut h = BaseClassifier::new(x.cols(), y.k(), hidden, &mut rng::stream(cfg.seed, "base-init"));
    h.seed = cfg.seed;
    let mut order_rng = rng::stream(cfg.seed, "base-batches");
    let mut opt = cfg.optimizer();
    let schedule = cfg.schedule();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(x.rows(), cfg.batch_size, &mut order_rng);
        let nb = batches.len() as f64;
        for (b, idx) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let loss = batch_bce(&h, &mut tape, x.select_rows(idx), y.select_rows(idx).to_tensor())?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("base classifier loss {value}"),
                });
            }
            let grads = tape.backward_scalar(loss)?;
            opt.step(&mut h.params, &grads, schedule.lr_at(epoch as f64 + b as f64 / nb))?;
        }
        h.epochs_trained = epoch + 1;
        if let Some((vx, vy)) = validation {
            let f1 = micro_f1(vy, &threshold(&predict_probs(&h, vx)?, 0.5))?;
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, h.params.clone(), epoch + 1));
            }
        }
    }
    match best {
        Some((f1, params, epoch)) => {
            h.params = params;
            h.best_epoch = epoch;
            h.val_micro_f1 = Some(f1);
        }
        None => h.best_epoch = h.epochs_trained,
    }
    Ok(h)
}

/// Mean binary cross-entropy of `h` on `(x, y)`.
pub fn bce_loss(h: &BaseClassifier, x: &Tensor, y: &Labels) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = batch_bce(h, &mut tape, x.clone(), y.to_tensor())?;
    tape.value(loss).item()
}

/// Per-label probabilities, strictly inside (ε, 1−ε).
pub fn predict_probs(h: &BaseClassifier, x: &Tensor) -> Result<Tensor> {
    if x.cols() != h.d() {
        return Err(Error::DimMismatch {
            expected: h.d(),
            got: x.cols(),
        });
    }
    let mut tape = Tape::new();
    let p = h.params.bind(&mut tape);
    let xv = tape.input("x", x.clone());
    let logits = h.mlp.forward(&mut tape, &p, xv)?;
    let probs = tape_clamped_probs(&mut tape, logits)?;
    Ok(tape.value(probs).clone())
}

pub fn threshold(probs: &Tensor, tau: f64) -> Labels {
    let bits = probs.data().iter().map(|&p| u8::from(p > tau)).collect();
    Labels::new(probs.rows(), probs.cols(), bits).expect("shape")
}

/// Draws `s` label vectors from the per-label probabilities `p`.
pub fn sample_predictions<R: Rng>(p: &[f64], s: usize, sampler: LabelSampler, rng: &mut R) -> Vec<Vec<u8>> {
    match sampler {
        LabelSampler::Independent => (0..s)
            .map(|_| p.iter().map(|&pi| u8::from(rng.gen::<f64>() < pi)).collect())
            .collect(),
        LabelSampler::Copula { rho } => {
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            let (a, b) = (rho.clamp(0.0, 1.0).sqrt(), (1.0 - rho.clamp(0.0, 1.0)).sqrt());
            (0..s)
                .map(|_| {
                    let shared: f64 = rng.sample(StandardNormal);
                    p.iter()
                        .map(|&pi| {
                            let e: f64 = rng.sample(StandardNormal);
                            u8::from(normal.cdf(a * shared + b * e) < pi)
                        })
                        .collect()
                })
                .collect()
        }
    }
}
