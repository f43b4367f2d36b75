//! Monte-Carlo label correction and the nearest-neighbour baseline.
//!
//! For each instance the corrected probability vector is the average of
//! `φ(x, z)` over chains `ŷ ~ p_h(ŷ | x)`, `ẑ ~ q(ẑ | x, ŷ)`, `z ~ q(z | ẑ)`.
//! The final draw `y ~ p(y | x, z)` is replaced by its mean.

use crate::classifier::{predict_probs, sample_predictions, BaseClassifier, LabelSampler};
use crate::data::Labels;
use crate::distributions::standard_normal_vec;
use crate::error::{Error, Result};
use crate::model::LsnpcModel;
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionConfig {
    pub s_y: usize,
    pub s_zhat: usize,
    pub s_z: usize,
    pub tau: f64,
    pub seed: u64,
    pub sampler: LabelSampler,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            s_y: 8,
            s_zhat: 4,
            s_z: 1,
            tau: 0.5,
            seed: 0,
            sampler: LabelSampler::Independent,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_y == 0 || self.s_zhat == 0 || self.s_z == 0 {
            return Err(Error::invalid("correction sample counts must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.s_y * self.s_zhat * self.s_z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionResult {
    pub probs: Tensor,
    pub labels: Labels,
    /// Monte-Carlo standard error of each corrected probability.
    pub se: Tensor,
    pub tau: f64,
}

/// Strict threshold: a probability equal to `tau` maps to 0.
pub fn binarize(probs: &Tensor, tau: f64) -> Result<Labels> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1)")));
    }
    let bits = probs.data().iter().map(|&p| u8::from(p > tau)).collect();
    Labels::new(probs.rows(), probs.cols(), bits)
}

const CHUNK_ROWS: usize = 64;

/// Corrects the base classifier's predictions on `x`. Row `r` draws from its
/// own random stream, so results do not depend on chunking.
pub fn correct(model: &LsnpcModel, h: &BaseClassifier, x: &Tensor, cfg: &CorrectionConfig) -> Result<CorrectionResult> {
    cfg.validate()?;
    if h.d() != model.d || x.cols() != model.d {
        return Err(Error::DimMismatch {
            expected: model.d,
            got: if h.d() != model.d { h.d() } else { x.cols() },
        });
    }
    if h.k() != model.k {
        return Err(Error::DimMismatch {
            expected: model.k,
            got: h.k(),
        });
    }
    let base = predict_probs(h, x)?;
    correct_from_probs(model, x, &base, cfg)
}

/// As [`correct`], with the base classifier's probabilities precomputed.
pub fn correct_from_probs(model: &LsnpcModel, x: &Tensor, base: &Tensor, cfg: &CorrectionConfig) -> Result<CorrectionResult> {
    cfg.validate()?;
    let (n, k) = (x.rows(), model.k);
    let mut probs = Vec::with_capacity(n * k);
    let mut se = Vec::with_capacity(n * k);
    for start in (0..n).step_by(CHUNK_ROWS) {
        let rows: Vec<usize> = (start..(start + CHUNK_ROWS).min(n)).collect();
        let (p, s) = correct_chunk(model, x, base, &rows, cfg)?;
        probs.extend(p);
        se.extend(s);
    }
    let probs = Tensor::matrix(n, k, probs)?;
    Ok(CorrectionResult {
        labels: binarize(&probs, cfg.tau)?,
        probs,
        se: Tensor::matrix(n, k, se)?,
        tau: cfg.tau,
    })
}

fn correct_chunk(
    model: &LsnpcModel,
    x: &Tensor,
    base: &Tensor,
    rows: &[usize],
    cfg: &CorrectionConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, k) = (model.m(), model.k);
    let per_yhat = cfg.s_zhat * cfg.s_z;
    let chains = cfg.chains();
    let mut rngs: Vec<_> = rows.iter().map(|&r| rng::row_stream(cfg.seed, "correct", r as u64)).collect();

    // Chain rows are ordered (instance, ŷ draw, ẑ draw, z draw).
    let mut yhat = Vec::with_capacity(rows.len() * chains * k);
    for (i, &r) in rows.iter().enumerate() {
        for draw in sample_predictions(base.row_slice(r), cfg.s_y, cfg.sampler, &mut rngs[i]) {
            for _ in 0..per_yhat {
                yhat.extend(draw.iter().map(|&b| b as f64));
            }
        }
    }
    let total = rows.len() * chains;
    let x_rep = x.select_rows(rows).repeat_rows(chains);

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.input("x", x_rep);
    let yv = tape.input("yhat", Tensor::matrix(total, k, yhat)?);
    let th = model.theta_forward(&mut tape, &p, xv, yv)?;
    let nus = model.nu_values(&tape, &th, total);
    let mut e_hat = Vec::with_capacity(total * m);
    let mut e_z = Vec::with_capacity(total * m);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for a in 0..cfg.s_y * cfg.s_zhat {
            let first = (i * cfg.s_y * cfg.s_zhat + a) * cfg.s_z;
            let shared = model.zhat_noise(nus[first], rng);
            for _ in 0..cfg.s_z {
                e_hat.extend_from_slice(&shared);
                e_z.extend(standard_normal_vec(rng, m));
            }
        }
    }
    let e_hat = tape.constant(Tensor::matrix(total, m, e_hat)?);
    let shift = tape.mul(th.scale, e_hat)?;
    let zhat = tape.add(th.mean, shift)?;
    let (kmu, ks) = model.kappa_forward(&mut tape, &p, zhat)?;
    let e_z = tape.constant(Tensor::matrix(total, m, e_z)?);
    let shift = tape.mul(ks, e_z)?;
    let z = tape.add(kmu, shift)?;
    let out = model.phi_forward(&mut tape, &p, xv, z)?;
    let out = tape.value(out);

    let mut means = Vec::with_capacity(rows.len() * k);
    let mut errs = Vec::with_capacity(rows.len() * k);
    for i in 0..rows.len() {
        for j in 0..k {
            let cell = |c: usize| out.get(i * chains + c, j);
            let mean = (0..chains).map(cell).sum::<f64>() / chains as f64;
            // Label draws are independent; chains sharing a draw are not.
            let se = if cfg.s_y > 1 {
                let groups: Vec<f64> = (0..cfg.s_y)
                    .map(|g| (0..per_yhat).map(|c| cell(g * per_yhat + c)).sum::<f64>() / per_yhat as f64)
                    .collect();
                let var = groups.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (cfg.s_y - 1) as f64;
                (var / cfg.s_y as f64).sqrt()
            } else if chains > 1 {
                let var = (0..chains).map(|c| (cell(c) - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
                (var / chains as f64).sqrt()
            } else {
                0.0
            };
            means.push(mean);
            errs.push(se);
        }
    }
    Ok((means, errs))
}

/// Per-label majority vote over the `k_neighbors` Euclidean-nearest training
/// rows; exactly half the votes counts as positive. Distance ties go to the
/// lower training index.
pub fn knn_correct(train_x: &Tensor, train_y: &Labels, x: &Tensor, k_neighbors: usize) -> Result<Labels> {
    if k_neighbors == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k_neighbors > train_x.rows() {
        return Err(Error::invalid(format!("K = {k_neighbors} exceeds {} training rows", train_x.rows())));
    }
    if train_x.rows() != train_y.n() {
        return Err(Error::DimMismatch {
            expected: train_x.rows(),
            got: train_y.n(),
        });
    }
    if train_x.cols() != x.cols() {
        return Err(Error::DimMismatch {
            expected: train_x.cols(),
            got: x.cols(),
        });
    }
    let k = train_y.k();
    let mut bits = Vec::with_capacity(x.rows() * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train_x.rows());
    for q in 0..x.rows() {
        let query = x.row_slice(q);
        dist.clear();
        dist.extend((0..train_x.rows()).map(|i| {
            let d = train_x.row_slice(i).iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (d, i)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dist.select_nth_unstable_by(k_neighbors - 1, cmp);
        let mut votes = vec![0usize; k];
        for &(_, i) in &dist[..k_neighbors] {
            for (v, &b) in votes.iter_mut().zip(train_y.row(i)) {
                *v += b as usize;
            }
        }
        bits.extend(votes.iter().map(|&v| u8::from(2 * v >= k_neighbors)));
    }
    Labels::new(x.rows(), k, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_is_strict() {
        let p = Tensor::row(vec![0.5, 0.500_001, 0.2]);
        assert_eq!(binarize(&p, 0.5).unwrap().bits(), &[0, 1, 0]);
        assert_eq!(binarize(&p, 1e-9).unwrap().bits(), &[1, 1, 1]);
        let b = Tensor::row(vec![1.0, 0.0]);
        assert_eq!(binarize(&b, 0.5).unwrap().bits(), &[1, 0]);
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn knn_basic_cases() {
        let tx = Tensor::matrix(3, 1, vec![0.0, 1.0, 5.0]).unwrap();
        let ty = Labels::new(3, 2, vec![1, 0, 0, 1, 1, 1]).unwrap();
        let q = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_eq!(knn_correct(&tx, &ty, &q, 1).unwrap().bits(), &[0, 1]);
        // Two neighbours split 1–1 on the first label: ties go to 1.
        assert_eq!(knn_correct(&tx, &ty, &q, 2).unwrap().bits(), &[1, 1]);
        assert!(knn_correct(&tx, &ty, &q, 4).is_err());
        assert!(knn_correct(&tx, &ty, &q, 0).is_err());
    }
}
