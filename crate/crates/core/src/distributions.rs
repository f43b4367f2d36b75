//! Diagonal Normal, diagonal Student and multivariate Bernoulli families.
//!
//! Plain-vector functions here serve the theory checks and oracles; the
//! `tape_*` functions build the same densities on an autodiff tape for the
//! training losses. All randomness is supplied by the caller.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp for Bernoulli outputs.
pub const PROB_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagNormalParams {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagStudentParams {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub nu: f64,
}

/// How the Student's chi-square mixing variable is shared across dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StudentCoupling {
    /// One χ² draw per vector: the multivariate Student with diagonal scale.
    #[default]
    Joint,
    /// One χ² draw per dimension: a product of univariate Students.
    Independent,
}

impl std::str::FromStr for StudentCoupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "joint" => Ok(StudentCoupling::Joint),
            "per-dim" | "independent" => Ok(StudentCoupling::Independent),
            other => Err(Error::Config(format!("unknown chi2 coupling `{other}`"))),
        }
    }
}

impl std::fmt::Display for StudentCoupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudentCoupling::Joint => "shared",
            StudentCoupling::Independent => "per-dim",
        })
    }
}

/// Chi-square draw(s) for the Student reparameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum Chi2Draw {
    Shared(f64),
    PerDim(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliVec {
    probs: Vec<f64>,
}

impl DiagNormalParams {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_len(mean.len(), scale.len())?;
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("Normal scale must be positive"));
        }
        Ok(DiagNormalParams { mean, scale })
    }

    pub fn standard(m: usize) -> Self {
        DiagNormalParams {
            mean: vec![0.0; m],
            scale: vec![1.0; m],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl DiagStudentParams {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>, nu: f64) -> Result<Self> {
        check_len(mean.len(), scale.len())?;
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("Student scale must be positive"));
        }
        if !(nu > 1.0) {
            return Err(Error::invalid(format!("Student degrees of freedom must exceed 1, got {nu}")));
        }
        Ok(DiagStudentParams { mean, scale, nu })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl BernoulliVec {
    /// Validates that every probability lies strictly inside (ε, 1−ε).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p > PROB_EPS && p < 1.0 - PROB_EPS)) {
            return Err(Error::invalid("Bernoulli probabilities must lie in (1e-6, 1 - 1e-6)"));
        }
        Ok(BernoulliVec { probs })
    }

    /// Clamps into [ε, 1−ε].
    pub fn clamped(probs: Vec<f64>) -> Self {
        BernoulliVec {
            probs: probs.into_iter().map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<u8> {
        self.probs.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect()
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn chi2_sample<R: Rng + ?Sized>(rng: &mut R, nu: f64) -> f64 {
    ChiSquared::new(nu).expect("nu > 0").sample(rng)
}

pub fn draw_chi2<R: Rng + ?Sized>(rng: &mut R, nu: f64, m: usize, coupling: StudentCoupling) -> Chi2Draw {
    match coupling {
        StudentCoupling::Joint => Chi2Draw::Shared(chi2_sample(rng, nu)),
        StudentCoupling::Independent => Chi2Draw::PerDim((0..m).map(|_| chi2_sample(rng, nu)).collect()),
    }
}

pub fn rsample_diag_normal(params: &DiagNormalParams, noise: &[f64]) -> Result<Vec<f64>> {
    check_len(params.dim(), noise.len())?;
    Ok(params
        .mean
        .iter()
        .zip(&params.scale)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

pub fn rsample_diag_student(params: &DiagStudentParams, normal_noise: &[f64], chi2: &Chi2Draw) -> Result<Vec<f64>> {
    check_len(params.dim(), normal_noise.len())?;
    let factor = |j: usize| -> Result<f64> {
        let c = match chi2 {
            Chi2Draw::Shared(c) => *c,
            Chi2Draw::PerDim(v) => v[j],
        };
        if !(c > 0.0) {
            return Err(Error::invalid("chi-square draw must be positive"));
        }
        Ok((params.nu / c).sqrt())
    };
    if let Chi2Draw::PerDim(v) = chi2 {
        check_len(params.dim(), v.len())?;
    }
    (0..params.dim())
        .map(|j| Ok(params.mean[j] + params.scale[j] * normal_noise[j] * factor(j)?))
        .collect()
}

pub fn logpdf_diag_normal(x: &[f64], params: &DiagNormalParams) -> Result<f64> {
    check_len(params.dim(), x.len())?;
    Ok(x.iter()
        .zip(&params.mean)
        .zip(&params.scale)
        .map(|((x, m), s)| {
            let d = (x - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * d * d
        })
        .sum())
}

/// Student log-density with the default (joint) coupling.
pub fn logpdf_diag_student(x: &[f64], params: &DiagStudentParams) -> Result<f64> {
    logpdf_diag_student_with(x, params, StudentCoupling::Joint)
}

pub fn logpdf_diag_student_with(x: &[f64], params: &DiagStudentParams, coupling: StudentCoupling) -> Result<f64> {
    check_len(params.dim(), x.len())?;
    let nu = params.nu;
    if !(nu > 1.0) {
        return Err(Error::invalid(format!("Student degrees of freedom must exceed 1, got {nu}")));
    }
    let m = params.dim() as f64;
    let log_scale: f64 = params.scale.iter().map(|s| s.ln()).sum();
    let sq = x
        .iter()
        .zip(&params.mean)
        .zip(&params.scale)
        .map(|((x, mu), s)| ((x - mu) / s).powi(2));
    Ok(match coupling {
        StudentCoupling::Joint => {
            let delta: f64 = sq.sum();
            ln_gamma((nu + m) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * m * (nu * std::f64::consts::PI).ln() - log_scale
                - 0.5 * (nu + m) * (delta / nu).ln_1p()
        }
        StudentCoupling::Independent => {
            let c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
            m * c - log_scale - sq.map(|d| 0.5 * (nu + 1.0) * (d / nu).ln_1p()).sum::<f64>()
        }
    })
}

/// Differential entropy of the joint diagonal Student.
pub fn entropy_diag_student(params: &DiagStudentParams) -> Result<f64> {
    let (nu, m) = (params.nu, params.dim() as f64);
    let log_scale: f64 = params.scale.iter().map(|s| s.ln()).sum();
    Ok(log_scale - ln_gamma((nu + m) / 2.0) + ln_gamma(nu / 2.0)
        + 0.5 * m * (nu * std::f64::consts::PI).ln()
        + 0.5 * (nu + m) * (digamma((nu + m) / 2.0)? - digamma(nu / 2.0)?))
}

pub fn logpmf_bernoulli(y: &[u8], probs: &BernoulliVec) -> Result<f64> {
    check_len(probs.dim(), y.len())?;
    y.iter()
        .zip(probs.probs())
        .map(|(&yi, &p)| match yi {
            1 => Ok(p.ln()),
            0 => Ok((1.0 - p).ln()),
            other => Err(Error::invalid(format!("label value {other} is not binary"))),
        })
        .sum()
}

pub fn kl_diag_normal(p: &DiagNormalParams, q: &DiagNormalParams) -> Result<f64> {
    check_len(p.dim(), q.dim())?;
    Ok((0..p.dim())
        .map(|j| {
            let r = p.scale[j] / q.scale[j];
            let d = (p.mean[j] - q.mean[j]) / q.scale[j];
            0.5 * (r * r + d * d - 1.0) - r.ln()
        })
        .sum())
}

pub fn kl_mv_bernoulli(p: &BernoulliVec, q: &BernoulliVec) -> Result<f64> {
    check_len(p.dim(), q.dim())?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| pi * (pi / qi).ln() + (1.0 - pi) * ((1.0 - pi) / (1.0 - qi)).ln())
        .sum())
}

/// Upper bound on KL[p ‖ q] for two diagonal Students sharing ν > 2:
///
/// ```text
/// ½ ln(det Σ_q / det Σ_p) − (ν+m)/2 [Ψ((ν+m)/2) − Ψ(ν/2)]
///   + (ν+m)/2 ln(1 + tr(Σ_q⁻¹ Σ̃_p)/ν + (μ_p−μ_q)ᵀ Σ_q⁻¹ (μ_p−μ_q)/ν)
/// ```
///
/// with Σ̃_p = ν/(ν−2) Σ_p.
pub fn kl_student_same_nu_upper_bound(p: &DiagStudentParams, q: &DiagStudentParams) -> Result<f64> {
    check_len(p.dim(), q.dim())?;
    if p.nu != q.nu {
        return Err(Error::invalid("both Students must share the same ν"));
    }
    let nu = p.nu;
    if !(nu > 2.0) {
        return Err(Error::invalid(format!("bound requires ν > 2, got {nu}")));
    }
    let m = p.dim() as f64;
    let mut half_log_det = 0.0;
    let mut trace = 0.0;
    let mut maha = 0.0;
    for j in 0..p.dim() {
        let (vp, vq) = (p.scale[j].powi(2), q.scale[j].powi(2));
        half_log_det += 0.5 * (vq / vp).ln();
        trace += nu / (nu - 2.0) * vp / vq;
        maha += (p.mean[j] - q.mean[j]).powi(2) / vq;
    }
    Ok(half_log_det - 0.5 * (nu + m) * (digamma((nu + m) / 2.0)? - digamma(nu / 2.0)?)
        + 0.5 * (nu + m) * (1.0 + trace / nu + maha / nu).ln())
}

/// Degrees of freedom on the tape: a constant or a per-row `[rows, 1]` node.
#[derive(Clone, Copy, Debug)]
pub enum Nu {
    Fixed(f64),
    PerRow(Var),
}

/// Row-wise diagonal Normal log-density, `[rows, 1]`.
pub fn tape_logpdf_normal(tape: &mut Tape, x: Var, mean: Var, scale: Var) -> Result<Var> {
    let m = tape.value(x).cols() as f64;
    let d = tape.sub(x, mean)?;
    let d = tape.div(d, scale)?;
    let sq = tape.square(d)?;
    let sq = tape.sum_cols(sq)?;
    let quad = tape.scale(sq, -0.5)?;
    let ls = tape.log(scale)?;
    let ls = tape.sum_cols(ls)?;
    let out = tape.sub(quad, ls)?;
    tape.add_scalar(out, -0.5 * m * LN_2PI)
}

/// Row-wise standard Normal log-density, `[rows, 1]`.
pub fn tape_logpdf_std_normal(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.value(x).cols() as f64;
    let sq = tape.square(x)?;
    let sq = tape.sum_cols(sq)?;
    let out = tape.scale(sq, -0.5)?;
    tape.add_scalar(out, -0.5 * m * LN_2PI)
}

/// Row-wise diagonal Student log-density, `[rows, 1]`. `scale` of `None`
/// means unit scale.
pub fn tape_logpdf_student(
    tape: &mut Tape,
    x: Var,
    mean: Var,
    scale: Option<Var>,
    nu: Nu,
    coupling: StudentCoupling,
) -> Result<Var> {
    let m = tape.value(x).cols() as f64;
    let mut d = tape.sub(x, mean)?;
    if let Some(s) = scale {
        d = tape.div(d, s)?;
    }
    let sq = tape.square(d)?;
    let log_scale = match scale {
        Some(s) => {
            let ls = tape.log(s)?;
            Some(tape.sum_cols(ls)?)
        }
        None => None,
    };
    let out = match nu {
        Nu::Fixed(nu) => {
            let (k, terms) = match coupling {
                StudentCoupling::Joint => (
                    ln_gamma((nu + m) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * m * (nu * std::f64::consts::PI).ln(),
                    {
                        let s = tape.sum_cols(sq)?;
                        let s = tape.scale(s, 1.0 / nu)?;
                        let l = tape.log1p(s)?;
                        tape.scale(l, -0.5 * (nu + m))?
                    },
                ),
                StudentCoupling::Independent => (
                    m * (ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln()),
                    {
                        let s = tape.scale(sq, 1.0 / nu)?;
                        let l = tape.log1p(s)?;
                        let l = tape.sum_cols(l)?;
                        tape.scale(l, -0.5 * (nu + 1.0))?
                    },
                ),
            };
            tape.add_scalar(terms, k)?
        }
        Nu::PerRow(nu) => {
            // lnΓ((ν+a)/2) − lnΓ(ν/2) − (a/2) ln(νπ) − (ν+a)/2 · ln1p(δ/ν), a = m or 1
            let a = match coupling {
                StudentCoupling::Joint => m,
                StudentCoupling::Independent => 1.0,
            };
            let reps = match coupling {
                StudentCoupling::Joint => 1.0,
                StudentCoupling::Independent => m,
            };
            let half_nu = tape.scale(nu, 0.5)?;
            let half_nu_a = tape.add_scalar(half_nu, 0.5 * a)?;
            let lg1 = tape.ln_gamma(half_nu_a)?;
            let lg2 = tape.ln_gamma(half_nu)?;
            let lnu = tape.log(nu)?;
            let lnu = tape.add_scalar(lnu, std::f64::consts::PI.ln())?;
            let lnu = tape.scale(lnu, 0.5 * a)?;
            let c = tape.sub(lg1, lg2)?;
            let c = tape.sub(c, lnu)?;
            let c = tape.scale(c, reps)?;
            let quad = match coupling {
                StudentCoupling::Joint => {
                    let s = tape.sum_cols(sq)?;
                    let s = tape.div(s, nu)?;
                    let l = tape.log1p(s)?;
                    tape.mul(l, half_nu_a)?
                }
                StudentCoupling::Independent => {
                    let s = tape.div(sq, nu)?;
                    let l = tape.log1p(s)?;
                    let l = tape.sum_cols(l)?;
                    tape.mul(l, half_nu_a)?
                }
            };
            tape.sub(c, quad)?
        }
    };
    match log_scale {
        Some(ls) => tape.sub(out, ls),
        None => Ok(out),
    }
}

/// Maps logits to probabilities strictly inside (ε, 1−ε):
/// p = ε + (1 − 2ε)·sigmoid(logit).
pub fn tape_clamped_probs(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.sigmoid(logits)?;
    let p = tape.scale(p, 1.0 - 2.0 * PROB_EPS)?;
    tape.add_scalar(p, PROB_EPS)
}

/// Row-wise Bernoulli log-likelihood of binary targets `y` (as 0/1 floats),
/// `[rows, 1]`.
pub fn tape_log_bernoulli(tape: &mut Tape, y: Var, probs: Var) -> Result<Var> {
    let lp = tape.log(probs)?;
    let one_minus = tape.neg(probs)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let lq = tape.log(one_minus)?;
    let ny = tape.neg(y)?;
    let ny = tape.add_scalar(ny, 1.0)?;
    let a = tape.mul(y, lp)?;
    let b = tape.mul(ny, lq)?;
    let s = tape.add(a, b)?;
    tape.sum_cols(s)
}

/// Builds a `[rows, cols]` tensor of 0/1 floats from bit rows.
pub fn labels_tensor(rows: &[Vec<u8>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flat_map(|r| r.iter().map(|&b| b as f64)).collect();
    Tensor::matrix(rows.len(), cols, data).expect("rectangular labels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            s += f(lo + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn normal_rsample_is_affine() {
        let p = DiagNormalParams::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(rsample_diag_normal(&p, &[0.0]).unwrap(), vec![0.0]);
        let p = DiagNormalParams::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(rsample_diag_normal(&p, &[0.5, -0.5]).unwrap(), vec![1.5, 1.5]);
        assert!(rsample_diag_normal(&p, &[0.5]).is_err());
    }

    #[test]
    fn normal_sample_mean_within_four_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = DiagNormalParams::new(vec![0.7, -1.2], vec![2.0, 0.5]).unwrap();
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let z = rsample_diag_normal(&p, &standard_normal_vec(&mut rng, 2)).unwrap();
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for j in 0..2 {
            let se = p.scale[j] / (n as f64).sqrt();
            assert!((sums[j] / n as f64 - p.mean[j]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn student_rsample_with_zero_noise_is_the_mean() {
        let p = DiagStudentParams::new(vec![1.0, -3.0], vec![2.0, 0.1], 2.01).unwrap();
        assert_eq!(rsample_diag_student(&p, &[0.0, 0.0], &Chi2Draw::Shared(0.3)).unwrap(), p.mean);
        assert!(rsample_diag_student(&p, &[0.0, 0.0], &Chi2Draw::Shared(0.0)).is_err());
    }

    #[test]
    fn student_variance_matches_nu_over_nu_minus_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = DiagStudentParams::new(vec![0.0], vec![1.0], 4.0).unwrap();
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e = standard_normal_vec(&mut rng, 1);
                let c = draw_chi2(&mut rng, 4.0, 1, StudentCoupling::Joint);
                rsample_diag_student(&p, &e, &c).unwrap()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // SE of the sample variance from the fourth moment; the t(4) kurtosis
        // is infinite, so use the empirical fourth central moment.
        let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let se = ((m4 - var * var) / n as f64).sqrt();
        assert!((var - 2.0).abs() < 3.0 * se, "var {var}, se {se}");
    }

    #[test]
    fn student_large_nu_matches_normal_by_ks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = DiagStudentParams::new(vec![0.0], vec![1.0], 1e6).unwrap();
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let e = standard_normal_vec(&mut rng, 1);
                let c = draw_chi2(&mut rng, 1e6, 1, StudentCoupling::Joint);
                rsample_diag_student(&p, &e, &c).unwrap()[0]
            })
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Compare against the Normal CDF evaluated on the same draws rescaled
        // through a second, independent Normal sample's empirical CDF.
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut ref_draws: Vec<f64> = (0..10_000).map(|_| standard_normal_vec(&mut rng, 1)[0]).collect();
        ref_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let d_student = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        let d_normal = ref_draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Distance to the Normal is within 0.01 of what a genuine Normal sample
        // of the same size achieves.
        assert!((d_student - d_normal).abs() < 0.01, "{d_student} vs {d_normal}");
        assert!(d_student < 0.02);
    }

    #[test]
    fn normal_logpdf_values() {
        let p = DiagNormalParams::new(vec![0.3], vec![1.0]).unwrap();
        assert!((logpdf_diag_normal(&[0.3], &p).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let integral = trapezoid(|x| logpdf_diag_normal(&[x], &p).unwrap().exp(), 0.3 - 40.0, 0.3 + 40.0, 80_000);
        assert!((integral - 1.0).abs() < 1e-6);
        let a = logpdf_diag_normal(&[1.0, 2.0], &DiagNormalParams::new(vec![0.5, 0.0], vec![0.7, 1.3]).unwrap()).unwrap();
        let b = logpdf_diag_normal(&[3.5, -1.0], &DiagNormalParams::new(vec![3.0, -3.0], vec![0.7, 1.3]).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn student_logpdf_values() {
        let p = DiagStudentParams::new(vec![0.0], vec![1.0], 1e6).unwrap();
        assert!((logpdf_diag_student(&[0.0], &p).unwrap() + 0.918_938_5).abs() < 1e-4);
        for nu in [2.01, 4.0, 6.0] {
            let p = DiagStudentParams::new(vec![0.4], vec![0.8], nu).unwrap();
            let f = |x: f64| logpdf_diag_student(&[x], &p).unwrap().exp();
            assert!((f(0.4 + 1.3) - f(0.4 - 1.3)).abs() < 1e-15);
            if nu >= 6.0 {
                let integral = trapezoid(f, 0.4 - 40.0 * 0.8, 0.4 + 40.0 * 0.8, 200_000);
                assert!((integral - 1.0).abs() < 1e-6, "nu {nu}: {integral}");
            }
        }
        assert!(DiagStudentParams::new(vec![0.0], vec![1.0], 1.0).is_err());
    }

    #[test]
    fn student_couplings_agree_in_one_dimension() {
        let p = DiagStudentParams::new(vec![0.1], vec![2.0], 3.0).unwrap();
        let a = logpdf_diag_student_with(&[1.7], &p, StudentCoupling::Joint).unwrap();
        let b = logpdf_diag_student_with(&[1.7], &p, StudentCoupling::Independent).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn joint_student_integrates_to_one_in_two_dimensions() {
        let p = DiagStudentParams::new(vec![0.0, 0.5], vec![1.0, 0.5], 8.0).unwrap();
        let inner = |x: f64| {
            trapezoid(|y| logpdf_diag_student(&[x, y], &p).unwrap().exp(), 0.5 - 30.0, 0.5 + 30.0, 3000)
        };
        let total = trapezoid(inner, -60.0, 60.0, 3000);
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn student_entropy_matches_quadrature() {
        let p = DiagStudentParams::new(vec![0.0], vec![0.7], 5.0).unwrap();
        let f = |x: f64| {
            let l = logpdf_diag_student(&[x], &p).unwrap();
            -l.exp() * l
        };
        let h = trapezoid(f, -300.0, 300.0, 600_000);
        assert!((h - entropy_diag_student(&p).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn bernoulli_logpmf() {
        let half = BernoulliVec::new(vec![0.5, 0.5]).unwrap();
        assert!((logpmf_bernoulli(&[1, 0], &half).unwrap() + 1.386_294_361_119_890_6).abs() < 1e-12);
        let p = BernoulliVec::new(vec![0.9, 0.1]).unwrap();
        assert!((logpmf_bernoulli(&[1, 0], &p).unwrap() + 0.210_721_031_315_652_6).abs() < 1e-12);
        assert!(logpmf_bernoulli(&[2, 0], &p).is_err());
    }

    #[test]
    fn bernoulli_pmf_sums_to_one_by_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for k in 1..=10 {
            let p = BernoulliVec::clamped((0..k).map(|_| rng.gen::<f64>()).collect());
            let total: f64 = (0..1u32 << k)
                .map(|mask| {
                    let y: Vec<u8> = (0..k).map(|i| ((mask >> i) & 1) as u8).collect();
                    logpmf_bernoulli(&y, &p).unwrap().exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn normal_kl_values() {
        let p = DiagNormalParams::new(vec![0.0], vec![1.0]).unwrap();
        let q = DiagNormalParams::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(kl_diag_normal(&p, &p).unwrap(), 0.0);
        assert!((kl_diag_normal(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        let quad = trapezoid(
            |x| {
                let lp = logpdf_diag_normal(&[x], &p).unwrap();
                lp.exp() * (lp - logpdf_diag_normal(&[x], &q).unwrap())
            },
            -40.0,
            40.0,
            80_000,
        );
        assert!((quad - 0.5).abs() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..1000 {
            let mk = |rng: &mut ChaCha8Rng| {
                DiagNormalParams::new(
                    (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                    (0..3).map(|_| rng.gen_range(0.05..3.0)).collect(),
                )
                .unwrap()
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            assert!(kl_diag_normal(&a, &b).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn bernoulli_kl_values() {
        let p = BernoulliVec::new(vec![0.9, 0.1]).unwrap();
        let q = BernoulliVec::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_mv_bernoulli(&p, &p).unwrap(), 0.0);
        let expected = 2.0 * (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln());
        assert!((kl_mv_bernoulli(&p, &q).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.736_128_414_336_994_2).abs() < 1e-12);
        let p2 = BernoulliVec::new(vec![0.9, 0.1, 0.01, 0.01]).unwrap();
        let q2 = BernoulliVec::new(vec![0.5, 0.5, 0.01, 0.01]).unwrap();
        assert!((kl_mv_bernoulli(&p2, &q2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn student_bound_at_identical_arguments() {
        for (m, nu) in [(1usize, 4.0), (2, 3.0), (4, 2.5)] {
            let p = DiagStudentParams::new(vec![0.3; m], vec![0.9; m], nu).unwrap();
            let mf = m as f64;
            let expected = (nu + mf) / 2.0
                * ((1.0 + mf / (nu - 2.0)).ln() - digamma((nu + mf) / 2.0).unwrap() + digamma(nu / 2.0).unwrap());
            let b = kl_student_same_nu_upper_bound(&p, &p).unwrap();
            assert!((b - expected).abs() < 1e-12);
            assert!(b >= 0.0);
        }
    }

    #[test]
    fn student_bound_depends_on_mean_difference_only() {
        let p = DiagStudentParams::new(vec![0.3, -1.0], vec![0.9, 1.4], 4.0).unwrap();
        let q = DiagStudentParams::new(vec![1.3, 0.5], vec![0.5, 2.0], 4.0).unwrap();
        let shift = |d: &DiagStudentParams| DiagStudentParams {
            mean: d.mean.iter().map(|v| v + 7.5).collect(),
            ..d.clone()
        };
        let a = kl_student_same_nu_upper_bound(&p, &q).unwrap();
        let b = kl_student_same_nu_upper_bound(&shift(&p), &shift(&q)).unwrap();
        assert!((a - b).abs() < 1e-12);
        let q3 = DiagStudentParams { nu: 5.0, ..q.clone() };
        assert!(kl_student_same_nu_upper_bound(&p, &q3).is_err());
        let low = DiagStudentParams { nu: 2.0, ..p.clone() };
        assert!(kl_student_same_nu_upper_bound(&low, &low).is_err());
    }

    #[test]
    fn student_bound_dominates_monte_carlo_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let nu = 4.0;
        for case in 0..200 {
            let m = [1usize, 2, 4][case % 3];
            let mk = |rng: &mut ChaCha8Rng| {
                DiagStudentParams::new(
                    (0..m).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                    (0..m).map(|_| rng.gen_range(0.3..2.0)).collect(),
                    nu,
                )
                .unwrap()
            };
            let (p, q) = (mk(&mut rng), mk(&mut rng));
            let n = 100_000;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let e = standard_normal_vec(&mut rng, m);
                let c = draw_chi2(&mut rng, nu, m, StudentCoupling::Joint);
                let x = rsample_diag_student(&p, &e, &c).unwrap();
                let l = logpdf_diag_student(&x, &p).unwrap() - logpdf_diag_student(&x, &q).unwrap();
                sum += l;
                sumsq += l * l;
            }
            let mean = sum / n as f64;
            let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
            let bound = kl_student_same_nu_upper_bound(&p, &q).unwrap();
            assert!(bound >= mean - 3.0 * se, "case {case}: bound {bound} < KL {mean} ± {se}");
        }
    }

    #[test]
    fn tape_densities_match_plain_versions_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows = 3;
        let m = 2;
        let rnd = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Tensor::matrix(rows, m, (0..rows * m).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let (xv, mv, sv) = (rnd(&mut rng, -2.0, 2.0), rnd(&mut rng, -1.0, 1.0), rnd(&mut rng, 0.3, 2.0));
        for coupling in [StudentCoupling::Joint, StudentCoupling::Independent] {
            let mut t = Tape::new();
            let x = t.param("x", xv.clone());
            let mu = t.param("mu", mv.clone());
            let s = t.param("s", sv.clone());
            let nu_v = t.param("nu", Tensor::matrix(rows, 1, vec![2.5, 3.0, 7.0]).unwrap());
            let lp_fixed = tape_logpdf_student(&mut t, x, mu, Some(s), Nu::Fixed(3.0), coupling).unwrap();
            let lp_row = tape_logpdf_student(&mut t, x, mu, Some(s), Nu::PerRow(nu_v), coupling).unwrap();
            let ln = tape_logpdf_normal(&mut t, x, mu, s).unwrap();
            for r in 0..rows {
                let xr = xv.row_slice(r);
                let p3 = DiagStudentParams::new(mv.row_slice(r).to_vec(), sv.row_slice(r).to_vec(), 3.0).unwrap();
                let expect = logpdf_diag_student_with(xr, &p3, coupling).unwrap();
                assert!((t.value(lp_fixed).get(r, 0) - expect).abs() < 1e-12);
                let pr = DiagStudentParams { nu: [2.5, 3.0, 7.0][r], ..p3.clone() };
                let expect = logpdf_diag_student_with(xr, &pr, coupling).unwrap();
                assert!((t.value(lp_row).get(r, 0) - expect).abs() < 1e-12);
                let pn = DiagNormalParams::new(p3.mean.clone(), p3.scale.clone()).unwrap();
                assert!((t.value(ln).get(r, 0) - logpdf_diag_normal(xr, &pn).unwrap()).abs() < 1e-12);
            }
            let a = t.add(lp_fixed, lp_row).unwrap();
            let a = t.add(a, ln).unwrap();
            let out = t.sum_all(a).unwrap();
            let err = grad_check(&mut t, out, &["x", "mu", "s", "nu"], 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn reparameterized_mean_gradient_equals_linear_coefficients() {
        // d/dμ E[c·z] = c, estimated through the sampler with finite
        // differences on common random numbers.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let c = [0.5, -2.0, 1.5];
        let noise: Vec<(Vec<f64>, Chi2Draw)> = (0..20_000)
            .map(|_| (standard_normal_vec(&mut rng, 3), draw_chi2(&mut rng, 4.0, 3, StudentCoupling::Joint)))
            .collect();
        let expect_at = |mu: &[f64]| -> f64 {
            let p = DiagStudentParams::new(mu.to_vec(), vec![1.0, 0.5, 2.0], 4.0).unwrap();
            noise
                .iter()
                .map(|(e, ch)| {
                    let z = rsample_diag_student(&p, e, ch).unwrap();
                    z.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum::<f64>()
                / noise.len() as f64
        };
        let base = [0.1, 0.2, 0.3];
        for j in 0..3 {
            let mut up = base;
            let mut down = base;
            up[j] += 1e-4;
            down[j] -= 1e-4;
            let g = (expect_at(&up) - expect_at(&down)) / 2e-4;
            assert!((g - c[j]).abs() < 1e-6, "dim {j}: {g}");
        }
    }
}
