//! Correction strategies behind trait objects, looked up by name.
//!
//! A [`Strategy`] is fitted once per seed and noise setting and yields a
//! [`Corrector`]. Correctors see test features and base-classifier
//! probabilities only; [`CorrectionInput`] has no field for labels.

use std::path::Path;

use crate::classifier::threshold;
use crate::config::{ExperimentConfig, Paradigm};
use crate::correction::{correct_from_probs, knn_correct};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::metrics::micro_f1;
use crate::model::{train_semi_supervised, EpochRecord, LsnpcModel, ProposalFamily, TrainSet};
use crate::optim::TrainConfig;
use crate::rng;
use crate::tensor::Tensor;

/// Everything a strategy may learn from. Train and validation labels are
/// noisy; clean labels are true labels of the held-out clean subset.
pub struct FitContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub train_x: &'a Tensor,
    pub train_y: &'a Labels,
    pub train_probs: &'a Tensor,
    pub val_x: &'a Tensor,
    pub val_y: &'a Labels,
    pub val_probs: &'a Tensor,
    pub clean_x: &'a Tensor,
    pub clean_y: &'a Labels,
    pub clean_probs: &'a Tensor,
}

pub struct CorrectionInput<'a> {
    pub x: &'a Tensor,
    pub base_probs: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionOutput {
    pub labels: Labels,
    pub probs: Option<Tensor>,
}

pub trait Corrector {
    fn correct(&self, input: &CorrectionInput<'_>) -> Result<CorrectionOutput>;

    /// The trained model, for strategies that have one.
    fn model(&self) -> Option<&LsnpcModel> {
        None
    }

    fn history(&self) -> &[EpochRecord] {
        &[]
    }
}

pub trait Strategy {
    /// Registry key, as written in `[correction] methods`.
    fn name(&self) -> &str;

    /// Report label for a paradigm.
    fn label(&self, paradigm: Paradigm) -> String;

    /// Whether the strategy trains a model per paradigm. Others are fitted
    /// once and reported under the unsupervised label.
    fn uses_paradigms(&self) -> bool {
        false
    }

    fn fit(&self, ctx: &FitContext<'_>, paradigm: Paradigm) -> Result<Box<dyn Corrector>>;

    /// Rebuilds a corrector from a checkpoint written by a fitted model.
    /// Strategies without a model refit instead.
    fn restore(&self, ctx: &FitContext<'_>, paradigm: Paradigm, _checkpoint: &Path) -> Result<Box<dyn Corrector>> {
        self.fit(ctx, paradigm)
    }
}

/// Thresholds the base classifier's probabilities.
pub struct Baseline;

struct ThresholdCorrector {
    tau: f64,
}

impl Corrector for ThresholdCorrector {
    fn correct(&self, input: &CorrectionInput<'_>) -> Result<CorrectionOutput> {
        Ok(CorrectionOutput {
            labels: threshold(input.base_probs, self.tau),
            probs: Some(input.base_probs.clone()),
        })
    }
}

impl Strategy for Baseline {
    fn name(&self) -> &str {
        "baseline"
    }

    fn label(&self, _: Paradigm) -> String {
        "baseline".into()
    }

    fn fit(&self, ctx: &FitContext<'_>, _: Paradigm) -> Result<Box<dyn Corrector>> {
        Ok(Box::new(ThresholdCorrector {
            tau: ctx.cfg.correction.tau,
        }))
    }
}

/// Majority vote of the nearest noisy training rows.
pub struct Knn;

struct KnnCorrector {
    x: Tensor,
    y: Labels,
    k: usize,
}

impl Corrector for KnnCorrector {
    fn correct(&self, input: &CorrectionInput<'_>) -> Result<CorrectionOutput> {
        Ok(CorrectionOutput {
            labels: knn_correct(&self.x, &self.y, input.x, self.k)?,
            probs: None,
        })
    }
}

impl Strategy for Knn {
    fn name(&self) -> &str {
        "knn"
    }

    fn label(&self, _: Paradigm) -> String {
        "KNN".into()
    }

    fn fit(&self, ctx: &FitContext<'_>, _: Paradigm) -> Result<Box<dyn Corrector>> {
        Ok(Box::new(KnnCorrector {
            x: ctx.train_x.clone(),
            y: ctx.train_y.clone(),
            k: ctx.cfg.correction.knn_k,
        }))
    }
}

/// The variational post-processor with a given proposal family.
pub struct ModelStrategy {
    pub name: &'static str,
    pub label: &'static str,
    pub family: ProposalFamily,
}

struct ModelCorrector {
    model: LsnpcModel,
    history: Vec<EpochRecord>,
    cfg: crate::correction::CorrectionConfig,
}

impl Corrector for ModelCorrector {
    fn correct(&self, input: &CorrectionInput<'_>) -> Result<CorrectionOutput> {
        let r = correct_from_probs(&self.model, input.x, input.base_probs, &self.cfg)?;
        Ok(CorrectionOutput {
            labels: r.labels,
            probs: Some(r.probs),
        })
    }

    fn model(&self) -> Option<&LsnpcModel> {
        Some(&self.model)
    }

    fn history(&self) -> &[EpochRecord] {
        &self.history
    }
}

impl ModelStrategy {
    fn corrector(&self, ctx: &FitContext<'_>, model: LsnpcModel, history: Vec<EpochRecord>) -> Box<dyn Corrector> {
        let cfg = ctx.cfg.correction.config(ctx.seed, model.cfg.sampler);
        Box::new(ModelCorrector { model, history, cfg })
    }
}

impl Strategy for ModelStrategy {
    fn name(&self) -> &str {
        self.name
    }

    fn label(&self, paradigm: Paradigm) -> String {
        format!("{}{}", self.label, paradigm.suffix())
    }

    fn uses_paradigms(&self) -> bool {
        true
    }

    /// Every paradigm trains from a fresh initialization. Checkpoints are
    /// chosen by micro-F1 of the corrected validation predictions against
    /// the noisy validation labels.
    fn fit(&self, ctx: &FitContext<'_>, paradigm: Paradigm) -> Result<Box<dyn Corrector>> {
        let settings = &ctx.cfg.lsnpc;
        let mut mcfg = settings.model.clone();
        mcfg.family = self.family;
        let init = &mut rng::stream(ctx.seed, &format!("{}-init", self.name));
        let model = LsnpcModel::new(ctx.train_x.cols(), ctx.train_y.k(), mcfg, init)?;
        let train = TrainConfig {
            epochs: match paradigm {
                Paradigm::Unsupervised => settings.train.epochs,
                _ => settings.semi_epochs,
            },
            seed: rng::derive_seed(ctx.seed, &format!("{}-{paradigm}", self.name)),
            ..settings.train.clone()
        };
        let select_cfg = ctx.cfg.correction.selection(ctx.seed, model.cfg.sampler);
        let select = |m: &LsnpcModel| -> Result<f64> {
            let r = correct_from_probs(m, ctx.val_x, ctx.val_probs, &select_cfg)?;
            micro_f1(ctx.val_y, &r.labels)
        };
        let has_val = ctx.val_x.rows() > 0;
        let noisy = TrainSet {
            x: ctx.train_x,
            probs: ctx.train_probs,
            y: None,
        };
        let clean = TrainSet {
            x: ctx.clean_x,
            probs: ctx.clean_probs,
            y: Some(ctx.clean_y),
        };
        let empty_x = Tensor::zeros(vec![0, ctx.train_x.cols()]);
        let empty_p = Tensor::zeros(vec![0, ctx.train_probs.cols()]);
        let none = TrainSet {
            x: &empty_x,
            probs: &empty_p,
            y: None,
        };
        if paradigm != Paradigm::Unsupervised && ctx.clean_x.rows() == 0 {
            return Err(Error::Config(format!("{paradigm} training needs a non-empty clean subset")));
        }
        let (noisy, clean) = match paradigm {
            Paradigm::Unsupervised => (&noisy, None),
            Paradigm::SemiSupervised => (&noisy, Some(&clean)),
            Paradigm::Supervised => (&none, Some(&clean)),
        };
        let out = train_semi_supervised(model, noisy, clean, &train, has_val.then_some(&select as _))?;
        Ok(self.corrector(ctx, out.model, out.history))
    }

    fn restore(&self, ctx: &FitContext<'_>, _: Paradigm, checkpoint: &Path) -> Result<Box<dyn Corrector>> {
        let model = LsnpcModel::load(checkpoint)?;
        if model.cfg.family != self.family {
            return Err(Error::invalid(format!(
                "{} holds a {} model, expected {}",
                checkpoint.display(),
                model.cfg.family,
                self.family
            )));
        }
        Ok(self.corrector(ctx, model, Vec::new()))
    }
}

pub struct Registry {
    strategies: Vec<Box<dyn Strategy>>,
}

impl Default for Registry {
    /// `baseline`, `knn`, `lsnpc` (Student proposal) and `gauss` (Normal).
    fn default() -> Self {
        let mut r = Registry::empty();
        r.register(Box::new(Baseline));
        r.register(Box::new(Knn));
        r.register(Box::new(ModelStrategy {
            name: "lsnpc",
            label: "LSNPC",
            family: ProposalFamily::Student,
        }));
        r.register(Box::new(ModelStrategy {
            name: "gauss",
            label: "GAUSS",
            family: ProposalFamily::Normal,
        }));
        r
    }
}

impl Registry {
    pub fn empty() -> Self {
        Registry { strategies: Vec::new() }
    }

    /// Adds a strategy, replacing any with the same name.
    pub fn register(&mut self, s: Box<dyn Strategy>) {
        self.strategies.retain(|t| t.name() != s.name());
        self.strategies.push(s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Strategy> {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown correction method `{name}`")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }

    /// Resolves the configured methods into (strategy, paradigm) runs in
    /// config order.
    pub fn plan(&self, cfg: &ExperimentConfig) -> Result<Vec<(&dyn Strategy, Paradigm)>> {
        let mut out = Vec::new();
        for name in &cfg.correction.methods {
            let s = self.get(name)?;
            if s.uses_paradigms() {
                out.extend(cfg.lsnpc.paradigms.iter().map(|&p| (s, p)));
            } else {
                out.push((s, Paradigm::Unsupervised));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_expands_paradigms() {
        let r = Registry::default();
        let mut cfg = ExperimentConfig::default();
        cfg.correction.methods = vec!["baseline".into(), "lsnpc".into(), "gauss".into()];
        let labels: Vec<String> = r.plan(&cfg).unwrap().iter().map(|(s, p)| s.label(*p)).collect();
        assert_eq!(labels, ["baseline", "LSNPC", "LSNPC-semi", "GAUSS", "GAUSS-semi"]);
        cfg.correction.methods = vec!["nope".into()];
        assert!(r.plan(&cfg).err().unwrap().is_config_error());
    }
}
