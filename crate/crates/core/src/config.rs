//! Experiment configuration: a sectioned `key = value` file with a fixed
//! schema. Unknown sections, unknown keys and repeated keys are errors.
//!
//! ```text
//! [data]        source = synthetic | lsds | csv, path, labels, n, d, k, rank,
//!               noise_scale, sparsity, embedding, offsets
//! [split]       train, validation, test, clean_of_validation
//! [noise]       kinds, rates
//! [base]        hidden, epochs, lr, min_lr, batch_size, weight_decay, cycle,
//!               optimizer, clip_norm
//! [lsnpc]       m, nu (number or `learned`), nu0, beta, eta, lambda_floor,
//!               family, coupling, shift_decoder, hidden, label_hidden,
//!               label_embed, s_y, s_z, sampler, epochs, semi_epochs, lr,
//!               min_lr, batch_size, weight_decay, cycle, optimizer,
//!               clip_norm, paradigms
//! [correction]  s_y, s_zhat, s_z, tau, knn_k, methods, select_s_y,
//!               select_s_zhat
//! [run]         seeds, out
//! [sweep]       nu0, nu
//! [theory]      instances, grid_lo, grid_hi, grid_step, tiny_nu, pairs,
//!               estimate_pairs, mc_samples, inflation, nu, epochs,
//!               max_delta, tolerance
//! ```
//!
//! Lists are comma-separated. Relative paths resolve against the directory of
//! the config file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, ParseOption};
use sha2::{Digest, Sha256};

use crate::classifier::LabelSampler;
use crate::correction::CorrectionConfig;
use crate::data::{Embedding, GeneratorConfig};
use crate::distributions::StudentCoupling;
use crate::error::{Error, Result};
use crate::model::{LsnpcConfig, NuMode, ProposalFamily, ShiftDecoder};
use crate::noise::{NoiseKind, SplitSpec};
use crate::optim::{OptimizerKind, TrainConfig};
use crate::theory::QuadratureGrid;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(GeneratorConfig),
    /// A dataset file in the native binary format.
    Lsds(PathBuf),
    /// Comma-separated rows: `d` feature columns followed by `labels` 0/1 columns.
    Csv { path: PathBuf, labels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Paradigm {
    Unsupervised,
    SemiSupervised,
    /// Clean rows only, with the supervised loss.
    Supervised,
}

impl FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Paradigm::Unsupervised),
            "semi-supervised" | "semi" => Ok(Paradigm::SemiSupervised),
            "supervised" => Ok(Paradigm::Supervised),
            other => Err(Error::Config(format!("unknown paradigm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Unsupervised => "unsupervised",
            Paradigm::SemiSupervised => "semi-supervised",
            Paradigm::Supervised => "supervised",
        })
    }
}

impl Paradigm {
    /// Suffix appended to a method label in reports.
    pub fn suffix(self) -> &'static str {
        match self {
            Paradigm::Unsupervised => "",
            Paradigm::SemiSupervised => "-semi",
            Paradigm::Supervised => "-sup",
        }
    }
}

/// Degrees of freedom of the proposal: a fixed value or per-instance learned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NuChoice {
    Fixed(f64),
    Learned,
}

impl FromStr for NuChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(NuChoice::Learned);
        }
        let v: f64 = parse_value(s, "nu")?;
        if !(v > 2.0) || !v.is_finite() {
            return Err(Error::Config(format!("ν must be a finite value above 2, got {s}")));
        }
        Ok(NuChoice::Fixed(v))
    }
}

impl std::fmt::Display for NuChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NuChoice::Fixed(v) => write!(f, "{v}"),
            NuChoice::Learned => f.write_str("learned"),
        }
    }
}

impl NuChoice {
    /// Applies the choice to a model config. Learned mode keeps the fixed
    /// value as a fallback.
    pub fn apply(self, cfg: &mut LsnpcConfig) {
        match self {
            NuChoice::Fixed(v) => {
                cfg.nu = v;
                cfg.nu_mode = NuMode::Fixed;
            }
            NuChoice::Learned => cfg.nu_mode = NuMode::Learned,
        }
    }

    pub fn of(cfg: &LsnpcConfig) -> Self {
        match cfg.nu_mode {
            NuMode::Fixed => NuChoice::Fixed(cfg.nu),
            NuMode::Learned => NuChoice::Learned,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    pub kinds: Vec<NoiseKind>,
    pub rates: Vec<f64>,
}

impl Default for NoiseGrid {
    fn default() -> Self {
        NoiseGrid {
            kinds: vec![NoiseKind::Sym, NoiseKind::Pair],
            rates: vec![0.0, 0.3, 0.4, 0.5],
        }
    }
}

impl NoiseGrid {
    /// Every (kind, rate) cell. A zero rate gives the same transition matrix
    /// for every kind, so it runs once, under the first kind.
    pub fn settings(&self) -> Vec<(NoiseKind, f64)> {
        let mut out = Vec::new();
        for (i, &kind) in self.kinds.iter().enumerate() {
            for &nr in &self.rates {
                if nr == 0.0 && i > 0 {
                    continue;
                }
                out.push((kind, nr));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseSettings {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for BaseSettings {
    fn default() -> Self {
        BaseSettings {
            hidden: vec![64],
            train: TrainConfig {
                epochs: 50,
                batch_size: 128,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsnpcSettings {
    pub model: LsnpcConfig,
    pub train: TrainConfig,
    /// Epoch budget of the runs that also see clean rows.
    pub semi_epochs: usize,
    pub paradigms: Vec<Paradigm>,
}

impl Default for LsnpcSettings {
    fn default() -> Self {
        LsnpcSettings {
            model: LsnpcConfig::default(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            semi_epochs: 20,
            paradigms: vec![Paradigm::Unsupervised, Paradigm::SemiSupervised],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionSettings {
    pub s_y: usize,
    pub s_zhat: usize,
    pub s_z: usize,
    pub tau: f64,
    pub knn_k: usize,
    /// Registry names, run in order.
    pub methods: Vec<String>,
    /// Cheaper sample counts used when scoring checkpoints on validation.
    pub select_s_y: usize,
    pub select_s_zhat: usize,
}

impl Default for CorrectionSettings {
    fn default() -> Self {
        CorrectionSettings {
            s_y: 8,
            s_zhat: 4,
            s_z: 1,
            tau: 0.5,
            knn_k: 5,
            methods: vec!["baseline".into(), "knn".into(), "lsnpc".into()],
            select_s_y: 4,
            select_s_zhat: 2,
        }
    }
}

impl CorrectionSettings {
    pub fn config(&self, seed: u64, sampler: LabelSampler) -> CorrectionConfig {
        CorrectionConfig {
            s_y: self.s_y,
            s_zhat: self.s_zhat,
            s_z: self.s_z,
            tau: self.tau,
            seed,
            sampler,
        }
    }

    pub fn selection(&self, seed: u64, sampler: LabelSampler) -> CorrectionConfig {
        CorrectionConfig {
            s_y: self.select_s_y,
            s_zhat: self.select_s_zhat,
            ..self.config(seed, sampler)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSettings {
    pub nu0: Vec<f64>,
    pub nu: Vec<NuChoice>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            nu0: vec![2.01, 4.0, 8.0],
            nu: vec![NuChoice::Fixed(2.01), NuChoice::Fixed(4.0), NuChoice::Fixed(8.0), NuChoice::Learned],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheorySettings {
    /// Random tiny-model instances for the quadrature check.
    pub instances: usize,
    pub grid: QuadratureGrid,
    /// ν = ν0 of the tiny models.
    pub tiny_nu: f64,
    /// Label pairs for the bound checks.
    pub pairs: usize,
    /// Pairs per disjoint sample when estimating constants.
    pub estimate_pairs: usize,
    pub mc_samples: usize,
    pub inflation: f64,
    /// ν = ν0 of the trained model used for the Student bound.
    pub nu: f64,
    pub epochs: usize,
    /// Largest Hamming distance drawn for a label pair.
    pub max_delta: usize,
    pub tolerance: f64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        TheorySettings {
            instances: 50,
            grid: QuadratureGrid::default(),
            tiny_nu: 8.0,
            pairs: 200,
            estimate_pairs: 500,
            mc_samples: 100_000,
            inflation: 1.5,
            nu: 4.0,
            epochs: 10,
            max_delta: 3,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitSpec,
    pub noise: NoiseGrid,
    pub base: BaseSettings,
    pub lsnpc: LsnpcSettings,
    pub correction: CorrectionSettings,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub sweep: SweepSettings,
    pub theory: TheorySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(GeneratorConfig::default()),
            split: SplitSpec::default(),
            noise: NoiseGrid::default(),
            base: BaseSettings::default(),
            lsnpc: LsnpcSettings::default(),
            correction: CorrectionSettings::default(),
            seeds: (1..=5).collect(),
            out: None,
            sweep: SweepSettings::default(),
            theory: TheorySettings::default(),
        }
    }
}

fn parse_value<T: FromStr>(text: &str, key: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{key}` from `{text}`")))
}

fn parse_list<T: FromStr>(text: &str, key: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(s, key))
        .collect()
}

fn parse_enum<T: FromStr<Err = Error>>(text: &str) -> Result<T> {
    text.trim().parse().map_err(|e: Error| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })
}

fn parse_clip(text: &str) -> Result<Option<f64>> {
    match text.trim() {
        "none" | "" => Ok(None),
        v => Ok(Some(parse_value(v, "clip_norm")?)),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Applies one optimizer key shared by `[base]` and `[lsnpc]`; returns false
/// when the key is not an optimizer key.
fn train_key(t: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "epochs" => t.epochs = parse_value(v, key)?,
        "lr" => t.lr = parse_value(v, key)?,
        "min_lr" => t.min_lr = parse_value(v, key)?,
        "batch_size" => t.batch_size = parse_value(v, key)?,
        "weight_decay" => t.weight_decay = parse_value(v, key)?,
        "cycle" => t.cycle = parse_value(v, key)?,
        "optimizer" => t.optimizer = parse_enum::<OptimizerKind>(v)?,
        "clip_norm" => t.clip_norm = parse_clip(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_train(out: &mut String, t: &TrainConfig) {
    let clip = t.clip_norm.map_or("none".to_string(), |c| c.to_string());
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "lr = {}", t.lr);
    let _ = writeln!(out, "min_lr = {}", t.min_lr);
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "weight_decay = {}", t.weight_decay);
    let _ = writeln!(out, "cycle = {}", t.cycle);
    let _ = writeln!(out, "optimizer = {}", t.optimizer);
    let _ = writeln!(out, "clip_norm = {clip}");
}

/// Raw `[data]` keys, resolved once the whole section is read.
#[derive(Default)]
struct DataKeys {
    source: Option<String>,
    path: Option<String>,
    labels: Option<usize>,
    gen: GeneratorConfig,
}

impl ExperimentConfig {
    /// Parses config text. `base_dir` anchors relative paths.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        let mut data = DataKeys::default();
        let mut seen = BTreeSet::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{key}` appears before any section")));
                }
                continue;
            };
            for (key, value) in props.iter() {
                if !seen.insert((section.to_string(), key.to_string())) {
                    return Err(Error::Config(format!("`{key}` is set twice in [{section}]")));
                }
                let known = cfg.apply(section, key, value, &mut data)?;
                if !known {
                    return Err(Error::Config(format!("unknown key `{key}` in [{section}]")));
                }
            }
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        cfg.data = match data.source.as_deref().unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic(data.gen),
            "lsds" => DataSource::Lsds(resolve(
                data.path.as_deref().ok_or_else(|| Error::Config("source = lsds needs `path`".into()))?,
            )),
            "csv" => DataSource::Csv {
                path: resolve(data.path.as_deref().ok_or_else(|| Error::Config("source = csv needs `path`".into()))?),
                labels: data.labels.ok_or_else(|| Error::Config("source = csv needs `labels`".into()))?,
            },
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        };
        cfg.out = cfg.out.map(|p| resolve(&p.to_string_lossy()));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn apply(&mut self, section: &str, key: &str, v: &str, data: &mut DataKeys) -> Result<bool> {
        match section {
            "data" => {
                let g = &mut data.gen;
                match key {
                    "source" => data.source = Some(v.trim().to_string()),
                    "path" => data.path = Some(v.trim().to_string()),
                    "labels" => data.labels = Some(parse_value(v, key)?),
                    "n" => g.n = parse_value(v, key)?,
                    "d" => g.d = parse_value(v, key)?,
                    "k" => g.k = parse_value(v, key)?,
                    "rank" => g.rank = parse_value(v, key)?,
                    "noise_scale" => g.noise_scale = parse_value(v, key)?,
                    "sparsity" => g.sparsity = parse_value(v, key)?,
                    "offsets" => g.offsets = parse_list(v, key)?,
                    "embedding" => {
                        g.embedding = match v.trim() {
                            "random" => Embedding::Random,
                            "identity" => Embedding::Identity,
                            other => return Err(Error::Config(format!("unknown embedding `{other}`"))),
                        }
                    }
                    _ => return Ok(false),
                }
            }
            "split" => {
                let s = &mut self.split;
                match key {
                    "train" => s.train = parse_value(v, key)?,
                    "validation" => s.validation = parse_value(v, key)?,
                    "test" => s.test = parse_value(v, key)?,
                    "clean_of_validation" => s.clean_of_validation = parse_value(v, key)?,
                    _ => return Ok(false),
                }
            }
            "noise" => match key {
                "kinds" => {
                    self.noise.kinds = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(parse_enum)
                        .collect::<Result<_>>()?
                }
                "rates" => self.noise.rates = parse_list(v, key)?,
                _ => return Ok(false),
            },
            "base" => match key {
                "hidden" => self.base.hidden = parse_list(v, key)?,
                _ => return train_key(&mut self.base.train, key, v),
            },
            "lsnpc" => {
                let m = &mut self.lsnpc.model;
                match key {
                    "m" => m.m = parse_value(v, key)?,
                    "nu" => parse_enum::<NuChoice>(v)?.apply(m),
                    "nu0" => m.nu0 = parse_value(v, key)?,
                    "beta" => m.beta = parse_value(v, key)?,
                    "eta" => m.eta = parse_value(v, key)?,
                    "lambda_floor" => m.lambda_floor = parse_value(v, key)?,
                    "family" => m.family = parse_enum::<ProposalFamily>(v)?,
                    "coupling" => m.coupling = parse_enum::<StudentCoupling>(v)?,
                    "shift_decoder" => m.shift_decoder = parse_enum::<ShiftDecoder>(v)?,
                    "hidden" => m.hidden = parse_value(v, key)?,
                    "label_hidden" => m.label_hidden = parse_value(v, key)?,
                    "label_embed" => m.label_embed = parse_value(v, key)?,
                    "s_y" => m.s_y = parse_value(v, key)?,
                    "s_z" => m.s_z = parse_value(v, key)?,
                    "sampler" => m.sampler = parse_enum::<LabelSampler>(v)?,
                    "semi_epochs" => self.lsnpc.semi_epochs = parse_value(v, key)?,
                    "paradigms" => {
                        self.lsnpc.paradigms = v
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(parse_enum)
                            .collect::<Result<_>>()?
                    }
                    _ => return train_key(&mut self.lsnpc.train, key, v),
                }
            }
            "correction" => {
                let c = &mut self.correction;
                match key {
                    "s_y" => c.s_y = parse_value(v, key)?,
                    "s_zhat" => c.s_zhat = parse_value(v, key)?,
                    "s_z" => c.s_z = parse_value(v, key)?,
                    "tau" => c.tau = parse_value(v, key)?,
                    "knn_k" => c.knn_k = parse_value(v, key)?,
                    "methods" => c.methods = parse_list(v, key)?,
                    "select_s_y" => c.select_s_y = parse_value(v, key)?,
                    "select_s_zhat" => c.select_s_zhat = parse_value(v, key)?,
                    _ => return Ok(false),
                }
            }
            "run" => match key {
                "seeds" => self.seeds = parse_list(v, key)?,
                "out" => self.out = Some(PathBuf::from(v.trim())),
                _ => return Ok(false),
            },
            "sweep" => match key {
                "nu0" => self.sweep.nu0 = parse_list(v, key)?,
                "nu" => {
                    self.sweep.nu = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(parse_enum)
                        .collect::<Result<_>>()?
                }
                _ => return Ok(false),
            },
            "theory" => {
                let t = &mut self.theory;
                match key {
                    "instances" => t.instances = parse_value(v, key)?,
                    "grid_lo" => t.grid.lo = parse_value(v, key)?,
                    "grid_hi" => t.grid.hi = parse_value(v, key)?,
                    "grid_step" => t.grid.step = parse_value(v, key)?,
                    "tiny_nu" => t.tiny_nu = parse_value(v, key)?,
                    "pairs" => t.pairs = parse_value(v, key)?,
                    "estimate_pairs" => t.estimate_pairs = parse_value(v, key)?,
                    "mc_samples" => t.mc_samples = parse_value(v, key)?,
                    "inflation" => t.inflation = parse_value(v, key)?,
                    "nu" => t.nu = parse_value(v, key)?,
                    "epochs" => t.epochs = parse_value(v, key)?,
                    "max_delta" => t.max_delta = parse_value(v, key)?,
                    "tolerance" => t.tolerance = parse_value(v, key)?,
                    _ => return Ok(false),
                }
            }
            other => return Err(Error::Config(format!("unknown section [{other}]"))),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let wrap = |r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(_) => e,
                other => Error::Config(other.to_string()),
            })
        };
        if let DataSource::Synthetic(g) = &self.data {
            wrap(g.validate())?;
        }
        wrap(self.split.validate())?;
        if self.noise.kinds.is_empty() || self.noise.rates.is_empty() {
            return bad("[noise] needs at least one kind and one rate".into());
        }
        if let Some(r) = self.noise.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("noise rate {r} outside [0, 1)"));
        }
        wrap(self.base.train.validate())?;
        wrap(self.lsnpc.train.validate())?;
        self.lsnpc.model.validate()?;
        if self.lsnpc.paradigms.is_empty() {
            return bad("[lsnpc] needs at least one paradigm".into());
        }
        wrap(self.correction.config(0, LabelSampler::Independent).validate())?;
        wrap(self.correction.selection(0, LabelSampler::Independent).validate())?;
        if self.correction.knn_k == 0 {
            return bad("knn_k must be at least 1".into());
        }
        if self.correction.methods.is_empty() {
            return bad("[correction] needs at least one method".into());
        }
        if self.seeds.is_empty() {
            return bad("[run] needs at least one seed".into());
        }
        if let Some(v) = self.sweep.nu0.iter().find(|v| !(**v > 2.0)) {
            return bad(format!("sweep ν0 {v} must exceed 2"));
        }
        let t = &self.theory;
        wrap(QuadratureGrid::new(t.grid.lo, t.grid.hi, t.grid.step).map(|_| ()))?;
        if !(t.tiny_nu > 2.0) || !(t.nu > 2.0) {
            return bad("theory ν values must exceed 2".into());
        }
        if !(t.inflation >= 1.0) {
            return bad(format!("inflation {} below 1", t.inflation));
        }
        if t.max_delta == 0 || t.mc_samples < 2 || t.pairs == 0 || t.estimate_pairs == 0 {
            return bad("theory pair counts, samples and max_delta must be positive".into());
        }
        Ok(())
    }

    /// Canonical text of every setting that affects results. The output
    /// directory is left out.
    pub fn canonical(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "[data]");
        match &self.data {
            DataSource::Synthetic(g) => {
                let _ = writeln!(o, "source = synthetic");
                let _ = writeln!(o, "n = {}\nd = {}\nk = {}\nrank = {}", g.n, g.d, g.k, g.rank);
                let _ = writeln!(o, "noise_scale = {}\nsparsity = {}", g.noise_scale, g.sparsity);
                let emb = match g.embedding {
                    Embedding::Random => "random",
                    Embedding::Identity => "identity",
                };
                let _ = writeln!(o, "embedding = {emb}\noffsets = {}", join(&g.offsets));
            }
            DataSource::Lsds(p) => {
                let _ = writeln!(o, "source = lsds\npath = {}", p.display());
            }
            DataSource::Csv { path, labels } => {
                let _ = writeln!(o, "source = csv\npath = {}\nlabels = {labels}", path.display());
            }
        }
        let s = &self.split;
        let _ = writeln!(
            o,
            "[split]\ntrain = {}\nvalidation = {}\ntest = {}\nclean_of_validation = {}",
            s.train, s.validation, s.test, s.clean_of_validation
        );
        let _ = writeln!(o, "[noise]\nkinds = {}\nrates = {}", join(&self.noise.kinds), join(&self.noise.rates));
        let _ = writeln!(o, "[base]\nhidden = {}", join(&self.base.hidden));
        write_train(&mut o, &self.base.train);
        let m = &self.lsnpc.model;
        let _ = writeln!(o, "[lsnpc]\nm = {}\nnu = {}\nnu0 = {}", m.m, NuChoice::of(m), m.nu0);
        let _ = writeln!(o, "beta = {}\neta = {}\nlambda_floor = {}", m.beta, m.eta, m.lambda_floor);
        let _ = writeln!(o, "family = {}\ncoupling = {}\nshift_decoder = {}", m.family, m.coupling, m.shift_decoder);
        let _ = writeln!(
            o,
            "hidden = {}\nlabel_hidden = {}\nlabel_embed = {}",
            m.hidden, m.label_hidden, m.label_embed
        );
        let _ = writeln!(o, "s_y = {}\ns_z = {}\nsampler = {}", m.s_y, m.s_z, m.sampler);
        write_train(&mut o, &self.lsnpc.train);
        let _ = writeln!(o, "semi_epochs = {}\nparadigms = {}", self.lsnpc.semi_epochs, join(&self.lsnpc.paradigms));
        let c = &self.correction;
        let _ = writeln!(
            o,
            "[correction]\ns_y = {}\ns_zhat = {}\ns_z = {}\ntau = {}\nknn_k = {}",
            c.s_y, c.s_zhat, c.s_z, c.tau, c.knn_k
        );
        let _ = writeln!(
            o,
            "methods = {}\nselect_s_y = {}\nselect_s_zhat = {}",
            c.methods.join(", "),
            c.select_s_y,
            c.select_s_zhat
        );
        let _ = writeln!(o, "[run]\nseeds = {}", join(&self.seeds));
        let _ = writeln!(o, "[sweep]\nnu0 = {}\nnu = {}", join(&self.sweep.nu0), join(&self.sweep.nu));
        let t = &self.theory;
        let _ = writeln!(
            o,
            "[theory]\ninstances = {}\ngrid_lo = {}\ngrid_hi = {}\ngrid_step = {}\ntiny_nu = {}",
            t.instances, t.grid.lo, t.grid.hi, t.grid.step, t.tiny_nu
        );
        let _ = writeln!(
            o,
            "pairs = {}\nestimate_pairs = {}\nmc_samples = {}\ninflation = {}\nnu = {}",
            t.pairs, t.estimate_pairs, t.mc_samples, t.inflation, t.nu
        );
        let _ = writeln!(o, "epochs = {}\nmax_delta = {}\ntolerance = {}", t.epochs, t.max_delta, t.tolerance);
        o
    }

    /// SHA-256 of the canonical text, in hex.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
