//! Experiment orchestration.
//!
//! Per seed: load or generate the data, then for every noise setting split
//! and corrupt it, train the base classifier on the noisy training rows,
//! fit every configured correction method, correct the test rows and score
//! them against their true labels.
//!
//! With an output directory the run writes
//!
//! ```text
//! <out>/seed-<s>/dataset.lsds
//! <out>/seed-<s>/<Kind>-<nr>/noisy.lsds, transition.txt, base.ckpt,
//!                            <method>.ckpt, correction-<method>.csv, metrics.csv
//! <out>/report.csv, report.txt, manifest.txt
//! ```
//!
//! and `manifest.txt` records the config hash and a SHA-256 for every file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::classifier::{predict_probs, train_base, BaseClassifier};
use crate::config::{hex_digest, DataSource, ExperimentConfig, NuChoice, Paradigm};
use crate::data::{generate_synthetic, import_csv, load_dataset, save_dataset, FeatureDataset, GeneratorConfig, Labels, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{build_report, f1_report, ExperimentReport, RunMetric, VacuousLabel};
use crate::model::{LsnpcConfig, LsnpcModel, NuMode, ProposalFamily};
use crate::noise::{build_transition_matrix, split_dataset, NoiseKind, Splits, TransitionMatrix};
use crate::optim::TrainConfig;
use crate::registry::{CorrectionInput, CorrectionOutput, Corrector, FitContext, ModelStrategy, Registry, Strategy};
use crate::rng;
use crate::tensor::Tensor;
use crate::theory::{
    amortization_demo, estimate_constants, fitted_delta_exponent, flip_pairs, gaussian_bound_check, theorem2_check,
    verify_theorem1, BoundInstance, CheckRow, LabelPair, TheoryReport,
};

pub const DATASET_FILE: &str = "dataset.lsds";
pub const NOISY_FILE: &str = "noisy.lsds";
pub const TRANSITION_FILE: &str = "transition.txt";
pub const BASE_FILE: &str = "base.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn setting_name(kind: NoiseKind, nr: f64) -> String {
    format!("{kind}-{nr}")
}

pub fn checkpoint_file(label: &str) -> String {
    format!("{}.ckpt", label.to_lowercase())
}

pub fn correction_file(label: &str) -> String {
    format!("correction-{}.csv", label.to_lowercase())
}

/// The dataset for one seed: generated with that seed, or read from file.
pub fn load_source(cfg: &ExperimentConfig, seed: u64) -> Result<FeatureDataset> {
    stage(
        "generate",
        match &cfg.data {
            DataSource::Synthetic(g) => {
                let g = GeneratorConfig { seed, ..g.clone() };
                generate_synthetic(&g, &mut rng::stream(seed, "gen"))
            }
            DataSource::Lsds(path) => load_dataset(path),
            DataSource::Csv { path, labels } => import_csv(path, *labels),
        },
    )
}

/// One noise setting applied to one dataset.
#[derive(Clone, Debug)]
pub struct Corrupted {
    /// Train and validation labels are noisy; clean and test labels are true.
    pub noisy: FeatureDataset,
    pub splits: Splits,
    pub transition: TransitionMatrix,
}

impl Corrupted {
    pub fn setting(&self) -> String {
        self.transition.kind.to_string()
    }

    /// Rebuilds the split from the tags stored in a noisy dataset file.
    pub fn from_parts(noisy: FeatureDataset, transition: TransitionMatrix) -> Result<Self> {
        let splits = Splits {
            train: noisy.split_indices(SplitTag::Train)?,
            validation: noisy.split_indices(SplitTag::Validation)?,
            clean: noisy.split_indices(SplitTag::Clean)?,
            test: noisy.split_indices(SplitTag::Test)?,
        };
        Ok(Corrupted {
            noisy,
            splits,
            transition,
        })
    }
}

pub fn corrupt(ds: &FeatureDataset, cfg: &ExperimentConfig, kind: NoiseKind, nr: f64, seed: u64) -> Result<Corrupted> {
    stage("corrupt", (|| {
        let transition = build_transition_matrix(kind, ds.k(), nr)?;
        let (noisy, splits) = split_dataset(ds, &cfg.split, &transition, seed)?;
        Ok(Corrupted {
            noisy,
            splits,
            transition,
        })
    })())
}

/// Trains on noisy training rows; the checkpoint is chosen on noisy
/// validation rows.
pub fn train_base_stage(c: &Corrupted, cfg: &ExperimentConfig, seed: u64) -> Result<BaseClassifier> {
    stage("train-base", (|| {
        let ds = &c.noisy;
        let (x, y) = (ds.features(&c.splits.train), ds.labels.select_rows(&c.splits.train));
        let (vx, vy) = (ds.features(&c.splits.validation), ds.labels.select_rows(&c.splits.validation));
        let validation = (!c.splits.validation.is_empty()).then_some((&vx, &vy));
        let train = TrainConfig {
            seed,
            ..cfg.base.train.clone()
        };
        train_base(&x, &y, validation, &cfg.base.hidden, &train)
    })())
}

/// Tensors the correction methods work from. Test rows contribute features
/// and base probabilities only.
pub struct StageData {
    pub train_x: Tensor,
    pub train_y: Labels,
    pub train_probs: Tensor,
    pub val_x: Tensor,
    pub val_y: Labels,
    pub val_probs: Tensor,
    pub clean_x: Tensor,
    pub clean_y: Labels,
    pub clean_probs: Tensor,
    pub test_x: Tensor,
    pub test_probs: Tensor,
}

impl StageData {
    pub fn new(c: &Corrupted, base: &BaseClassifier) -> Result<Self> {
        let ds = &c.noisy;
        let part = |idx: &[usize]| -> Result<(Tensor, Tensor)> {
            let x = ds.features(idx);
            let p = predict_probs(base, &x)?;
            Ok((x, p))
        };
        let (train_x, train_probs) = part(&c.splits.train)?;
        let (val_x, val_probs) = part(&c.splits.validation)?;
        let (clean_x, clean_probs) = part(&c.splits.clean)?;
        let (test_x, test_probs) = part(&c.splits.test)?;
        Ok(StageData {
            train_x,
            train_y: ds.labels.select_rows(&c.splits.train),
            train_probs,
            val_x,
            val_y: ds.labels.select_rows(&c.splits.validation),
            val_probs,
            clean_x,
            clean_y: ds.labels.select_rows(&c.splits.clean),
            clean_probs,
            test_x,
            test_probs,
        })
    }

    pub fn context<'a>(&'a self, cfg: &'a ExperimentConfig, seed: u64) -> FitContext<'a> {
        FitContext {
            cfg,
            seed,
            train_x: &self.train_x,
            train_y: &self.train_y,
            train_probs: &self.train_probs,
            val_x: &self.val_x,
            val_y: &self.val_y,
            val_probs: &self.val_probs,
            clean_x: &self.clean_x,
            clean_y: &self.clean_y,
            clean_probs: &self.clean_probs,
        }
    }
}

pub struct Fitted {
    pub label: String,
    pub paradigm: Paradigm,
    pub corrector: Box<dyn Corrector>,
}

/// Fits every configured method. With `checkpoints`, model methods are
/// restored from `<checkpoints>/<method>.ckpt` instead of trained.
pub fn fit_methods(
    data: &StageData,
    cfg: &ExperimentConfig,
    seed: u64,
    registry: &Registry,
    checkpoints: Option<&Path>,
) -> Result<Vec<Fitted>> {
    stage("train-lsnpc", (|| {
        let ctx = data.context(cfg, seed);
        registry
            .plan(cfg)?
            .into_iter()
            .map(|(s, paradigm)| {
                let label = s.label(paradigm);
                let corrector = match checkpoints {
                    Some(dir) if s.uses_paradigms() => s.restore(&ctx, paradigm, &dir.join(checkpoint_file(&label)))?,
                    _ => {
                        log::info!("seed {seed}: fitting {label}");
                        s.fit(&ctx, paradigm)?
                    }
                };
                Ok(Fitted {
                    label,
                    paradigm,
                    corrector,
                })
            })
            .collect()
    })())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutput {
    pub label: String,
    pub output: CorrectionOutput,
}

pub fn apply_methods(fitted: &[Fitted], data: &StageData) -> Result<Vec<MethodOutput>> {
    stage("correct", (|| {
        let input = CorrectionInput {
            x: &data.test_x,
            base_probs: &data.test_probs,
        };
        fitted
            .iter()
            .map(|f| {
                Ok(MethodOutput {
                    label: f.label.clone(),
                    output: f.corrector.correct(&input)?,
                })
            })
            .collect()
    })())
}

/// Micro and macro F1 of every method against the true test labels.
pub fn evaluate(truth: &Labels, outputs: &[MethodOutput], setting: &str, nr: f64, seed: u64) -> Result<Vec<RunMetric>> {
    stage("eval", (|| {
        let mut runs = Vec::with_capacity(2 * outputs.len());
        for o in outputs {
            let r = f1_report(truth, &o.output.labels, VacuousLabel::One)?;
            for (metric, value) in [("micro_f1", r.micro_f1), ("macro_f1", r.macro_f1)] {
                runs.push(RunMetric {
                    setting: setting.to_string(),
                    nr,
                    method: o.label.clone(),
                    metric: metric.into(),
                    seed,
                    value,
                });
            }
        }
        Ok(runs)
    })())
}

/// One line per corrected row: the dataset row index, the corrected
/// probabilities when the method has them, then the 0/1 labels.
pub fn correction_csv(rows: &[usize], out: &CorrectionOutput) -> String {
    let k = out.labels.k();
    let mut s = String::from("row");
    if out.probs.is_some() {
        for j in 0..k {
            let _ = write!(s, ",p{j}");
        }
    }
    for j in 0..k {
        let _ = write!(s, ",y{j}");
    }
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(s, "{r}");
        if let Some(p) = &out.probs {
            for v in p.row_slice(i) {
                let _ = write!(s, ",{v}");
            }
        }
        for b in out.labels.row(i) {
            let _ = write!(s, ",{b}");
        }
        s.push('\n');
    }
    s
}

/// Reads the row indices and labels back from a correction file.
pub fn read_correction_csv(path: &Path, k: usize) -> Result<(Vec<usize>, Labels)> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize| Error::Format {
        path: path.to_path_buf(),
        detail: format!("malformed line {line}"),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1))?;
    let prob_cols = header.split(',').filter(|c| c.starts_with('p')).count();
    if header.split(',').count() != 1 + prob_cols + k {
        return Err(bad(1));
    }
    let mut rows = Vec::new();
    let mut bits = Vec::new();
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 1 + prob_cols + k {
            return Err(bad(n + 2));
        }
        rows.push(cells[0].parse().map_err(|_| bad(n + 2))?);
        for c in &cells[1 + prob_cols..] {
            match *c {
                "0" => bits.push(0),
                "1" => bits.push(1),
                _ => return Err(bad(n + 2)),
            }
        }
    }
    let labels = Labels::new(rows.len(), k, bits)?;
    Ok((rows, labels))
}

pub fn metrics_csv(runs: &[RunMetric]) -> String {
    let mut s = String::from("setting,nr,method,metric,seed,value\n");
    for r in runs {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.setting, r.nr, r.method, r.metric, r.seed, r.value);
    }
    s
}

/// Everything produced for one seed and one noise setting.
pub struct SettingRun {
    pub corrupted: Corrupted,
    pub base: BaseClassifier,
    pub fitted: Vec<Fitted>,
    pub outputs: Vec<MethodOutput>,
    pub metrics: Vec<RunMetric>,
}

/// Runs one seed of one noise setting, writing its artifacts under `dir`.
pub fn run_setting(
    ds: &FeatureDataset,
    cfg: &ExperimentConfig,
    kind: NoiseKind,
    nr: f64,
    seed: u64,
    registry: &Registry,
    dir: Option<&Path>,
) -> Result<SettingRun> {
    let corrupted = corrupt(ds, cfg, kind, nr, seed)?;
    if let Some(dir) = dir {
        stage("corrupt", (|| {
            std::fs::create_dir_all(dir)?;
            save_dataset(&corrupted.noisy, &dir.join(NOISY_FILE))?;
            corrupted.transition.save(&dir.join(TRANSITION_FILE))
        })())?;
    }
    let base = train_base_stage(&corrupted, cfg, seed)?;
    if let Some(dir) = dir {
        stage("train-base", base.save(&dir.join(BASE_FILE)))?;
    }
    let data = stage("train-base", StageData::new(&corrupted, &base))?;
    let fitted = fit_methods(&data, cfg, seed, registry, None)?;
    if let Some(dir) = dir {
        for f in &fitted {
            if let Some(m) = f.corrector.model() {
                stage("train-lsnpc", m.save(&dir.join(checkpoint_file(&f.label))))?;
            }
        }
    }
    let outputs = apply_methods(&fitted, &data)?;
    if let Some(dir) = dir {
        for o in &outputs {
            let text = correction_csv(&corrupted.splits.test, &o.output);
            stage("correct", std::fs::write(dir.join(correction_file(&o.label)), text).map_err(Error::from))?;
        }
    }
    let truth = ds.labels.select_rows(&corrupted.splits.test);
    let metrics = evaluate(&truth, &outputs, &corrupted.setting(), nr, seed)?;
    if let Some(dir) = dir {
        stage("eval", std::fs::write(dir.join(METRICS_FILE), metrics_csv(&metrics)).map_err(Error::from))?;
    }
    Ok(SettingRun {
        corrupted,
        base,
        fitted,
        outputs,
        metrics,
    })
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub runs: Vec<RunMetric>,
    pub report: ExperimentReport,
    pub config_hash: String,
    /// Relative path and SHA-256 of every file written, sorted by path.
    pub files: Vec<(String, String)>,
}

/// Orders runs by setting (config order), then seed, keeping method order.
fn sort_runs(runs: &mut [RunMetric], cfg: &ExperimentConfig) {
    let settings = cfg.noise.settings();
    let pos = |r: &RunMetric| {
        settings
            .iter()
            .position(|(k, nr)| k.to_string() == r.setting && *nr == r.nr)
            .unwrap_or(usize::MAX)
    };
    runs.sort_by_key(|r| (pos(r), r.seed));
}

pub fn run_experiment(cfg: &ExperimentConfig, registry: &Registry) -> Result<RunArtifacts> {
    cfg.validate()?;
    registry.plan(cfg)?;
    let out = cfg.out.as_deref();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_source(cfg, seed)?;
        if let Some(out) = out {
            stage("generate", (|| {
                std::fs::create_dir_all(seed_dir(out, seed))?;
                save_dataset(&ds, &seed_dir(out, seed).join(DATASET_FILE))
            })())?;
        }
        for (kind, nr) in cfg.noise.settings() {
            log::info!("seed {seed}: {kind} noise at rate {nr}");
            let dir = out.map(|o| seed_dir(o, seed).join(setting_name(kind, nr)));
            runs.extend(run_setting(&ds, cfg, kind, nr, seed, registry, dir.as_deref())?.metrics);
        }
    }
    finish(cfg, runs)
}

/// Aggregates runs and, with an output directory, writes the report and
/// the manifest.
pub fn finish(cfg: &ExperimentConfig, mut runs: Vec<RunMetric>) -> Result<RunArtifacts> {
    sort_runs(&mut runs, cfg);
    let report = stage("eval", build_report(&runs))?;
    let config_hash = cfg.hash();
    let mut files = Vec::new();
    if let Some(out) = &cfg.out {
        stage("eval", (|| {
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("report.csv"), report.to_csv()?)?;
            std::fs::write(out.join("report.txt"), report.to_text())?;
            files = write_manifest(out, &config_hash)?;
            Ok(())
        })())?;
    }
    Ok(RunArtifacts {
        runs,
        report,
        config_hash,
        files,
    })
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if path != root.join(MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `out` into `out/manifest.txt`.
pub fn write_manifest(out: &Path, config_hash: &str) -> Result<Vec<(String, String)>> {
    let mut paths = Vec::new();
    list_files(out, out, &mut paths)?;
    let mut files = Vec::with_capacity(paths.len());
    let mut text = format!("config {config_hash}\n");
    for p in paths {
        let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        let digest = hex_digest(&std::fs::read(&p)?);
        let _ = writeln!(text, "{digest}  {rel}");
        files.push((rel, digest));
    }
    std::fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(files)
}

/// One cell of the ν0 × ν grid for one noise setting and metric.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub nu0: f64,
    pub nu: NuChoice,
    pub setting: String,
    pub nr: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nu0,nu,setting,nr,metric,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.nu0, r.nu, r.setting, r.nr, r.metric, r.mean, r.std);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6}  {:>8}  {:<6} {:>4}  {:<8}  {:>7}  {:>6}\n", "nu0", "nu", "noise", "nr", "metric", "mean", "std");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6}  {:>8}  {:<6} {:>4}  {:<8}  {:>7.2}  {:>6.2}",
                r.nu0,
                r.nu.to_string(),
                r.setting,
                r.nr,
                r.metric,
                r.mean,
                r.std
            );
        }
        s
    }
}

/// One unsupervised Student run per (ν0, ν) cell.
pub fn sweep_sensitivity(cfg: &ExperimentConfig, registry: &Registry) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &nu0 in &cfg.sweep.nu0 {
        for &nu in &cfg.sweep.nu {
            let mut c = cfg.clone();
            c.lsnpc.model.nu0 = nu0;
            nu.apply(&mut c.lsnpc.model);
            c.lsnpc.model.family = ProposalFamily::Student;
            c.lsnpc.paradigms = vec![Paradigm::Unsupervised];
            c.correction.methods = vec!["lsnpc".into()];
            c.out = cfg.out.as_ref().map(|o| o.join("sweep").join(format!("nu0-{nu0}_nu-{nu}")));
            let label = registry.get("lsnpc")?.label(Paradigm::Unsupervised);
            let art = run_experiment(&c, registry)?;
            rows.extend(art.report.rows.iter().filter(|r| r.method == label).map(|r| SweepRow {
                nu0,
                nu,
                setting: r.setting.clone(),
                nr: r.nr,
                metric: r.metric.clone(),
                mean: r.mean,
                std: r.std,
            }));
        }
    }
    let report = SweepReport { rows };
    if let Some(out) = &cfg.out {
        stage("eval", (|| {
            std::fs::write(out.join("sweep").join("sweep.csv"), report.to_csv())?;
            std::fs::write(out.join("sweep").join("sweep.txt"), report.to_text())?;
            Ok(())
        })())?;
    }
    Ok(report)
}

/// Student and Normal arms of one method under one setting and paradigm.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub nr: f64,
    pub paradigm: Paradigm,
    pub metric: String,
    /// (mean, std) of the Student arm, in percent.
    pub student: (f64, f64),
    pub normal: (f64, f64),
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    /// Arm labels, Student first.
    pub arms: (String, String),
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let (a, b) = &self.arms;
        let mut s = format!("setting,nr,paradigm,metric,{a}_mean,{a}_std,{b}_mean,{b}_std,n_seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.setting, r.nr, r.paradigm, r.metric, r.student.0, r.student.1, r.normal.0, r.normal.1, r.n_seeds
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let (a, b) = &self.arms;
        let mut s = format!("{:<6} {:>4}  {:<15} {:<8}  {:>15}  {:>15}\n", "noise", "nr", "paradigm", "metric", a, b);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:>4}  {:<15} {:<8}  {:>7.2} ± {:<5.2}  {:>7.2} ± {:<5.2}",
                r.setting,
                r.nr,
                r.paradigm.to_string(),
                r.metric,
                r.student.0,
                r.student.1,
                r.normal.0,
                r.normal.1
            );
        }
        s
    }
}

/// Runs the Student and Normal proposals side by side on shared data and
/// base classifiers.
pub fn run_ablation(cfg: &ExperimentConfig, registry: &Registry) -> Result<AblationReport> {
    let mut c = cfg.clone();
    c.correction.methods = vec!["lsnpc".into(), "gauss".into()];
    c.out = cfg.out.as_ref().map(|o| o.join("ablation"));
    let (student, normal) = (registry.get("lsnpc")?, registry.get("gauss")?);
    let art = run_experiment(&c, registry)?;
    let mut rows = Vec::new();
    for r in &art.report.rows {
        for &p in &c.lsnpc.paradigms {
            if r.method != student.label(p) {
                continue;
            }
            let other = art
                .report
                .find(&r.setting, r.nr, &normal.label(p), &r.metric)
                .ok_or_else(|| Error::invalid(format!("missing {} row", normal.label(p))))?;
            rows.push(AblationRow {
                setting: r.setting.clone(),
                nr: r.nr,
                paradigm: p,
                metric: r.metric.clone(),
                student: (r.mean, r.std),
                normal: (other.mean, other.std),
                n_seeds: r.n_seeds,
            });
        }
    }
    let report = AblationReport {
        arms: (student.label(Paradigm::Unsupervised), normal.label(Paradigm::Unsupervised)),
        rows,
    };
    if let Some(out) = &c.out {
        stage("eval", (|| {
            std::fs::write(out.join("ablation.csv"), report.to_csv())?;
            std::fs::write(out.join("ablation.txt"), report.to_text())?;
            Ok(())
        })())?;
    }
    Ok(report)
}

/// Model used for the quadrature check: one latent dimension, two labels.
pub fn tiny_model_config(nu: f64) -> LsnpcConfig {
    LsnpcConfig {
        m: 1,
        nu,
        nu0: nu,
        hidden: 8,
        label_hidden: 8,
        label_embed: 8,
        ..LsnpcConfig::default()
    }
}

/// Random (model, x, ŷ) instances checked by quadrature. Returns the
/// instances with non-negative proposal entropy and those without.
fn theorem1_rows(cfg: &ExperimentConfig, seed: u64) -> Result<(CheckRow, CheckRow, usize)> {
    let t = &cfg.theory;
    let mut inputs = rng::stream(seed, "theorem1-inputs");
    let (mut regular, mut negative) = (Vec::new(), Vec::new());
    for i in 0..t.instances {
        let mut init = rng::row_stream(seed, "theorem1-model", i as u64);
        let model = LsnpcModel::new(3, 2, tiny_model_config(t.tiny_nu), &mut init)?;
        let x: Vec<f64> = (0..3).map(|_| inputs.gen_range(-2.0..2.0)).collect();
        let y: Vec<u8> = (0..2).map(|_| inputs.gen_range(0..2u8)).collect();
        let r = verify_theorem1(&model, &x, &y, &t.grid)?;
        let margin = r.rhs + t.tolerance - r.lhs;
        if r.entropy_step_vacuous() {
            negative.push(margin);
        } else {
            regular.push(margin);
        }
    }
    let failures = regular.iter().filter(|m| **m < 0.0).count();
    Ok((
        CheckRow::new("theorem1", &regular, |m| m >= 0.0),
        // Reported only: the inequality is not claimed for these.
        CheckRow::new("theorem1_negative_entropy", &negative, |_| true),
        failures,
    ))
}

/// Draws `n` pairs from `rows` with Hamming distance uniform in
/// `1..=max_delta`.
fn random_pairs(x: &Tensor, y: &Labels, rows: &[usize], max_delta: usize, seed: u64, label: &str) -> Result<Vec<LabelPair>> {
    let mut r = rng::stream(seed, label);
    let max = max_delta.min(y.k());
    flip_pairs(x, y, rows, |r: &mut rng::Rng| r.gen_range(1..=max), &mut r)
}

fn trained_model(cfg: &ExperimentConfig, data: &StageData, seed: u64, family: ProposalFamily) -> Result<LsnpcModel> {
    let t = &cfg.theory;
    let mut c = cfg.clone();
    c.lsnpc.model.nu = t.nu;
    c.lsnpc.model.nu0 = t.nu;
    c.lsnpc.model.nu_mode = NuMode::Fixed;
    c.lsnpc.train.epochs = t.epochs;
    let strategy = ModelStrategy {
        name: "theory",
        label: "theory",
        family,
    };
    let fitted = strategy.fit(&data.context(&c, seed), Paradigm::Unsupervised)?;
    Ok(fitted.model().expect("model strategies hold a model").clone())
}

/// Runs every theory check and collects one report row per check.
pub fn verify_all(cfg: &ExperimentConfig, seed: u64) -> Result<TheoryReport> {
    cfg.validate()?;
    let t = &cfg.theory;
    let mut report = TheoryReport::default();

    let (regular, negative, failures) = stage("theorem1", theorem1_rows(cfg, seed))?;
    if failures > 0 {
        report.notes.push(format!(
            "theorem1: {failures} of {} instances exceed the joint KL; the gap is the mutual information between z and ẑ under the proposal",
            regular.instances
        ));
    }
    report.rows.push(regular);
    report.rows.push(negative);

    // A model trained at ν = ν0 on the first noise setting.
    let (kind, nr) = cfg.noise.settings()[0];
    let ds = load_source(cfg, seed)?;
    let c = corrupt(&ds, cfg, kind, nr, seed)?;
    let base = train_base_stage(&c, cfg, seed)?;
    let data = stage("train-base", StageData::new(&c, &base))?;
    let student = stage("train-lsnpc", trained_model(cfg, &data, seed, ProposalFamily::Student))?;
    let normal = stage("train-lsnpc", trained_model(cfg, &data, seed, ProposalFamily::Normal))?;

    stage("bounds", (|| {
        let (x, y) = (&data.train_x, &data.train_y);
        let mut rows: Vec<usize> = (0..x.rows()).collect();
        rows.shuffle(&mut rng::stream(seed, "theory-rows"));
        let half = t.estimate_pairs.min(rows.len() / 2);
        let sample_a = random_pairs(x, y, &rows[..half], t.max_delta, seed, "pairs-a")?;
        let sample_b = random_pairs(x, y, &rows[half..2 * half], t.max_delta, seed, "pairs-b")?;
        let all: Vec<LabelPair> = sample_a.iter().chain(&sample_b).cloned().collect();
        let mut check_rows: Vec<usize> = (0..x.rows()).collect();
        check_rows.shuffle(&mut rng::stream(seed, "theory-check-rows"));
        check_rows.truncate(t.pairs);
        let check = random_pairs(x, y, &check_rows, t.max_delta, seed, "pairs-check")?;

        let raw = estimate_constants(&student, &all)?;
        let floor = student.cfg.lambda_floor.powi(2);
        report.rows.push(CheckRow::new("constants_floor", &[raw.lambda - floor], |m| m >= 0.0));
        let (ca, cb) = (estimate_constants(&student, &sample_a)?, estimate_constants(&student, &sample_b)?);
        let ratio = |a: f64, b: f64| (a / b).max(b / a);
        let stability = [2.0 - ratio(ca.m_ratio, cb.m_ratio), 2.0 - ratio(ca.lipschitz, cb.lipschitz)];
        report.rows.push(CheckRow::new("constants_stability", &stability, |m| m >= 0.0));

        let inflated = raw.inflated(t.inflation)?;
        let mut mc = rng::stream(seed, "theorem2-mc");
        let inst = theorem2_check(&student, &check, &inflated, t.mc_samples, &mut mc)?;
        let margins: Vec<f64> = inst.iter().map(BoundInstance::margin).collect();
        report.rows.push(CheckRow::new("theorem2", &margins, |m| m >= 0.0));
        let se: Vec<f64> = inst.iter().map(|i| 0.01 * i.bound - i.kl_se).collect();
        report.rows.push(CheckRow::new("theorem2_mc_se", &se, |m| m > 0.0));
        report.notes.push(format!(
            "constants: M = {:.4}, L = {:.4}, λ = {:.3e}, C1 = {:.4}, C2 = {:.4} before ×{} inflation",
            raw.m_ratio, raw.lipschitz, raw.lambda, raw.c1, raw.c2, t.inflation
        ));

        let gauss_c = estimate_constants(&normal, &all)?.inflated(t.inflation)?;
        let inst = gaussian_bound_check(&normal, &check, &gauss_c)?;
        let margins: Vec<f64> = inst.iter().map(BoundInstance::margin).collect();
        report.rows.push(CheckRow::new("gaussian_bound", &margins, |m| m >= 0.0));
        let mut graded = Vec::new();
        for delta in 1..=t.max_delta.min(y.k()) {
            let mut r = rng::stream(seed, &format!("pairs-delta-{delta}"));
            let pairs = flip_pairs(x, y, &check_rows, |_: &mut rng::Rng| delta, &mut r)?;
            graded.extend(gaussian_bound_check(&normal, &pairs, &gauss_c)?);
        }
        let exponent = fitted_delta_exponent(&graded)?;
        report.rows.push(CheckRow::new("gaussian_exponent", &[2.3 - exponent], |m| m >= 0.0));
        report.notes.push(format!("gaussian: fitted Δ exponent {exponent:.4}"));
        Ok(())
    })())?;

    stage("amortization", (|| {
        let kls: Vec<f64> = [20, 80, 320]
            .iter()
            .map(|&k| amortization_demo(k, 0.01, 0.9, 0.5, 2).map(|r| r.0))
            .collect::<Result<_>>()?;
        let margins: Vec<f64> = kls.iter().map(|kl| 1e-12 - (kl - kls[0]).abs()).collect();
        report.rows.push(CheckRow::new("amortization", &margins, |m| m >= 0.0));
        report.notes.push(format!("amortization: total KL {:.10} for k = 20, 80, 320", kls[0]));
        Ok(())
    })())?;

    if let Some(out) = &cfg.out {
        stage("eval", (|| {
            let dir = out.join("theory");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("report.csv"), report.to_csv())?;
            std::fs::write(dir.join("report.txt"), report.to_text())?;
            Ok(())
        })())?;
    }
    Ok(report)
}

/// File-based stages behind the individual CLI subcommands. Each reads what
/// the previous stage wrote under the same output layout as
/// [`run_experiment`], so running them in order reproduces its files.
pub mod stages {
    use super::*;

    fn setting_dirs(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Vec<(NoiseKind, f64, PathBuf)> {
        cfg.noise
            .settings()
            .into_iter()
            .map(|(k, nr)| (k, nr, seed_dir(out, seed).join(setting_name(k, nr))))
            .collect()
    }

    fn load_corrupted(dir: &Path) -> Result<Corrupted> {
        let noisy = load_dataset(&dir.join(NOISY_FILE))?;
        let transition = TransitionMatrix::load(&dir.join(TRANSITION_FILE))?;
        Corrupted::from_parts(noisy, transition)
    }

    fn load_stage_data(dir: &Path) -> Result<(Corrupted, StageData)> {
        let c = load_corrupted(dir)?;
        let base = BaseClassifier::load(&dir.join(BASE_FILE))?;
        let data = StageData::new(&c, &base)?;
        Ok((c, data))
    }

    pub fn gen_data(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<()> {
        let ds = load_source(cfg, seed)?;
        stage("generate", (|| {
            std::fs::create_dir_all(seed_dir(out, seed))?;
            save_dataset(&ds, &seed_dir(out, seed).join(DATASET_FILE))
        })())
    }

    pub fn corrupt(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<()> {
        let ds = stage("corrupt", load_dataset(&seed_dir(out, seed).join(DATASET_FILE)))?;
        for (kind, nr, dir) in setting_dirs(cfg, out, seed) {
            let c = super::corrupt(&ds, cfg, kind, nr, seed)?;
            stage("corrupt", (|| {
                std::fs::create_dir_all(&dir)?;
                save_dataset(&c.noisy, &dir.join(NOISY_FILE))?;
                c.transition.save(&dir.join(TRANSITION_FILE))
            })())?;
        }
        Ok(())
    }

    pub fn train_base(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<()> {
        for (_, _, dir) in setting_dirs(cfg, out, seed) {
            let c = stage("train-base", load_corrupted(&dir))?;
            let base = train_base_stage(&c, cfg, seed)?;
            stage("train-base", base.save(&dir.join(BASE_FILE)))?;
        }
        Ok(())
    }

    pub fn train_lsnpc(cfg: &ExperimentConfig, out: &Path, seed: u64, registry: &Registry) -> Result<()> {
        for (_, _, dir) in setting_dirs(cfg, out, seed) {
            let (_, data) = stage("train-lsnpc", load_stage_data(&dir))?;
            for f in fit_methods(&data, cfg, seed, registry, None)? {
                if let Some(m) = f.corrector.model() {
                    stage("train-lsnpc", m.save(&dir.join(checkpoint_file(&f.label))))?;
                }
            }
        }
        Ok(())
    }

    pub fn correct(cfg: &ExperimentConfig, out: &Path, seed: u64, registry: &Registry) -> Result<()> {
        for (_, _, dir) in setting_dirs(cfg, out, seed) {
            let (c, data) = stage("correct", load_stage_data(&dir))?;
            let fitted = fit_methods(&data, cfg, seed, registry, Some(&dir))?;
            for o in apply_methods(&fitted, &data)? {
                let text = correction_csv(&c.splits.test, &o.output);
                stage("correct", std::fs::write(dir.join(correction_file(&o.label)), text).map_err(Error::from))?;
            }
        }
        Ok(())
    }

    /// Scores the correction files of one seed against the true labels.
    pub fn eval(cfg: &ExperimentConfig, out: &Path, seed: u64, registry: &Registry) -> Result<Vec<RunMetric>> {
        let ds = stage("eval", load_dataset(&seed_dir(out, seed).join(DATASET_FILE)))?;
        let labels: Vec<String> = registry.plan(cfg)?.iter().map(|(s, p)| s.label(*p)).collect();
        let mut runs = Vec::new();
        for (kind, nr, dir) in setting_dirs(cfg, out, seed) {
            let c = stage("eval", load_corrupted(&dir))?;
            let mut outputs = Vec::new();
            for label in &labels {
                let (rows, pred) = stage("eval", read_correction_csv(&dir.join(correction_file(label)), ds.k()))?;
                if rows != c.splits.test {
                    return Err(Error::Stage {
                        stage: "eval",
                        source: Box::new(Error::invalid(format!("{label}: correction rows do not match the test split"))),
                    });
                }
                outputs.push(MethodOutput {
                    label: label.clone(),
                    output: CorrectionOutput { labels: pred, probs: None },
                });
            }
            let truth = ds.labels.select_rows(&c.splits.test);
            let metrics = evaluate(&truth, &outputs, &kind.to_string(), nr, seed)?;
            stage("eval", std::fs::write(dir.join(METRICS_FILE), metrics_csv(&metrics)).map_err(Error::from))?;
            runs.extend(metrics);
        }
        Ok(runs)
    }
}
