use std::path::Path;

use lsnpc::config::ExperimentConfig;
use lsnpc::noise::NoiseKind;
use lsnpc::pipeline::{self, stages, StageData};
use lsnpc::registry::Registry;

const SMOKE: &str = "
[data]
n = 300
[noise]
kinds = sym, pair
rates = 0, 0.4
[base]
epochs = 3
[lsnpc]
epochs = 2
semi_epochs = 2
[correction]
methods = baseline, knn, lsnpc
[run]
seeds = 1, 2
[theory]
instances = 3
pairs = 20
estimate_pairs = 100
mc_samples = 2000
epochs = 1
";

fn smoke(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(SMOKE, Path::new(".")).unwrap();
    cfg.out = Some(out.to_path_buf());
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_writes_every_artifact_and_repeats_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let registry = Registry::default();
    let first = pipeline::run_experiment(&smoke(a.path()), &registry).unwrap();
    let second = pipeline::run_experiment(&smoke(b.path()), &registry).unwrap();

    for seed in [1, 2] {
        let seed_dir = pipeline::seed_dir(a.path(), seed);
        assert!(seed_dir.join(pipeline::DATASET_FILE).is_file());
        for setting in ["Sym-0", "Sym-0.4", "Pair-0.4"] {
            let dir = seed_dir.join(setting);
            for f in [
                pipeline::NOISY_FILE,
                pipeline::TRANSITION_FILE,
                pipeline::BASE_FILE,
                pipeline::METRICS_FILE,
                "lsnpc.ckpt",
                "lsnpc-semi.ckpt",
                "correction-baseline.csv",
                "correction-knn.csv",
                "correction-lsnpc.csv",
                "correction-lsnpc-semi.csv",
            ] {
                assert!(dir.join(f).is_file(), "{}", dir.join(f).display());
            }
        }
        // The zero rate runs once, under the first kind.
        assert!(!seed_dir.join("Pair-0").exists());
    }
    for f in ["report.csv", "report.txt", pipeline::MANIFEST_FILE] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    assert_eq!(first.files, second.files);
    assert_eq!(first.config_hash, second.config_hash);
    // 3 settings × 2 seeds × (baseline, KNN, LSNPC, LSNPC-semi) × 2 metrics.
    assert_eq!(first.runs.len(), 3 * 2 * 4 * 2);
    let manifest = String::from_utf8(read(&a.path().join(pipeline::MANIFEST_FILE))).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), format!("config {}", first.config_hash));
    assert_eq!(manifest.lines().count(), first.files.len() + 1);

    let csv = String::from_utf8(read(&a.path().join("seed-1/Sym-0.4/correction-lsnpc.csv"))).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "row,p0,p1,p2,p3,p4,p5,p6,p7,p8,p9,y0,y1,y2,y3,y4,y5,y6,y7,y8,y9");
    let (rows, labels) = pipeline::read_correction_csv(&a.path().join("seed-1/Sym-0.4/correction-lsnpc.csv"), 10).unwrap();
    assert_eq!(rows.len(), labels.n());
    let knn = String::from_utf8(read(&a.path().join("seed-1/Sym-0.4/correction-knn.csv"))).unwrap();
    assert!(knn.starts_with("row,y0,"));
}

/// Running the stages one at a time from files reproduces the single-call
/// run exactly.
#[test]
fn staged_run_matches_single_call() {
    let (whole, staged) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let registry = Registry::default();
    let a = pipeline::run_experiment(&smoke(whole.path()), &registry).unwrap();
    let cfg = smoke(staged.path());
    let out = staged.path();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        stages::gen_data(&cfg, out, seed).unwrap();
        stages::corrupt(&cfg, out, seed).unwrap();
        stages::train_base(&cfg, out, seed).unwrap();
        stages::train_lsnpc(&cfg, out, seed, &registry).unwrap();
        stages::correct(&cfg, out, seed, &registry).unwrap();
        runs.extend(stages::eval(&cfg, out, seed, &registry).unwrap());
    }
    let b = pipeline::finish(&cfg, runs).unwrap();
    assert_eq!(a.files, b.files);
    assert_eq!(a.report, b.report);
}

/// Test-split labels never reach a corrector: scrambling them leaves every
/// method's output unchanged.
#[test]
fn corrections_ignore_test_labels() {
    let cfg = smoke(Path::new("unused"));
    let registry = Registry::default();
    let seed = 1;
    let ds = pipeline::load_source(&cfg, seed).unwrap();
    let outputs = |scramble: bool| {
        let mut c = pipeline::corrupt(&ds, &cfg, NoiseKind::Sym, 0.4, seed).unwrap();
        if scramble {
            for &r in &c.splits.test {
                c.noisy.labels.row_mut(r).iter_mut().for_each(|b| *b ^= 1);
            }
        }
        let base = pipeline::train_base_stage(&c, &cfg, seed).unwrap();
        let data = StageData::new(&c, &base).unwrap();
        let fitted = pipeline::fit_methods(&data, &cfg, seed, &registry, None).unwrap();
        pipeline::apply_methods(&fitted, &data).unwrap()
    };
    let (plain, scrambled) = (outputs(false), outputs(true));
    assert_eq!(plain.len(), scrambled.len());
    for (p, s) in plain.iter().zip(&scrambled) {
        assert_eq!(p.label, s.label);
        assert_eq!(p.output, s.output, "{}", p.label);
    }
}

#[test]
fn malformed_configs_are_config_errors() {
    let bad = [
        "[data]\nn = 300\nn = 400\n",
        "[data]\nsize = 300\n",
        "[extras]\nx = 1\n",
        "n = 300\n",
        "[lsnpc]\nnu = 2\n",
        "[lsnpc]\nnu = soon\n",
        "[noise]\nkinds = sym, diagonal\n",
        "[noise]\nrates = 0.3, 1.2\n",
        "[correction]\nmethods = baseline, magic\n",
        "[correction]\ntau = 1\n",
        "[split]\ntrain = 0.9\nvalidation = 0.2\n",
        "[run]\nseeds =\n",
    ];
    let registry = Registry::default();
    for text in bad {
        let err = ExperimentConfig::parse(text, Path::new("."))
            .and_then(|c| c.validate().map(|_| c))
            .and_then(|c| registry.plan(&c).map(|_| ()));
        match err {
            Err(e) => assert!(e.is_config_error(), "{text:?}: {e}"),
            Ok(()) => panic!("accepted {text:?}"),
        }
    }
}

#[test]
fn config_hash_ignores_output_directory() {
    let (a, b) = (smoke(Path::new("x")), smoke(Path::new("y")));
    assert_eq!(a.hash(), b.hash());
    let mut c = smoke(Path::new("x"));
    c.seeds = vec![3];
    assert_ne!(a.hash(), c.hash());
}
