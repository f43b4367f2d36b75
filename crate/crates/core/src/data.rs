//! Synthetic multilabel data and the `LSDS` dataset file format.
//!
//! ```text
//! "LSDS" | version:u8 | n:u64 | d:u64 | k:u64
//! X: n·d little-endian f32, row-major
//! Y: n·k bits, row-major, packed LSB-first, ceil(n·k/8) bytes
//! meta_len:u32 | meta: UTF-8 "key=value\n" lines, keys sorted
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LSDS";
const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 4 + 1 + 3 * 8;

/// Dense binary label matrix, one byte per entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    n: usize,
    k: usize,
    bits: Vec<u8>,
}

impl Labels {
    pub fn new(n: usize, k: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n * k {
            return Err(Error::DimMismatch {
                expected: n * k,
                got: bits.len(),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Labels { n, k, bits })
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        Labels {
            n,
            k,
            bits: vec![0; n * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("label rows have different lengths"));
        }
        Labels::new(rows.len(), k, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u8] {
        &mut self.bits[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.k + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.bits.chunks(self.k.max(1)).take(self.n)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Labels {
        let bits = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Labels {
            n: idx.len(),
            k: self.k,
            bits,
        }
    }

    pub fn positives(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn mean_cardinality(&self) -> f64 {
        self.positives() as f64 / self.n.max(1) as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.k, self.bits.iter().map(|&b| b as f64).collect()).expect("shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Validation,
    Clean,
    Test,
}

impl SplitTag {
    fn code(self) -> char {
        match self {
            SplitTag::Train => 'r',
            SplitTag::Validation => 'v',
            SplitTag::Clean => 'c',
            SplitTag::Test => 't',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'r' => SplitTag::Train,
            'v' => SplitTag::Validation,
            'c' => SplitTag::Clean,
            't' => SplitTag::Test,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    n: usize,
    d: usize,
    x: Vec<f32>,
    pub labels: Labels,
    pub splits: Option<Vec<SplitTag>>,
    pub meta: BTreeMap<String, String>,
}

impl FeatureDataset {
    pub fn new(n: usize, d: usize, x: Vec<f32>, labels: Labels) -> Result<Self> {
        if n == 0 || d == 0 || labels.k() == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        if x.len() != n * d {
            return Err(Error::DimMismatch {
                expected: n * d,
                got: x.len(),
            });
        }
        if labels.n() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: labels.n(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain NaN or Inf"));
        }
        Ok(FeatureDataset {
            n,
            d,
            x,
            labels,
            splits: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.labels.k()
    }

    pub fn x(&self) -> &[f32] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f32] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Features of the given rows as an f64 tensor.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        let data = idx
            .iter()
            .flat_map(|&i| self.x_row(i).iter().map(|&v| v as f64))
            .collect();
        Tensor::matrix(idx.len(), self.d, data).expect("shape")
    }

    pub fn all_features(&self) -> Tensor {
        Tensor::matrix(self.n, self.d, self.x.iter().map(|&v| v as f64).collect()).expect("shape")
    }

    /// Row indices carrying `tag`, in file order.
    pub fn split_indices(&self, tag: SplitTag) -> Result<Vec<usize>> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no split tags"))?;
        Ok((0..self.n).filter(|&i| splits[i] == tag).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Embedding {
    /// Features are a random Gaussian projection of the latent factors.
    #[default]
    Random,
    /// Features are the latent factors themselves (requires d = rank).
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub rank: usize,
    pub noise_scale: f64,
    /// Per-label offsets `b`; empty means all zero.
    pub offsets: Vec<f64>,
    /// Each label fires only when its projection exceeds `sparsity·‖w_i‖`.
    pub sparsity: f64,
    pub embedding: Embedding,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 2000,
            d: 32,
            k: 10,
            rank: 8,
            noise_scale: 0.5,
            offsets: Vec::new(),
            sparsity: 0.75,
            embedding: Embedding::Random,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k == 0 || self.rank == 0 {
            return Err(Error::invalid("n, d, k and rank must be positive"));
        }
        if self.rank > self.d.min(self.k) {
            return Err(Error::invalid(format!(
                "rank {} exceeds min(d, k) = {}",
                self.rank,
                self.d.min(self.k)
            )));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid("noise scale must be finite and non-negative"));
        }
        if !self.offsets.is_empty() && self.offsets.len() != self.k {
            return Err(Error::DimMismatch {
                expected: self.k,
                got: self.offsets.len(),
            });
        }
        if !self.sparsity.is_finite() {
            return Err(Error::invalid("sparsity must be finite"));
        }
        if self.embedding == Embedding::Identity && self.d != self.rank {
            return Err(Error::invalid("identity embedding requires d = rank"));
        }
        Ok(())
    }
}

/// The random parameters of the latent-factor generator.
#[derive(Clone, Debug)]
pub struct LatentFactorModel {
    pub cfg: GeneratorConfig,
    /// Label prototypes, k × rank.
    pub prototypes: Vec<Vec<f64>>,
    /// Feature projection, d × rank.
    pub projection: Vec<Vec<f64>>,
}

impl LatentFactorModel {
    pub fn draw<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut gauss = |rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cfg.rank).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        };
        let prototypes = gauss(cfg.k);
        let projection = match cfg.embedding {
            Embedding::Random => gauss(cfg.d),
            Embedding::Identity => (0..cfg.d)
                .map(|i| (0..cfg.rank).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        };
        Ok(LatentFactorModel {
            cfg: cfg.clone(),
            prototypes,
            projection,
        })
    }

    /// Labels implied by latent factors `u`.
    pub fn label_rule(&self, u: &[f64]) -> Vec<u8> {
        self.prototypes
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let b = self.cfg.offsets.get(i).copied().unwrap_or(0.0);
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let score = dot(w, u) + b - self.cfg.sparsity * norm;
                u8::from(sigmoid(score) > 0.5)
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<FeatureDataset> {
        let cfg = &self.cfg;
        let mut x = Vec::with_capacity(cfg.n * cfg.d);
        let mut bits = Vec::with_capacity(cfg.n * cfg.k);
        for _ in 0..cfg.n {
            let u: Vec<f64> = (0..cfg.rank).map(|_| rng.sample(StandardNormal)).collect();
            bits.extend(self.label_rule(&u));
            for a in &self.projection {
                let e: f64 = rng.sample(StandardNormal);
                x.push((dot(a, &u) + cfg.noise_scale * e) as f32);
            }
        }
        let mut ds = FeatureDataset::new(cfg.n, cfg.d, x, Labels::new(cfg.n, cfg.k, bits)?)?;
        ds.meta = generator_meta(cfg);
        Ok(ds)
    }
}

fn generator_meta(cfg: &GeneratorConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("generator.seed".into(), cfg.seed.to_string());
    m.insert("generator.rank".into(), cfg.rank.to_string());
    m.insert("generator.noise_scale".into(), cfg.noise_scale.to_string());
    m.insert("generator.sparsity".into(), cfg.sparsity.to_string());
    m.insert(
        "generator.embedding".into(),
        match cfg.embedding {
            Embedding::Random => "random".into(),
            Embedding::Identity => "identity".into(),
        },
    );
    if !cfg.offsets.is_empty() {
        let s: Vec<String> = cfg.offsets.iter().map(f64::to_string).collect();
        m.insert("generator.offsets".into(), s.join(","));
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn generate_synthetic<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<FeatureDataset> {
    LatentFactorModel::draw(cfg, rng)?.sample(rng)
}

pub fn write_dataset<W: Write>(mut w: W, ds: &FeatureDataset) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for v in [ds.n, ds.d, ds.k()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in &ds.x {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut packed = vec![0u8; (ds.n * ds.k()).div_ceil(8)];
    for (i, &b) in ds.labels.bits().iter().enumerate() {
        packed[i / 8] |= b << (i % 8);
    }
    w.write_all(&packed)?;
    let meta = encode_meta(ds)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.flush()?;
    Ok(())
}

fn encode_meta(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let mut entries = ds.meta.clone();
    if let Some(splits) = &ds.splits {
        entries.insert("splits".into(), splits.iter().map(|t| t.code()).collect());
    }
    let mut out = String::new();
    for (k, v) in &entries {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry `{k}` contains a reserved character")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out.into_bytes())
}

pub fn read_dataset<R: Read>(mut r: R, path: &Path) -> Result<FeatureDataset> {
    let mut read = |buf: &mut [u8]| {
        r.read_exact(buf)
            .map_err(|e| Error::format(path, format!("truncated dataset: {e}")))
    };
    let mut head = [0u8; HEADER_BYTES];
    read(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::format(path, "bad dataset magic"));
    }
    if head[4] != VERSION {
        return Err(Error::format(path, format!("unsupported dataset version {}", head[4])));
    }
    let dim = |i: usize| u64::from_le_bytes(head[5 + 8 * i..13 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, d, k) = (dim(0), dim(1), dim(2));
    let cells = n
        .checked_mul(d)
        .filter(|c| *c <= 1 << 34)
        .ok_or_else(|| Error::format(path, "implausible dataset dimensions"))?;
    let mut xb = vec![0u8; 4 * cells];
    read(&mut xb)?;
    let x = xb
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut packed = vec![0u8; (n * k).div_ceil(8)];
    read(&mut packed)?;
    let bits = (0..n * k).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
    let mut len = [0u8; 4];
    read(&mut len)?;
    let mut meta = vec![0u8; u32::from_le_bytes(len) as usize];
    read(&mut meta)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(path, "trailing bytes after dataset"));
    }
    let meta = String::from_utf8(meta).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
    let mut ds = FeatureDataset::new(n, d, x, Labels::new(n, k, bits)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for line in meta.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad metadata line `{line}`")))?;
        if key == "splits" {
            let tags = value
                .chars()
                .map(SplitTag::from_code)
                .collect::<Option<Vec<_>>>()
                .filter(|t| t.len() == n)
                .ok_or_else(|| Error::format(path, "bad split tags"))?;
            ds.splits = Some(tags);
        } else {
            ds.meta.insert(key.to_string(), value.to_string());
        }
    }
    Ok(ds)
}

pub fn save_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), ds)
}

pub fn load_dataset(path: &Path) -> Result<FeatureDataset> {
    read_dataset(BufReader::new(File::open(path)?), path)
}

/// Imports comma-separated text with a header row: `d` feature columns
/// followed by `k` 0/1 label columns.
pub fn import_csv(path: &Path, k: usize) -> Result<FeatureDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let cols = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.len();
    if cols <= k {
        return Err(Error::format(path, format!("{cols} columns cannot hold {k} labels plus features")));
    }
    let d = cols - k;
    let mut x = Vec::new();
    let mut bits = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        for (j, field) in record.iter().enumerate() {
            let bad = || Error::format(path, format!("row {}: bad value `{field}`", line + 2));
            if j < d {
                x.push(field.parse::<f32>().map_err(|_| bad())?);
            } else {
                bits.push(match field {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(bad()),
                });
            }
        }
    }
    let n = bits.len() / k;
    let mut ds = FeatureDataset::new(n, d, x, Labels::new(n, k, bits)?).map_err(|e| Error::format(path, e.to_string()))?;
    ds.meta.insert("source".into(), path.display().to_string());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> FeatureDataset {
        let cfg = GeneratorConfig {
            n: 37,
            d: 5,
            k: 3,
            rank: 2,
            ..GeneratorConfig::default()
        };
        generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn round_trip_and_file_size() {
        let mut ds = small();
        ds.splits = Some((0..37).map(|i| [SplitTag::Train, SplitTag::Test][i % 2]).collect());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let meta = encode_meta(&ds).unwrap();
        assert_eq!(buf.len(), HEADER_BYTES + 4 * 37 * 5 + (37usize * 3).div_ceil(8) + 4 + meta.len());
        let back = read_dataset(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.x().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), ds.x().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn corrupted_magic_and_truncation_fail() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &small()).unwrap();
        let mut bad = buf.clone();
        bad[1] ^= 0xff;
        assert!(matches!(read_dataset(&bad[..], Path::new("mem")), Err(Error::Format { .. })));
        assert!(read_dataset(&buf[..buf.len() - 1], Path::new("mem")).is_err());
        bad = buf.clone();
        bad[4] = 9;
        assert!(read_dataset(&bad[..], Path::new("mem")).is_err());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let bytes = |seed| {
            let cfg = GeneratorConfig {
                n: 50,
                ..GeneratorConfig::default()
            };
            let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &ds).unwrap();
            buf
        };
        assert_eq!(bytes(3), bytes(3));
        assert_ne!(bytes(3), bytes(4));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            GeneratorConfig { rank: 11, ..Default::default() },
            GeneratorConfig { noise_scale: -1.0, ..Default::default() },
            GeneratorConfig { n: 0, ..Default::default() },
            GeneratorConfig { offsets: vec![0.0; 3], ..Default::default() },
            GeneratorConfig { embedding: Embedding::Identity, ..Default::default() },
        ] {
            assert!(generate_synthetic(&cfg, &mut rng).is_err());
        }
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "f1,f2,y1,y2\n0.5,-1,1,0\n2,3.25,0,0\n").unwrap();
        let ds = import_csv(&p, 2).unwrap();
        assert_eq!((ds.n(), ds.d(), ds.k()), (2, 2, 2));
        assert_eq!(ds.x(), &[0.5, -1.0, 2.0, 3.25]);
        assert_eq!(ds.labels.bits(), &[1, 0, 0, 0]);
        std::fs::write(&p, "f1,y1\n0.5,2\n").unwrap();
        assert!(import_csv(&p, 1).is_err());
    }
}
