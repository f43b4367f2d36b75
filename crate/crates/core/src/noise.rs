//! Class-dependent label noise and dataset splitting.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{FeatureDataset, Labels, SplitTag};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// Flips uniformly to any other label.
    Sym,
    /// Flips label i to label i+1 (mod k).
    Pair,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sym" => Ok(NoiseKind::Sym),
            "pair" => Ok(NoiseKind::Pair),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Sym => "Sym",
            NoiseKind::Pair => "Pair",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub kind: NoiseKind,
    pub nr: f64,
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    /// Draws a destination for a positive at label `i`.
    pub fn draw<R: Rng>(&self, i: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let row = &self.rows[i];
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // Rounding left u above the final cumulative sum.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(i)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.k(), self.kind, self.nr);
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(path, detail.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split_whitespace().collect();
        let [k, kind, nr] = head[..] else {
            return Err(bad("header must be `k kind nr`"));
        };
        let k: usize = k.parse().map_err(|_| bad("bad k"))?;
        let kind: NoiseKind = kind.parse().map_err(|_| bad("bad noise kind"))?;
        let nr: f64 = nr.parse().map_err(|_| bad("bad noise rate"))?;
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split_whitespace().map(str::parse).collect::<std::result::Result<Vec<f64>, _>>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad probability"))?;
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return Err(bad("matrix is not k × k"));
        }
        if rows.iter().any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&p| p < 0.0)) {
            return Err(bad("rows must be probability vectors"));
        }
        Ok(TransitionMatrix { kind, nr, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}

pub fn build_transition_matrix(kind: NoiseKind, k: usize, nr: f64) -> Result<TransitionMatrix> {
    if k < 2 {
        return Err(Error::invalid("transition matrix needs at least two labels"));
    }
    if !(0.0..1.0).contains(&nr) {
        return Err(Error::invalid(format!("noise rate {nr} outside [0, 1)")));
    }
    let rows = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| match kind {
                    _ if i == j => 1.0 - nr,
                    NoiseKind::Sym => nr / (k - 1) as f64,
                    NoiseKind::Pair if j == (i + 1) % k => nr,
                    NoiseKind::Pair => 0.0,
                })
                .collect()
        })
        .collect();
    Ok(TransitionMatrix { kind, nr, rows })
}

/// Moves every positive label of each selected row through `t`.
///
/// Each original positive `i` independently draws a destination `j` from row
/// `i` of `t`; the corrupted row is the set of destinations, so two positives
/// landing on the same label merge. Negatives are never flipped directly.
/// Row `r` uses its own random stream derived from `seed` and `r`.
pub fn corrupt_rows(y: &Labels, t: &TransitionMatrix, seed: u64, rows: &[usize]) -> Result<Labels> {
    if t.k() != y.k() {
        return Err(Error::DimMismatch {
            expected: y.k(),
            got: t.k(),
        });
    }
    let mut out = y.clone();
    for &r in rows {
        let mut rng = rng::row_stream(seed, "corrupt", r as u64);
        let original = y.row(r).to_vec();
        let dest = out.row_mut(r);
        dest.fill(0);
        for (i, &b) in original.iter().enumerate() {
            if b == 1 {
                dest[t.draw(i, &mut rng)] = 1;
            }
        }
    }
    Ok(out)
}

pub fn corrupt_labels(y: &Labels, t: &TransitionMatrix, seed: u64) -> Result<Labels> {
    let all: Vec<usize> = (0..y.n()).collect();
    corrupt_rows(y, t, seed, &all)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    /// Share of the validation block set aside as the clean subset.
    pub clean_of_validation: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
            clean_of_validation: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub clean: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must lie in [0, 1] and sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.clean_of_validation) {
            return Err(Error::invalid("clean share of validation must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Block sizes (train, validation, clean, test): floor for every block
    /// but the test block, which takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize, usize) {
        let floor = |f: f64, n: usize| (f * n as f64 + 1e-9).floor() as usize;
        let train = floor(self.train, n).min(n);
        let val_block = floor(self.validation, n).min(n - train);
        let clean = floor(self.clean_of_validation, val_block);
        (train, val_block - clean, clean, n - train - val_block)
    }
}

pub fn split_indices(n: usize, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, "split"));
    let (tr, va, cl, _) = spec.sizes(n);
    let take = |from: usize, len: usize| {
        let mut v = perm[from..from + len].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: take(0, tr),
        validation: take(tr, va),
        clean: take(tr + va, cl),
        test: take(tr + va + cl, n - tr - va - cl),
    })
}

/// Splits `ds`, tags every row, and corrupts the train and validation labels.
/// Clean and test rows keep their true labels.
pub fn split_dataset(ds: &FeatureDataset, spec: &SplitSpec, t: &TransitionMatrix, seed: u64) -> Result<(FeatureDataset, Splits)> {
    let splits = split_indices(ds.n(), spec, seed)?;
    let mut tags = vec![SplitTag::Test; ds.n()];
    for (idx, tag) in [
        (&splits.train, SplitTag::Train),
        (&splits.validation, SplitTag::Validation),
        (&splits.clean, SplitTag::Clean),
    ] {
        for &i in idx {
            tags[i] = tag;
        }
    }
    let noisy_rows: Vec<usize> = splits.train.iter().chain(&splits.validation).copied().collect();
    let mut out = ds.clone();
    out.labels = corrupt_rows(&ds.labels, t, seed, &noisy_rows)?;
    out.splits = Some(tags);
    out.meta.insert("noise.kind".into(), t.kind.to_string());
    out.meta.insert("noise.nr".into(), t.nr.to_string());
    out.meta.insert("noise.seed".into(), seed.to_string());
    Ok((out, splits))
}
