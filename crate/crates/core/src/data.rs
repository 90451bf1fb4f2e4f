//! Dataset synthesis and federated partitioning.
//!
//! Two regimes are covered: label shift, where a pooled dataset is spread
//! over federations with per-class Dirichlet proportions, and feature shift,
//! where every federation samples the same class-conditional Gaussians
//! through its own affine distortion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::{derive_seed, seeded_rng, Batch, Matrix, SimRng};

/// Attempts at redrawing a partition before giving up.
pub const MAX_PARTITION_ATTEMPTS: u64 = 100;
pub const MIN_TRAIN_SAMPLES: usize = 1;
pub const MIN_VALID_SAMPLES: usize = 2;
pub const MIN_TEST_SAMPLES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if samples.cols() == 0 {
            return Err(Error::Input("samples need at least one feature".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Input(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Rows in the given order. May be empty.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sub = self.subset(indices);
        Batch {
            inputs: sub.samples,
            labels: sub.labels,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.samples.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of each class, in row order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Per-feature mean and population variance.
    pub fn feature_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let mean: Vec<f64> = self.samples.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; self.dim()];
        for r in 0..self.len() {
            for ((v, &x), &m) in var.iter_mut().zip(self.samples.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim() as u64).to_le_bytes());
        hasher.update((self.class_count as u64).to_le_bytes());
        for v in self.samples.data() {
            hasher.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            hasher.update((y as u64).to_le_bytes());
        }
    }

    /// Renders as CSV: feature columns then the label, with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in 0..self.dim() {
            let _ = write!(out, "x{c},");
        }
        out.push_str("label\n");
        for r in 0..self.len() {
            for v in self.samples.row(r) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", self.labels[r]);
        }
        out
    }
}

/// Train/valid/test fractions; each positive, summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Fractions {
    /// 40/30/30, the label-shift default.
    pub const LABEL_SHIFT: Fractions = Fractions {
        train: 0.4,
        valid: 0.3,
        test: 0.3,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config(format!("fractions must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub federation_count: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub fractions: Fractions,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.federation_count == 0 {
            return Err(Error::Config("need at least one federation".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.fractions.validate()
    }
}

/// One federation's share of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationData {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Source row ids of `train`, `valid` and `test`: pool rows for a
    /// partitioned pool, generated sample ids for synthetic federations.
    pub source: [Vec<usize>; 3],
}

impl FederationData {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedSplit {
    pub federations: Vec<FederationData>,
}

impl FederatedSplit {
    pub fn len(&self) -> usize {
        self.federations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.federations.is_empty()
    }

    /// Hex SHA-256 over every part of every federation.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.federations.len() as u64).to_le_bytes());
        for fed in &self.federations {
            fed.train.hash_into(&mut hasher);
            fed.valid.hash_into(&mut hasher);
            fed.test.hash_into(&mut hasher);
        }
        hasher
            .finalize()
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    /// Writes `fed{i}_{train,valid,test}.csv` for every federation.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, fed) in self.federations.iter().enumerate() {
            for (part, data) in [("train", &fed.train), ("valid", &fed.valid), ("test", &fed.test)] {
                let path = dir.join(format!("fed{i}_{part}.csv"));
                fs::write(&path, data.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Cuts each class's (already shuffled) indices at cumulative fractions of
/// `keep · count`; anything past the kept share is discarded.
fn stratified_cut(per_class: &[Vec<usize>], fractions: [f64; 3], keep: f64) -> [Vec<usize>; 3] {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for ids in per_class {
        let c = ids.len() as f64 * keep;
        let first = (c * fractions[0]).round() as usize;
        let second = ((c * (fractions[0] + fractions[1])).round() as usize).max(first);
        let third = ((c * (fractions[0] + fractions[1] + fractions[2])).round() as usize)
            .clamp(second, ids.len());
        let first = first.min(ids.len());
        let second = second.min(ids.len());
        parts[0].extend_from_slice(&ids[..first]);
        parts[1].extend_from_slice(&ids[first..second]);
        parts[2].extend_from_slice(&ids[second..third]);
    }
    parts
}

fn sizes_ok(parts: &[Vec<usize>; 3]) -> bool {
    parts[0].len() >= MIN_TRAIN_SAMPLES && parts[1].len() >= MIN_VALID_SAMPLES && parts[2].len() >= MIN_TEST_SAMPLES
}

/// Proportions from a symmetric Dirichlet via normalized Gamma draws.
fn dirichlet(alpha: f64, n: usize, rng: &mut SimRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("bad Dirichlet alpha: {e}")))?;
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // Every draw underflowed: all mass on one federation.
        let winner = rng.random_range(0..n);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = f64::from(u8::from(i == winner)));
        return Ok(draws);
    }
    draws.iter_mut().for_each(|d| *d /= total);
    Ok(draws)
}

/// Integer counts summing to `total`, proportional to `p` (largest remainder).
fn apportion(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&x| x * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Spreads `pool` over federations with per-class Dirichlet proportions,
/// then splits each federation by `spec.fractions`, stratified per class.
///
/// Allocations leaving any federation below the minimum part sizes are
/// redrawn up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn gen_label_shift(pool: &Dataset, spec: &PartitionSpec) -> Result<FederatedSplit> {
    spec.validate()?;
    let n = spec.federation_count;
    let fractions = [spec.fractions.train, spec.fractions.valid, spec.fractions.test];
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = seeded_rng(derive_seed(spec.seed, &[0x4c53, attempt]));
        // fed -> class -> pool indices
        let mut alloc: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); pool.class_count()]; n];
        for (class, mut ids) in pool.indices_by_class().into_iter().enumerate() {
            ids.shuffle(&mut rng);
            let p = dirichlet(spec.alpha, n, &mut rng)?;
            let counts = apportion(&p, ids.len());
            let mut start = 0;
            for (fed, &c) in counts.iter().enumerate() {
                alloc[fed][class].extend_from_slice(&ids[start..start + c]);
                start += c;
            }
        }
        let parts: Vec<[Vec<usize>; 3]> = alloc
            .iter()
            .map(|per_class| stratified_cut(per_class, fractions, 1.0))
            .collect();
        if parts.iter().all(sizes_ok) {
            return Ok(FederatedSplit {
                federations: parts
                    .into_iter()
                    .map(|source| FederationData {
                        train: pool.subset(&source[0]),
                        valid: pool.subset(&source[1]),
                        test: pool.subset(&source[2]),
                        source,
                    })
                    .collect(),
            });
        }
    }
    Err(Error::Partition(format!(
        "no allocation gave every one of {n} federations at least {MIN_TRAIN_SAMPLES}/{MIN_VALID_SAMPLES}/{MIN_TEST_SAMPLES} train/valid/test samples after {MAX_PARTITION_ATTEMPTS} draws"
    )))
}

fn standard_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class means `separation · u_k` with `u_k` seeded random unit directions.
fn class_means(classes: usize, dim: usize, separation: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| separation * x / norm).collect()
        })
        .collect()
}

/// Balanced Gaussian mixture with unit covariance around seeded class
/// means; the pool that label-shift partitions are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoolSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl Default for GaussianPoolSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 20,
            samples: 6000,
            separation: 2.0,
            seed: 0,
        }
    }
}

pub fn gen_gaussian_pool(spec: &GaussianPoolSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim == 0 || spec.samples < spec.classes {
        return Err(Error::Config(format!(
            "pool needs ≥2 classes, ≥1 dim and ≥1 sample per class, got {spec:?}"
        )));
    }
    let mut rng = seeded_rng(derive_seed(spec.seed, &[0x504f]));
    let means = class_means(spec.classes, spec.dim, spec.separation, &mut rng);
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        for m in &means[class] {
            data.push(m + standard_normal(&mut rng));
        }
        labels.push(class);
    }
    Dataset::new(Matrix::from_vec(spec.samples, spec.dim, data)?, labels, spec.classes)
}

/// Parameters of the feature-shift generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureShiftSpec {
    pub classes: usize,
    pub dim: usize,
    pub federations: usize,
    /// Scales `‖A_j − I‖` and `‖b_j‖` of every federation's distortion.
    pub shift_scale: f64,
    /// Samples generated per federation before the 10/10/20 cut.
    pub samples_per_federation: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for FeatureShiftSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 20,
            federations: 4,
            shift_scale: 1.0,
            samples_per_federation: 1000,
            separation: 2.0,
            seed: 0,
        }
    }
}

/// Fractions of generated data kept as train/valid/test; the rest is discarded.
pub const FEATURE_SHIFT_FRACTIONS: [f64; 3] = [0.1, 0.1, 0.2];

/// Per-federation affine distortion `x ↦ A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineShift {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
}

impl AffineShift {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.matrix.rows())
            .map(|r| {
                let row = self.matrix.row(r);
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[r]
            })
            .collect()
    }
}

impl FeatureShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 || self.federations < 2 {
            return Err(Error::Config(format!(
                "feature shift needs ≥2 classes, dims and federations, got K={} d={} N={}",
                self.classes, self.dim, self.federations
            )));
        }
        if !(self.shift_scale >= 0.0) || !self.shift_scale.is_finite() {
            return Err(Error::Config(format!("shift scale must be ≥ 0, got {}", self.shift_scale)));
        }
        if self.samples_per_federation < self.classes {
            return Err(Error::Config("fewer samples than classes per federation".into()));
        }
        Ok(())
    }

    /// Shared class means followed by each federation's distortion. The
    /// random draws do not depend on `shift_scale`, so `shift_scale = 0`
    /// yields identity transforms over the same means.
    pub fn generator(&self) -> Result<(Vec<Vec<f64>>, Vec<AffineShift>)> {
        self.validate()?;
        let mut rng = seeded_rng(derive_seed(self.seed, &[0x4653]));
        let means = class_means(self.classes, self.dim, self.separation, &mut rng);
        let d = self.dim;
        let scale = 1.0 / (d as f64).sqrt();
        let shifts = (0..self.federations)
            .map(|_| {
                let mut matrix = Matrix::identity(d);
                for v in matrix.data_mut() {
                    *v += self.shift_scale * scale * standard_normal(&mut rng);
                }
                let offset = (0..d).map(|_| self.shift_scale * standard_normal(&mut rng)).collect();
                AffineShift { matrix, offset }
            })
            .collect();
        Ok((means, shifts))
    }
}

/// Federations sharing class-conditional Gaussians, each seen through its
/// own affine distortion; classes balanced per federation and cut 10/10/20
/// of the generated data, remainder discarded.
pub fn gen_feature_shift(spec: &FeatureShiftSpec) -> Result<FederatedSplit> {
    let (means, shifts) = spec.generator()?;
    let per_class = spec.samples_per_federation / spec.classes;
    let fractions = FEATURE_SHIFT_FRACTIONS;
    let federations = shifts
        .iter()
        .enumerate()
        .map(|(j, shift)| {
            let mut rng = seeded_rng(derive_seed(spec.seed, &[0x4653, 1 + j as u64]));
            let n = per_class * spec.classes;
            let mut data = Vec::with_capacity(n * spec.dim);
            let mut labels = Vec::with_capacity(n);
            let mut by_class = vec![Vec::with_capacity(per_class); spec.classes];
            for i in 0..n {
                let class = i % spec.classes;
                let x: Vec<f64> = means[class].iter().map(|m| m + standard_normal(&mut rng)).collect();
                data.extend(shift.apply(&x));
                labels.push(class);
                by_class[class].push(i);
            }
            for ids in &mut by_class {
                ids.shuffle(&mut rng);
            }
            let all = Dataset::new(Matrix::from_vec(n, spec.dim, data)?, labels, spec.classes)?;
            let total: f64 = fractions.iter().sum();
            let source = stratified_cut(&by_class, fractions.map(|f| f / total), total);
            if !sizes_ok(&source) {
                return Err(Error::Partition(format!(
                    "federation {j} is too small: {}/{}/{} samples",
                    source[0].len(),
                    source[1].len(),
                    source[2].len()
                )));
            }
            Ok(FederationData {
                train: all.subset(&source[0]),
                valid: all.subset(&source[1]),
                test: all.subset(&source[2]),
                source,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FederatedSplit { federations })
}

/// Parses CSV text: feature columns then one integer label column, with an
/// optional header row (detected when the first row is not numeric).
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first_content = true;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first_content {
            first_content = false;
            if fields.iter().any(|f| f.parse::<f64>().is_err()) {
                continue;
            }
        }
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: "need at least one feature and a label".into(),
            });
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {w} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        let (label_field, features) = fields.split_last().expect("at least two fields");
        let row = features
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("non-numeric feature '{f}'"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let label = label_field.parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("label '{label_field}' is not an integer"),
        })?;
        if label < 0 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("negative label {label}"),
            });
        }
        rows.push(row);
        labels.push(label as usize);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: "no data rows".into(),
        });
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_rows(&rows)?, labels, class_count)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn pool(samples: usize, classes: usize, seed: u64) -> Dataset {
        gen_gaussian_pool(&GaussianPoolSpec {
            classes,
            dim: 4,
            samples,
            separation: 2.0,
            seed,
        })
        .unwrap()
    }

    fn spec(n: usize, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            federation_count: n,
            alpha,
            fractions: Fractions::LABEL_SHIFT,
            seed,
        }
    }

    fn row_multiset(d: &Dataset) -> BTreeMap<(Vec<u64>, usize), usize> {
        let mut m = BTreeMap::new();
        for r in 0..d.len() {
            let key = (d.samples().row(r).iter().map(|v| v.to_bits()).collect(), d.labels()[r]);
            *m.entry(key).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn label_shift_conserves_pool() {
        let p = pool(600, 5, 1);
        let split = gen_label_shift(&p, &spec(4, 0.5, 3)).unwrap();
        let mut seen = vec![0usize; p.len()];
        let mut union = BTreeMap::new();
        for fed in &split.federations {
            for (ids, part) in fed.source.iter().zip([&fed.train, &fed.valid, &fed.test]) {
                assert_eq!(ids.len(), part.len());
                for &i in ids {
                    seen[i] += 1;
                }
                for (k, v) in row_multiset(part) {
                    *union.entry(k).or_insert(0) += v;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(union, row_multiset(&p));
    }

    #[test]
    fn single_federation_gets_everything() {
        let p = pool(300, 3, 2);
        let split = gen_label_shift(&p, &spec(1, 0.5, 9)).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.federations[0].total_len(), 300);
    }

    #[test]
    fn label_shift_is_deterministic() {
        let p = pool(400, 4, 5);
        let a = gen_label_shift(&p, &spec(5, 0.3, 8)).unwrap();
        let b = gen_label_shift(&p, &spec(5, 0.3, 8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = gen_label_shift(&p, &spec(5, 0.3, 9)).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let p = pool(2000, 5, 4);
        for seed in 0..20 {
            let split = gen_label_shift(&p, &spec(4, 1e6, seed)).unwrap();
            for fed in &split.federations {
                let mut counts = vec![0usize; 5];
                for part in [&fed.train, &fed.valid, &fed.test] {
                    for (c, n) in part.class_counts().into_iter().enumerate() {
                        counts[c] += n;
                    }
                }
                let total: usize = counts.iter().sum();
                for c in counts {
                    let share = c as f64 / total as f64;
                    assert!((share - 0.2).abs() <= 0.02, "seed {seed}: share {share}");
                }
            }
        }
    }

    fn mean_entropy(alpha: f64, seeds: u64) -> f64 {
        let p = pool(1000, 5, 6);
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..seeds {
            let split = gen_label_shift(&p, &spec(5, alpha, seed)).unwrap();
            for fed in &split.federations {
                let mut counts = vec![0usize; 5];
                for part in [&fed.train, &fed.valid, &fed.test] {
                    for (c, n) in part.class_counts().into_iter().enumerate() {
                        counts[c] += n;
                    }
                }
                let n: usize = counts.iter().sum();
                total -= counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let q = c as f64 / n as f64;
                        q * q.ln()
                    })
                    .sum::<f64>();
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn entropy_grows_with_alpha() {
        let low = mean_entropy(0.1, 20);
        let mid = mean_entropy(1.0, 20);
        let high = mean_entropy(100.0, 20);
        assert!(low <= mid && mid <= high, "{low} {mid} {high}");
    }

    #[test]
    fn impossible_partition_errors() {
        // Five samples cannot give four federations 1/2/2 each.
        let p = pool(5, 5, 1);
        assert!(matches!(gen_label_shift(&p, &spec(4, 0.5, 0)), Err(Error::Partition(_))));
    }

    #[test]
    fn partition_spec_validation() {
        let mut s = spec(2, 0.0, 0);
        assert!(s.validate().is_err());
        s.alpha = 1.0;
        s.fractions.train = 0.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn apportion_sums_exactly() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 7).iter().sum::<usize>(), 7);
        assert_eq!(apportion(&[1.0], 3), vec![3]);
    }

    fn fs_spec(seed: u64, s: f64) -> FeatureShiftSpec {
        FeatureShiftSpec {
            shift_scale: s,
            seed,
            ..FeatureShiftSpec::default()
        }
    }

    #[test]
    fn zero_shift_means_identical_generators() {
        let (_, shifts) = fs_spec(3, 0.0).generator().unwrap();
        for s in &shifts {
            assert_eq!(s.matrix, Matrix::identity(20));
            assert!(s.offset.iter().all(|&v| v == 0.0));
        }
        let (m0, _) = fs_spec(3, 0.0).generator().unwrap();
        let (m1, _) = fs_spec(3, 1.0).generator().unwrap();
        assert_eq!(m0, m1);
    }

    #[test]
    fn feature_shift_is_deterministic_and_balanced() {
        let a = gen_feature_shift(&fs_spec(4, 1.0)).unwrap();
        let b = gen_feature_shift(&fs_spec(4, 1.0)).unwrap();
        assert_eq!(a, b);
        for fed in &a.federations {
            assert_eq!(fed.train.len(), 100);
            assert_eq!(fed.valid.len(), 100);
            assert_eq!(fed.test.len(), 200);
            assert_eq!(fed.train.class_counts(), vec![20; 5]);
            let mut ids: Vec<usize> = fed.source.iter().flatten().copied().collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 400);
        }
    }

    #[test]
    fn csv_minimal_parse() {
        let d = parse_csv("1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        assert_eq!((d.len(), d.dim(), d.class_count()), (2, 2, 2));
    }

    #[test]
    fn csv_header_skipped() {
        let d = parse_csv("a,b,label\n1,2,0\n3,4,2\n5,6,1\n").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.class_count(), 3);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        assert!(matches!(parse_csv(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_csv("1,2,0\n1,0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("1,2,0\n1,x,0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("1,2,0\n1,2,-1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("h1,h2,y\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn export_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let split = gen_feature_shift(&fs_spec(1, 0.5)).unwrap();
        split.export(dir.path()).unwrap();
        let back = load_csv(&dir.path().join("fed2_valid.csv")).unwrap();
        assert_eq!(back.samples(), split.federations[2].valid.samples());
        assert_eq!(back.labels(), split.federations[2].valid.labels());
    }
}
