//! Seeded synthetic datasets with known class posteriors, plus
//! out-of-distribution input generators.
//!
//! Gaussian blobs place the `K` class means evenly on the unit circle in the
//! first two input coordinates (rotated by a seed-dependent angle); any
//! further coordinates have zero mean and act as pure noise. Inputs are
//! `N(mean_y, σ² I)` with uniform class priors, so the Bayes posterior is a
//! softmax of `-|x - mean_k|² / 2σ²`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::softmax_in_place;
use crate::numerics::{Matrix, Rng};

pub const DATASET_SCHEMA: &str = "calibreg.dataset";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Generator parameters; regenerating from a descriptor is bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetDescriptor {
    Blobs {
        k: usize,
        n: usize,
        d: usize,
        spread: f64,
        /// Fixes the class-mean layout, and the samples unless `sample_seed` is set.
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_seed: Option<u64>,
    },
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
    },
}

impl DatasetDescriptor {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetDescriptor::Blobs { k, .. } => *k,
            DatasetDescriptor::TwoMoons { .. } => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DatasetDescriptor::Blobs { d, .. } => *d,
            DatasetDescriptor::TwoMoons { .. } => 2,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            DatasetDescriptor::Blobs { n, .. } | DatasetDescriptor::TwoMoons { n, .. } => *n,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        match *self {
            DatasetDescriptor::Blobs { .. } => generate_blobs(self),
            DatasetDescriptor::TwoMoons { n, noise, seed } => make_two_moons(n, noise, seed),
        }
    }

    /// Same distribution with a different sample count and sample seed,
    /// e.g. for a large independent test draw.
    pub fn resampled(&self, n_new: usize, seed_new: u64) -> DatasetDescriptor {
        let mut out = self.clone();
        match &mut out {
            DatasetDescriptor::Blobs { n, sample_seed, .. } => {
                *n = n_new;
                *sample_seed = Some(seed_new);
            }
            DatasetDescriptor::TwoMoons { n, seed, .. } => {
                *n = n_new;
                *seed = seed_new;
            }
        }
        out
    }

    // Points describing the in-distribution support plus a length scale,
    // used to place out-of-distribution inputs.
    fn support(&self) -> Support {
        match *self {
            DatasetDescriptor::Blobs { spread, .. } => Support {
                center: vec![0.0, 0.0],
                anchors: blob_means(self).expect("blobs descriptor"),
                scale: spread,
            },
            DatasetDescriptor::TwoMoons { noise, .. } => {
                let mut anchors = Vec::new();
                let steps = 64;
                for i in 0..=steps {
                    let t = std::f64::consts::PI * i as f64 / steps as f64;
                    anchors.push(vec![t.cos(), t.sin()]);
                    anchors.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
                }
                Support {
                    center: vec![0.5, 0.25],
                    anchors,
                    scale: noise.max(0.05),
                }
            }
        }
    }
}

struct Support {
    center: Vec<f64>,
    anchors: Vec<Vec<f64>>,
    scale: f64,
}

impl Support {
    fn radius(&self) -> f64 {
        self.anchors
            .iter()
            .map(|a| dist(&a[..2], &self.center))
            .fold(0.0, f64::max)
    }

    fn min_distance(&self, x: &[f64]) -> f64 {
        self.anchors
            .iter()
            .map(|a| {
                // Anchors live in the first two coordinates.
                let head = dist(&x[..2], &a[..2]);
                let tail: f64 = x[2..].iter().map(|v| v * v).sum();
                (head * head + tail).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub descriptor: DatasetDescriptor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            descriptor: self.descriptor.clone(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn to_csv(&self) -> String {
        let header = CsvHeader {
            schema: DATASET_SCHEMA.to_string(),
            version: DATASET_SCHEMA_VERSION,
            descriptor: self.descriptor.clone(),
        };
        let mut s = format!(
            "# {}\n",
            serde_json::to_string(&header).expect("descriptor serializes")
        );
        let cols: Vec<String> = (0..self.input_dim()).map(|j| format!("x{j}")).collect();
        s.push_str(&cols.join(","));
        s.push_str(",label\n");
        for (row, y) in self.inputs.iter_rows().zip(&self.labels) {
            for v in row {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{y}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse("dataset csv", "empty file"))?;
        let json = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::parse("dataset csv", "missing descriptor header line"))?;
        let header: CsvHeader =
            serde_json::from_str(json).map_err(|e| Error::parse("dataset csv", e.to_string()))?;
        if header.schema != DATASET_SCHEMA || header.version != DATASET_SCHEMA_VERSION {
            return Err(Error::parse(
                "dataset csv",
                format!("unsupported schema {} v{}", header.schema, header.version),
            ));
        }
        let d = header.descriptor.input_dim();
        let k = header.descriptor.num_classes();
        lines
            .next()
            .ok_or_else(|| Error::parse("dataset csv", "missing column header"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::parse(
                    "dataset csv",
                    format!("row {}: {} fields, expected {}", n + 1, fields.len(), d + 1),
                ));
            }
            for f in &fields[..d] {
                data.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::parse("dataset csv", format!("row {}: {e}", n + 1)))?,
                );
            }
            let y: usize = fields[d]
                .trim()
                .parse()
                .map_err(|e| Error::parse("dataset csv", format!("row {}: label: {e}", n + 1)))?;
            if y >= k {
                return Err(Error::parse(
                    "dataset csv",
                    format!("row {}: label {y} out of range for {k} classes", n + 1),
                ));
            }
            labels.push(y);
        }
        Ok(Dataset {
            inputs: Matrix::new(labels.len(), d, data)?,
            labels,
            descriptor: header.descriptor,
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_csv(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CsvHeader {
    schema: String,
    version: u32,
    descriptor: DatasetDescriptor,
}

/// Class means of a blobs descriptor, one `d`-vector per class.
pub fn blob_means(descriptor: &DatasetDescriptor) -> Result<Vec<Vec<f64>>> {
    match *descriptor {
        DatasetDescriptor::Blobs { k, d, seed, .. } => {
            let offset = Rng::new(seed).fork_named("means").next_f64() * std::f64::consts::TAU / k as f64;
            Ok((0..k)
                .map(|c| {
                    let angle = offset + std::f64::consts::TAU * c as f64 / k as f64;
                    let mut mu = vec![0.0; d];
                    mu[0] = angle.cos();
                    mu[1] = angle.sin();
                    mu
                })
                .collect())
        }
        DatasetDescriptor::TwoMoons { .. } => Err(Error::invalid(
            "data",
            "two_moons has no closed-form class means",
        )),
    }
}

pub fn make_blobs(k: usize, n: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::invalid("data", format!("blobs need k >= 2, got {k}")));
    }
    if d < 2 {
        return Err(Error::invalid("data", format!("blobs need d >= 2, got {d}")));
    }
    if n == 0 {
        return Err(Error::invalid("data", "blobs need n >= 1"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("data", format!("spread must be positive, got {spread}")));
    }
    generate_blobs(&DatasetDescriptor::Blobs {
        k,
        n,
        d,
        spread,
        seed,
        sample_seed: None,
    })
}

fn generate_blobs(descriptor: &DatasetDescriptor) -> Result<Dataset> {
    let DatasetDescriptor::Blobs { k, n, d, spread, seed, sample_seed } = *descriptor else {
        return Err(Error::invalid("data", "not a blobs descriptor"));
    };
    if k < 2 || d < 2 || n == 0 || !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid(
            "data",
            format!("invalid blobs parameters k={k} n={n} d={d} spread={spread}"),
        ));
    }
    let means = blob_means(descriptor)?;
    let mut rng = Rng::new(sample_seed.unwrap_or(seed)).fork_named("samples");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.below(k);
        for mu in &means[y] {
            data.push(mu + spread * rng.normal());
        }
        labels.push(y);
    }
    Ok(Dataset {
        inputs: Matrix::new(n, d, data)?,
        labels,
        descriptor: descriptor.clone(),
    })
}

/// Bayes posterior `p(y | x)` of a blobs generator.
pub fn true_posterior(descriptor: &DatasetDescriptor, x: &[f64]) -> Result<Vec<f64>> {
    let DatasetDescriptor::Blobs { d, spread, .. } = *descriptor else {
        return Err(Error::invalid(
            "data",
            "true posterior is only available for blobs",
        ));
    };
    if x.len() != d {
        return Err(Error::invalid(
            "data",
            format!("point has {} coordinates, expected {d}", x.len()),
        ));
    }
    let means = blob_means(descriptor)?;
    let inv = 1.0 / (2.0 * spread * spread);
    // Uniform priors cancel in the softmax.
    let mut logits: Vec<f64> = means
        .iter()
        .map(|mu| -inv * mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum::<f64>())
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Posterior log-probabilities for every row of `inputs`.
pub fn true_log_posterior(descriptor: &DatasetDescriptor, inputs: &Matrix) -> Result<Matrix> {
    let k = descriptor.num_classes();
    let mut out = Matrix::zeros(inputs.rows(), k);
    for (i, row) in inputs.iter_rows().enumerate() {
        let p = true_posterior(descriptor, row)?;
        for (o, v) in out.row_mut(i).iter_mut().zip(p) {
            *o = v.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(out)
}

/// Two interleaved half circles; class 0 is the upper arc with `n / 2` points.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("data", format!("two_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("data", format!("noise must be >= 0, got {noise}")));
    }
    let n_upper = n / 2;
    let n_lower = n - n_upper;
    let mut points = Vec::with_capacity(n);
    let arc = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    for i in 0..n_upper {
        let t = arc(i, n_upper);
        points.push(([t.cos(), t.sin()], 0usize));
    }
    for i in 0..n_lower {
        let t = arc(i, n_lower);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1usize));
    }
    let mut rng = Rng::new(seed);
    let mut order_rng = rng.fork_named("order");
    rng = rng.fork_named("noise");
    order_rng.shuffle(&mut points);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (p, y) in points {
        if noise > 0.0 {
            data.push(p[0] + noise * rng.normal());
            data.push(p[1] + noise * rng.normal());
        } else {
            data.extend_from_slice(&p);
        }
        labels.push(y);
    }
    Ok(Dataset {
        inputs: Matrix::new(n, 2, data)?,
        labels,
        descriptor: DatasetDescriptor::TwoMoons { n, noise, seed },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    /// A Gaussian cluster centered `shift` length scales outside the support.
    ShiftedMean,
    /// Uniform draws from a box around the support, away from it.
    UniformBox,
    /// A ring enclosing the support at `shift` length scales.
    Ring,
}

fn default_shift() -> f64 {
    6.0
}

fn default_ood_n() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSpec {
    pub mode: OodMode,
    #[serde(default = "default_ood_n")]
    pub n: usize,
    /// Distance from the support in units of the generator's length scale.
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec {
            mode: OodMode::ShiftedMean,
            n: default_ood_n(),
            shift: default_shift(),
            seed: 0,
        }
    }
}

/// Inputs with negligible in-distribution density.
///
/// `ShiftedMean` centers `N(c, σ² I)` at distance `R + shift σ` from the
/// support center (`R` the support radius) and rejects draws closer than
/// `(shift - 1) σ` to the support. `Ring` puts points at radius at least
/// `R + shift σ`. `UniformBox` rejects box draws within `shift σ` of the support.
pub fn make_ood(descriptor: &DatasetDescriptor, n: usize, mode: OodMode, shift: f64, seed: u64) -> Result<Matrix> {
    if !(shift > 1.0 && shift.is_finite()) {
        return Err(Error::invalid("data", format!("OOD shift must exceed 1, got {shift}")));
    }
    let d = descriptor.input_dim();
    let support = descriptor.support();
    let sigma = support.scale;
    let radius = support.radius();
    let mut rng = Rng::new(seed).fork_named("ood");
    let mut data = Vec::with_capacity(n * d);
    match mode {
        OodMode::ShiftedMean => {
            let angle = rng.next_f64() * std::f64::consts::TAU;
            let reach = radius + shift * sigma;
            let mut c = vec![0.0; d];
            c[0] = support.center[0] + reach * angle.cos();
            c[1] = support.center[1] + reach * angle.sin();
            let mut produced = 0;
            let mut x = vec![0.0; d];
            while produced < n {
                for (xi, ci) in x.iter_mut().zip(&c) {
                    *xi = ci + sigma * rng.normal();
                }
                if support.min_distance(&x) >= (shift - 1.0) * sigma {
                    data.extend_from_slice(&x);
                    produced += 1;
                }
            }
        }
        OodMode::Ring => {
            for _ in 0..n {
                let angle = rng.next_f64() * std::f64::consts::TAU;
                let r = radius + shift * sigma + (sigma * rng.normal()).abs();
                let mut x = vec![0.0; d];
                x[0] = support.center[0] + r * angle.cos();
                x[1] = support.center[1] + r * angle.sin();
                for v in x.iter_mut().skip(2) {
                    *v = sigma * rng.normal();
                }
                data.extend_from_slice(&x);
            }
        }
        OodMode::UniformBox => {
            let half = radius + 2.0 * shift * sigma;
            let mut produced = 0;
            let mut x = vec![0.0; d];
            while produced < n {
                for (j, xi) in x.iter_mut().enumerate() {
                    let c = if j < 2 { support.center[j] } else { 0.0 };
                    *xi = rng.uniform(c - half, c + half);
                }
                if support.min_distance(&x) >= shift * sigma {
                    data.extend_from_slice(&x);
                    produced += 1;
                }
            }
        }
    }
    Matrix::new(n, d, data)
}

fn default_split_seed() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::invalid("data", "split fractions must be positive"));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "data",
                format!("split fractions sum to {sum}, expected 1"),
            ));
        }
        Ok(())
    }

    /// Sizes of the three parts for `n` samples.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let n_train = (n as f64 * self.train).round() as usize;
        let n_val = (n as f64 * self.validation).round() as usize;
        if n_train + n_val >= n || n_train == 0 || n_val == 0 {
            return Err(Error::invalid(
                "data",
                format!("split of {n} samples leaves an empty part"),
            ));
        }
        Ok((n_train, n_val, n - n_train - n_val))
    }
}

/// Seeded disjoint train/validation/test partition.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (n_train, n_val, _) = spec.sizes(dataset.len())?;
    let perm = Rng::new(spec.seed).fork_named("split").permutation(dataset.len());
    let train = dataset.subset(&perm[..n_train]);
    let val = dataset.subset(&perm[n_train..n_train + n_val]);
    let test = dataset.subset(&perm[n_train + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_contract() {
        assert!(make_blobs(1, 10, 2, 0.1, 0).is_err());
        assert!(make_blobs(3, 10, 1, 0.1, 0).is_err());
        assert!(make_blobs(3, 0, 2, 0.1, 0).is_err());
        assert!(make_blobs(3, 10, 2, 0.0, 0).is_err());
    }

    #[test]
    fn blobs_deterministic() {
        let a = make_blobs(4, 100, 3, 0.2, 9).unwrap();
        let b = make_blobs(4, 100, 3, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, a.descriptor.generate().unwrap());
        assert_ne!(a, make_blobs(4, 100, 3, 0.2, 10).unwrap());
    }

    #[test]
    fn label_marginals_binomial_bound() {
        let (k, n) = (10, 10_000);
        let ds = make_blobs(k, n, 2, 0.2, 1).unwrap();
        let mut counts = vec![0usize; k];
        for &y in &ds.labels {
            counts[y] += 1;
        }
        let bound = 3.0 * (n as f64).sqrt();
        for c in counts {
            assert!((c as f64 - (n / k) as f64).abs() <= bound, "count {c}");
        }
    }

    #[test]
    fn posterior_at_mean_and_midpoint() {
        let desc = DatasetDescriptor::Blobs { k: 6, n: 1, d: 2, spread: 0.05, seed: 2, sample_seed: None };
        let means = blob_means(&desc).unwrap();
        let p = true_posterior(&desc, &means[3]).unwrap();
        assert!(p[3] > 1.0 - 1e-9);
        let mid: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        let p = true_posterior(&desc, &mid).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_unsupported_for_moons() {
        let desc = DatasetDescriptor::TwoMoons { n: 10, noise: 0.1, seed: 0 };
        assert!(true_posterior(&desc, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn moons_noise_free_on_arcs() {
        let ds = make_two_moons(101, 0.0, 4).unwrap();
        for (x, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
            let r = if y == 0 {
                (x[0] * x[0] + x[1] * x[1]).sqrt()
            } else {
                ((x[0] - 1.0).powi(2) + (x[1] - 0.5).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-12);
        }
        let zeros = ds.labels.iter().filter(|&&y| y == 0).count();
        assert_eq!(zeros, 50);
        assert_eq!(ds.len() - zeros, 51);
        assert_eq!(ds, make_two_moons(101, 0.0, 4).unwrap());
    }

    #[test]
    fn shifted_mean_is_far_from_every_class() {
        let desc = DatasetDescriptor::Blobs { k: 10, n: 1, d: 2, spread: 0.2, seed: 3, sample_seed: None };
        let x = make_ood(&desc, 500, OodMode::ShiftedMean, 6.0, 1).unwrap();
        let means = blob_means(&desc).unwrap();
        for row in x.iter_rows() {
            let m = means.iter().map(|mu| dist(row, mu)).fold(f64::INFINITY, f64::min);
            assert!(m >= 5.0 * 0.2);
        }
        assert_eq!(x, make_ood(&desc, 500, OodMode::ShiftedMean, 6.0, 1).unwrap());
    }

    #[test]
    fn ring_and_box_outside_support() {
        let desc = DatasetDescriptor::Blobs { k: 5, n: 1, d: 3, spread: 0.1, seed: 3, sample_seed: None };
        let means = blob_means(&desc).unwrap();
        for mode in [OodMode::Ring, OodMode::UniformBox] {
            let x = make_ood(&desc, 200, mode, 6.0, 8).unwrap();
            assert_eq!(x.shape(), (200, 3));
            for row in x.iter_rows() {
                let m = means.iter().map(|mu| dist(row, mu)).fold(f64::INFINITY, f64::min);
                assert!(m >= 6.0 * 0.1 - 1e-12);
            }
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = make_blobs(3, 1000, 2, 0.3, 0).unwrap();
        let spec = SplitSpec::default();
        let (a, b, c) = split(&ds, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
        let mut rows: Vec<Vec<u64>> = a
            .inputs
            .iter_rows()
            .chain(b.inputs.iter_rows())
            .chain(c.inputs.iter_rows())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = ds
            .inputs
            .iter_rows()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert_eq!(split(&ds, &spec).unwrap().0, a);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let ds = make_blobs(3, 5, 2, 0.3, 0).unwrap();
        let spec = SplitSpec { train: 0.98, validation: 0.01, test: 0.01, seed: 0 };
        assert!(split(&ds, &spec).is_err());
        let bad = SplitSpec { train: 0.5, validation: 0.5, test: 0.5, seed: 0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resampled_keeps_means() {
        let a = make_blobs(4, 100, 2, 0.2, 5).unwrap();
        let b = a.descriptor.resampled(50, 77).generate().unwrap();
        assert_eq!(blob_means(&a.descriptor).unwrap(), blob_means(&b.descriptor).unwrap());
        assert_eq!(b.len(), 50);
        assert_ne!(a.inputs.row(0), b.inputs.row(0));
        assert_eq!(Dataset::from_csv(&b.to_csv()).unwrap(), b);
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_blobs(3, 50, 4, 0.3, 7).unwrap();
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        assert_eq!(back, ds);
    }
}
