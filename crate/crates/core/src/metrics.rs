//! Calibration and uncertainty measurements over a [`PredictionLog`].
//!
//! Confidence is the top-label softmax probability. Bin `i` of `M` holds the
//! predictions with `i/M < confidence <= (i+1)/M`. Every logarithm of a
//! probability is clamped at [`PROB_EPS`] except where the value can be
//! taken from a log-softmax directly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{argmax, log_softmax_row, softmax_in_place};
use crate::numerics::Matrix;

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_NBAUCC_TAU: f64 = 0.5;
pub const DEFAULT_NBAUCC_STEPS: usize = 50;

pub const LOG_SCHEMA: &str = "calibreg.prediction_log";
pub const LOG_SCHEMA_VERSION: u32 = 1;

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub label: Option<usize>,
    pub correct: Option<bool>,
    pub ood: Option<bool>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>, label: Option<usize>, ood: Option<bool>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("metrics", "a prediction needs at least one logit"));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("prediction logits"));
        }
        if let Some(y) = label {
            if y >= logits.len() {
                return Err(Error::invalid(
                    "metrics",
                    format!("label {y} out of range for {} classes", logits.len()),
                ));
            }
        }
        let mut probabilities = logits.clone();
        softmax_in_place(&mut probabilities);
        let predicted = argmax(&probabilities);
        Ok(Prediction {
            correct: label.map(|y| y == predicted),
            logits,
            probabilities,
            predicted,
            label,
            ood,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.predicted]
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probabilities)
    }

    pub fn is_ood(&self) -> bool {
        self.ood == Some(true)
    }
}

/// Per-sample predictions for a K-class model.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionLog {
    k: usize,
    records: Vec<Prediction>,
}

impl PredictionLog {
    pub fn new(k: usize) -> Self {
        PredictionLog {
            k,
            records: Vec::new(),
        }
    }

    /// One record per logit row. `labels`, when given, must align with the rows.
    pub fn from_logits(logits: &Matrix, labels: Option<&[usize]>, ood: Option<bool>) -> Result<Self> {
        if let Some(l) = labels {
            if l.len() != logits.rows() {
                return Err(Error::invalid(
                    "metrics",
                    format!("{} labels for {} logit rows", l.len(), logits.rows()),
                ));
            }
        }
        let mut log = PredictionLog::new(logits.cols());
        for (i, row) in logits.iter_rows().enumerate() {
            log.push(Prediction::from_logits(
                row.to_vec(),
                labels.map(|l| l[i]),
                ood,
            )?)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, p: Prediction) -> Result<()> {
        if p.logits.len() != self.k {
            return Err(Error::invalid(
                "metrics",
                format!("prediction has {} classes, log has {}", p.logits.len(), self.k),
            ));
        }
        self.records.push(p);
        Ok(())
    }

    pub fn extend(&mut self, other: PredictionLog) -> Result<()> {
        if other.k != self.k && !other.is_empty() {
            return Err(Error::invalid(
                "metrics",
                format!("cannot merge logs with {} and {} classes", self.k, other.k),
            ));
        }
        self.records.extend(other.records);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Prediction] {
        &self.records
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.records.iter().map(Prediction::confidence).collect()
    }

    /// Records matching a predicate, as a new log.
    pub fn filter(&self, keep: impl Fn(&Prediction) -> bool) -> PredictionLog {
        PredictionLog {
            k: self.k,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Records not flagged as out-of-distribution.
    pub fn in_distribution(&self) -> PredictionLog {
        self.filter(|r| !r.is_ood())
    }

    pub fn ood_only(&self) -> PredictionLog {
        self.filter(Prediction::is_ood)
    }

    /// Correctness flag per record; errors if any record lacks a label.
    pub fn correctness(&self) -> Result<Vec<bool>> {
        self.records
            .iter()
            .map(|r| r.correct.ok_or_else(|| Error::invalid("metrics", "record without a label")))
            .collect()
    }

    /// `true` for in-distribution records.
    pub fn in_distribution_flags(&self) -> Vec<bool> {
        self.records.iter().map(|r| !r.is_ood()).collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let c = self.correctness()?;
        if c.is_empty() {
            return Err(Error::invalid("metrics", "accuracy of an empty log"));
        }
        Ok(c.iter().filter(|&&b| b).count() as f64 / c.len() as f64)
    }

    pub fn logits_matrix(&self) -> Matrix {
        let data = self.records.iter().flat_map(|r| r.logits.iter().copied()).collect();
        Matrix::new(self.records.len(), self.k, data).expect("records share k")
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {} v{} k={}\n", LOG_SCHEMA, LOG_SCHEMA_VERSION, self.k);
        let header: Vec<String> = (0..self.k).map(|j| format!("logit_{j}")).collect();
        s.push_str(&header.join(","));
        s.push_str(",label,ood\n");
        for r in &self.records {
            for z in &r.logits {
                let _ = write!(s, "{z},");
            }
            if let Some(y) = r.label {
                let _ = write!(s, "{y}");
            }
            s.push(',');
            match r.ood {
                Some(true) => s.push('1'),
                Some(false) => s.push('0'),
                None => {}
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse("prediction log", "empty file"))?;
        let expected_prefix = format!("# {} v{} k=", LOG_SCHEMA, LOG_SCHEMA_VERSION);
        let k: usize = first
            .strip_prefix(&expected_prefix)
            .ok_or_else(|| Error::parse("prediction log", format!("bad schema line: {first}")))?
            .trim()
            .parse()
            .map_err(|e| Error::parse("prediction log", format!("bad k: {e}")))?;
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("prediction log", "missing column header"))?;
        if header.split(',').count() != k + 2 {
            return Err(Error::parse(
                "prediction log",
                format!("header has {} columns, expected {}", header.split(',').count(), k + 2),
            ));
        }
        let mut log = PredictionLog::new(k);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != k + 2 {
                return Err(Error::parse(
                    "prediction log",
                    format!("row {}: {} fields, expected {}", n + 1, fields.len(), k + 2),
                ));
            }
            let logits = fields[..k]
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("prediction log", format!("row {}: {e}", n + 1)))?;
            let label = match fields[k].trim() {
                "" => None,
                t => Some(t.parse::<usize>().map_err(|e| {
                    Error::parse("prediction log", format!("row {}: label: {e}", n + 1))
                })?),
            };
            let ood = match fields[k + 1].trim() {
                "" => None,
                "1" | "true" => Some(true),
                "0" | "false" => Some(false),
                t => {
                    return Err(Error::parse(
                        "prediction log",
                        format!("row {}: bad ood flag {t:?}", n + 1),
                    ))
                }
            };
            log.push(Prediction::from_logits(logits, label, ood)?)?;
        }
        Ok(log)
    }

    pub fn to_json(&self) -> String {
        let file = LogFile {
            schema: LOG_SCHEMA.to_string(),
            version: LOG_SCHEMA_VERSION,
            k: self.k,
            records: self
                .records
                .iter()
                .map(|r| LogRecord {
                    logits: r.logits.clone(),
                    label: r.label,
                    ood: r.ood,
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&file).expect("log serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LogFile =
            serde_json::from_str(text).map_err(|e| Error::parse("prediction log", e.to_string()))?;
        if file.schema != LOG_SCHEMA || file.version != LOG_SCHEMA_VERSION {
            return Err(Error::parse(
                "prediction log",
                format!("unsupported schema {} v{}", file.schema, file.version),
            ));
        }
        let mut log = PredictionLog::new(file.k);
        for r in file.records {
            log.push(Prediction::from_logits(r.logits, r.label, r.ood)?)?;
        }
        Ok(log)
    }

    /// Writes JSON for a `.json` path and CSV otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = if is_json(path) { self.to_json() } else { self.to_csv() };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            PredictionLog::from_json(&text)
        } else {
            PredictionLog::from_csv(&text)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("json")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogFile {
    schema: String,
    version: u32,
    k: usize,
    records: Vec<LogRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogRecord {
    logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ood: Option<bool>,
}

/// One equal-width confidence bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_accuracy: f64,
    pub mean_confidence: f64,
}

/// Bin index of a confidence under `i/M < c <= (i+1)/M`.
pub fn bin_index(confidence: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut i = ((confidence * mf).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
    // Settle floating-point edge cases against the same bounds used for reporting.
    while i > 0 && confidence <= i as f64 / mf {
        i -= 1;
    }
    while i + 1 < m && confidence > (i + 1) as f64 / mf {
        i += 1;
    }
    i
}

fn check_bins(log: &PredictionLog, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("metrics", "number of bins must be >= 1"));
    }
    if log.is_empty() {
        return Err(Error::invalid("metrics", "empty prediction log"));
    }
    Ok(())
}

/// `M` equal-width confidence bins, empty bins included with zero counts.
pub fn confidence_bins(log: &PredictionLog, m: usize) -> Result<Vec<ConfidenceBin>> {
    check_bins(log, m)?;
    let correct = log.correctness()?;
    let mut counts = vec![0usize; m];
    let mut acc_sum = vec![0.0; m];
    let mut conf_sum = vec![0.0; m];
    for (r, &ok) in log.records().iter().zip(&correct) {
        let c = r.confidence();
        let i = bin_index(c, m);
        counts[i] += 1;
        conf_sum[i] += c;
        if ok {
            acc_sum[i] += 1.0;
        }
    }
    Ok((0..m)
        .map(|i| {
            let n = counts[i];
            let (acc, conf) = if n > 0 {
                (acc_sum[i] / n as f64, conf_sum[i] / n as f64)
            } else {
                (0.0, 0.0)
            };
            ConfidenceBin {
                lower: i as f64 / m as f64,
                upper: (i + 1) as f64 / m as f64,
                count: n,
                mean_accuracy: acc,
                mean_confidence: conf,
            }
        })
        .collect())
}

/// Expected calibration error: bin-weighted mean `|acc - conf|`.
pub fn ece(log: &PredictionLog, m: usize) -> Result<f64> {
    let bins = confidence_bins(log, m)?;
    let n = log.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.mean_accuracy - b.mean_confidence).abs())
        .sum())
}

/// Binary cross-entropy `CE(a ‖ c)` with `c` clamped to `[ε, 1 - ε]`.
pub fn binary_cross_entropy(a: f64, c: f64) -> f64 {
    let c = c.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(a * c.ln() + (1.0 - a) * (1.0 - c).ln())
}

/// Expected calibration divergence: bin-weighted `CE(acc ‖ conf)`.
pub fn ecd(log: &PredictionLog, m: usize) -> Result<f64> {
    let bins = confidence_bins(log, m)?;
    let n = log.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * binary_cross_entropy(b.mean_accuracy, b.mean_confidence))
        .sum())
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "metrics",
            format!("{what} is not a probability vector (sum {sum})"),
        ));
    }
    Ok(())
}

/// Upper bound on the expected log-likelihood `Σ_k q_k ln φ_k` that depends
/// on `φ` only through its top entry: `q_m ln φ_m + (1 - q_m) ln(1 - φ_m)`
/// with `m = argmax φ`.
///
/// Logarithm arguments are floored at `ε`, which can only raise the bound.
pub fn ll_upper_bound(q: &[f64], phi: &[f64]) -> Result<f64> {
    if q.len() != phi.len() || q.is_empty() {
        return Err(Error::invalid("metrics", "q and phi must have the same positive length"));
    }
    check_simplex(q, "q")?;
    check_simplex(phi, "phi")?;
    let m = argmax(phi);
    let top = phi[m].max(PROB_EPS);
    // Summing the other entries avoids cancellation in `1 - φ_m` near 1.
    let rest = phi
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != m)
        .map(|(_, p)| p)
        .sum::<f64>()
        .max(PROB_EPS);
    let qm = q[m];
    let mut bound = qm * top.ln();
    if qm < 1.0 {
        bound += (1.0 - qm) * rest.ln();
    }
    Ok(bound)
}

/// Negative mean log-probability of the true labels, from the log-softmax of
/// the stored logits.
pub fn nll(log: &PredictionLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::invalid("metrics", "empty prediction log"));
    }
    let mut total = 0.0;
    for r in log.records() {
        let y = r
            .label
            .ok_or_else(|| Error::invalid("metrics", "nll needs labels on every record"))?;
        total -= log_softmax_row(&r.logits)[y];
    }
    Ok(total / log.len() as f64)
}

/// `-Σ φ ln φ` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn predictive_entropy(log: &PredictionLog) -> Vec<f64> {
    log.records().iter().map(Prediction::entropy).collect()
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Monte-Carlo function norm over an evaluation set of logits:
/// `(1/m) Σ_ij |z_ij|` for `p = 1`, `((1/m) Σ_ij z_ij²)^{1/2}` for `p = 2`.
pub fn function_lp_norm(logits: &Matrix, p: u32) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::invalid("metrics", "function norm of an empty logit set"));
    }
    let inv_m = 1.0 / logits.rows() as f64;
    match p {
        1 => Ok(logits.data().iter().map(|z| z.abs()).sum::<f64>() * inv_m),
        2 => Ok((logits.sum_squares() * inv_m).sqrt()),
        _ => Err(Error::invalid(
            "metrics",
            format!("unsupported norm order p = {p} (expected 1 or 2)"),
        )),
    }
}

/// Mean of the largest log-probability per row.
pub fn mean_max_log_prob(logits: &Matrix) -> f64 {
    if logits.rows() == 0 {
        return 0.0;
    }
    logits
        .iter_rows()
        .map(|r| log_softmax_row(r).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / logits.rows() as f64
}

/// F1 of "positive iff confidence > t" against `positive_flags`.
/// Returns 0 when precision and recall are both undefined or zero.
pub fn f1_at_threshold(log: &PredictionLog, positive_flags: &[bool], t: f64) -> Result<f64> {
    if positive_flags.len() != log.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} flags for {} records", positive_flags.len(), log.len()),
        ));
    }
    Ok(f1_from_confidences(&log.confidences(), positive_flags, t))
}

fn f1_from_confidences(conf: &[f64], flags: &[bool], t: f64) -> f64 {
    f1_counts(conf.iter().zip(flags).map(|(&c, &pos)| (c > t, pos)))
}

fn f1_counts(pairs: impl Iterator<Item = (bool, bool)>) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for pair in pairs {
        match pair {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_nbaucc_args(log: &PredictionLog, positive_flags: &[bool], tau: f64, steps: usize) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid("metrics", format!("NBAUCC tau must lie in (0, 1], got {tau}")));
    }
    if steps == 0 {
        return Err(Error::invalid("metrics", "NBAUCC needs at least one step"));
    }
    if positive_flags.len() != log.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} flags for {} records", positive_flags.len(), log.len()),
        ));
    }
    Ok(())
}

/// Mean F1 over the thresholds `tau * i / steps`, `i = 1..=steps`.
pub fn nbaucc(log: &PredictionLog, positive_flags: &[bool], tau: f64, steps: usize) -> Result<f64> {
    check_nbaucc_args(log, positive_flags, tau, steps)?;
    let conf = log.confidences();
    let total: f64 = (1..=steps)
        .map(|i| f1_from_confidences(&conf, positive_flags, tau * i as f64 / steps as f64))
        .sum();
    Ok(total / steps as f64)
}

/// NBAUCC for detecting the unflagged rows (misclassified or OOD): a row is
/// flagged as detected iff its confidence is at most the threshold, and F1 is
/// scored on the detected class over the thresholds `tau * i / steps`.
pub fn detection_nbaucc(log: &PredictionLog, positive_flags: &[bool], tau: f64, steps: usize) -> Result<f64> {
    check_nbaucc_args(log, positive_flags, tau, steps)?;
    let conf = log.confidences();
    let total: f64 = (1..=steps)
        .map(|i| {
            let t = tau * i as f64 / steps as f64;
            f1_counts(conf.iter().zip(positive_flags).map(|(&c, &pos)| (c <= t, !pos)))
        })
        .sum();
    Ok(total / steps as f64)
}

/// Point of a reliability curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub bin: usize,
    pub midpoint: f64,
    pub accuracy: f64,
    pub confidence: f64,
    pub count: usize,
}

pub fn reliability_curve(log: &PredictionLog, m: usize) -> Result<Vec<ReliabilityPoint>> {
    Ok(confidence_bins(log, m)?
        .into_iter()
        .enumerate()
        .map(|(i, b)| ReliabilityPoint {
            bin: i,
            midpoint: 0.5 * (b.lower + b.upper),
            accuracy: b.mean_accuracy,
            confidence: b.mean_confidence,
            count: b.count,
        })
        .collect())
}

/// Histogram densities of entropies normalized by `ln K` onto `[0, 1]`,
/// with `bins` equal-width bins; `Σ density * width = 1` for non-empty input.
/// The top edge belongs to the last bin.
pub fn entropy_histogram(entropies: &[f64], k: usize, bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    if bins == 0 || entropies.is_empty() {
        return vec![0.0; bins];
    }
    let max = if k > 1 { (k as f64).ln() } else { 1.0 };
    for &h in entropies {
        let u = (h / max).clamp(0.0, 1.0);
        let i = ((u * bins as f64).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = entropies.len() as f64;
    counts.into_iter().map(|c| c as f64 * bins as f64 / n).collect()
}
