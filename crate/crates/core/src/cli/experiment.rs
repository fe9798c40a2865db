//! One configured experiment: data, training repeats, baselines, metrics
//! and the calibration report.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MetricOptions};
use crate::calibration::{apply_temperature, fit_temperature};
use crate::data::{make_ood, split, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, PredictionLog};
use crate::network::Network;
use crate::numerics::{derive_seed, Matrix};
use crate::trainer::{evaluate, train, train_ensemble, Model, TrainHistory};

pub const REPORT_SCHEMA: &str = "calibreg.report";
pub const REPORT_SCHEMA_VERSION: u32 = 1;
const ENTROPY_BINS: usize = 20;

/// Scalar metrics of one model on the test split (plus OOD rows if any).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub ecd: f64,
    pub f_l1: f64,
    pub f_l2: f64,
    pub entropy_correct: Option<f64>,
    pub entropy_misclassified: Option<f64>,
    pub entropy_ood: Option<f64>,
    pub nbaucc_misclassification: f64,
    pub nbaucc_ood: Option<f64>,
}

impl ModelMetrics {
    /// `log` holds labeled test rows followed by optional OOD rows.
    pub fn compute(log: &PredictionLog, opts: &MetricOptions) -> Result<ModelMetrics> {
        let ind = log.in_distribution();
        let ood = log.ood_only();
        let logits = ind.logits_matrix();
        let correct = ind.correctness()?;
        let group_entropy = |keep: bool| {
            let e: Vec<f64> = ind
                .records()
                .iter()
                .zip(&correct)
                .filter(|(_, &c)| c == keep)
                .map(|(r, _)| r.entropy())
                .collect();
            metrics::mean(&e)
        };
        Ok(ModelMetrics {
            accuracy: ind.accuracy()?,
            nll: metrics::nll(&ind)?,
            ece: metrics::ece(&ind, opts.bins)?,
            ecd: metrics::ecd(&ind, opts.bins)?,
            f_l1: metrics::function_lp_norm(&logits, 1)?,
            f_l2: metrics::function_lp_norm(&logits, 2)?,
            entropy_correct: group_entropy(true),
            entropy_misclassified: group_entropy(false),
            entropy_ood: metrics::mean(&metrics::predictive_entropy(&ood)),
            nbaucc_misclassification: metrics::detection_nbaucc(&ind, &correct, opts.nbaucc_tau, opts.nbaucc_steps)?,
            nbaucc_ood: if ood.is_empty() {
                None
            } else {
                Some(metrics::detection_nbaucc(
                    log,
                    &log.in_distribution_flags(),
                    opts.nbaucc_tau,
                    opts.nbaucc_steps,
                )?)
            },
        })
    }

    fn fields(&self) -> Vec<Option<f64>> {
        vec![
            Some(self.accuracy),
            Some(self.nll),
            Some(self.ece),
            Some(self.ecd),
            Some(self.f_l1),
            Some(self.f_l2),
            self.entropy_correct,
            self.entropy_misclassified,
            self.entropy_ood,
            Some(self.nbaucc_misclassification),
            self.nbaucc_ood,
        ]
    }

    fn from_fields(v: &[Option<f64>]) -> ModelMetrics {
        ModelMetrics {
            accuracy: v[0].unwrap_or(f64::NAN),
            nll: v[1].unwrap_or(f64::NAN),
            ece: v[2].unwrap_or(f64::NAN),
            ecd: v[3].unwrap_or(f64::NAN),
            f_l1: v[4].unwrap_or(f64::NAN),
            f_l2: v[5].unwrap_or(f64::NAN),
            entropy_correct: v[6],
            entropy_misclassified: v[7],
            entropy_ood: v[8],
            nbaucc_misclassification: v[9].unwrap_or(f64::NAN),
            nbaucc_ood: v[10],
        }
    }

    /// Field-wise mean; optional fields average over the runs that have them.
    pub fn mean(items: &[ModelMetrics]) -> Option<ModelMetrics> {
        if items.is_empty() {
            return None;
        }
        let columns: Vec<Vec<Option<f64>>> = items.iter().map(ModelMetrics::fields).collect();
        let means: Vec<Option<f64>> = (0..columns[0].len())
            .map(|j| {
                let present: Vec<f64> = columns.iter().filter_map(|c| c[j]).collect();
                metrics::mean(&present)
            })
            .collect();
        Some(ModelMetrics::from_fields(&means))
    }

    pub fn is_finite(&self) -> bool {
        self.fields().into_iter().flatten().all(f64::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureComparison {
    pub tau: f64,
    pub at_boundary: bool,
    pub before: ModelMetrics,
    pub after: ModelMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub repeat: usize,
    pub seed: u64,
    pub epochs: usize,
    pub collapsed: bool,
    pub val_accuracy: f64,
    pub val_nll: f64,
    pub train_f_l2: f64,
    pub train_nll: f64,
    pub test: ModelMetrics,
    /// Temperature fitted on the validation split, applied to the test split.
    pub temperature_scaling: TemperatureComparison,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<ModelMetrics>,
    /// Test NLL of each ensemble member on its own.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensemble_member_nll: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dropout: Option<ModelMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repeats: usize,
    pub val_accuracy: f64,
    pub test: ModelMetrics,
    pub temperature_scaled: ModelMetrics,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<ModelMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dropout: Option<ModelMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub model: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub accuracy: f64,
    pub confidence: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub model: String,
    pub group: String,
    pub bin: usize,
    /// Edges in nats, spanning `[0, ln K]`.
    pub lower: f64,
    pub upper: f64,
    /// Density with respect to entropy normalized by `ln K`.
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema: String,
    pub version: u32,
    pub tag: String,
    pub trivial_solution: bool,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    pub aggregate: Aggregate,
    /// Pooled over repeats.
    pub reliability: Vec<ReliabilityRow>,
    pub entropy_histogram: Vec<EntropyRow>,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<CalibrationReport> {
        let r: CalibrationReport =
            serde_json::from_str(text).map_err(|e| Error::parse("report", e.to_string()))?;
        if r.schema != REPORT_SCHEMA || r.version != REPORT_SCHEMA_VERSION {
            return Err(Error::parse("report", "unsupported schema"));
        }
        Ok(r)
    }

    /// Every numeric entry is finite.
    pub fn is_finite(&self) -> bool {
        let runs_ok = self.runs.iter().all(|r| {
            r.test.is_finite()
                && r.temperature_scaling.before.is_finite()
                && r.temperature_scaling.after.is_finite()
                && r.val_accuracy.is_finite()
                && r.val_nll.is_finite()
                && r.ensemble.as_ref().is_none_or(ModelMetrics::is_finite)
                && r.mc_dropout.as_ref().is_none_or(ModelMetrics::is_finite)
        });
        runs_ok && self.aggregate.test.is_finite() && self.aggregate.temperature_scaled.is_finite()
    }
}

/// Short label for the regularization setting.
pub fn experiment_tag(cfg: &ExperimentConfig) -> String {
    let reg = &cfg.train.regularizer;
    let mut parts = Vec::new();
    if !reg.is_inactive() {
        parts.push(reg.kind.name().to_string());
    }
    if cfg.train.weight_decay > 0.0 {
        parts.push("weight_decay".to_string());
    }
    if parts.is_empty() {
        "vanilla".to_string()
    } else {
        parts.join("+")
    }
}

/// Everything one repeat produced.
#[derive(Clone)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub network: Network,
    pub history: TrainHistory,
    /// Test rows followed by OOD rows.
    pub log: PredictionLog,
    pub ensemble_log: Option<PredictionLog>,
    pub mc_dropout_log: Option<PredictionLog>,
}

pub struct ExperimentOutcome {
    pub report: CalibrationReport,
    pub runs: Vec<RunArtifacts>,
}

/// The data every repeat shares.
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub ood: Option<Matrix>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let full = cfg.dataset.generate()?;
    let (train, validation, test) = split(&full, &cfg.split)?;
    let ood = match &cfg.ood {
        Some(o) => Some(make_ood(&cfg.dataset, o.n, o.mode, o.shift, o.seed)?),
        None => None,
    };
    Ok(PreparedData {
        train,
        validation,
        test,
        ood,
    })
}

/// Training seed of repeat `r`.
pub fn repeat_seed(base: u64, r: usize) -> u64 {
    if r == 0 {
        base
    } else {
        derive_seed(base, r as u64)
    }
}

pub fn run_repeat(cfg: &ExperimentConfig, data: &PreparedData, r: usize) -> Result<RunArtifacts> {
    let seed = repeat_seed(cfg.train.seed, r);
    let tcfg = cfg.train.with_seed(seed);
    let (network, history) = train(&tcfg, &data.train, &data.validation, &data.test)?;
    let ood = data.ood.as_ref();
    let log = evaluate(&Model::Single(&network), &data.test, ood)?;
    let val_log = evaluate(&Model::Single(&network), &data.validation, None)?;
    let test = ModelMetrics::compute(&log, &cfg.metrics)?;

    let fit = fit_temperature(&val_log.logits_matrix(), &data.validation.labels)?;
    let scaled = scale_log(&log, fit.tau)?;
    let temperature_scaling = TemperatureComparison {
        tau: fit.tau,
        at_boundary: fit.at_boundary,
        before: test.clone(),
        after: ModelMetrics::compute(&scaled, &cfg.metrics)?,
    };

    let mut member_nll = Vec::new();
    let ensemble_log = if cfg.baselines.ensemble_members >= 2 {
        let members = train_ensemble(
            &tcfg,
            &data.train,
            &data.validation,
            &data.test,
            cfg.baselines.ensemble_members,
        )?;
        let nets: Vec<Network> = members.into_iter().map(|(n, _)| n).collect();
        for n in &nets {
            member_nll.push(metrics::nll(&evaluate(&Model::Single(n), &data.test, None)?)?);
        }
        Some(evaluate(&Model::Ensemble(&nets), &data.test, ood)?)
    } else {
        None
    };
    let mc_dropout_log = match cfg.baselines.mc_dropout_rate {
        Some(rate) => {
            let mut mcfg = tcfg.clone();
            mcfg.architecture.dropout_rate = rate;
            let (net, _) = train(&mcfg, &data.train, &data.validation, &data.test)?;
            let model = Model::McDropout {
                net: &net,
                samples: cfg.baselines.mc_dropout_samples,
                seed: derive_seed(seed, u64::MAX),
            };
            Some(evaluate(&model, &data.test, ood)?)
        }
        None => None,
    };
    let last = history.last().expect("at least one epoch");
    let summary = RunSummary {
        repeat: r,
        seed,
        epochs: history.len(),
        collapsed: history.collapsed(),
        val_accuracy: val_log.accuracy()?,
        val_nll: metrics::nll(&val_log)?,
        train_f_l2: last.train_f_norm,
        train_nll: last.train_nll,
        test,
        temperature_scaling,
        ensemble: ensemble_log
            .as_ref()
            .map(|l| ModelMetrics::compute(l, &cfg.metrics))
            .transpose()?,
        ensemble_member_nll: member_nll,
        mc_dropout: mc_dropout_log
            .as_ref()
            .map(|l| ModelMetrics::compute(l, &cfg.metrics))
            .transpose()?,
    };
    Ok(RunArtifacts {
        summary,
        network,
        history,
        log,
        ensemble_log,
        mc_dropout_log,
    })
}

/// Same rows with logits divided by `tau`.
pub fn scale_log(log: &PredictionLog, tau: f64) -> Result<PredictionLog> {
    let scaled = apply_temperature(&log.logits_matrix(), tau)?;
    let mut out = PredictionLog::new(log.k());
    for (row, rec) in scaled.iter_rows().zip(log.records()) {
        out.push(metrics::Prediction::from_logits(row.to_vec(), rec.label, rec.ood)?)?;
    }
    Ok(out)
}

fn pooled(logs: impl Iterator<Item = PredictionLog>, k: usize) -> Result<PredictionLog> {
    let mut all = PredictionLog::new(k);
    for l in logs {
        all.extend(l)?;
    }
    Ok(all)
}

pub fn reliability_rows(model: &str, log: &PredictionLog, bins: usize) -> Result<Vec<ReliabilityRow>> {
    let ind = log.in_distribution();
    Ok(metrics::confidence_bins(&ind, bins)?
        .into_iter()
        .enumerate()
        .map(|(i, b)| ReliabilityRow {
            model: model.to_string(),
            bin: i,
            lower: b.lower,
            upper: b.upper,
            midpoint: 0.5 * (b.lower + b.upper),
            accuracy: b.mean_accuracy,
            confidence: b.mean_confidence,
            count: b.count,
        })
        .collect())
}

/// Entropy densities for the correct, misclassified and OOD groups; empty
/// groups are omitted.
pub fn entropy_rows(model: &str, log: &PredictionLog, bins: usize) -> Result<Vec<EntropyRow>> {
    let k = log.k();
    let max = (k as f64).ln();
    let mut groups: Vec<(&str, Vec<f64>)> = vec![("correct", vec![]), ("misclassified", vec![]), ("ood", vec![])];
    for r in log.records() {
        let g = if r.is_ood() {
            2
        } else if r.correct == Some(true) {
            0
        } else {
            1
        };
        groups[g].1.push(r.entropy());
    }
    let mut rows = Vec::new();
    for (name, ents) in groups {
        if ents.is_empty() {
            continue;
        }
        for (i, density) in metrics::entropy_histogram(&ents, k, bins).into_iter().enumerate() {
            rows.push(EntropyRow {
                model: model.to_string(),
                group: name.to_string(),
                bin: i,
                lower: max * i as f64 / bins as f64,
                upper: max * (i + 1) as f64 / bins as f64,
                density,
            });
        }
    }
    Ok(rows)
}

/// Runs all repeats (in parallel on the current rayon pool) and builds the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let runs: Vec<RunArtifacts> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_repeat(cfg, &data, r))
        .collect::<Result<_>>()?;
    let report = build_report(cfg, &runs)?;
    Ok(ExperimentOutcome { report, runs })
}

pub fn build_report(cfg: &ExperimentConfig, runs: &[RunArtifacts]) -> Result<CalibrationReport> {
    let k = cfg.dataset.num_classes();
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let collect = |f: &dyn Fn(&RunSummary) -> Option<ModelMetrics>| -> Vec<ModelMetrics> {
        summaries.iter().filter_map(f).collect()
    };
    let aggregate = Aggregate {
        repeats: summaries.len(),
        val_accuracy: summaries.iter().map(|s| s.val_accuracy).sum::<f64>() / summaries.len() as f64,
        test: ModelMetrics::mean(&collect(&|s| Some(s.test.clone()))).expect("at least one run"),
        temperature_scaled: ModelMetrics::mean(&collect(&|s| Some(s.temperature_scaling.after.clone())))
            .expect("at least one run"),
        tau: summaries.iter().map(|s| s.temperature_scaling.tau).sum::<f64>() / summaries.len() as f64,
        ensemble: ModelMetrics::mean(&collect(&|s| s.ensemble.clone())),
        mc_dropout: ModelMetrics::mean(&collect(&|s| s.mc_dropout.clone())),
    };
    let bins = cfg.metrics.bins;
    let mut reliability = Vec::new();
    let mut entropy_histogram = Vec::new();
    let mut models: Vec<(&str, PredictionLog)> = vec![("single", pooled(runs.iter().map(|r| r.log.clone()), k)?)];
    if runs.iter().all(|r| r.ensemble_log.is_some()) && cfg.baselines.ensemble_members >= 2 {
        models.push(("ensemble", pooled(runs.iter().filter_map(|r| r.ensemble_log.clone()), k)?));
    }
    if cfg.baselines.mc_dropout_rate.is_some() {
        models.push(("mc_dropout", pooled(runs.iter().filter_map(|r| r.mc_dropout_log.clone()), k)?));
    }
    for (name, log) in &models {
        reliability.extend(reliability_rows(name, log, bins)?);
        entropy_histogram.extend(entropy_rows(name, log, ENTROPY_BINS)?);
    }
    let report = CalibrationReport {
        schema: REPORT_SCHEMA.to_string(),
        version: REPORT_SCHEMA_VERSION,
        tag: experiment_tag(cfg),
        trivial_solution: summaries.iter().any(|s| s.collapsed),
        config: cfg.clone(),
        runs: summaries,
        aggregate,
        reliability,
        entropy_histogram,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite("calibration report"));
    }
    Ok(report)
}

pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut s = String::from("# calibreg.reliability v1\nmodel,bin,lower,upper,midpoint,accuracy,confidence,count\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model, r.bin, r.lower, r.upper, r.midpoint, r.accuracy, r.confidence, r.count
        );
    }
    s
}

pub fn entropy_csv(rows: &[EntropyRow]) -> String {
    let mut s = String::from("# calibreg.entropy_histogram v1\nmodel,group,bin,lower,upper,density\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.model, r.group, r.bin, r.lower, r.upper, r.density);
    }
    s
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the report, reliability and entropy tables, and per-repeat model,
/// history and prediction files under `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.json"), &outcome.report.to_json())?;
    write_file(&dir.join("reliability.csv"), &reliability_csv(&outcome.report.reliability))?;
    write_file(&dir.join("entropy_histogram.csv"), &entropy_csv(&outcome.report.entropy_histogram))?;
    for run in &outcome.runs {
        let rd = dir.join(format!("run{}", run.summary.repeat));
        write_file(&rd.join("model.json"), &run.network.to_json())?;
        write_file(&rd.join("history.csv"), &run.history.to_csv())?;
        write_file(&rd.join("predictions.csv"), &run.log.to_csv())?;
        if let Some(l) = &run.ensemble_log {
            write_file(&rd.join("predictions_ensemble.csv"), &l.to_csv())?;
        }
        if let Some(l) = &run.mc_dropout_log {
            write_file(&rd.join("predictions_mc_dropout.csv"), &l.to_csv())?;
        }
    }
    Ok(())
}
