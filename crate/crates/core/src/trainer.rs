//! Minibatch SGD with momentum over the total objective
//! `NLL + λ · penalty(logits)`, with step-decay schedule, linear warm-up,
//! global-norm clipping and decoupled weight decay.
//!
//! Every step runs, in order: forward, loss and penalty gradients into the
//! logits, backward, clip, decay, momentum update (`v ← μ v + g`,
//! `w ← w - lr v`). Decay uses the same scheduled learning rate as the
//! gradient step.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, PredictionLog, DEFAULT_BINS};
use crate::network::{nll_loss, softmax, Architecture, Gradients, Mode, Network};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::regularizers::{decoupled_weight_decay_step, sample_projections, RegularizerConfig};

pub const HISTORY_SCHEMA: &str = "calibreg.history";
pub const HISTORY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_EVAL_SUBSET: usize = 2000;
/// Final test ‖f‖₂ below this fraction of its epoch-1 value flags a collapse.
pub const COLLAPSE_RATIO: f64 = 0.01;

/// Multiply the learning rate by `factor` from epoch `epoch` (0-based) on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub epoch: usize,
    pub factor: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    128
}

fn default_eval_subset() -> usize {
    DEFAULT_EVAL_SUBSET
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub lr_schedule: Vec<ScheduleStep>,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
    /// Cap on the samples used for per-epoch diagnostics.
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: default_batch_size(),
            lr: 0.05,
            momentum: default_momentum(),
            lr_schedule: Vec::new(),
            warmup_epochs: 0,
            clip_norm: None,
            weight_decay: 0.0,
            regularizer: RegularizerConfig::none(),
            seed: 0,
            architecture: Architecture::default(),
            eval_subset: DEFAULT_EVAL_SUBSET,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("trainer", msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return bad("lr_schedule epochs must be strictly increasing".into());
        }
        if self.lr_schedule.iter().any(|s| !(s.factor > 0.0 && s.factor.is_finite())) {
            return bad("lr_schedule factors must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.eval_subset == 0 {
            return bad("eval_subset must be >= 1".into());
        }
        if self.architecture.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.architecture.dropout_rate) {
            return bad(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.architecture.dropout_rate
            ));
        }
        self.regularizer.validate()
    }

    /// Learning rate for step `step_in_epoch` of epoch `epoch` (both 0-based).
    pub fn lr_at(&self, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
        let mut lr = self.lr;
        for s in &self.lr_schedule {
            if epoch >= s.epoch {
                lr *= s.factor;
            }
        }
        if epoch < self.warmup_epochs {
            let total = (self.warmup_epochs * steps_per_epoch) as f64;
            let t = (epoch * steps_per_epoch + step_in_epoch) as f64;
            lr *= 0.1 + 0.9 * t / total;
        }
        lr
    }

    /// Copy with a different seed, e.g. for repeats or ensemble members.
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Diagnostics after one epoch. Set-level quantities use at most
/// `eval_subset` samples of each set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub batch_loss: f64,
    pub batch_penalty: f64,
    pub train_nll: f64,
    pub train_accuracy: f64,
    pub val_nll: f64,
    pub val_accuracy: f64,
    pub test_nll: f64,
    pub test_accuracy: f64,
    pub train_f_norm: f64,
    pub test_f_norm: f64,
    pub train_max_log_prob: f64,
    pub test_max_log_prob: f64,
    pub test_ece: f64,
    pub test_ecd: f64,
    pub param_sq_norm: f64,
}

const HISTORY_COLUMNS: [&str; 17] = [
    "epoch",
    "lr",
    "batch_loss",
    "batch_penalty",
    "train_nll",
    "train_accuracy",
    "val_nll",
    "val_accuracy",
    "test_nll",
    "test_accuracy",
    "train_f_norm",
    "test_f_norm",
    "train_max_log_prob",
    "test_max_log_prob",
    "test_ece",
    "test_ecd",
    "param_sq_norm",
];

impl EpochRecord {
    fn values(&self) -> [f64; 16] {
        [
            self.lr,
            self.batch_loss,
            self.batch_penalty,
            self.train_nll,
            self.train_accuracy,
            self.val_nll,
            self.val_accuracy,
            self.test_nll,
            self.test_accuracy,
            self.train_f_norm,
            self.test_f_norm,
            self.train_max_log_prob,
            self.test_max_log_prob,
            self.test_ece,
            self.test_ecd,
            self.param_sq_norm,
        ]
    }

    fn from_values(epoch: usize, v: &[f64]) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: v[0],
            batch_loss: v[1],
            batch_penalty: v[2],
            train_nll: v[3],
            train_accuracy: v[4],
            val_nll: v[5],
            val_accuracy: v[6],
            test_nll: v[7],
            test_accuracy: v[8],
            train_f_norm: v[9],
            test_f_norm: v[10],
            train_max_log_prob: v[11],
            test_max_log_prob: v[12],
            test_ece: v[13],
            test_ecd: v[14],
            param_sq_norm: v[15],
        }
    }

    fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Test ‖f‖₂ fell below 1% of its epoch-1 value (weights collapsed).
    pub fn collapsed(&self) -> bool {
        match (self.records.first(), self.records.last()) {
            (Some(first), Some(last)) => {
                !last.test_f_norm.is_finite() || last.test_f_norm < COLLAPSE_RATIO * first.test_f_norm
            }
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.records.iter().all(EpochRecord::is_finite)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {HISTORY_SCHEMA} v{HISTORY_SCHEMA_VERSION}\n");
        s.push_str(&HISTORY_COLUMNS.join(","));
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}", r.epoch);
            for v in r.values() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<TrainHistory> {
        let mut lines = text.lines();
        let expected = format!("# {HISTORY_SCHEMA} v{HISTORY_SCHEMA_VERSION}");
        if lines.next() != Some(expected.as_str()) {
            return Err(Error::parse("history csv", "missing or unsupported schema line"));
        }
        if lines.next() != Some(HISTORY_COLUMNS.join(",").as_str()) {
            return Err(Error::parse("history csv", "unexpected column header"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != HISTORY_COLUMNS.len() {
                return Err(Error::parse("history csv", format!("row {}: wrong field count", n + 1)));
            }
            let epoch = fields[0]
                .parse()
                .map_err(|e| Error::parse("history csv", format!("row {}: {e}", n + 1)))?;
            let vals = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("history csv", format!("row {}: {e}", n + 1)))?;
            records.push(EpochRecord::from_values(epoch, &vals));
        }
        Ok(TrainHistory { records })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "schema": HISTORY_SCHEMA,
            "version": HISTORY_SCHEMA_VERSION,
            "records": self.records,
        }))
        .expect("history serializes")
    }

    pub fn from_json(text: &str) -> Result<TrainHistory> {
        #[derive(Deserialize)]
        struct Wire {
            schema: String,
            version: u32,
            records: Vec<EpochRecord>,
        }
        let w: Wire = serde_json::from_str(text).map_err(|e| Error::parse("history json", e.to_string()))?;
        if w.schema != HISTORY_SCHEMA || w.version != HISTORY_SCHEMA_VERSION {
            return Err(Error::parse("history json", "unsupported schema"));
        }
        Ok(TrainHistory { records: w.records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = if path.extension().is_some_and(|e| e == "json") {
            self.to_json()
        } else {
            self.to_csv()
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-step bookkeeping, exposed for tests of the update pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub penalty: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Optimizer state for one run.
pub struct Trainer {
    config: TrainConfig,
    net: Network,
    velocity: Gradients,
    shuffle_rng: Rng,
    dropout_rng: Rng,
    projection_rng: Rng,
    fixed_projections: Option<Matrix>,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Trainer> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let mut init_rng = root.fork_named("init");
        let net = Network::new(input_dim, &config.architecture, num_classes, &mut init_rng)?;
        let mut projection_rng = root.fork_named("projections");
        let reg = &config.regularizer;
        let fixed_projections = if reg.kind.uses_projections() && !reg.resample_projections {
            Some(sample_projections(num_classes, reg.n_projections, &mut projection_rng)?)
        } else {
            None
        };
        Ok(Trainer {
            velocity: Gradients::zeros_like(&net),
            config: config.clone(),
            net,
            shuffle_rng: root.fork_named("shuffle"),
            dropout_rng: root.fork_named("dropout"),
            projection_rng,
            fixed_projections,
            epoch: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on a minibatch.
    pub fn step(&mut self, x: &Matrix, y: &[usize], lr: f64) -> Result<StepStats> {
        let (logits, trace) = self.net.forward(x, Mode::Train, &mut self.dropout_rng)?;
        let (loss, mut dlogits) = nll_loss(&logits, y)?;
        let reg = &self.config.regularizer;
        let mut penalty = 0.0;
        if !reg.is_inactive() {
            let pv = reg.evaluate(&logits, self.fixed_projections.as_ref(), &mut self.projection_rng)?;
            penalty = pv.value;
            dlogits.add_scaled(&pv.dlogits, reg.coefficient)?;
        }
        let mut grads = self.net.backward(&trace, &dlogits)?;
        let grad_norm = grads.global_norm();
        if !(loss.is_finite() && penalty.is_finite() && grad_norm.is_finite()) {
            return Err(Error::NonFinite("training step"));
        }
        if let Some(c) = self.config.clip_norm {
            if grad_norm > c {
                grads.scale(c / grad_norm);
            }
        }
        let clipped_norm = grads.global_norm();
        decoupled_weight_decay_step(&mut self.net, self.config.weight_decay, lr)?;
        let mu = self.config.momentum;
        for ((layer, v), g) in self
            .net
            .layers_mut()
            .iter_mut()
            .zip(&mut self.velocity.layers)
            .zip(&grads.layers)
        {
            for ((w, vw), gw) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(v.weight.data_mut())
                .zip(g.weight.data())
            {
                *vw = mu * *vw + gw;
                *w -= lr * *vw;
            }
            for ((b, vb), gb) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vb = mu * *vb + gb;
                *b -= lr * *vb;
            }
        }
        Ok(StepStats {
            loss,
            penalty,
            lr,
            grad_norm,
            clipped_norm,
        })
    }

    /// One pass over `train` in a fresh seeded order. Returns the mean
    /// batch loss, mean penalty and the last learning rate used.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<(f64, f64, f64)> {
        let n = train.len();
        let bs = self.config.batch_size.min(n);
        let steps = n.div_ceil(bs);
        let order = self.shuffle_rng.permutation(n);
        let (mut loss_sum, mut pen_sum, mut lr) = (0.0, 0.0, self.config.lr);
        for (s, chunk) in order.chunks(bs).enumerate() {
            lr = self.config.lr_at(self.epoch, s, steps);
            let x = train.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let stats = self.step(&x, &y, lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch: self.epoch + 1,
                    step: s + 1,
                },
                other => other,
            })?;
            loss_sum += stats.loss;
            pen_sum += stats.penalty;
        }
        self.epoch += 1;
        if !self.net.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: steps,
            });
        }
        Ok((loss_sum / steps as f64, pen_sum / steps as f64, lr))
    }
}

struct SetStats {
    nll: f64,
    accuracy: f64,
    f_norm: f64,
    max_log_prob: f64,
    logits: Matrix,
    labels: Vec<usize>,
}

fn set_stats(net: &Network, ds: &Dataset) -> Result<SetStats> {
    let logits = net.logits(&ds.inputs)?;
    let (nll, _) = nll_loss(&logits, &ds.labels)?;
    let correct = logits
        .iter_rows()
        .zip(&ds.labels)
        .filter(|(r, &y)| crate::network::argmax(r) == y)
        .count();
    Ok(SetStats {
        nll,
        accuracy: correct as f64 / ds.len() as f64,
        f_norm: metrics::function_lp_norm(&logits, 2)?,
        max_log_prob: metrics::mean_max_log_prob(&logits),
        logits,
        labels: ds.labels.clone(),
    })
}

fn check_sets(train: &Dataset, val: &Dataset, test: &Dataset) -> Result<()> {
    for (name, ds) in [("train", train), ("validation", val), ("test", test)] {
        if ds.is_empty() {
            return Err(Error::invalid("trainer", format!("{name} set is empty")));
        }
        if ds.input_dim() != train.input_dim() {
            return Err(Error::invalid(
                "trainer",
                format!(
                    "{name} set has {} input dims, train has {}",
                    ds.input_dim(),
                    train.input_dim()
                ),
            ));
        }
        if ds.num_classes() != train.num_classes() {
            return Err(Error::invalid("trainer", format!("{name} set class count differs")));
        }
    }
    Ok(())
}

/// Trains one network and records per-epoch diagnostics.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset, test_set: &Dataset) -> Result<(Network, TrainHistory)> {
    check_sets(train_set, val_set, test_set)?;
    let mut trainer = Trainer::new(config, train_set.input_dim(), train_set.num_classes())?;
    let cap = config.eval_subset;
    let (train_eval, val_eval, test_eval) = (train_set.head(cap), val_set.head(cap), test_set.head(cap));
    let mut history = TrainHistory::default();
    for _ in 0..config.epochs {
        let (batch_loss, batch_penalty, lr) = trainer.run_epoch(train_set)?;
        let net = trainer.network();
        let tr = set_stats(net, &train_eval)?;
        let va = set_stats(net, &val_eval)?;
        let te = set_stats(net, &test_eval)?;
        let test_log = PredictionLog::from_logits(&te.logits, Some(&te.labels), Some(false))?;
        let record = EpochRecord {
            epoch: trainer.epoch(),
            lr,
            batch_loss,
            batch_penalty,
            train_nll: tr.nll,
            train_accuracy: tr.accuracy,
            val_nll: va.nll,
            val_accuracy: va.accuracy,
            test_nll: te.nll,
            test_accuracy: te.accuracy,
            train_f_norm: tr.f_norm,
            test_f_norm: te.f_norm,
            train_max_log_prob: tr.max_log_prob,
            test_max_log_prob: te.max_log_prob,
            test_ece: metrics::ece(&test_log, DEFAULT_BINS)?,
            test_ecd: metrics::ecd(&test_log, DEFAULT_BINS)?,
            param_sq_norm: net.param_sq_norm(),
        };
        if !record.is_finite() {
            return Err(Error::Diverged {
                epoch: record.epoch,
                step: 0,
            });
        }
        history.records.push(record);
    }
    Ok((trainer.into_network(), history))
}

/// `n_members` independent runs whose seeds derive from `config.seed`.
pub fn train_ensemble(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    n_members: usize,
) -> Result<Vec<(Network, TrainHistory)>> {
    if n_members < 2 {
        return Err(Error::invalid(
            "trainer",
            format!("an ensemble needs at least 2 members, got {n_members}"),
        ));
    }
    (0..n_members)
        .into_par_iter()
        .map(|i| train(&config.with_seed(derive_seed(config.seed, i as u64)), train_set, val_set, test_set))
        .collect()
}

/// The config `early_stop_variant` trains with: `stop_epoch` epochs and
/// schedule and warm-up epochs scaled by `stop_epoch / epochs`.
pub fn compressed_config(config: &TrainConfig, stop_epoch: usize) -> Result<TrainConfig> {
    if stop_epoch == 0 || stop_epoch > config.epochs {
        return Err(Error::invalid(
            "trainer",
            format!("stop_epoch must lie in 1..={}, got {stop_epoch}", config.epochs),
        ));
    }
    let ratio = stop_epoch as f64 / config.epochs as f64;
    let scale = |e: usize| (e as f64 * ratio).round() as usize;
    let mut schedule: Vec<ScheduleStep> = Vec::new();
    for s in &config.lr_schedule {
        let epoch = scale(s.epoch);
        match schedule.last_mut() {
            // Steps squeezed onto the same epoch merge multiplicatively.
            Some(prev) if prev.epoch == epoch => prev.factor *= s.factor,
            _ => schedule.push(ScheduleStep { epoch, factor: s.factor }),
        }
    }
    Ok(TrainConfig {
        epochs: stop_epoch,
        lr_schedule: schedule,
        warmup_epochs: scale(config.warmup_epochs),
        ..config.clone()
    })
}

pub fn early_stop_variant(
    config: &TrainConfig,
    stop_epoch: usize,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
) -> Result<(Network, TrainHistory)> {
    train(&compressed_config(config, stop_epoch)?, train_set, val_set, test_set)
}

/// Something that maps inputs to class probabilities.
#[derive(Clone, Copy, Debug)]
pub enum Model<'a> {
    Single(&'a Network),
    /// Mean of member softmax outputs.
    Ensemble(&'a [Network]),
    /// Mean softmax over `samples` stochastic dropout passes.
    McDropout { net: &'a Network, samples: usize, seed: u64 },
}

impl Model<'_> {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Single(n) | Model::McDropout { net: n, .. } => n.input_dim(),
            Model::Ensemble(ms) => ms.first().map_or(0, Network::input_dim),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Single(n) | Model::McDropout { net: n, .. } => n.num_classes(),
            Model::Ensemble(ms) => ms.first().map_or(0, Network::num_classes),
        }
    }

    /// Logits for `inputs`. Averaged models report `ln(mean probability)`,
    /// whose softmax is the averaged distribution.
    pub fn logits(&self, inputs: &Matrix, rng: &mut Rng) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "evaluate",
                left: inputs.shape(),
                right: (self.input_dim(), self.num_classes()),
            });
        }
        match *self {
            Model::Single(net) => net.logits(inputs),
            Model::Ensemble(members) => {
                if members.is_empty() {
                    return Err(Error::invalid("trainer", "empty ensemble"));
                }
                let mut acc = Matrix::zeros(inputs.rows(), self.num_classes());
                for m in members {
                    acc.add_scaled(&softmax(&m.logits(inputs)?), 1.0)?;
                }
                acc.scale_in_place(1.0 / members.len() as f64);
                Ok(log_probs(&acc))
            }
            Model::McDropout { net, samples, .. } => {
                let p = crate::network::predict_mc_dropout(net, inputs, samples, rng)?;
                Ok(log_probs(&p))
            }
        }
    }
}

fn log_probs(p: &Matrix) -> Matrix {
    p.map(|v| v.max(f64::MIN_POSITIVE).ln())
}

/// Predictions on a labeled dataset followed by unlabeled OOD rows.
pub fn evaluate(model: &Model<'_>, dataset: &Dataset, ood_inputs: Option<&Matrix>) -> Result<PredictionLog> {
    let seed = match model {
        Model::McDropout { seed, .. } => *seed,
        _ => 0,
    };
    let mut rng = Rng::new(seed).fork_named("evaluate");
    let logits = model.logits(&dataset.inputs, &mut rng)?;
    let mut log = PredictionLog::from_logits(&logits, Some(&dataset.labels), Some(false))?;
    if let Some(ood) = ood_inputs {
        let z = model.logits(ood, &mut rng)?;
        log.extend(PredictionLog::from_logits(&z, None, Some(true))?)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, split, SplitSpec};

    fn small_task(seed: u64) -> (Dataset, Dataset, Dataset) {
        let ds = make_blobs(3, 600, 2, 0.3, seed).unwrap();
        split(&ds, &SplitSpec::default()).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 0.05,
            architecture: Architecture {
                hidden: vec![16],
                ..Architecture::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.lr_schedule = vec![ScheduleStep { epoch: 5, factor: 0.1 }, ScheduleStep { epoch: 5, factor: 0.1 }];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_and_warmup() {
        let c = TrainConfig {
            lr: 1.0,
            lr_schedule: vec![ScheduleStep { epoch: 2, factor: 0.1 }, ScheduleStep { epoch: 4, factor: 0.5 }],
            warmup_epochs: 1,
            ..small_config()
        };
        assert!((c.lr_at(0, 0, 10) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(0, 5, 10) - 0.55).abs() < 1e-15);
        assert_eq!(c.lr_at(1, 0, 10), 1.0);
        assert!((c.lr_at(3, 0, 10) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(9, 0, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn deterministic_runs() {
        let (a, b, c) = small_task(1);
        let cfg = small_config();
        let (n1, h1) = train(&cfg, &a, &b, &c).unwrap();
        let (n2, h2) = train(&cfg, &a, &b, &c).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 3);
    }

    #[test]
    fn history_round_trips() {
        let (a, b, c) = small_task(2);
        let (_, h) = train(&small_config(), &a, &b, &c).unwrap();
        assert_eq!(TrainHistory::from_csv(&h.to_csv()).unwrap(), h);
        assert_eq!(TrainHistory::from_json(&h.to_json()).unwrap(), h);
    }

    #[test]
    fn ensemble_contract() {
        let (a, b, c) = small_task(3);
        assert!(train_ensemble(&small_config(), &a, &b, &c, 1).is_err());
    }

    #[test]
    fn compressed_schedule() {
        let c = TrainConfig {
            epochs: 200,
            lr_schedule: vec![ScheduleStep { epoch: 100, factor: 0.1 }, ScheduleStep { epoch: 150, factor: 0.1 }],
            ..small_config()
        };
        let s = compressed_config(&c, 20).unwrap();
        assert_eq!(s.epochs, 20);
        assert_eq!(s.lr_schedule, vec![ScheduleStep { epoch: 10, factor: 0.1 }, ScheduleStep { epoch: 15, factor: 0.1 }]);
        assert_eq!(compressed_config(&c, 200).unwrap(), c);
        assert!(compressed_config(&c, 201).is_err());
        let s = compressed_config(&c, 1).unwrap();
        assert_eq!(s.lr_schedule.len(), 1);
        assert!((s.lr_schedule[0].factor - 0.01).abs() < 1e-15);
    }

    #[test]
    fn evaluate_schema() {
        let (a, b, c) = small_task(4);
        let (net, h) = train(&small_config(), &a, &b, &c).unwrap();
        let ood = Matrix::filled(7, 2, 9.0);
        let log = evaluate(&Model::Single(&net), &c, Some(&ood)).unwrap();
        assert_eq!(log.len(), c.len() + 7);
        assert_eq!(log.ood_only().len(), 7);
        assert!(log.ood_only().records().iter().all(|r| r.label.is_none()));
        let nll = metrics::nll(&log.in_distribution()).unwrap();
        assert!((nll - h.last().unwrap().test_nll).abs() < 1e-9);
        let bad = Matrix::zeros(2, 5);
        assert!(evaluate(&Model::Single(&net), &c, Some(&bad)).is_err());
    }
}
