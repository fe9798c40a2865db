//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use calibreg::metrics::{Prediction, PredictionLog};
use calibreg::network::{nll_loss, Activation, Architecture, Mode, Network};
use calibreg::numerics::{finite_diff_grad, Matrix, Rng};
use calibreg::regularizers::{
    gaussian_midpoint_quantiles, lp_penalty, per_penalty_with_projections, sample_projections,
    sw1_penalty_with_projections,
};

pub const DEFAULT_CONFIG: &str = include_str!("../../../../configs/blobs_default.json");

/// Random log with a mix of sharp and flat predictions and a tunable
/// agreement between labels and argmax.
pub fn random_log(rng: &mut Rng, n: usize, k: usize) -> PredictionLog {
    let mut log = PredictionLog::new(k);
    let scale = [0.1, 1.0, 3.0, 10.0][rng.below(4)];
    let agree = rng.next_f64();
    for _ in 0..n {
        let logits: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
        let label = if rng.bernoulli(agree) {
            oracle_argmax(&oracle_softmax(&logits))
        } else {
            rng.below(k)
        };
        log.push(Prediction::from_logits(logits, Some(label), None).unwrap()).unwrap();
    }
    log
}

pub fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn oracle_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// (confidence, correct) per record.
fn scored(log: &PredictionLog) -> Vec<(f64, bool)> {
    log.records()
        .iter()
        .map(|r| {
            let p = oracle_softmax(&r.logits);
            let top = oracle_argmax(&p);
            (p[top], Some(top) == r.label)
        })
        .collect()
}

/// Members of bin `i` under `lo < c <= hi`, with `c = 0` in the first bin.
fn bin_members(s: &[(f64, bool)], i: usize, m: usize) -> Vec<(f64, bool)> {
    let lo = i as f64 / m as f64;
    let hi = (i + 1) as f64 / m as f64;
    s.iter()
        .copied()
        .filter(|&(c, _)| (c > lo || (i == 0 && c >= 0.0)) && (c <= hi || i + 1 == m))
        .collect()
}

pub fn oracle_ece(log: &PredictionLog, m: usize) -> f64 {
    let s = scored(log);
    let n = s.len() as f64;
    (0..m)
        .map(|i| {
            let b = bin_members(&s, i, m);
            let hits = b.iter().filter(|x| x.1).count() as f64;
            let conf: f64 = b.iter().map(|x| x.0).sum();
            (hits - conf).abs() / n
        })
        .sum()
}

pub fn oracle_ecd(log: &PredictionLog, m: usize) -> f64 {
    let s = scored(log);
    let n = s.len() as f64;
    let eps = 1e-7;
    let mut total = 0.0;
    for i in 0..m {
        let b = bin_members(&s, i, m);
        if b.is_empty() {
            continue;
        }
        let cnt = b.len() as f64;
        let acc = b.iter().filter(|x| x.1).count() as f64 / cnt;
        let conf = (b.iter().map(|x| x.0).sum::<f64>() / cnt).clamp(eps, 1.0 - eps);
        let mut ce = 0.0;
        if acc > 0.0 {
            ce -= acc * conf.ln();
        }
        if acc < 1.0 {
            ce -= (1.0 - acc) * (1.0 - conf).ln();
        }
        total += cnt / n * ce;
    }
    total
}

/// Mean F1 over `t_i = tau * i / steps` of "positive iff confidence > t".
pub fn oracle_nbaucc(confidences: &[f64], positive: &[bool], tau: f64, steps: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=steps {
        let t = tau * i as f64 / steps as f64;
        let pred: Vec<bool> = confidences.iter().map(|&c| c > t).collect();
        let tp = pred.iter().zip(positive).filter(|(p, y)| **p && **y).count() as f64;
        let pp = pred.iter().filter(|p| **p).count() as f64;
        let ap = positive.iter().filter(|y| **y).count() as f64;
        if tp == 0.0 {
            continue;
        }
        let precision = tp / pp;
        let recall = tp / ap;
        total += 2.0 * precision * recall / (precision + recall);
    }
    total / steps as f64
}

/// Detection variant: rows with `positive == false` are the targets, found
/// by `confidence <= t`.
pub fn oracle_detection_nbaucc(confidences: &[f64], positive: &[bool], tau: f64, steps: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=steps {
        let t = tau * i as f64 / steps as f64;
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&c, &pos) in confidences.iter().zip(positive) {
            let target = !pos;
            let flagged = c <= t;
            if flagged && target {
                tp += 1.0;
            } else if flagged {
                fp += 1.0;
            } else if target {
                fneg += 1.0;
            }
        }
        if tp > 0.0 {
            let precision = tp / (tp + fp);
            let recall = tp / (tp + fneg);
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    total / steps as f64
}

pub fn oracle_confidences(log: &PredictionLog) -> Vec<f64> {
    scored(log).into_iter().map(|x| x.0).collect()
}

pub fn oracle_correct(log: &PredictionLog) -> Vec<bool> {
    scored(log).into_iter().map(|x| x.1).collect()
}

/// `E|Z|` for `Z ~ N(0, 1)` by composite Simpson on `[0, 40]`.
pub fn integrated_abs_normal_mean() -> f64 {
    let (a, b, n) = (0.0f64, 40.0f64, 200_000usize);
    let h = (b - a) / n as f64;
    let f = |z: f64| z * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    2.0 * s * h / 3.0
}

/// Random probability vector, sometimes sharply peaked.
pub fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let sharp = [1.0, 1.0, 5.0, 30.0][rng.below(4)];
    let v: Vec<f64> = (0..k).map(|_| (sharp * rng.normal()).exp()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Nll,
    L1,
    L2,
    Sw1,
    Per,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Nll,
        Objective::L1,
        Objective::L2,
        Objective::Sw1,
        Objective::Per,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Nll => "nll",
            Objective::L1 => "l1",
            Objective::L2 => "l2_squared",
            Objective::Sw1 => "sw1",
            Objective::Per => "per",
        }
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-3;

pub struct GradCase {
    net: Network,
    x: Matrix,
    y: Vec<usize>,
    projections: Matrix,
}

impl GradCase {
    pub fn random(seed: u64) -> GradCase {
        let mut rng = Rng::new(seed);
        let d = 2 + rng.below(4);
        let k = 2 + rng.below(4);
        let m = 3 + rng.below(8);
        let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 3 + rng.below(5)).collect();
        let activation = if seed.is_multiple_of(2) { Activation::Tanh } else { Activation::Relu };
        let arch = Architecture {
            hidden,
            activation,
            dropout_rate: 0.0,
        };
        let mut net = Network::new(d, &arch, k, &mut rng).unwrap();
        // Non-zero biases so nothing starts on a kink by construction.
        let mut params = net.flat_params();
        for p in params.iter_mut() {
            *p += 0.1 * rng.normal();
        }
        net.set_flat_params(&params).unwrap();
        let x = Matrix::new(m, d, (0..m * d).map(|_| rng.normal()).collect()).unwrap();
        let y = (0..m).map(|_| rng.below(k)).collect();
        let projections = sample_projections(k, 4 + rng.below(12), &mut rng).unwrap();
        GradCase {
            net,
            x,
            y,
            projections,
        }
    }

    fn value_and_dlogits(&self, obj: Objective, logits: &Matrix) -> (f64, Matrix) {
        match obj {
            Objective::Nll => nll_loss(logits, &self.y).unwrap(),
            Objective::L1 | Objective::L2 => {
                let p = lp_penalty(logits, if obj == Objective::L1 { 1 } else { 2 }).unwrap();
                (p.value, p.dlogits)
            }
            Objective::Sw1 => {
                let p = sw1_penalty_with_projections(logits, &self.projections).unwrap();
                (p.value, p.dlogits)
            }
            Objective::Per => {
                let p = per_penalty_with_projections(logits, &self.projections).unwrap();
                (p.value, p.dlogits)
            }
        }
    }

    fn objective_at(&self, obj: Objective, params: &[f64]) -> f64 {
        let mut net = self.net.clone();
        net.set_flat_params(params).unwrap();
        let z = net.logits(&self.x).unwrap();
        self.value_and_dlogits(obj, &z).0
    }

    /// Whether the objective has a non-differentiable point within reach of
    /// the finite-difference stencil: ReLU inputs at zero, L1 logits at zero,
    /// SW1 projected values at a quantile or tied with each other.
    pub fn near_kink(&self, obj: Objective) -> bool {
        let mut rng = Rng::new(0);
        let (z, _) = self.net.forward(&self.x, Mode::Eval, &mut rng).unwrap();
        if self.net.activation() == Activation::Relu && relu_inputs_near_zero(&self.net, &self.x) {
            return true;
        }
        match obj {
            Objective::L1 => z.data().iter().any(|v| v.abs() < KINK_MARGIN),
            Objective::Sw1 => {
                let proj = z.matmul(&self.projections).unwrap().transpose();
                let q = gaussian_midpoint_quantiles(z.rows());
                let hit = proj.iter_rows().any(|col| {
                    let mut s = col.to_vec();
                    s.sort_by(f64::total_cmp);
                    s.windows(2).any(|w| w[1] - w[0] < KINK_MARGIN)
                        || s.iter().zip(&q).any(|(a, b)| (a - b).abs() < KINK_MARGIN)
                });
                hit
            }
            _ => false,
        }
    }

    /// Max relative error between backprop and central differences over all
    /// parameters.
    pub fn relative_error(&self, obj: Objective) -> f64 {
        let mut rng = Rng::new(0);
        let (z, trace) = self.net.forward(&self.x, Mode::Train, &mut rng).unwrap();
        let (_, dz) = self.value_and_dlogits(obj, &z);
        let analytic = self.net.backward(&trace, &dz).unwrap().flatten();
        let numeric = finite_diff_grad(|p| self.objective_at(obj, p), &self.net.flat_params(), FD_STEP).unwrap();
        calibreg::numerics::max_relative_error(&analytic, &numeric, GRAD_FLOOR)
    }
}

fn relu_inputs_near_zero(net: &Network, x: &Matrix) -> bool {
    let mut a = x.clone();
    let layers = net.layers();
    for (i, l) in layers.iter().enumerate() {
        let mut z = a.matmul(&l.weight).unwrap();
        z.add_row_vector(&l.bias).unwrap();
        if i + 1 == layers.len() {
            return false;
        }
        if z.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            return true;
        }
        a = z.map(|v| v.max(0.0));
    }
    false
}

/// Checks `needed` non-kink configurations per objective.
/// Returns `(objective, checked, excluded, worst relative error)`.
pub fn gradient_sweep(needed: usize) -> Vec<(Objective, usize, usize, f64)> {
    Objective::ALL
        .iter()
        .map(|&obj| {
            let (mut checked, mut excluded, mut worst) = (0, 0, 0.0f64);
            let mut seed = 0u64;
            while checked < needed && seed < 50 * needed as u64 {
                let case = GradCase::random(seed * 7919 + obj as u64);
                seed += 1;
                if case.near_kink(obj) {
                    excluded += 1;
                    continue;
                }
                worst = worst.max(case.relative_error(obj));
                checked += 1;
            }
            (obj, checked, excluded, worst)
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
