//! Explicit penalties on the logit batch and decoupled weight decay.
//!
//! Every penalty returns its value together with the exact gradient with
//! respect to the logits; the trainer pushes that gradient through the
//! network's backward pass. All values are Monte-Carlo estimates over the
//! minibatch they are given.
//!
//! Sliced Wasserstein-1 to the standard Gaussian projects the batch onto
//! random unit directions and compares each projected empirical distribution
//! with `N(0, 1)` by quantile matching: the i-th order statistic is paired
//! with `Φ⁻¹((i - 0.5) / m)`.
//!
//! PER replaces the per-direction empirical-vs-Gaussian distance by the mean
//! over samples of the distance between a point mass and `N(0, 1)`. For a
//! point mass at `a` that distance is `E|Z - a|`, which integrates to
//!
//! ```text
//! g(a)  = a * erf(a / √2) + √(2/π) * exp(-a² / 2)
//! g'(a) = erf(a / √2)
//! ```
//!
//! (split `E|Z - a|` at `a`, use `∫ z φ(z) dz = -φ(z)`, and collect terms).
//! W1 is convex in its first argument, so on a shared set of directions the
//! PER value is never below the SW1 value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::numerics::special::{erf, normal_quantile, SQRT_2, SQRT_2_OVER_PI};
use crate::numerics::{matmul, matmul_nt, Matrix, Rng};

pub const DEFAULT_PROJECTIONS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    L1Norm,
    L2NormSquared,
    Sw1,
    Per,
}

impl PenaltyKind {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::L1Norm => "l1_norm",
            PenaltyKind::L2NormSquared => "l2_norm_squared",
            PenaltyKind::Sw1 => "sw1",
            PenaltyKind::Per => "per",
        }
    }

    pub fn uses_projections(self) -> bool {
        matches!(self, PenaltyKind::Sw1 | PenaltyKind::Per)
    }
}

fn default_projections() -> usize {
    DEFAULT_PROJECTIONS
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub kind: PenaltyKind,
    #[serde(default)]
    pub coefficient: f64,
    #[serde(default = "default_projections")]
    pub n_projections: usize,
    /// Draw fresh directions every step (default) or fix them per run.
    #[serde(default = "default_true")]
    pub resample_projections: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig::none()
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        RegularizerConfig {
            kind: PenaltyKind::None,
            coefficient: 0.0,
            n_projections: DEFAULT_PROJECTIONS,
            resample_projections: true,
        }
    }

    pub fn new(kind: PenaltyKind, coefficient: f64) -> Self {
        RegularizerConfig {
            kind,
            coefficient,
            ..RegularizerConfig::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coefficient.is_finite() && self.coefficient >= 0.0) {
            return Err(Error::invalid(
                "regularizers",
                format!("coefficient must be finite and >= 0, got {}", self.coefficient),
            ));
        }
        if self.kind.uses_projections() && self.n_projections == 0 {
            return Err(Error::invalid(
                "regularizers",
                "n_projections must be >= 1 for sw1/per",
            ));
        }
        Ok(())
    }

    /// True when the penalty contributes nothing to the objective.
    pub fn is_inactive(&self) -> bool {
        self.kind == PenaltyKind::None || self.coefficient == 0.0
    }

    /// Unscaled penalty on a logit batch. `projections` (K x L) is used for
    /// SW1/PER when given; otherwise fresh directions are drawn from `rng`.
    pub fn evaluate(&self, logits: &Matrix, projections: Option<&Matrix>, rng: &mut Rng) -> Result<PenaltyValue> {
        match self.kind {
            PenaltyKind::None => Ok(PenaltyValue {
                value: 0.0,
                dlogits: Matrix::zeros(logits.rows(), logits.cols()),
            }),
            PenaltyKind::L1Norm => lp_penalty(logits, 1),
            PenaltyKind::L2NormSquared => lp_penalty(logits, 2),
            PenaltyKind::Sw1 => match projections {
                Some(p) => sw1_penalty_with_projections(logits, p),
                None => sw1_penalty(logits, self.n_projections, rng),
            },
            PenaltyKind::Per => match projections {
                Some(p) => per_penalty_with_projections(logits, p),
                None => per_penalty(logits, self.n_projections, rng),
            },
        }
    }
}

/// A penalty value and its gradient with respect to the logit batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub dlogits: Matrix,
}

fn check_batch(logits: &Matrix, what: &'static str) -> Result<()> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::invalid(
            "regularizers",
            format!("{what} needs a non-empty logit batch"),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Monte-Carlo `‖f‖_p^p ≈ (1/m) Σ_ij |z_ij|^p` for `p ∈ {1, 2}`.
///
/// For `p = 1` the subgradient at zero is taken as zero.
pub fn lp_penalty(logits: &Matrix, p: u32) -> Result<PenaltyValue> {
    check_batch(logits, "lp_penalty")?;
    let inv_m = 1.0 / logits.rows() as f64;
    let (value, dlogits) = match p {
        1 => (
            logits.data().iter().map(|z| z.abs()).sum::<f64>() * inv_m,
            logits.map(|z| {
                if z > 0.0 {
                    inv_m
                } else if z < 0.0 {
                    -inv_m
                } else {
                    0.0
                }
            }),
        ),
        2 => (logits.sum_squares() * inv_m, logits.scale(2.0 * inv_m)),
        _ => {
            return Err(Error::invalid(
                "regularizers",
                format!("unsupported norm order p = {p} (expected 1 or 2)"),
            ))
        }
    };
    Ok(PenaltyValue { value, dlogits })
}

/// Uniform direction on the unit sphere `S^{K-1}`: a normalized Gaussian vector.
pub fn sample_unit_sphere(k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("regularizers", "sphere dimension must be >= 1"));
    }
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

/// `n` unit directions stored as the columns of a `k x n` matrix.
pub fn sample_projections(k: usize, n: usize, rng: &mut Rng) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("regularizers", "need at least one projection"));
    }
    let mut out = Matrix::zeros(k, n);
    for j in 0..n {
        let theta = sample_unit_sphere(k, rng)?;
        for (i, t) in theta.into_iter().enumerate() {
            out.set(i, j, t);
        }
    }
    Ok(out)
}

/// Gaussian quantiles at the midpoints `(i - 0.5) / m`, `i = 1..=m`.
pub fn gaussian_midpoint_quantiles(m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| normal_quantile((i as f64 + 0.5) / m as f64))
        .collect()
}

/// Sorting permutation with ties broken by original index.
fn sort_permutation(samples: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..samples.len()).collect();
    perm.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
    perm
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// Quantile-matching distance for one projected column; writes the gradient
// (already divided by m) into `grad` at the original sample positions.
fn w1_column(samples: &[f64], quantiles: &[f64], grad: &mut [f64]) -> f64 {
    let m = samples.len();
    let inv_m = 1.0 / m as f64;
    let perm = sort_permutation(samples);
    let mut total = 0.0;
    for (rank, &idx) in perm.iter().enumerate() {
        let diff = samples[idx] - quantiles[rank];
        total += diff.abs();
        grad[idx] = sign(diff) * inv_m;
    }
    total * inv_m
}

/// One-dimensional W1 between the empirical distribution of `samples` and
/// `N(0, 1)`, estimated by quantile matching. Returns the value and its
/// gradient with respect to each sample (in the caller's order).
pub fn w1_empirical_vs_gaussian_1d(samples: &[f64]) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("regularizers", "W1 needs at least one sample"));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("w1_empirical_vs_gaussian_1d"));
    }
    let quantiles = gaussian_midpoint_quantiles(samples.len());
    let mut grad = vec![0.0; samples.len()];
    let value = w1_column(samples, &quantiles, &mut grad);
    Ok((value, grad))
}

/// Sliced W1 between the logit batch and `N(0, I_K)` over `n_projections`
/// fresh random directions.
pub fn sw1_penalty(logits: &Matrix, n_projections: usize, rng: &mut Rng) -> Result<PenaltyValue> {
    check_batch(logits, "sw1_penalty")?;
    let proj = sample_projections(logits.cols(), n_projections, rng)?;
    sw1_penalty_with_projections(logits, &proj)
}

/// Sliced W1 on a fixed set of directions (columns of `projections`).
pub fn sw1_penalty_with_projections(logits: &Matrix, projections: &Matrix) -> Result<PenaltyValue> {
    check_batch(logits, "sw1_penalty")?;
    let (m, n_proj) = (logits.rows(), projections.cols());
    if n_proj == 0 {
        return Err(Error::invalid("regularizers", "need at least one projection"));
    }
    // Rows of `projected_t` are the projected batch for one direction.
    let projected_t = matmul(logits, projections)?.transpose();
    let quantiles = gaussian_midpoint_quantiles(m);
    let mut dproj_t = Matrix::zeros(n_proj, m);
    let mut total = 0.0;
    for l in 0..n_proj {
        total += w1_column(projected_t.row(l), &quantiles, dproj_t.row_mut(l));
    }
    let inv_l = 1.0 / n_proj as f64;
    // dZ = dP * Θᵀ / L with dP = dproj_tᵀ.
    let mut dlogits = matmul_nt(&dproj_t.transpose(), projections)?;
    dlogits.scale_in_place(inv_l);
    Ok(PenaltyValue {
        value: total * inv_l,
        dlogits,
    })
}

/// W1 between a point mass at `a` and `N(0, 1)`, i.e. `E|Z - a|`.
#[inline]
pub fn point_mass_w1(a: f64) -> f64 {
    a * erf(a / SQRT_2) + SQRT_2_OVER_PI * (-0.5 * a * a).exp()
}

#[inline]
pub fn point_mass_w1_grad(a: f64) -> f64 {
    erf(a / SQRT_2)
}

/// PER over `n_projections` fresh random directions.
pub fn per_penalty(logits: &Matrix, n_projections: usize, rng: &mut Rng) -> Result<PenaltyValue> {
    check_batch(logits, "per_penalty")?;
    let proj = sample_projections(logits.cols(), n_projections, rng)?;
    per_penalty_with_projections(logits, &proj)
}

/// PER on a fixed set of directions: `(1/m) Σ_i mean_θ g(θᵀ z_i)`.
pub fn per_penalty_with_projections(logits: &Matrix, projections: &Matrix) -> Result<PenaltyValue> {
    check_batch(logits, "per_penalty")?;
    let (m, n_proj) = (logits.rows(), projections.cols());
    if n_proj == 0 {
        return Err(Error::invalid("regularizers", "need at least one projection"));
    }
    let projected = matmul(logits, projections)?;
    let scale = 1.0 / (m as f64 * n_proj as f64);
    let value = projected.data().iter().map(|&a| point_mass_w1(a)).sum::<f64>() * scale;
    let dproj = projected.map(|a| point_mass_w1_grad(a) * scale);
    let dlogits = matmul_nt(&dproj, projections)?;
    Ok(PenaltyValue { value, dlogits })
}

/// Multiplies every weight matrix (biases exempt) by `1 - lr * decay_rate`.
pub fn decoupled_weight_decay_step(net: &mut Network, decay_rate: f64, lr: f64) -> Result<()> {
    if !(decay_rate.is_finite() && decay_rate >= 0.0) {
        return Err(Error::invalid(
            "regularizers",
            format!("decay rate must be finite and >= 0, got {decay_rate}"),
        ));
    }
    if decay_rate == 0.0 {
        return Ok(());
    }
    let factor = 1.0 - lr * decay_rate;
    if factor < 0.0 {
        return Err(Error::DecayOvershoot { factor });
    }
    for layer in net.layers_mut() {
        layer.weight.scale_in_place(factor);
    }
    Ok(())
}
