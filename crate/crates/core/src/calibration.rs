//! Post-hoc temperature scaling.
//!
//! The temperature is chosen to minimize holdout NLL of `softmax(z / τ)`:
//! a log-spaced grid over `[TAU_MIN, TAU_MAX]` locates the best bracket and
//! golden-section search refines inside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::log_softmax_row;
use crate::numerics::Matrix;

pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 20.0;
const GRID_POINTS: usize = 81;
const TAU_TOLERANCE: f64 = 1e-4;
const FLAT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub tau: f64,
    pub holdout_nll_before: f64,
    pub holdout_nll_after: f64,
    /// Objective constant over the whole grid; `tau` is then 1.
    pub flat: bool,
    /// Best grid point sat on the edge of the search interval.
    pub at_boundary: bool,
    /// Grid objective decreases then increases.
    pub unimodal: bool,
    pub grid: Vec<f64>,
    pub grid_nll: Vec<f64>,
}

/// Mean NLL of `softmax(logits / tau)`.
pub fn temperature_nll(logits: &Matrix, labels: &[usize], tau: f64) -> f64 {
    let inv = 1.0 / tau;
    let mut scaled = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        for (s, z) in scaled.iter_mut().zip(row) {
            *s = z * inv;
        }
        total -= log_softmax_row(&scaled)[y];
    }
    total / labels.len() as f64
}

/// Element-wise `logits / tau`.
pub fn apply_temperature(logits: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(
            "calibration",
            format!("temperature must be positive and finite, got {tau}"),
        ));
    }
    Ok(logits.scale(1.0 / tau))
}

fn log_grid() -> Vec<f64> {
    let (lo, hi) = (TAU_MIN.ln(), TAU_MAX.ln());
    (0..GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
        .collect()
}

fn is_unimodal(values: &[f64]) -> bool {
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let tol = 1e-12;
    values[..=best].windows(2).all(|w| w[1] <= w[0] + tol)
        && values[best..].windows(2).all(|w| w[1] >= w[0] - tol)
}

/// Fits the temperature that maximizes holdout log-likelihood.
pub fn fit_temperature(logits: &Matrix, labels: &[usize]) -> Result<TemperatureFit> {
    if logits.rows() == 0 {
        return Err(Error::invalid("calibration", "empty holdout set"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::invalid(
            "calibration",
            format!("{} labels for {} logit rows", labels.len(), logits.rows()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::invalid(
            "calibration",
            format!("label {bad} out of range for {} classes", logits.cols()),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("fit_temperature"));
    }
    let objective = |tau: f64| temperature_nll(logits, labels, tau);
    let before = objective(1.0);
    let grid = log_grid();
    let grid_nll: Vec<f64> = grid.iter().map(|&t| objective(t)).collect();
    let (lo_v, hi_v) = grid_nll
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi_v - lo_v <= FLAT_TOLERANCE {
        return Ok(TemperatureFit {
            tau: 1.0,
            holdout_nll_before: before,
            holdout_nll_after: before,
            flat: true,
            at_boundary: false,
            unimodal: true,
            grid,
            grid_nll,
        });
    }
    let best = grid_nll
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is non-empty");
    let at_boundary = best == 0 || best == grid.len() - 1;
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    while (b - a).abs() > TAU_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let mut tau = 0.5 * (a + b);
    let mut after = objective(tau);
    // Never do worse than the best grid point or the identity.
    if grid_nll[best] < after {
        tau = grid[best];
        after = grid_nll[best];
    }
    if before < after {
        tau = 1.0;
        after = before;
    }
    Ok(TemperatureFit {
        tau,
        holdout_nll_before: before,
        holdout_nll_after: after,
        flat: false,
        at_boundary,
        unimodal: is_unimodal(&grid_nll),
        grid,
        grid_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{argmax, softmax};
    use crate::numerics::{gaussian, Rng};

    #[test]
    fn identity_temperature() {
        let z = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        assert_eq!(apply_temperature(&z, 1.0).unwrap(), z);
        assert!(apply_temperature(&z, 0.0).is_err());
        assert!(apply_temperature(&z, -1.0).is_err());
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let z = gaussian(&mut Rng::new(0), 5, 4).unwrap().scale(10.0);
        let p = softmax(&apply_temperature(&z, 1e6).unwrap());
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-5));
    }

    #[test]
    fn argmax_preserved() {
        let z = gaussian(&mut Rng::new(1), 50, 6).unwrap();
        for tau in [0.1, 2.0, 10.0] {
            let s = apply_temperature(&z, tau).unwrap();
            for (a, b) in z.iter_rows().zip(s.iter_rows()) {
                assert_eq!(argmax(a), argmax(b));
            }
        }
    }

    #[test]
    fn flat_objective() {
        let z = Matrix::filled(6, 3, 0.7);
        let fit = fit_temperature(&z, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!(fit.flat);
        assert_eq!(fit.tau, 1.0);
    }

    #[test]
    fn contract_errors() {
        assert!(fit_temperature(&Matrix::zeros(0, 3), &[]).is_err());
        assert!(fit_temperature(&Matrix::zeros(2, 3), &[0]).is_err());
        assert!(fit_temperature(&Matrix::zeros(1, 3), &[3]).is_err());
    }

    #[test]
    fn overconfident_logits_get_tau_above_one() {
        // Labels drawn from softmax(z), logits reported as 4z.
        let mut rng = Rng::new(3);
        let z = gaussian(&mut rng, 4000, 5).unwrap();
        let p = softmax(&z);
        let labels: Vec<usize> = p
            .iter_rows()
            .map(|r| {
                let u = rng.next_f64();
                let mut acc = 0.0;
                for (i, v) in r.iter().enumerate() {
                    acc += v;
                    if u < acc {
                        return i;
                    }
                }
                r.len() - 1
            })
            .collect();
        let fit = fit_temperature(&z.scale(4.0), &labels).unwrap();
        assert!((fit.tau - 4.0).abs() < 0.4, "tau {}", fit.tau);
        assert!(fit.holdout_nll_after <= fit.holdout_nll_before + 1e-9);
        assert!(fit.unimodal);
        assert!(!fit.at_boundary);
    }
}
