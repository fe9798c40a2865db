mod common;

use calibreg::network::{nll_loss, Mode, Network};
use calibreg::numerics::{finite_diff_grad, max_relative_error, Matrix, Rng};
use calibreg::regularizers::{
    lp_penalty, per_penalty_with_projections, sample_projections, sw1_penalty_with_projections,
};
use common::{gradient_sweep, GradCase, Objective, FD_STEP, GRAD_FLOOR};

#[test]
fn backprop_matches_finite_differences_for_every_objective() {
    for (obj, checked, excluded, worst) in gradient_sweep(20) {
        assert!(checked >= 20, "{}: only {checked} usable configurations ({excluded} excluded)", obj.name());
        assert!(worst < 1e-4, "{}: relative error {worst:e}", obj.name());
    }
}

#[test]
fn tanh_networks_are_never_excluded_for_smooth_objectives() {
    for seed in (0..20).map(|s| 2 * s) {
        let case = GradCase::random(seed);
        for obj in [Objective::Nll, Objective::L2, Objective::Per] {
            assert!(!case.near_kink(obj));
        }
    }
}

fn logit_grad_error(f: impl Fn(&Matrix) -> (f64, Matrix), z: &Matrix) -> f64 {
    let (_, analytic) = f(z);
    let numeric = finite_diff_grad(
        |v| f(&Matrix::new(z.rows(), z.cols(), v.to_vec()).unwrap()).0,
        z.data(),
        FD_STEP,
    )
    .unwrap();
    max_relative_error(analytic.data(), &numeric, GRAD_FLOOR)
}

fn sw1_near_kink(z: &Matrix, proj: &Matrix) -> bool {
    let q = calibreg::regularizers::gaussian_midpoint_quantiles(z.rows());
    let p = z.matmul(proj).unwrap().transpose();
    let hit = p.iter_rows().any(|col| {
        let mut s = col.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[1] - w[0] < 1e-3) || s.iter().zip(&q).any(|(a, b)| (a - b).abs() < 1e-3)
    });
    hit
}

#[test]
fn penalty_gradients_with_respect_to_logits() {
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let (m, k) = (2 + rng.below(10), 2 + rng.below(6));
        let z = Matrix::new(m, k, (0..m * k).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let proj = sample_projections(k, 8, &mut rng).unwrap();
        let labels: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
        assert!(logit_grad_error(|z| nll_loss(z, &labels).unwrap(), &z) < 1e-4);
        let l2 = |z: &Matrix| {
            let p = lp_penalty(z, 2).unwrap();
            (p.value, p.dlogits)
        };
        assert!(logit_grad_error(l2, &z) < 1e-4);
        let per = |z: &Matrix| {
            let p = per_penalty_with_projections(z, &proj).unwrap();
            (p.value, p.dlogits)
        };
        assert!(logit_grad_error(per, &z) < 1e-4);
        let sw1 = |z: &Matrix| {
            let p = sw1_penalty_with_projections(z, &proj).unwrap();
            (p.value, p.dlogits)
        };
        if !sw1_near_kink(&z, &proj) {
            let e = logit_grad_error(sw1, &z);
            assert!(e < 1e-4, "sw1 {e}");
        }
    }
}

#[test]
fn dropout_backward_uses_the_same_masks() {
    let mut rng = Rng::new(5);
    let arch = calibreg::network::Architecture {
        hidden: vec![6, 5],
        activation: calibreg::network::Activation::Tanh,
        dropout_rate: 0.3,
    };
    let net = Network::new(3, &arch, 4, &mut rng).unwrap();
    let x = Matrix::new(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
    let y = vec![0, 1, 2, 3, 0];
    let (z, trace) = net.forward(&x, Mode::Train, &mut Rng::new(9)).unwrap();
    let (_, dz) = nll_loss(&z, &y).unwrap();
    let analytic = net.backward(&trace, &dz).unwrap().flatten();
    // Replaying the same dropout stream makes the objective deterministic.
    let f = |p: &[f64]| {
        let mut n = net.clone();
        n.set_flat_params(p).unwrap();
        let (z, _) = n.forward(&x, Mode::Train, &mut Rng::new(9)).unwrap();
        nll_loss(&z, &y).unwrap().0
    };
    let numeric = finite_diff_grad(f, &net.flat_params(), FD_STEP).unwrap();
    assert!(max_relative_error(&analytic, &numeric, GRAD_FLOOR) < 1e-4);
}
