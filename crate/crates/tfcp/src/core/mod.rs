//! Shared data types and the forecast step: ensembles, coupled samples,
//! model interfaces, and the deterministic randomness contract.

pub mod ensemble;
pub mod model;
pub mod rng;

pub use ensemble::{
    make_coupled_samples, make_coupled_samples_independent, make_coupled_samples_with_permutation,
    CoupledSamples, Ensemble, Matrix,
};
pub use model::{forecast, forecast_keyed, DynamicsModel, ObservationModel};
pub use rng::RngStream;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::models;

    fn identity_obs(std: f64, dim: usize) -> ObservationModel {
        ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![std; dim])
    }

    #[test]
    fn forecast_identity_dynamics_is_identity() {
        let ens = Ensemble::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let dynamics = DynamicsModel::new(
            2,
            Arc::new(|_t, _x: &[f64], out: &mut [f64]| out.fill(0.0)),
            vec![0.0, 0.0],
            0.01,
            5,
        )
        .unwrap();
        let rng = RngStream::from_seed(1);
        let out = forecast(&ens, &dynamics, &rng).unwrap();
        assert_eq!(out, ens);
    }

    #[test]
    fn forecast_linear_decay_matches_rk4_polynomial() {
        let ens = Ensemble::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let dynamics = DynamicsModel::new(
            1,
            Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = -x[0]),
            vec![0.0],
            0.01,
            1,
        )
        .unwrap();
        let rng = RngStream::from_seed(1);
        let out = forecast(&ens, &dynamics, &rng).unwrap();
        let h: f64 = 0.01;
        let factor = 1.0 - h + h * h / 2.0 - h * h * h / 6.0 + h * h * h * h / 24.0;
        assert!((out.member(0)[0] - factor).abs() < 1e-15);
        assert!((out.member(1)[0] - 2.0 * factor).abs() < 1e-15);
        // One RK4 step of exponential decay agrees with exp(-dt) to O(dt^5).
        assert!((out.member(0)[0] - (-h).exp()).abs() < 1e-9);
    }

    #[test]
    fn forecast_commutes_with_member_reordering() {
        let mut rng = RngStream::from_seed(9);
        let ens = Ensemble::gaussian(6, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &mut rng).unwrap();
        let dynamics = models::lorenz63_model(4e-4, 0.01, 10).unwrap();
        let stream = RngStream::from_seed(33);

        let perm = vec![3usize, 0, 5, 1, 4, 2];
        let keys: Vec<u64> = (0..6u64).collect();
        let permuted_keys: Vec<u64> = perm.iter().map(|&p| keys[p]).collect();

        let forward = forecast_keyed(&ens, &dynamics, &stream, &keys).unwrap();
        let permuted_first =
            forecast_keyed(&ens.permuted(&perm), &dynamics, &stream, &permuted_keys).unwrap();
        assert_eq!(forward.permuted(&perm), permuted_first);
    }

    #[test]
    fn forecast_reports_nonfinite_member_and_step() {
        let ens = Ensemble::from_rows(&[vec![1.0], vec![1e200]]).unwrap();
        let dynamics = DynamicsModel::new(
            1,
            Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]),
            vec![0.0],
            1.0,
            3,
        )
        .unwrap();
        let rng = RngStream::from_seed(0);
        let err = forecast(&ens, &dynamics, &rng).unwrap_err();
        match err {
            crate::error::Error::NonFiniteState { member, .. } => assert_eq!(member, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn coupled_samples_identity_permutation_gives_z() {
        let ens = Ensemble::from_rows(&[vec![0.2], vec![-1.0], vec![2.5]]).unwrap();
        let obs = identity_obs(0.5, 1);
        let mut noise_rng = RngStream::from_seed(4);
        let perm: Vec<usize> = (0..3).collect();
        let c = make_coupled_samples_with_permutation(&ens, &obs, &mut noise_rng, &perm).unwrap();
        assert_eq!(c.z().data(), c.z_tilde().data());
        assert_eq!(c.z().data(), c.z_bar().data());
    }

    #[test]
    fn coupled_samples_swap_permutation_two_members() {
        let ens = Ensemble::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let obs = ObservationModel::diag_gaussian(Arc::new(|x: &[f64]| x.to_vec()), vec![0.0]);
        let mut noise_rng = RngStream::from_seed(4);
        let c = make_coupled_samples_with_permutation(&ens, &obs, &mut noise_rng, &[1, 0]).unwrap();
        assert_eq!(c.z_tilde().row(0), &[1.0, 2.0]);
        assert_eq!(c.z_tilde().row(1), &[2.0, 1.0]);
    }

    #[test]
    fn coupled_samples_decorrelate_states_and_observations() {
        let mut rng = RngStream::from_seed(77);
        let ens = Ensemble::gaussian(1000, &[0.0], &[1.0], &mut rng).unwrap();
        let obs = identity_obs(0.5, 1);
        let mut stream = RngStream::from_seed(5);
        let c = make_coupled_samples(&ens, &obs, &mut stream).unwrap();

        let xs: Vec<f64> = (0..1000).map(|i| c.z_tilde().row(i)[0]).collect();
        let ys: Vec<f64> = (0..1000).map(|i| c.z_tilde().row(i)[1]).collect();
        let mx = xs.iter().sum::<f64>() / 1000.0;
        let my = ys.iter().sum::<f64>() / 1000.0;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr.abs() < 0.1, "|corr| = {}", corr.abs());
    }

    #[test]
    fn shuffle_preserves_marginals_exactly() {
        let mut rng = RngStream::from_seed(13);
        let ens = Ensemble::gaussian(64, &[0.0, 1.0], &[1.0, 2.0], &mut rng).unwrap();
        let obs = identity_obs(0.3, 2);
        let mut stream = RngStream::from_seed(21);
        let c = make_coupled_samples(&ens, &obs, &mut stream).unwrap();
        for col in 0..2 {
            let mut y: Vec<f64> = (0..64).map(|i| c.z().row(i)[2 + col]).collect();
            let mut y_bar: Vec<f64> = (0..64).map(|i| c.z_bar().row(i)[2 + col]).collect();
            y.sort_by(f64::total_cmp);
            y_bar.sort_by(f64::total_cmp);
            assert_eq!(y, y_bar);
        }
    }
}
