use approx::assert_abs_diff_eq;
use btdz_core::engine::{gpi_policy, infer_task_vector, train_policy_library, RewardProbe};
use btdz_core::features::{feature_second_moment, uniform_rho, whiten_features};
use btdz_core::io;
use btdz_core::mdp::{
    discounted_occupancy, evaluate_policy_return, expected_return, feature_occupancy, policy_values,
    successor_features_for_policy, value_iteration, DeterministicPolicy, FeatureMap, TabularMdp,
};
use btdz_core::tasks::{sample_uniform_sphere, Provenance, TaskVector, TaskVectorSet};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn normalize_rows(raw: Vec<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_row_slice(n, n, &raw);
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

prop_compose! {
    fn arb_mdp(n: usize, m: usize)(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, n * n), m),
        mu in prop::collection::vec(0.01f64..1.0, n),
        gamma in 0.0f64..0.95,
    ) -> TabularMdp {
        let transitions = raw.into_iter().map(|r| normalize_rows(r, n)).collect();
        let s: f64 = mu.iter().sum();
        TabularMdp::new(transitions, DVector::from_iterator(n, mu.into_iter().map(|x| x / s)), gamma).unwrap()
    }
}

prop_compose! {
    fn arb_features(n: usize, d: usize)(v in prop::collection::vec(-2.0f64..2.0, n * d)) -> FeatureMap {
        FeatureMap::new(DMatrix::from_row_slice(n, d, &v)).unwrap()
    }
}

fn arb_policy(n: usize, m: usize) -> impl Strategy<Value = DeterministicPolicy> {
    prop::collection::vec(0..m, n).prop_map(move |a| DeterministicPolicy::new(a, m).unwrap())
}

fn arb_z(d: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_map(move |v| DVector::from_vec(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_mass_and_bound(mdp in arb_mdp(5, 3), phi in arb_features(5, 3), pi in arb_policy(5, 3)) {
        let occ = discounted_occupancy(&mdp, &pi).unwrap();
        prop_assert!(occ.iter().all(|&x| x >= -1e-12));
        prop_assert!((occ.sum() - 1.0 / (1.0 - mdp.discount())).abs() <= 1e-9);
        let psi = feature_occupancy(&mdp, &pi, &phi).unwrap();
        prop_assert!(psi.0.norm() <= phi.occupancy_bound(mdp.discount()) + 1e-9);
    }

    #[test]
    fn return_identity(mdp in arb_mdp(4, 2), phi in arb_features(4, 3), pi in arb_policy(4, 2), z in arb_z(3)) {
        let psi = feature_occupancy(&mdp, &pi, &phi).unwrap();
        let via_psi = expected_return(&psi, &z).unwrap();
        let via_reward = evaluate_policy_return(&mdp, &pi, &phi.reward(&z).unwrap()).unwrap();
        prop_assert!((via_psi - via_reward).abs() <= 1e-9 * (1.0 + via_reward.abs()));
    }

    #[test]
    fn successor_bellman_residual(mdp in arb_mdp(5, 2), phi in arb_features(5, 2), pi in arb_policy(5, 2)) {
        let sf = successor_features_for_policy(&mdp, &pi, &phi).unwrap();
        prop_assert!(sf.bellman_residual(&mdp, &pi, &phi).unwrap() <= 1e-9);
    }

    #[test]
    fn value_iteration_dominates(mdp in arb_mdp(4, 3), r in arb_z(4), pi in arb_policy(4, 3)) {
        let vi = value_iteration(&mdp, &r, 1e-10).unwrap();
        let ours = policy_values(&mdp, &vi.policy, &r).unwrap();
        let other = policy_values(&mdp, &pi, &r).unwrap();
        prop_assert!(ours.iter().zip(other.iter()).all(|(a, b)| *a >= b - 1e-8));
    }

    #[test]
    fn gpi_dominates_every_member(
        mdp in arb_mdp(4, 2),
        phi in arb_features(4, 3),
        zs in prop::collection::vec(arb_z(3), 1..4),
        z_test in arb_z(3),
    ) {
        let tasks: Vec<TaskVector> = zs.iter().filter_map(TaskVector::normalized).collect();
        prop_assume!(!tasks.is_empty());
        let lib = train_policy_library(&mdp, &phi, &TaskVectorSet::new(tasks, Provenance::Uniform).unwrap(), 1e-10).unwrap();
        let reward = phi.reward(&z_test).unwrap();
        let g = policy_values(&mdp, &gpi_policy(&lib, &z_test).unwrap(), &reward).unwrap();
        for e in lib.entries() {
            let v = policy_values(&mdp, &e.policy, &reward).unwrap();
            prop_assert!(g.iter().zip(v.iter()).all(|(a, b)| *a >= b - 1e-9 * (1.0 + b.abs())));
        }
    }

    #[test]
    fn whitening_gives_identity_moment(phi in arb_features(8, 3)) {
        let rho = uniform_rho(8);
        if let Ok(w) = whiten_features(&phi, &rho) {
            let g = feature_second_moment(&w, &rho);
            prop_assert!((g - DMatrix::identity(3, 3)).amax() <= 1e-6);
        }
    }

    #[test]
    fn samplers_emit_unit_vectors(d in 1usize..20, seed in any::<u64>()) {
        let s = sample_uniform_sphere(d, 50, seed).unwrap();
        prop_assert!(s.iter().all(|z| (z.norm() - 1.0).abs() <= 1e-9));
        let back = io::task_set_from_bytes(&io::task_set_to_bytes(&s)).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn onehot_inference_recovers_reward(r in arb_z(6)) {
        let phi = FeatureMap::new(DMatrix::identity(6, 6)).unwrap();
        let probe = RewardProbe::new((0..6).map(|s| (s, r[s])).collect()).unwrap();
        // E[phi phi^T] = I/6 under an exhaustive probe
        let got = infer_task_vector(&probe, &phi, 0.0).unwrap();
        for s in 0..6 {
            assert_abs_diff_eq!(got.raw[s], r[s], epsilon = 1e-12);
        }
    }
}
