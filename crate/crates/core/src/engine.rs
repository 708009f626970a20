//! Policy libraries trained on sampled task vectors, reward-probe inference
//! and generalized policy improvement at test time.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::mdp::{
    evaluate_policy_return, greedy_actions, successor_features_for_policy, value_iteration, DeterministicPolicy,
    FeatureMap, SuccessorFeatureTable, TabularMdp,
};
use crate::rng;
use crate::tasks::{TaskVector, TaskVectorSet};

pub const DEFAULT_LIBRARY_SIZE: usize = 64;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_VI_TOL: f64 = 1e-8;
const MAX_PROBE: usize = 512;
const CONSISTENCY_TOL: f64 = 1e-6;
const SF_RESIDUAL_TOL: f64 = 1e-9;

pub fn default_probe_size(n_states: usize) -> usize {
    n_states.min(MAX_PROBE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub z: TaskVector,
    pub policy: DeterministicPolicy,
    pub sf: SuccessorFeatureTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLibrary {
    entries: Vec<LibraryEntry>,
    pub features_fingerprint: [u8; 32],
    pub mdp_fingerprint: [u8; 32],
}

impl PolicyLibrary {
    pub fn new(entries: Vec<LibraryEntry>, features_fingerprint: [u8; 32], mdp_fingerprint: [u8; 32]) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidArgument("policy library is empty".into()))?;
        let (n, m, d) = (first.sf.n_states(), first.sf.n_actions(), first.sf.dim());
        for e in &entries {
            check_dim("library task dim", d, e.z.dim())?;
            check_dim("library sf dim", d, e.sf.dim())?;
            check_dim("library sf states", n, e.sf.n_states())?;
            check_dim("library sf actions", m, e.sf.n_actions())?;
            check_dim("library policy states", n, e.policy.actions().len())?;
        }
        Ok(Self {
            entries,
            features_fingerprint,
            mdp_fingerprint,
        })
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].sf.dim()
    }

    pub fn n_states(&self) -> usize {
        self.entries[0].sf.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.entries[0].sf.n_actions()
    }

    /// Refuse to evaluate against an MDP or feature map other than the one trained on.
    pub fn check_compatible(&self, mdp: &TabularMdp, features: &FeatureMap) -> Result<()> {
        if self.mdp_fingerprint != mdp.fingerprint() {
            return Err(Error::InvalidArgument("library was trained on a different MDP".into()));
        }
        if self.features_fingerprint != features.fingerprint() {
            return Err(Error::InvalidArgument("library was trained with different features".into()));
        }
        Ok(())
    }
}

fn train_entry(mdp: &TabularMdp, features: &FeatureMap, z: &TaskVector, tol: f64) -> Result<LibraryEntry> {
    let reward = features.reward(z.vector())?;
    let vi = value_iteration(mdp, &reward, tol)?;
    let sf = successor_features_for_policy(mdp, &vi.policy, features)?;
    let q = sf.q_values(z.vector())?;
    for s in 0..mdp.n_states() {
        let gap = (q[(s, vi.policy.action(s))] - vi.values[s]).abs();
        if gap > CONSISTENCY_TOL {
            return Err(Error::Numerical(format!(
                "successor features disagree with value iteration at state {s} by {gap:e}"
            )));
        }
    }
    let scale = sf
        .action_matrix(0)
        .amax()
        .max(1.0);
    let residual = sf.bellman_residual(mdp, &vi.policy, features)?;
    if residual > SF_RESIDUAL_TOL * scale {
        return Err(Error::Numerical(format!("successor feature Bellman residual {residual:e}")));
    }
    Ok(LibraryEntry {
        z: z.clone(),
        policy: vi.policy,
        sf,
    })
}

/// Solve every task exactly: optimal policy for `r = Phi z`, then its
/// successor features. Entries keep the order of `tasks`.
pub fn train_policy_library(
    mdp: &TabularMdp,
    features: &FeatureMap,
    tasks: &TaskVectorSet,
    tol: f64,
) -> Result<PolicyLibrary> {
    check_dim("feature map states", mdp.n_states(), features.n_states())?;
    check_dim("task dim", features.dim(), tasks.dim())?;
    let entries = tasks
        .vectors()
        .par_iter()
        .map(|z| train_entry(mdp, features, z, tol))
        .collect::<Result<Vec<_>>>()?;
    PolicyLibrary::new(entries, features.fingerprint(), mdp.fingerprint())
}

/// Revealed rewards `(state, r(state))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardProbe {
    labeled: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub size: usize,
    pub with_replacement: bool,
}

impl ProbeSpec {
    pub fn default_for(n_states: usize) -> Self {
        Self {
            size: default_probe_size(n_states),
            with_replacement: true,
        }
    }

    /// Every state exactly once.
    pub fn exhaustive(n_states: usize) -> Self {
        Self {
            size: n_states,
            with_replacement: false,
        }
    }
}

impl RewardProbe {
    pub fn new(labeled: Vec<(usize, f64)>) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::InvalidArgument("reward probe is empty".into()));
        }
        if labeled.iter().any(|(_, r)| !r.is_finite()) {
            return Err(Error::InvalidArgument("reward probe has a non-finite reward".into()));
        }
        Ok(Self { labeled })
    }

    /// Reveal `reward` on states drawn uniformly (seeded).
    pub fn sample(reward: &DVector<f64>, spec: ProbeSpec, seed: u64) -> Result<Self> {
        let n = reward.len();
        if spec.size == 0 {
            return Err(Error::InvalidArgument("probe size must be >= 1".into()));
        }
        let mut rng = rng::stream(seed, "reward-probe", 0);
        let states: Vec<usize> = if spec.with_replacement {
            (0..spec.size).map(|_| rng.random_range(0..n)).collect()
        } else {
            if spec.size > n {
                return Err(Error::InvalidArgument(format!(
                    "probe of {} states without replacement exceeds {n} states",
                    spec.size
                )));
            }
            let mut picked = index::sample(&mut rng, n, spec.size).into_vec();
            picked.sort_unstable();
            picked
        };
        Self::new(states.into_iter().map(|s| (s, reward[s])).collect())
    }

    pub fn labeled(&self) -> &[(usize, f64)] {
        &self.labeled
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredTask {
    /// Regression solution, consumed by GPI.
    pub raw: DVector<f64>,
    /// `raw / ||raw||`, absent when the solution vanishes.
    pub normalized: Option<TaskVector>,
}

/// Least squares `z = (E[phi phi^T] + ridge I)^{-1} E[phi r]` over the probe.
pub fn infer_task_vector(probe: &RewardProbe, features: &FeatureMap, ridge: f64) -> Result<InferredTask> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = features.dim();
    let inv_n = 1.0 / probe.len() as f64;
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for &(s, r) in probe.labeled() {
        if s >= features.n_states() {
            return Err(Error::DimensionMismatch {
                context: "probe state",
                expected: features.n_states(),
                actual: s,
            });
        }
        let phi = features.row(s);
        gram.ger(inv_n, &phi, &phi, 1.0);
        rhs.axpy(r * inv_n, &phi, 1.0);
    }
    let gram = linalg::symmetrize(&gram) + DMatrix::identity(d, d) * ridge;
    let (vals, _) = linalg::sorted_symmetric_eigen(&gram);
    let top = vals[0].max(0.0);
    if !(vals[d - 1] > 1e-12 * top) {
        return Err(Error::Numerical(format!(
            "probe Gram matrix is singular (smallest eigenvalue {:e}); use a positive ridge",
            vals[d - 1]
        )));
    }
    let raw = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .map_or_else(|| linalg::solve_vec(&gram, &rhs), Ok)?;
    let normalized = TaskVector::normalized(&raw);
    Ok(InferredTask { raw, normalized })
}

/// Greedy policy over all library entries plus, per state, the entry that
/// attained the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct GpiDecision {
    pub policy: DeterministicPolicy,
    pub source: Vec<usize>,
}

/// `pi(s) = argmax_a max_i psi_i(s, a)^T z`; ties go to the lowest action,
/// then the lowest library index.
pub fn gpi_decision(library: &PolicyLibrary, z: &DVector<f64>) -> Result<GpiDecision> {
    check_dim("GPI task vector", library.dim(), z.len())?;
    let qs = library
        .entries()
        .iter()
        .map(|e| e.sf.q_values(z))
        .collect::<Result<Vec<_>>>()?;
    let (n, m) = (library.n_states(), library.n_actions());
    let best = DMatrix::from_fn(n, m, |s, a| qs.iter().map(|q| q[(s, a)]).fold(f64::NEG_INFINITY, f64::max));
    let actions = greedy_actions(&best);
    let source = actions
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            let target = best[(s, a)];
            qs.iter().position(|q| q[(s, a)] == target).unwrap_or(0)
        })
        .collect();
    Ok(GpiDecision {
        policy: DeterministicPolicy::new(actions, m)?,
        source,
    })
}

pub fn gpi_policy(library: &PolicyLibrary, z: &DVector<f64>) -> Result<DeterministicPolicy> {
    Ok(gpi_decision(library, z)?.policy)
}

/// Optimal discounted return from the initial distribution.
pub fn oracle_return(mdp: &TabularMdp, reward: &DVector<f64>, tol: f64) -> Result<f64> {
    let vi = value_iteration(mdp, reward, tol)?;
    evaluate_policy_return(mdp, &vi.policy, reward)
}

/// `1 - (oracle - ret) / |oracle|`, which is `ret / oracle` for positive
/// oracles. A vanishing oracle gives 1 when matched and `-inf` otherwise.
pub fn oracle_ratio(ret: f64, oracle: f64) -> f64 {
    if oracle.abs() < 1e-12 {
        if ret >= oracle - 1e-9 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - (oracle - ret) / oracle.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub ret: f64,
    pub oracle: f64,
    pub ratio: f64,
    pub inferred: InferredTask,
    pub policy: DeterministicPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub probe: ProbeSpec,
    pub ridge: f64,
    pub tol: f64,
}

impl EvalSettings {
    pub fn default_for(n_states: usize) -> Self {
        Self {
            probe: ProbeSpec::default_for(n_states),
            ridge: DEFAULT_RIDGE,
            tol: DEFAULT_VI_TOL,
        }
    }
}

/// Probe the reward, infer `z`, act by GPI and score the policy exactly.
/// `oracle` may be supplied when already known for this reward.
pub fn zero_shot_eval_with_oracle(
    mdp: &TabularMdp,
    library: &PolicyLibrary,
    features: &FeatureMap,
    reward: &DVector<f64>,
    settings: EvalSettings,
    seed: u64,
    oracle: Option<f64>,
) -> Result<ZeroShotResult> {
    check_dim("reward", mdp.n_states(), reward.len())?;
    library.check_compatible(mdp, features)?;
    let probe = RewardProbe::sample(reward, settings.probe, seed)?;
    let inferred = infer_task_vector(&probe, features, settings.ridge)?;
    let policy = gpi_policy(library, &inferred.raw)?;
    let ret = evaluate_policy_return(mdp, &policy, reward)?;
    let oracle = match oracle {
        Some(o) => o,
        None => oracle_return(mdp, reward, settings.tol)?,
    };
    Ok(ZeroShotResult {
        ret,
        oracle,
        ratio: oracle_ratio(ret, oracle),
        inferred,
        policy,
    })
}

pub fn zero_shot_eval(
    mdp: &TabularMdp,
    library: &PolicyLibrary,
    features: &FeatureMap,
    reward: &DVector<f64>,
    settings: EvalSettings,
    seed: u64,
) -> Result<ZeroShotResult> {
    zero_shot_eval_with_oracle(mdp, library, features, reward, settings, seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::onehot_features;
    use crate::mdp::{policy_values, random_mdp};
    use crate::tasks::Provenance;
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn unit(v: Vec<f64>) -> TaskVector {
        TaskVector::normalized(&DVector::from_vec(v)).unwrap()
    }

    fn set(vs: Vec<TaskVector>) -> TaskVectorSet {
        TaskVectorSet::new(vs, Provenance::Uniform).unwrap()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMap {
        let mut r = rng::stream(seed, "feat", 0);
        FeatureMap::new(DMatrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal))).unwrap()
    }

    fn best_by_enumeration(mdp: &TabularMdp, reward: &DVector<f64>) -> f64 {
        DeterministicPolicy::enumerate(mdp.n_states(), mdp.n_actions())
            .map(|p| evaluate_policy_return(mdp, &p, reward).unwrap())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn single_task_maximizes_visitation() {
        let mdp = random_mdp(3, 2, 0.9, 1);
        let phi = onehot_features(&mdp);
        let lib = train_policy_library(&mdp, &phi, &set(vec![unit(vec![0.0, 1.0, 0.0])]), 1e-10).unwrap();
        assert_eq!(lib.len(), 1);
        let e1 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let ours = policy_values(&mdp, &lib.entries()[0].policy, &e1).unwrap();
        for p in DeterministicPolicy::enumerate(3, 2) {
            let v = policy_values(&mdp, &p, &e1).unwrap();
            assert!(v.iter().zip(ours.iter()).all(|(a, b)| *a <= b + 1e-9));
        }
        assert!(lib.entries()[0].sf.bellman_residual(&mdp, &lib.entries()[0].policy, &phi).unwrap() <= 1e-9);
    }

    #[test]
    fn duplicate_tasks_give_identical_entries() {
        let mdp = random_mdp(5, 3, 0.9, 2);
        let phi = random_features(5, 3, 2);
        let z = unit(vec![0.3, -0.2, 0.9]);
        let lib = train_policy_library(&mdp, &phi, &set(vec![z.clone(), z]), 1e-10).unwrap();
        assert_eq!(lib.entries()[0], lib.entries()[1]);
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let mut r = rng::stream(5, "z", 0);
        for seed in 0..10 {
            let mdp = random_mdp(2, 2, 0.8, seed);
            let phi = random_features(2, 2, seed);
            let z = TaskVector::normalized(&DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal))).unwrap();
            let lib = train_policy_library(&mdp, &phi, &set(vec![z.clone()]), 1e-12).unwrap();
            let reward = phi.reward(z.vector()).unwrap();
            let got = evaluate_policy_return(&mdp, &lib.entries()[0].policy, &reward).unwrap();
            assert_abs_diff_eq!(got, best_by_enumeration(&mdp, &reward), epsilon = 1e-9);
        }
    }

    #[test]
    fn realizable_reward_is_recovered() {
        let mdp = random_mdp(6, 2, 0.9, 3);
        let phi = crate::features::random_orthonormal_features(6, 4, 3).unwrap();
        let z = DVector::from_vec(vec![0.5, -1.0, 0.25, 2.0]);
        let reward = phi.reward(&z).unwrap();
        let probe = RewardProbe::sample(&reward, ProbeSpec::exhaustive(6), 1).unwrap();
        let got = infer_task_vector(&probe, &phi, 1e-8).unwrap();
        assert_abs_diff_eq!(got.raw, z, epsilon = 1e-6);
        let _ = mdp;
    }

    #[test]
    fn zero_reward_gives_zero_vector() {
        let phi = random_features(5, 3, 4);
        let probe = RewardProbe::new((0..5).map(|s| (s, 0.0)).collect()).unwrap();
        let got = infer_task_vector(&probe, &phi, 1e-6).unwrap();
        assert_eq!(got.raw, DVector::zeros(3));
        assert!(got.normalized.is_none());
    }

    #[test]
    fn inference_matches_qr_least_squares() {
        for seed in 0..5 {
            let phi = random_features(20, 4, seed);
            let mut r = rng::stream(seed, "probe-test", 0);
            let labeled: Vec<(usize, f64)> = (0..30)
                .map(|_| (r.random_range(0..20), r.sample::<f64, _>(StandardNormal)))
                .collect();
            let probe = RewardProbe::new(labeled.clone()).unwrap();
            let got = infer_task_vector(&probe, &phi, 0.0).unwrap();
            let a = DMatrix::from_fn(30, 4, |i, j| phi.matrix()[(labeled[i].0, j)]);
            let b = DVector::from_iterator(30, labeled.iter().map(|l| l.1));
            let qr = a.qr();
            let qtb = qr.q().transpose() * b;
            let oracle = qr.r().solve_upper_triangular(&qtb).unwrap();
            assert_abs_diff_eq!(got.raw, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn singular_probe_without_ridge_fails() {
        let phi = random_features(5, 3, 6);
        let probe = RewardProbe::new(vec![(0, 1.0), (0, 2.0)]).unwrap();
        assert!(matches!(infer_task_vector(&probe, &phi, 0.0), Err(Error::Numerical(_))));
        assert!(infer_task_vector(&probe, &phi, 1e-6).is_ok());
        assert!(RewardProbe::new(vec![]).is_err());
    }

    #[test]
    fn singleton_gpi_is_plain_argmax() {
        let mdp = random_mdp(5, 3, 0.9, 7);
        let phi = random_features(5, 3, 7);
        let z = unit(vec![1.0, 2.0, -1.0]);
        let lib = train_policy_library(&mdp, &phi, &set(vec![z.clone()]), 1e-10).unwrap();
        let probe_z = DVector::from_vec(vec![-0.4, 0.1, 0.7]);
        let got = gpi_policy(&lib, &probe_z).unwrap();
        let q = lib.entries()[0].sf.q_values(&probe_z).unwrap();
        assert_eq!(got.actions(), greedy_actions(&q).as_slice());
        // on its own task, GPI over a singleton reproduces the trained policy
        assert_eq!(gpi_policy(&lib, z.vector()).unwrap(), lib.entries()[0].policy);
    }

    #[test]
    fn gpi_dominates_members() {
        let mut r = rng::stream(8, "gpi", 0);
        for seed in 0..20 {
            let mdp = random_mdp(3, 2, 0.9, seed);
            let phi = random_features(3, 2, seed + 100);
            let zs: Vec<TaskVector> = (0..2)
                .map(|_| TaskVector::normalized(&DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal))).unwrap())
                .collect();
            let lib = train_policy_library(&mdp, &phi, &set(zs), 1e-12).unwrap();
            let z_test = DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
            let reward = phi.reward(&z_test).unwrap();
            let gpi = gpi_policy(&lib, &z_test).unwrap();
            let gv = policy_values(&mdp, &gpi, &reward).unwrap();
            for e in lib.entries() {
                let ev = policy_values(&mdp, &e.policy, &reward).unwrap();
                assert!(gv.iter().zip(ev.iter()).all(|(g, v)| *g >= v - 1e-9));
            }
        }
    }

    #[test]
    fn covered_realizable_task_is_optimal() {
        let mdp = random_mdp(8, 3, 0.9, 9);
        let phi = crate::features::random_orthonormal_features(8, 4, 9).unwrap();
        let phi = crate::features::whiten_features(&phi, &crate::features::uniform_rho(8)).unwrap();
        let z = unit(vec![0.2, -0.5, 0.7, 0.1]);
        let other = unit(vec![1.0, 0.0, 0.0, 0.0]);
        let lib = train_policy_library(&mdp, &phi, &set(vec![other, z.clone()]), 1e-10).unwrap();
        let reward = phi.reward(z.vector()).unwrap();
        let settings = EvalSettings {
            probe: ProbeSpec::exhaustive(8),
            ridge: 1e-8,
            tol: 1e-10,
        };
        let out = zero_shot_eval(&mdp, &lib, &phi, &reward, settings, 1).unwrap();
        assert_abs_diff_eq!(out.ratio, 1.0, epsilon = 1e-6);
        assert!(out.oracle >= out.ret - 1e-9);
    }

    fn line_mdp() -> TabularMdp {
        // 4 states on a line; action 0 moves left, action 1 moves right; start at state 1
        let mut left = DMatrix::zeros(4, 4);
        let mut right = DMatrix::zeros(4, 4);
        for s in 0..4_usize {
            left[(s, s.saturating_sub(1))] = 1.0;
            right[(s, (s + 1).min(3))] = 1.0;
        }
        let mut mu = DVector::zeros(4);
        mu[1] = 1.0;
        TabularMdp::new(vec![left, right], mu, 0.9).unwrap()
    }

    #[test]
    fn orthogonal_library_is_suboptimal() {
        let mdp = line_mdp();
        let phi = onehot_features(&mdp);
        let lib = train_policy_library(&mdp, &phi, &set(vec![unit(vec![1.0, 0.0, 0.0, 0.0])]), 1e-10).unwrap();
        let reward = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
        let settings = EvalSettings {
            probe: ProbeSpec::exhaustive(4),
            ridge: 1e-8,
            tol: 1e-10,
        };
        let out = zero_shot_eval(&mdp, &lib, &phi, &reward, settings, 0).unwrap();
        assert_abs_diff_eq!(out.oracle, best_by_enumeration(&mdp, &reward), epsilon = 1e-9);
        assert!(out.ratio < 1.0, "{}", out.ratio);
    }

    #[test]
    fn exhaustive_probe_is_full_regression() {
        let phi = random_features(7, 3, 10);
        let mut r = rng::stream(10, "reward", 0);
        let reward = DVector::from_fn(7, |_, _| r.sample::<f64, _>(StandardNormal));
        let probe = RewardProbe::sample(&reward, ProbeSpec::exhaustive(7), 3).unwrap();
        let got = infer_task_vector(&probe, &phi, 0.0).unwrap();
        let m = phi.matrix();
        let full = linalg::solve_vec(&(m.transpose() * m), &(m.transpose() * &reward)).unwrap();
        assert_abs_diff_eq!(got.raw, full, epsilon = 1e-9);
        assert!(RewardProbe::sample(&reward, ProbeSpec { size: 8, with_replacement: false }, 3).is_err());
    }

    #[test]
    fn oracle_cases() {
        let mdp = random_mdp(4, 3, 0.9, 11);
        let c = DVector::from_element(4, 2.5);
        assert_abs_diff_eq!(oracle_return(&mdp, &c, 1e-10).unwrap(), 25.0, epsilon = 1e-8);
        for seed in 0..10 {
            let mdp = random_mdp(2, 2, 0.85, seed + 50);
            let mut r = rng::stream(seed, "oracle", 0);
            let reward = DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
            assert_abs_diff_eq!(
                oracle_return(&mdp, &reward, 1e-12).unwrap(),
                best_by_enumeration(&mdp, &reward),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(oracle_ratio(5.0, 10.0), 0.5);
        assert_eq!(oracle_ratio(-12.0, -10.0), 0.8);
        assert_eq!(oracle_ratio(0.0, 0.0), 1.0);
        assert_eq!(oracle_ratio(-1.0, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn library_rejects_foreign_features() {
        let mdp = random_mdp(4, 2, 0.9, 12);
        let phi = random_features(4, 2, 12);
        let lib = train_policy_library(&mdp, &phi, &set(vec![unit(vec![1.0, 0.0])]), 1e-10).unwrap();
        let other = random_features(4, 2, 13);
        let reward = DVector::from_element(4, 1.0);
        let settings = EvalSettings::default_for(4);
        assert!(zero_shot_eval(&mdp, &lib, &other, &reward, settings, 0).is_err());
        assert!(zero_shot_eval(&mdp, &lib, &phi, &reward, settings, 0).is_ok());
    }
}
