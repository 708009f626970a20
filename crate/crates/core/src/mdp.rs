//! Exact tabular MDP machinery: policy-induced transition operators,
//! discounted occupancies, successor features and value iteration.
//!
//! Rewards are functions of the current state only. The return of a policy
//! is `E_{s0 ~ mu}[sum_t gamma^t r(s_t)]`, so with `gamma = 0` every action is
//! equivalent. All quantities are computed by direct linear solves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

const PROB_TOL: f64 = 1e-12;
/// Relative slack used when comparing Q-values for argmax ties.
const TIE_TOL: f64 = 1e-12;

pub const DEFAULT_DISCOUNT: f64 = 0.99;

/// Finite MDP `<S, A, P, mu, gamma>`.
///
/// `transitions[a]` is the `n_states x n_states` row-stochastic matrix of
/// action `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<DMatrix<f64>>,
    initial_dist: DVector<f64>,
    discount: f64,
}

fn check_distribution(what: &str, row: impl Iterator<Item = f64>) -> Result<()> {
    let mut sum = 0.0;
    for p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        initial_dist: DVector<f64>,
        discount: f64,
    ) -> Result<Self> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(Error::InvalidArgument("MDP needs at least one action".into()));
        }
        let n_states = initial_dist.len();
        if n_states == 0 {
            return Err(Error::InvalidArgument("MDP needs at least one state".into()));
        }
        for (a, p) in transitions.iter().enumerate() {
            if p.nrows() != n_states || p.ncols() != n_states {
                return Err(Error::DimensionMismatch {
                    context: "transition matrix",
                    expected: n_states,
                    actual: if p.nrows() != n_states { p.nrows() } else { p.ncols() },
                });
            }
            for s in 0..n_states {
                check_distribution(&format!("transitions[{a}][{s}]"), p.row(s).iter().copied())?;
            }
        }
        check_distribution("initial_dist", initial_dist.iter().copied())?;
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            initial_dist,
            discount,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transitions(&self, action: usize) -> &DMatrix<f64> {
        &self.transitions[action]
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Same dynamics with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(self.transitions.clone(), self.initial_dist.clone(), discount)
    }

    /// SHA-256 over the canonical little-endian encoding of the MDP.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.n_states as u64).to_le_bytes());
        h.update((self.n_actions as u64).to_le_bytes());
        for p in &self.transitions {
            for s in 0..self.n_states {
                for t in 0..self.n_states {
                    h.update(p[(s, t)].to_le_bytes());
                }
            }
        }
        for x in self.initial_dist.iter() {
            h.update(x.to_le_bytes());
        }
        h.update(self.discount.to_le_bytes());
        h.finalize().into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MdpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.try_into()
    }

    /// Expected value of `values` after taking `action` in `state`.
    pub fn expected_next(&self, state: usize, action: usize, values: &DVector<f64>) -> f64 {
        self.transitions[action].row(state).dot(&values.transpose())
    }
}

/// JSON layout: transitions are nested arrays indexed `[action][state][next_state]`.
#[derive(Debug, Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<Vec<f64>>>,
    initial_dist: Vec<f64>,
    discount: f64,
}

impl From<&TabularMdp> for MdpDocument {
    fn from(m: &TabularMdp) -> Self {
        Self {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transitions: m
                .transitions
                .iter()
                .map(|p| p.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            initial_dist: m.initial_dist.iter().copied().collect(),
            discount: m.discount,
        }
    }
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        check_dim("transitions (actions)", doc.n_actions, doc.transitions.len())?;
        check_dim("initial_dist", doc.n_states, doc.initial_dist.len())?;
        let mut transitions = Vec::with_capacity(doc.n_actions);
        for rows in &doc.transitions {
            check_dim("transitions (states)", doc.n_states, rows.len())?;
            let mut m = DMatrix::zeros(doc.n_states, doc.n_states);
            for (s, row) in rows.iter().enumerate() {
                check_dim("transitions (next states)", doc.n_states, row.len())?;
                for (t, &p) in row.iter().enumerate() {
                    m[(s, t)] = p;
                }
            }
            transitions.push(m);
        }
        TabularMdp::new(
            transitions,
            DVector::from_vec(doc.initial_dist),
            doc.discount,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    action_of: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(action_of: Vec<usize>, n_actions: usize) -> Result<Self> {
        if let Some(&a) = action_of.iter().find(|&&a| a >= n_actions) {
            return Err(Error::InvalidArgument(format!(
                "action {a} out of range for {n_actions} actions"
            )));
        }
        Ok(Self { action_of })
    }

    pub fn constant(n_states: usize, action: usize) -> Self {
        Self {
            action_of: vec![action; n_states],
        }
    }

    pub fn action(&self, state: usize) -> usize {
        self.action_of[state]
    }

    pub fn actions(&self) -> &[usize] {
        &self.action_of
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        check_dim("policy length", mdp.n_states, self.action_of.len())?;
        if self.action_of.iter().any(|&a| a >= mdp.n_actions) {
            return Err(Error::InvalidArgument("policy action out of range".into()));
        }
        Ok(())
    }

    /// Every deterministic policy of a small MDP, in lexicographic order.
    pub fn enumerate(n_states: usize, n_actions: usize) -> impl Iterator<Item = Self> {
        let total = (n_actions as u64).pow(n_states as u32);
        (0..total).map(move |mut code| {
            let mut action_of = vec![0; n_states];
            for slot in action_of.iter_mut() {
                *slot = (code % n_actions as u64) as usize;
                code /= n_actions as u64;
            }
            Self { action_of }
        })
    }
}

/// State-conditional action distribution `pi: S -> Delta(A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    probs: DMatrix<f64>,
}

impl StochasticPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            check_distribution(&format!("policy row {s}"), probs.row(s).iter().copied())?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
    pub fn transition_matrix(&self, mdp: &TabularMdp) -> Result<DMatrix<f64>> {
        check_dim("stochastic policy states", mdp.n_states, self.probs.nrows())?;
        check_dim("stochastic policy actions", mdp.n_actions, self.probs.ncols())?;
        let n = mdp.n_states;
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..mdp.n_actions {
                let w = self.probs[(s, a)];
                if w != 0.0 {
                    let row = mdp.transitions[a].row(s) * w;
                    let mut target = p.row_mut(s);
                    target += row;
                }
            }
        }
        Ok(p)
    }
}

/// State embedding matrix, one row `phi(s)` per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(Error::InvalidArgument("feature map must be non-empty".into()));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("feature map has non-finite entries".into()));
        }
        Ok(Self { phi })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn row(&self, state: usize) -> DVector<f64> {
        self.phi.row(state).transpose()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.phi
            .row_iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }

    /// `C_Psi = max_s ||phi(s)|| / (1 - gamma)`, a bound on every feature occupancy.
    pub fn occupancy_bound(&self, discount: f64) -> f64 {
        self.max_row_norm() / (1.0 - discount)
    }

    /// Linear reward `r(s) = phi(s)^T z`.
    pub fn reward(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("task vector", self.dim(), z.len())?;
        Ok(&self.phi * z)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { phi: &self.phi * c }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.n_states() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for r in 0..self.n_states() {
            for c in 0..self.dim() {
                h.update(self.phi[(r, c)].to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Discounted feature expectation `psi^pi` of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOccupancy(pub DVector<f64>);

impl FeatureOccupancy {
    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Successor features `psi(s, a)` of one fixed policy, stored per action as
/// `n_states x d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessorFeatureTable {
    per_action: Vec<DMatrix<f64>>,
}

impl SuccessorFeatureTable {
    pub fn from_per_action(per_action: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = per_action
            .first()
            .ok_or_else(|| Error::InvalidArgument("successor table needs an action".into()))?;
        let (n, d) = first.shape();
        for m in &per_action {
            check_dim("successor table states", n, m.nrows())?;
            check_dim("successor table dim", d, m.ncols())?;
        }
        Ok(Self { per_action })
    }

    pub fn n_states(&self) -> usize {
        self.per_action[0].nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.per_action.len()
    }

    pub fn dim(&self) -> usize {
        self.per_action[0].ncols()
    }

    pub fn action_matrix(&self, action: usize) -> &DMatrix<f64> {
        &self.per_action[action]
    }

    pub fn psi(&self, state: usize, action: usize) -> DVector<f64> {
        self.per_action[action].row(state).transpose()
    }

    /// `Q(s, a) = psi(s, a)^T z` as an `n_states x n_actions` matrix.
    pub fn q_values(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("task vector", self.dim(), z.len())?;
        let n = self.n_states();
        let mut q = DMatrix::zeros(n, self.n_actions());
        for (a, m) in self.per_action.iter().enumerate() {
            q.set_column(a, &(m * z));
        }
        Ok(q)
    }

    /// Largest absolute violation of `psi(s,a) = phi(s) + gamma E[psi(s', pi(s'))]`.
    pub fn bellman_residual(
        &self,
        mdp: &TabularMdp,
        policy: &DeterministicPolicy,
        features: &FeatureMap,
    ) -> Result<f64> {
        policy.check(mdp)?;
        let n = mdp.n_states;
        let on_policy = DMatrix::from_fn(n, self.dim(), |s, k| {
            self.per_action[policy.action(s)][(s, k)]
        });
        let mut worst = 0.0_f64;
        for a in 0..mdp.n_actions {
            let target = features.matrix() + mdp.discount * (&mdp.transitions[a] * &on_policy);
            worst = worst.max((&self.per_action[a] - target).amax());
        }
        Ok(worst)
    }
}

fn check_features(mdp: &TabularMdp, features: &FeatureMap) -> Result<()> {
    check_dim("feature map states", mdp.n_states, features.n_states())
}

/// `P_pi`: row `s` is `P(. | s, pi(s))`.
pub fn policy_transition_matrix(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
) -> Result<DMatrix<f64>> {
    policy.check(mdp)?;
    let n = mdp.n_states;
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        p.set_row(s, &mdp.transitions[policy.action(s)].row(s));
    }
    Ok(p)
}

/// State occupancy `d = (I - gamma P_pi^T)^{-1} mu`; entries sum to `1/(1-gamma)`.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Result<DVector<f64>> {
    let p = policy_transition_matrix(mdp, policy)?;
    occupancy_from_matrix(mdp, &p)
}

pub(crate) fn occupancy_from_matrix(mdp: &TabularMdp, p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.discount * p.transpose();
    linalg::solve_vec(&a, &mdp.initial_dist)
}

/// `psi^pi = Phi^T d^pi`.
pub fn feature_occupancy(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    features: &FeatureMap,
) -> Result<FeatureOccupancy> {
    check_features(mdp, features)?;
    let d = discounted_occupancy(mdp, policy)?;
    Ok(FeatureOccupancy(features.matrix().transpose() * d))
}

/// `J(pi, z) = (psi^pi)^T z`.
pub fn expected_return(psi: &FeatureOccupancy, z: &DVector<f64>) -> Result<f64> {
    check_dim("task vector", psi.0.len(), z.len())?;
    Ok(psi.0.dot(z))
}

/// Exact discounted return of a policy on a state reward.
pub fn evaluate_policy_return(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    reward: &DVector<f64>,
) -> Result<f64> {
    check_dim("reward", mdp.n_states, reward.len())?;
    Ok(reward.dot(&discounted_occupancy(mdp, policy)?))
}

/// State values `V^pi = (I - gamma P_pi)^{-1} r`.
pub fn policy_values(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    reward: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("reward", mdp.n_states, reward.len())?;
    let p = policy_transition_matrix(mdp, policy)?;
    let a = DMatrix::identity(mdp.n_states, mdp.n_states) - mdp.discount * p;
    linalg::solve_vec(&a, reward)
}

/// `Q(s, a) = r(s) + gamma sum_s' P(s'|s,a) V(s')`.
pub fn q_from_values(mdp: &TabularMdp, reward: &DVector<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(mdp.n_states, mdp.n_actions);
    for a in 0..mdp.n_actions {
        let next = &mdp.transitions[a] * values;
        q.set_column(a, &(reward + mdp.discount * next));
    }
    q
}

/// Argmax per row; any action within `TIE_TOL` (relative) of the best counts
/// as tied, and ties resolve to the lowest action index.
pub fn greedy_actions(q: &DMatrix<f64>) -> Vec<usize> {
    q.row_iter()
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = TIE_TOL * best.abs().max(1.0);
            row.iter()
                .position(|&x| x >= best - slack)
                .unwrap_or(0)
        })
        .collect()
}

fn bellman_optimality_residual(mdp: &TabularMdp, reward: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let q = q_from_values(mdp, reward, v);
    q.row_iter()
        .zip(v.iter())
        .map(|(row, &vs)| (row.max() - vs).abs())
        .fold(0.0, f64::max)
}

/// Result of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    pub policy: DeterministicPolicy,
    pub values: DVector<f64>,
    /// `||V - T* V||_inf` of the returned values.
    pub residual: f64,
}

/// Optimal policy and values for a state reward.
///
/// Runs value iteration until the optimality residual drops below `tol`,
/// then polishes with exact policy iteration so the returned values are the
/// exact values of the returned greedy policy.
pub fn value_iteration(mdp: &TabularMdp, reward: &DVector<f64>, tol: f64) -> Result<ValueIterationResult> {
    check_dim("reward", mdp.n_states, reward.len())?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let mut v = DVector::zeros(mdp.n_states);
    let cap = 100_000;
    for _ in 0..cap {
        let q = q_from_values(mdp, reward, &v);
        let next = DVector::from_iterator(mdp.n_states, q.row_iter().map(|r| r.max()));
        let delta = (&next - &v).amax();
        v = next;
        if delta <= tol * (1.0 - mdp.discount).max(1e-3) {
            break;
        }
    }

    let mut policy = DeterministicPolicy {
        action_of: greedy_actions(&q_from_values(mdp, reward, &v)),
    };
    let mut values = policy_values(mdp, &policy, reward)?;
    for _ in 0..200 {
        let improved = DeterministicPolicy {
            action_of: greedy_actions(&q_from_values(mdp, reward, &values)),
        };
        if improved == policy {
            break;
        }
        let improved_values = policy_values(mdp, &improved, reward)?;
        // only accept switches that do not lose value (guards against tie cycling)
        if (&improved_values - &values).min() < -1e-10 * values.amax().max(1.0) {
            break;
        }
        policy = improved;
        values = improved_values;
    }
    let residual = bellman_optimality_residual(mdp, reward, &values);
    if residual > tol {
        return Err(Error::Numerical(format!(
            "value iteration residual {residual:e} exceeds tolerance {tol:e}"
        )));
    }
    Ok(ValueIterationResult {
        policy,
        values,
        residual,
    })
}

/// Successor features of a fixed policy:
/// `psi(s, a) = phi(s) + gamma sum_s' P(s'|s,a) psi(s', pi(s'))`.
pub fn successor_features_for_policy(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    features: &FeatureMap,
) -> Result<SuccessorFeatureTable> {
    check_features(mdp, features)?;
    let p = policy_transition_matrix(mdp, policy)?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.discount * p;
    let on_policy = linalg::solve(&a, features.matrix())?;
    let per_action = mdp
        .transitions
        .iter()
        .map(|pa| features.matrix() + mdp.discount * (pa * &on_policy))
        .collect();
    Ok(SuccessorFeatureTable { per_action })
}


#[cfg(test)]
pub(crate) use tests::random_mdp;
