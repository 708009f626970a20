//! Spectrum of the behavioral space, the uniform-task variance identity and
//! signal-dilution curves.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_subtrajectories, Dataset, LengthRange};
use crate::error::{check_dim, Error, Result};
use crate::features::FeatureFamily;
use crate::gmm::Gmm;
use crate::linalg;
use crate::mdp::{feature_occupancy, DeterministicPolicy, FeatureMap, TabularMdp};
use crate::rng;
use crate::tasks::{discounted_feature_sum, sample_btd, sample_uniform_sphere, TaskVector, TaskVectorSet};

/// Eigenvalues of a behavioral covariance, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub dim: usize,
    pub trace: f64,
    pub normalized_trace: f64,
    pub eigenvalues: Vec<f64>,
}

impl SpectrumReport {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() == 0 {
            return Err(Error::InvalidArgument("covariance must be square and non-empty".into()));
        }
        let (vals, _) = linalg::sorted_symmetric_eigen(cov);
        let d = cov.nrows();
        let trace = cov.trace();
        Ok(Self {
            dim: d,
            trace,
            normalized_trace: trace / d as f64,
            eigenvalues: vals.iter().copied().collect(),
        })
    }
}

/// `(1/d) Tr(Sigma)`: the expected return variance under uniform tasks.
pub fn expected_uniform_task_variance(report: &SpectrumReport) -> f64 {
    report.trace / report.dim as f64
}

/// One deterministic policy with an independent uniform action per state.
pub fn random_policy(n_states: usize, n_actions: usize, seed: u64, index: u64) -> DeterministicPolicy {
    let mut r = rng::stream(seed, "policy-population", index);
    let actions = (0..n_states).map(|_| r.random_range(0..n_actions)).collect();
    DeterministicPolicy::new(actions, n_actions).expect("actions drawn in range")
}

/// Exact feature occupancies of `n_policies` random deterministic policies.
pub fn policy_occupancies(
    mdp: &TabularMdp,
    features: &FeatureMap,
    n_policies: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if n_policies < 2 {
        return Err(Error::InvalidArgument("need at least two policies".into()));
    }
    (0..n_policies as u64)
        .into_par_iter()
        .map(|i| {
            let p = random_policy(mdp.n_states(), mdp.n_actions(), seed, i);
            Ok(feature_occupancy(mdp, &p, features)?.0)
        })
        .collect()
}

pub fn behavioral_covariance_policies(
    mdp: &TabularMdp,
    features: &FeatureMap,
    n_policies: usize,
    seed: u64,
) -> Result<SpectrumReport> {
    let occ = policy_occupancies(mdp, features, n_policies, seed)?;
    SpectrumReport::from_covariance(&linalg::covariance(&occ)?)
}

/// Unnormalized discounted feature sums of sampled subtrajectories.
pub fn subtrajectory_occupancies(
    dataset: &Dataset,
    features: &FeatureMap,
    gamma: f64,
    n_sub: usize,
    lengths: LengthRange,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let subs = sample_subtrajectories(dataset, n_sub, lengths, seed)?;
    subs.par_iter()
        .map(|s| discounted_feature_sum(&s.states, features, gamma))
        .collect()
}

/// Covariance of the unnormalized occupancies `psi~` of subtrajectories.
pub fn behavioral_covariance_subtraj(
    dataset: &Dataset,
    features: &FeatureMap,
    gamma: f64,
    n_sub: usize,
    lengths: LengthRange,
    seed: u64,
) -> Result<SpectrumReport> {
    let occ = subtrajectory_occupancies(dataset, features, gamma, n_sub, lengths, seed)?;
    SpectrumReport::from_covariance(&linalg::covariance(&occ)?)
}

/// Same sample as [`behavioral_covariance_subtraj`] but over the unit task
/// vectors `z = psi~ / ||psi~||`; vanishing occupancies are skipped.
pub fn behavioral_covariance_subtraj_normalized(
    dataset: &Dataset,
    features: &FeatureMap,
    gamma: f64,
    n_sub: usize,
    lengths: LengthRange,
    seed: u64,
) -> Result<SpectrumReport> {
    let occ = subtrajectory_occupancies(dataset, features, gamma, n_sub, lengths, seed)?;
    let units: Vec<DVector<f64>> = occ
        .iter()
        .filter_map(TaskVector::normalized)
        .map(TaskVector::into_inner)
        .collect();
    if units.is_empty() {
        return Err(Error::DegenerateFeatures {
            rank: 0,
            dim: features.dim(),
        });
    }
    SpectrumReport::from_covariance(&linalg::covariance(&units)?)
}

/// Population variance over policies of the returns `psi^T z`.
pub fn return_variance(occupancies: &[DVector<f64>], z: &DVector<f64>) -> Result<f64> {
    if occupancies.is_empty() {
        return Err(Error::InvalidArgument("no occupancies".into()));
    }
    let mut returns = Vec::with_capacity(occupancies.len());
    for psi in occupancies {
        check_dim("task vector", psi.len(), z.len())?;
        returns.push(psi.dot(z));
    }
    let n = returns.len() as f64;
    // shift by the first return so identical returns give exactly zero
    let shift = returns[0];
    let mean = returns.iter().map(|r| r - shift).sum::<f64>() / n;
    Ok(returns.iter().map(|r| (r - shift - mean).powi(2)).sum::<f64>() / n)
}

/// Where the Monte Carlo task vectors come from.
#[derive(Debug, Clone, Copy)]
pub enum TaskSource<'a> {
    Uniform,
    Btd(&'a Gmm),
    Fixed(&'a TaskVectorSet),
}

impl TaskSource<'_> {
    fn draw(&self, d: usize, n: usize, seed: u64) -> Result<TaskVectorSet> {
        match self {
            TaskSource::Uniform => sample_uniform_sphere(d, n, seed),
            TaskSource::Btd(g) => {
                check_dim("GMM dimension", d, g.dim())?;
                sample_btd(g, n, seed)
            }
            TaskSource::Fixed(set) => {
                check_dim("task set dimension", d, set.dim())?;
                Ok((*set).clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloVariance {
    pub estimate: f64,
    pub std_error: f64,
    /// `z^T Sigma z` for every sampled `z`, in draw order.
    pub per_task: Vec<f64>,
    /// Covariance of the shared policy sample.
    pub policy_covariance: DMatrix<f64>,
}

/// Average over sampled `z` of `Var_pi(psi^T z)` on one shared random policy
/// sample, with the standard error of that average.
pub fn monte_carlo_task_variance(
    mdp: &TabularMdp,
    features: &FeatureMap,
    source: TaskSource<'_>,
    n_z: usize,
    n_policies: usize,
    seed: u64,
) -> Result<MonteCarloVariance> {
    if n_z < 2 {
        return Err(Error::InvalidArgument("need at least two task vectors".into()));
    }
    let occ = policy_occupancies(mdp, features, n_policies, seed)?;
    let tasks = source.draw(features.dim(), n_z, seed)?;
    let per_task = tasks
        .iter()
        .map(|z| return_variance(&occ, z))
        .collect::<Result<Vec<_>>>()?;
    let n = per_task.len() as f64;
    let estimate = per_task.iter().sum::<f64>() / n;
    let sample_var = per_task.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloVariance {
        estimate,
        std_error: (sample_var / n).sqrt(),
        per_task,
        policy_covariance: linalg::covariance(&occ)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    Policies { n_policies: usize },
    Subtrajectories { n_sub: usize, lengths: LengthRange },
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Policies { .. } => "policies",
            Estimator::Subtrajectories { .. } => "subtrajectories",
        }
    }
}

/// Spectrum per feature dimension, features rebuilt at every `d` with the
/// same seed.
pub fn dilution_curve(
    mdp: &TabularMdp,
    dataset: Option<&Dataset>,
    family: FeatureFamily,
    dims: &[usize],
    estimator: Estimator,
    seed: u64,
) -> Result<Vec<SpectrumReport>> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no dimensions given".into()));
    }
    if dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("dims must be strictly ascending".into()));
    }
    dims.iter()
        .map(|&d| {
            let features = family.build(mdp, dataset, d, seed)?;
            match estimator {
                Estimator::Policies { n_policies } => behavioral_covariance_policies(mdp, &features, n_policies, seed),
                Estimator::Subtrajectories { n_sub, lengths } => {
                    let ds = dataset.ok_or_else(|| {
                        Error::InvalidArgument("the subtrajectory estimator needs a dataset".into())
                    })?;
                    behavioral_covariance_subtraj(ds, &features, mdp.discount(), n_sub, lengths, seed)
                }
            }
        })
        .collect()
}

pub const CSV_EIGENVALUES: usize = 10;

/// `d,trace,normalized_trace,lambda_1..lambda_10`; missing eigenvalues are empty.
pub fn dilution_csv(reports: &[SpectrumReport]) -> String {
    let mut out = String::from("d,trace,normalized_trace");
    for i in 1..=CSV_EIGENVALUES {
        let _ = write!(out, ",lambda_{i}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{},{:e},{:e}", r.dim, r.trace, r.normalized_trace);
        for i in 0..CSV_EIGENVALUES {
            match r.eigenvalues.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v:e}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
