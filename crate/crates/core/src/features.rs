//! State-feature families.
//!
//! Every learned-encoder objective considered here is a matrix factorization
//! whose global optimum in the tabular case is a truncated SVD, so the
//! spectral families compute that optimum directly:
//!
//! * `onehot`: `Phi = I`.
//! * `lra_p`: top right singular directions of the empirical transition matrix.
//! * `lra_sr`: top right singular directions of the behavior successor
//!   measure `(I - gamma P_beta)^{-1}`; also the tabular stand-in for
//!   forward-backward features.
//! * `random_orthonormal`: seeded random orthonormal columns.
//!
//! [`FeatureFamily::build`] adds the sweep conventions: columns beyond the
//! effective rank are padded with random orthonormal directions, and
//! dimensions above `n_states` are reached by an isometric random embedding
//! of the full-rank features.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{empirical_behavior_policy, empirical_transition_matrix, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, SortedSvd};
use crate::mdp::{FeatureMap, StochasticPolicy, TabularMdp};
use crate::rng;

/// Ridge added to the feature Gram matrix before whitening.
pub const WHITENING_RIDGE: f64 = 1e-8;
/// Relative eigenvalue/singular-value threshold defining effective rank.
pub const RANK_TOL: f64 = 1e-10;

pub fn onehot_features(mdp: &TabularMdp) -> FeatureMap {
    let n = mdp.n_states();
    FeatureMap::new(DMatrix::identity(n, n)).expect("identity is a valid feature map")
}

/// Rank-`d` factorization `target ~ left * right^T` from a truncated SVD,
/// with `sqrt(sigma)` split evenly between the factors.
#[derive(Debug, Clone)]
pub struct LowRankFactorization {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// All singular values of the target, descending.
    pub full_spectrum: DVector<f64>,
}

impl LowRankFactorization {
    fn from_target(target: &DMatrix<f64>, d: usize) -> Result<Self> {
        let n = target.ncols();
        if d == 0 || d > n {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {d} must lie in [1, {n}]"
            )));
        }
        let SortedSvd {
            mut u,
            singular_values,
            mut v,
        } = linalg::sorted_svd(target)?;
        linalg::fix_signs(&mut u, &mut v);
        let root = singular_values.rows(0, d).map(f64::sqrt);
        let left = DMatrix::from_fn(u.nrows(), d, |r, c| u[(r, c)] * root[c]);
        let right = DMatrix::from_fn(v.nrows(), d, |r, c| v[(r, c)] * root[c]);
        Ok(Self {
            left,
            right,
            singular_values: singular_values.rows(0, d).into_owned(),
            full_spectrum: singular_values,
        })
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.left * self.right.transpose()
    }

    /// Squared Frobenius norm of the discarded spectrum.
    pub fn truncation_error(&self) -> f64 {
        self.full_spectrum
            .iter()
            .skip(self.singular_values.len())
            .map(|s| s * s)
            .sum()
    }

    /// Number of retained singular values above `RANK_TOL * sigma_max`.
    pub fn effective_rank(&self) -> usize {
        let max = self.full_spectrum.get(0).copied().unwrap_or(0.0);
        self.singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL * max)
            .count()
    }

    pub fn features(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.right.clone())
    }
}

/// Factorization of an empirical transition matrix `P_hat(s'|s) ~ f(s)^T phi(s')`.
pub fn lra_p_factorization(p_hat: &DMatrix<f64>, d: usize) -> Result<LowRankFactorization> {
    if p_hat.nrows() != p_hat.ncols() {
        return Err(Error::InvalidArgument("transition matrix must be square".into()));
    }
    for (s, row) in p_hat.row_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("P_hat row {s} does not sum to 1")));
        }
    }
    LowRankFactorization::from_target(p_hat, d)
}

/// `phi` = top-`d` right singular vectors of `P_hat`, scaled by `sqrt(sigma)`.
pub fn lra_p_features(p_hat: &DMatrix<f64>, d: usize) -> Result<FeatureMap> {
    lra_p_factorization(p_hat, d)?.features()
}

/// Behavior successor measure `M = (I - gamma P_beta)^{-1}`.
pub fn successor_measure(mdp: &TabularMdp, behavior: &StochasticPolicy) -> Result<DMatrix<f64>> {
    let n = mdp.n_states();
    let p = behavior.transition_matrix(mdp)?;
    let a = DMatrix::identity(n, n) - mdp.discount() * p;
    linalg::solve(&a, &DMatrix::identity(n, n))
}

pub fn lra_sr_factorization(
    mdp: &TabularMdp,
    behavior: &StochasticPolicy,
    d: usize,
) -> Result<LowRankFactorization> {
    LowRankFactorization::from_target(&successor_measure(mdp, behavior)?, d)
}

/// Right factor of the rank-`d` successor-measure SVD, whitened under the
/// uniform state distribution.
pub fn lra_sr_features(mdp: &TabularMdp, behavior: &StochasticPolicy, d: usize) -> Result<FeatureMap> {
    let raw = lra_sr_factorization(mdp, behavior, d)?.features()?;
    whiten_features(&raw, &uniform_rho(mdp.n_states()))
}

/// `d` orthonormal columns from the QR factorization of a seeded Gaussian matrix.
pub fn random_orthonormal_features(n_states: usize, d: usize, seed: u64) -> Result<FeatureMap> {
    if d == 0 || d > n_states {
        return Err(Error::InvalidArgument(format!(
            "feature dimension {d} must lie in [1, {n_states}]"
        )));
    }
    let mut rng = rng::stream(seed, "random-orthonormal", 0);
    FeatureMap::new(linalg::random_orthonormal_columns(n_states, d, &mut rng))
}

pub fn uniform_rho(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// `E_rho[phi phi^T]`.
pub fn feature_second_moment(features: &FeatureMap, rho: &DVector<f64>) -> DMatrix<f64> {
    let phi = features.matrix();
    let weighted = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| phi[(r, c)] * rho[r]);
    linalg::symmetrize(&(phi.transpose() * weighted))
}

/// `Phi W` with `W = (E_rho[phi phi^T] + lambda I)^{-1/2}`.
pub fn whiten_features(features: &FeatureMap, rho: &DVector<f64>) -> Result<FeatureMap> {
    if rho.len() != features.n_states() {
        return Err(Error::DimensionMismatch {
            context: "whitening distribution",
            expected: features.n_states(),
            actual: rho.len(),
        });
    }
    if (rho.sum() - 1.0).abs() > 1e-9 || rho.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArgument("whitening distribution must be a probability vector".into()));
    }
    let d = features.dim();
    let gram = feature_second_moment(features, rho);
    let (values, vectors) = linalg::sorted_symmetric_eigen(&gram);
    let rank = linalg::psd_rank(&values, RANK_TOL);
    if rank < d {
        return Err(Error::DegenerateFeatures { rank, dim: d });
    }
    let w = linalg::spectral_map(&values, &vectors, |x| 1.0 / (x.max(0.0) + WHITENING_RIDGE).sqrt());
    FeatureMap::new(features.matrix() * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Onehot,
    LraP,
    LraSr,
    RandomOrthonormal,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 4] = [
        FeatureFamily::Onehot,
        FeatureFamily::LraP,
        FeatureFamily::LraSr,
        FeatureFamily::RandomOrthonormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFamily::Onehot => "onehot",
            FeatureFamily::LraP => "lra_p",
            FeatureFamily::LraSr => "lra_sr",
            FeatureFamily::RandomOrthonormal => "random_orthonormal",
        }
    }

    /// Unwhitened basis of dimension `d <= n_states`, padded with random
    /// orthonormal columns when the spectral target has lower rank.
    fn raw_basis(self, mdp: &TabularMdp, dataset: Option<&Dataset>, d: usize, seed: u64) -> Result<DMatrix<f64>> {
        let n = mdp.n_states();
        let needs_data = || {
            dataset.ok_or_else(|| {
                Error::InvalidArgument(format!("feature family {} needs a dataset", self.name()))
            })
        };
        let factorization = match self {
            FeatureFamily::Onehot => {
                if d != n {
                    return Err(Error::InvalidArgument(format!(
                        "onehot features have dimension n_states = {n}, requested {d}"
                    )));
                }
                return Ok(DMatrix::identity(n, n));
            }
            FeatureFamily::RandomOrthonormal => {
                return Ok(random_orthonormal_features(n, d, seed)?.matrix().clone());
            }
            FeatureFamily::LraP => {
                let ds = needs_data()?;
                ds.check_mdp(mdp)?;
                lra_p_factorization(&empirical_transition_matrix(ds, n)?.matrix, d)?
            }
            FeatureFamily::LraSr => {
                let ds = needs_data()?;
                ds.check_mdp(mdp)?;
                lra_sr_factorization(mdp, &empirical_behavior_policy(ds)?, d)?
            }
        };
        let rank = factorization.effective_rank();
        if rank == d {
            return Ok(factorization.right);
        }
        // orthonormal basis of the retained directions, then random completion
        let basis = orthonormalize(&factorization.right.columns(0, rank).into_owned());
        let mut rng = rng::stream(seed, "feature-padding", d as u64);
        linalg::complete_orthonormal(&basis, d - basis.ncols(), &mut rng)
    }

    /// Whitened features of dimension `d` (under the uniform state distribution).
    ///
    /// For `d > n_states` the full-rank `n_states`-dimensional features are
    /// embedded isometrically in `R^d` by a seeded matrix with orthonormal
    /// rows; their second moment is then a rank-`n_states` projection rather
    /// than `I_d`.
    pub fn build(self, mdp: &TabularMdp, dataset: Option<&Dataset>, d: usize, seed: u64) -> Result<FeatureMap> {
        let n = mdp.n_states();
        if d == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        let rho = uniform_rho(n);
        let base_dim = d.min(n);
        let base = whiten_features(&FeatureMap::new(self.raw_basis(mdp, dataset, base_dim, seed)?)?, &rho)?;
        if d <= n {
            return Ok(base);
        }
        let mut rng = rng::stream(seed, "feature-embedding", d as u64);
        let embed = linalg::random_orthonormal_columns(d, n, &mut rng);
        FeatureMap::new(base.matrix() * embed.transpose())
    }
}

fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let SortedSvd { u, singular_values, .. } = linalg::sorted_svd(m).expect("svd of a finite matrix");
    let max = singular_values.get(0).copied().unwrap_or(0.0);
    let keep = singular_values.iter().filter(|&&s| s > RANK_TOL * max).count();
    u.columns(0, keep).into_owned()
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature family '{s}'")))
    }
}
