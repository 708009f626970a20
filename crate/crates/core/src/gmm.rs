//! Full-covariance Gaussian mixture fitted by EM, used as the behavioral
//! task distribution over extracted task vectors.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng::{self, Rng};
use crate::tasks::TaskVectorSet;

/// Minimum covariance eigenvalue enforced after every M-step.
pub const COV_FLOOR: f64 = 1e-6;
/// Components whose weight falls below this are dropped.
pub const MIN_WEIGHT: f64 = 1e-8;

pub const DEFAULT_COMPONENTS: usize = 20;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl PartialEq for Gmm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.covariances == other.covariances
    }
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidArgument("GMM needs at least one component".into()));
        }
        check_dim("GMM means", k, means.len())?;
        check_dim("GMM covariances", k, covariances.len())?;
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("GMM weights must form a probability vector".into()));
        }
        let d = means[0].len();
        let mut factors = Vec::with_capacity(k);
        for (m, c) in means.iter().zip(&covariances) {
            check_dim("GMM mean", d, m.len())?;
            check_dim("GMM covariance", d, c.nrows())?;
            check_dim("GMM covariance", d, c.ncols())?;
            if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::InvalidArgument("GMM covariance is not symmetric".into()));
            }
            let (vals, _) = linalg::sorted_symmetric_eigen(c);
            if vals[d - 1] < COV_FLOOR * (1.0 - 1e-6) {
                return Err(Error::InvalidArgument(format!(
                    "GMM covariance eigenvalue {} below floor {COV_FLOOR}",
                    vals[d - 1]
                )));
            }
            factors.push(
                Cholesky::new(c.clone())
                    .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?,
            );
        }
        Ok(Self {
            weights,
            means,
            covariances,
            factors,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// `log N(x_i | mean_k, cov_k)` for every row `x_i` of `x`.
    fn component_log_densities(&self, k: usize, x: &DMatrix<f64>) -> DVector<f64> {
        let d = self.dim();
        let l = self.factors[k].l();
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let centered_t = DMatrix::from_fn(d, x.nrows(), |r, c| x[(c, r)] - self.means[k][r]);
        let y = l
            .solve_lower_triangular(&centered_t)
            .expect("Cholesky factor has a positive diagonal");
        let norm = -0.5 * (d as f64 * LN_2PI + logdet);
        DVector::from_iterator(x.nrows(), y.column_iter().map(|c| norm - 0.5 * c.norm_squared()))
    }

    /// Mean log-likelihood per point and responsibilities (`N x K`).
    fn e_step(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let n = x.nrows();
        let k = self.n_components();
        let mut logp = DMatrix::zeros(n, k);
        for j in 0..k {
            let col = self.component_log_densities(j, x).add_scalar(self.weights[j].ln());
            logp.set_column(j, &col);
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut row = logp.row_mut(i);
            let max = row.max();
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse;
            row.apply(|v| *v = (*v - lse).exp());
        }
        (total / n as f64, logp)
    }

    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        check_dim("GMM point", self.dim(), z.len())?;
        let x = DMatrix::from_row_slice(1, z.len(), z.as_slice());
        Ok(self.e_step(&x).0)
    }

    /// Mean log-likelihood of the rows of `points`.
    pub fn mean_log_likelihood(&self, points: &[DVector<f64>]) -> Result<f64> {
        let x = stack(points, self.dim())?;
        Ok(self.e_step(&x).0)
    }

    /// One draw from the mixture (not projected).
    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.n_components() - 1;
        for (j, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = j;
                break;
            }
        }
        let g = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.means[comp] + self.factors[comp].l() * g
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GmmDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GmmDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// JSON layout; covariances are stored row-major, one flat array per component.
#[derive(Debug, Serialize, Deserialize)]
struct GmmDocument {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

impl From<&Gmm> for GmmDocument {
    fn from(g: &Gmm) -> Self {
        Self {
            dim: g.dim(),
            weights: g.weights.clone(),
            means: g.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: g
                .covariances
                .iter()
                .map(|c| c.transpose().iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<GmmDocument> for Gmm {
    type Error = Error;

    fn try_from(doc: GmmDocument) -> Result<Self> {
        let d = doc.dim;
        let means = doc
            .means
            .into_iter()
            .map(|m| {
                check_dim("GMM mean", d, m.len())?;
                Ok(DVector::from_vec(m))
            })
            .collect::<Result<Vec<_>>>()?;
        let covariances = doc
            .covariances
            .into_iter()
            .map(|c| {
                check_dim("GMM covariance entries", d * d, c.len())?;
                Ok(DMatrix::from_row_slice(d, d, &c))
            })
            .collect::<Result<Vec<_>>>()?;
        Gmm::new(doc.weights, means, covariances)
    }
}

fn stack(points: &[DVector<f64>], d: usize) -> Result<DMatrix<f64>> {
    for p in points {
        check_dim("GMM data", d, p.len())?;
    }
    Ok(DMatrix::from_fn(points.len(), d, |i, j| points[i][j]))
}

/// Output of [`fit_gmm`].
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: Gmm,
    /// Mean per-point log-likelihood of the parameters at each iteration.
    pub log_likelihood: Vec<f64>,
    /// Components removed because their weight collapsed.
    pub dropped: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub components: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

fn kmeans_plus_plus(x: &DMatrix<f64>, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = x.row(*centers.last().expect("non-empty"));
        for (i, slot) in dist2.iter_mut().enumerate() {
            *slot = slot.min((x.row(i) - last).norm_squared());
        }
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
    }
    centers
}

/// Weighted M-step with the eigenvalue floor; drops collapsed components.
fn m_step(x: &DMatrix<f64>, resp: &DMatrix<f64>) -> Result<(Gmm, usize)> {
    let (n, d) = x.shape();
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut covariances = Vec::new();
    let mut dropped = 0;
    for j in 0..resp.ncols() {
        let r = resp.column(j);
        let nk: f64 = r.sum();
        if nk / (n as f64) < MIN_WEIGHT {
            dropped += 1;
            continue;
        }
        let mean = x.transpose() * r / nk;
        let scaled = DMatrix::from_fn(n, d, |i, c| (x[(i, c)] - mean[c]) * r[i].sqrt());
        let scatter = scaled.transpose() * &scaled / nk;
        let (vals, vecs) = linalg::sorted_symmetric_eigen(&scatter);
        covariances.push(linalg::spectral_map(&vals, &vecs, |v| v.max(COV_FLOOR)));
        means.push(mean);
        weights.push(nk);
    }
    if weights.is_empty() {
        return Err(Error::Numerical("every GMM component collapsed".into()));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((Gmm::new(weights, means, covariances)?, dropped))
}

/// Maximum-likelihood GMM by EM with k-means++ initialization.
///
/// Stops when the mean log-likelihood improves by less than `tol` or after
/// `max_iters` E-steps.
pub fn fit_gmm(points: &TaskVectorSet, options: EmOptions, seed: u64) -> Result<GmmFit> {
    let data: Vec<DVector<f64>> = points.iter().cloned().collect();
    fit_gmm_points(&data, options, seed)
}

pub fn fit_gmm_points(points: &[DVector<f64>], options: EmOptions, seed: u64) -> Result<GmmFit> {
    let EmOptions {
        components: k,
        max_iters,
        tol,
    } = options;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} exceeds the number of points {}",
            points.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    let d = points[0].len();
    let x = stack(points, d)?;
    let n = x.nrows();

    let mut rng = rng::stream(seed, "kmeans++", 0);
    let centers = kmeans_plus_plus(&x, k, &mut rng);
    let mut resp = DMatrix::zeros(n, k);
    for i in 0..n {
        let best = centers
            .iter()
            .enumerate()
            .map(|(j, &c)| (j, (x.row(i) - x.row(c)).norm_squared()))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        resp[(i, best.0)] = 1.0;
    }
    let (mut gmm, mut dropped) = m_step(&x, &resp)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let (ll, r) = gmm.e_step(&x);
        if let Some(&prev) = trace.last() {
            if ll - prev < tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        let (next, lost) = m_step(&x, &r)?;
        gmm = next;
        dropped += lost;
    }
    if !converged {
        // score the final M-step so the trace ends at the returned parameters
        trace.push(gmm.e_step(&x).0);
    }
    if dropped > 0 {
        log::warn!("GMM fit dropped {dropped} collapsed components; K = {}", gmm.n_components());
    }
    Ok(GmmFit {
        gmm,
        log_likelihood: trace,
        dropped,
        converged,
    })
}
