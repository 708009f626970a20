//! Task vectors on the unit sphere and the samplers that produce them:
//! dataset-extracted sets, the fitted behavioral task distribution, the
//! uniform hypersphere prior, their mixture, and the heuristic baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_subtrajectories, Dataset, LengthRange, Subtrajectory};
use crate::error::{check_dim, Error, Result};
use crate::gmm::Gmm;
use crate::mdp::FeatureMap;
use crate::rng::{self, Rng};

/// Occupancies with a smaller norm are rejected instead of normalized.
pub const MIN_OCCUPANCY_NORM: f64 = 1e-10;
const UNIT_TOL: f64 = 1e-9;
const MAX_REDRAWS: usize = 100;

/// Unit vector `z` defining the linear reward `phi(s)^T z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(DVector<f64>);

impl TaskVector {
    pub fn new(z: DVector<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidArgument("task vector must be non-empty".into()));
        }
        let norm = z.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!("task vector norm {norm} is not 1")));
        }
        Ok(Self(z))
    }

    /// Normalize `v`, or `None` when its norm is below `MIN_OCCUPANCY_NORM`.
    pub fn normalized(v: &DVector<f64>) -> Option<Self> {
        let norm = v.norm();
        if !(norm >= MIN_OCCUPANCY_NORM) || !norm.is_finite() {
            return None;
        }
        Some(Self(v / norm))
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Subtrajectory,
    FullTrajectory,
    Uniform,
    Gmm,
    Mixed,
}

impl Provenance {
    pub const ALL: [Provenance; 5] = [
        Provenance::Subtrajectory,
        Provenance::FullTrajectory,
        Provenance::Uniform,
        Provenance::Gmm,
        Provenance::Mixed,
    ];

    pub fn code(self) -> u64 {
        match self {
            Provenance::Subtrajectory => 0,
            Provenance::FullTrajectory => 1,
            Provenance::Uniform => 2,
            Provenance::Gmm => 3,
            Provenance::Mixed => 4,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        Provenance::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown provenance code {code}")))
    }
}

/// A non-empty set of task vectors of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    vectors: Vec<TaskVector>,
    provenance: Provenance,
}

impl TaskVectorSet {
    pub fn new(vectors: Vec<TaskVector>, provenance: Provenance) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("task vector set is empty".into()))?;
        let d = first.dim();
        for v in &vectors {
            check_dim("task vector set", d, v.dim())?;
        }
        Ok(Self {
            vectors,
            provenance,
        })
    }

    pub fn vectors(&self) -> &[TaskVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.vectors.iter().map(TaskVector::vector)
    }
}

/// `sum_{t=0}^{|tau|} gamma^t phi(s_t)` over the given state sequence.
pub fn discounted_feature_sum(states: &[usize], features: &FeatureMap, gamma: f64) -> Result<DVector<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let phi = features.matrix();
    let mut acc = DVector::zeros(features.dim());
    let mut w = 1.0;
    for &s in states {
        if s >= features.n_states() {
            return Err(Error::DimensionMismatch {
                context: "subtrajectory state",
                expected: features.n_states(),
                actual: s,
            });
        }
        if w == 0.0 {
            break;
        }
        acc.axpy(w, &phi.row(s).transpose(), 1.0);
        w *= gamma;
    }
    Ok(acc)
}

/// Outcome of extracting a task vector from one subtrajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Extraction {
    Accepted(TaskVector),
    /// The discounted occupancy had norm below `MIN_OCCUPANCY_NORM`.
    Rejected,
}

/// `z = psi / ||psi||` for the subtrajectory's discounted feature sum.
pub fn extract_task_vector(sub: &Subtrajectory, features: &FeatureMap, gamma: f64) -> Result<Extraction> {
    let psi = discounted_feature_sum(&sub.states, features, gamma)?;
    Ok(match TaskVector::normalized(&psi) {
        Some(z) => Extraction::Accepted(z),
        None => Extraction::Rejected,
    })
}

/// Subtrajectory sampling parameters for building `p_data`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdataSpec {
    pub n_sub: usize,
    pub lengths: LengthRange,
}

impl Default for PdataSpec {
    fn default() -> Self {
        Self {
            n_sub: 20_000,
            lengths: LengthRange::DEFAULT,
        }
    }
}

/// Empirical task set extracted from a dataset.
#[derive(Debug, Clone)]
pub struct Pdata {
    pub tasks: TaskVectorSet,
    pub rejected: usize,
}

pub fn build_pdata(
    dataset: &Dataset,
    features: &FeatureMap,
    gamma: f64,
    spec: PdataSpec,
    seed: u64,
) -> Result<Pdata> {
    let subs = sample_subtrajectories(dataset, spec.n_sub, spec.lengths, seed)?;
    collect_extractions(subs.iter(), features, gamma, Provenance::Subtrajectory)
}

fn collect_extractions<'a>(
    subs: impl Iterator<Item = &'a Subtrajectory>,
    features: &FeatureMap,
    gamma: f64,
    provenance: Provenance,
) -> Result<Pdata> {
    let mut accepted = Vec::new();
    let mut rejected = 0;
    for sub in subs {
        match extract_task_vector(sub, features, gamma)? {
            Extraction::Accepted(z) => accepted.push(z),
            Extraction::Rejected => rejected += 1,
        }
    }
    if rejected > 0 {
        log::info!("rejected {rejected} subtrajectories with vanishing occupancy");
    }
    if accepted.is_empty() {
        return Err(Error::DegenerateFeatures {
            rank: 0,
            dim: features.dim(),
        });
    }
    Ok(Pdata {
        tasks: TaskVectorSet::new(accepted, provenance)?,
        rejected,
    })
}

/// Infinite stream of uniform draws on `S^{d-1}` (normalized Gaussians).
pub struct UniformSphereSampler {
    dim: usize,
    rng: Rng,
}

impl UniformSphereSampler {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("sphere dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            rng: rng::stream(seed, "uniform-sphere", 0),
        })
    }

    pub fn draw(&mut self) -> Result<TaskVector> {
        for _ in 0..MAX_REDRAWS {
            let g = DVector::from_fn(self.dim, |_, _| self.rng.sample::<f64, _>(StandardNormal));
            if let Some(z) = TaskVector::normalized(&g) {
                return Ok(z);
            }
        }
        Err(Error::Numerical("uniform sphere sampler kept drawing zero vectors".into()))
    }
}

/// Stream of draws from a GMM, projected back onto the sphere.
pub struct GmmSampler<'a> {
    gmm: &'a Gmm,
    rng: Rng,
}

impl<'a> GmmSampler<'a> {
    pub fn new(gmm: &'a Gmm, seed: u64) -> Self {
        Self {
            gmm,
            rng: rng::stream(seed, "gmm-sampler", 0),
        }
    }

    pub fn draw(&mut self) -> Result<TaskVector> {
        for _ in 0..MAX_REDRAWS {
            let x = self.gmm.sample(&mut self.rng);
            if let Some(z) = TaskVector::normalized(&x) {
                return Ok(z);
            }
        }
        Err(Error::Numerical("GMM sampler kept drawing zero vectors".into()))
    }
}

pub fn sample_uniform_sphere(d: usize, n: usize, seed: u64) -> Result<TaskVectorSet> {
    let mut s = UniformSphereSampler::new(d, seed)?;
    let v = (0..n).map(|_| s.draw()).collect::<Result<Vec<_>>>()?;
    TaskVectorSet::new(v, Provenance::Uniform)
}

/// `n` draws `z ~ p_theta`, each renormalized to unit length.
pub fn sample_btd(gmm: &Gmm, n: usize, seed: u64) -> Result<TaskVectorSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut s = GmmSampler::new(gmm, seed);
    let v = (0..n).map(|_| s.draw()).collect::<Result<Vec<_>>>()?;
    TaskVectorSet::new(v, Provenance::Gmm)
}

/// Mixture draw plus, per sample, whether it came from the uniform prior.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub tasks: TaskVectorSet,
    pub from_uniform: Vec<bool>,
}

/// Each sample is uniform with probability `alpha`, otherwise a BTD draw.
///
/// The uniform and BTD draws come from the same streams that
/// [`sample_uniform_sphere`] and [`sample_btd`] use for `seed`, consumed in
/// order, so `alpha = 1` and `alpha = 0` reproduce those samplers exactly.
pub fn sample_mixed_labeled(alpha: f64, gmm: &Gmm, d: usize, n: usize, seed: u64) -> Result<MixedSample> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    check_dim("mixture dimension", gmm.dim(), d)?;
    let mut labels = rng::stream(seed, "mixture-label", 0);
    let mut uniform = UniformSphereSampler::new(d, seed)?;
    let mut btd = GmmSampler::new(gmm, seed);
    let mut vectors = Vec::with_capacity(n);
    let mut from_uniform = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = labels.random();
        let is_uniform = u < alpha;
        vectors.push(if is_uniform { uniform.draw()? } else { btd.draw()? });
        from_uniform.push(is_uniform);
    }
    Ok(MixedSample {
        tasks: TaskVectorSet::new(vectors, Provenance::Mixed)?,
        from_uniform,
    })
}

pub fn sample_mixed(alpha: f64, gmm: &Gmm, d: usize, n: usize, seed: u64) -> Result<TaskVectorSet> {
    Ok(sample_mixed_labeled(alpha, gmm, d, n, seed)?.tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicMode {
    FullTrajectory,
    Subtrajectory,
}

impl fmt::Display for HeuristicMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeuristicMode::FullTrajectory => "full_trajectory",
            HeuristicMode::Subtrajectory => "subtrajectory",
        })
    }
}

impl FromStr for HeuristicMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_trajectory" => Ok(HeuristicMode::FullTrajectory),
            "subtrajectory" => Ok(HeuristicMode::Subtrajectory),
            _ => Err(Error::InvalidArgument(format!("unknown heuristic mode '{s}'"))),
        }
    }
}

/// Heuristic samplers that skip density modeling.
///
/// `Subtrajectory` draws `n` elements of `p_data` with replacement (`p_data`
/// itself built with `seed`). `FullTrajectory` extracts task vectors from
/// `n` whole trajectories drawn uniformly with replacement.
pub fn heuristic_tasks(
    dataset: &Dataset,
    features: &FeatureMap,
    gamma: f64,
    mode: HeuristicMode,
    spec: PdataSpec,
    n: usize,
    seed: u64,
) -> Result<TaskVectorSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    match mode {
        HeuristicMode::Subtrajectory => {
            let pdata = build_pdata(dataset, features, gamma, spec, seed)?;
            let pool = pdata.tasks.vectors();
            let mut rng = rng::stream(seed, "heuristic-draw", 0);
            let picked = (0..n)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect();
            TaskVectorSet::new(picked, Provenance::Subtrajectory)
        }
        HeuristicMode::FullTrajectory => {
            let mut rng = rng::stream(seed, "heuristic-full", 0);
            let mut picked = Vec::with_capacity(n);
            let mut rejected = 0;
            while picked.len() < n {
                let i = rng.random_range(0..dataset.trajectories.len());
                let psi = discounted_feature_sum(&dataset.trajectories[i].states, features, gamma)?;
                match TaskVector::normalized(&psi) {
                    Some(z) => picked.push(z),
                    None => {
                        rejected += 1;
                        if rejected > MAX_REDRAWS * n {
                            return Err(Error::DegenerateFeatures {
                                rank: 0,
                                dim: features.dim(),
                            });
                        }
                    }
                }
            }
            TaskVectorSet::new(picked, Provenance::FullTrajectory)
        }
    }
}
