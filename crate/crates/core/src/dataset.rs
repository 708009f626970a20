//! Offline datasets of trajectories, their JSON-lines encoding, and
//! subtrajectory sampling.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{value_iteration, DeterministicPolicy, StochasticPolicy, TabularMdp};
use crate::rng::{self, Rng};

pub const DEFAULT_N_TRAJ: usize = 2000;
pub const DEFAULT_TRAJ_LEN: usize = 100;

const FORMAT_TAG: &str = "btdz-dataset";
const FORMAT_VERSION: u32 = 1;

/// States `s_0..=s_L` and actions `a_0..a_{L-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if actions.is_empty() || states.len() != actions.len() + 1 {
            return Err(Error::Format(format!(
                "trajectory needs L >= 1 actions and L + 1 states, got {} states and {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(Self { states, actions })
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Behavior mixture that generates the data: each trajectory is, with
/// probability `goal_fraction`, an epsilon-greedy goal-seeker toward a
/// uniformly drawn state, and otherwise a uniform-random walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub goal_fraction: f64,
    pub epsilon: f64,
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self {
            goal_fraction: 0.5,
            epsilon: 0.2,
        }
    }
}

impl BehaviorSpec {
    pub fn uniform_random() -> Self {
        Self {
            goal_fraction: 0.0,
            epsilon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("goal_fraction", self.goal_fraction), ("epsilon", self.epsilon)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidBehavior(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub mdp_fingerprint: String,
    pub behavior: BehaviorSpecRecord,
    pub seed: u64,
    pub n_traj: usize,
}

/// Behavior spec as stored in the file header (kept as strings so the
/// header is byte-stable).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSpecRecord {
    pub goal_fraction: String,
    pub epsilon: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub mdp_fingerprint: [u8; 32],
    pub behavior: BehaviorSpec,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format("fingerprint must be 64 hex characters".into()));
    }
    let mut out = [0u8; 32];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Format("fingerprint is not hex".into()))?;
    }
    Ok(out)
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Fails when the dataset was not generated by `mdp`.
    pub fn check_mdp(&self, mdp: &TabularMdp) -> Result<()> {
        if self.mdp_fingerprint != mdp.fingerprint() {
            return Err(Error::InvalidArgument(
                "dataset fingerprint does not match the MDP".into(),
            ));
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            n_states: self.n_states,
            n_actions: self.n_actions,
            mdp_fingerprint: hex(&self.mdp_fingerprint),
            behavior: BehaviorSpecRecord {
                goal_fraction: self.behavior.goal_fraction.to_string(),
                epsilon: self.behavior.epsilon.to_string(),
            },
            seed: self.seed,
            n_traj: self.trajectories.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad behavior field '{s}'")))
        };
        let behavior = BehaviorSpec {
            goal_fraction: parse(&header.behavior.goal_fraction)?,
            epsilon: parse(&header.behavior.epsilon)?,
        };
        let mut trajectories = Vec::with_capacity(header.n_traj);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)?;
            let t = Trajectory::new(t.states, t.actions)?;
            if t.states.iter().any(|&s| s >= header.n_states)
                || t.actions.iter().any(|&a| a >= header.n_actions)
            {
                return Err(Error::Format("trajectory index out of range".into()));
            }
            trajectories.push(t);
        }
        if trajectories.len() != header.n_traj || trajectories.is_empty() {
            return Err(Error::Format(format!(
                "header announces {} trajectories, found {}",
                header.n_traj,
                trajectories.len()
            )));
        }
        Ok(Self {
            trajectories,
            mdp_fingerprint: unhex(&header.mdp_fingerprint)?,
            behavior,
            seed: header.seed,
            n_states: header.n_states,
            n_actions: header.n_actions,
        })
    }
}

fn sample_row(p: &DMatrix<f64>, state: usize, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (t, &x) in p.row(state).iter().enumerate() {
        if x > 0.0 {
            last_positive = t;
            acc += x;
            if u < acc {
                return t;
            }
        }
    }
    last_positive
}

/// Optimal policy for a unit reward on `goal`, one per state.
fn goal_policies(mdp: &TabularMdp) -> Result<Vec<DeterministicPolicy>> {
    (0..mdp.n_states())
        .into_par_iter()
        .map(|g| {
            let mut r = DVector::zeros(mdp.n_states());
            r[g] = 1.0;
            value_iteration(mdp, &r, 1e-10).map(|res| res.policy)
        })
        .collect()
}

/// Sample `n_traj` trajectories of `traj_len` transitions from the behavior
/// mixture. Trajectory `i` uses its own RNG stream, so the result does not
/// depend on the rayon pool size.
pub fn generate_dataset(
    mdp: &TabularMdp,
    n_traj: usize,
    traj_len: usize,
    behavior: BehaviorSpec,
    seed: u64,
) -> Result<Dataset> {
    if n_traj == 0 || traj_len == 0 {
        return Err(Error::InvalidArgument("n_traj and traj_len must be >= 1".into()));
    }
    behavior.validate()?;
    let goals = if behavior.goal_fraction > 0.0 {
        goal_policies(mdp)?
    } else {
        Vec::new()
    };
    let mu = WeightedIndex::new(mdp.initial_dist().iter().copied())
        .map_err(|e| Error::Numerical(format!("initial distribution: {e}")))?;
    let n_actions = mdp.n_actions();
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, "trajectory", i as u64);
            let goal = if rng.random::<f64>() < behavior.goal_fraction {
                Some(&goals[rng.random_range(0..mdp.n_states())])
            } else {
                None
            };
            let mut s = mu.sample(&mut rng);
            let mut states = Vec::with_capacity(traj_len + 1);
            let mut actions = Vec::with_capacity(traj_len);
            states.push(s);
            for _ in 0..traj_len {
                let a = match goal {
                    Some(pol) if rng.random::<f64>() >= behavior.epsilon => pol.action(s),
                    _ => rng.random_range(0..n_actions),
                };
                s = sample_row(mdp.transitions(a), s, &mut rng);
                actions.push(a);
                states.push(s);
            }
            Trajectory { states, actions }
        })
        .collect();
    Ok(Dataset {
        trajectories,
        mdp_fingerprint: mdp.fingerprint(),
        behavior,
        seed,
        n_states: mdp.n_states(),
        n_actions,
    })
}

/// Row-normalized transition counts.
#[derive(Debug, Clone)]
pub struct EmpiricalTransitions {
    pub matrix: DMatrix<f64>,
    /// States with no outgoing transitions; their rows are uniform.
    pub unvisited: Vec<usize>,
}

pub fn empirical_transition_matrix(dataset: &Dataset, n_states: usize) -> Result<EmpiricalTransitions> {
    let mut counts = DMatrix::<f64>::zeros(n_states, n_states);
    for t in &dataset.trajectories {
        for w in t.states.windows(2) {
            if w[0] >= n_states || w[1] >= n_states {
                return Err(Error::InvalidArgument("state index exceeds n_states".into()));
            }
            counts[(w[0], w[1])] += 1.0;
        }
    }
    let mut unvisited = Vec::new();
    for s in 0..n_states {
        let total = counts.row(s).sum();
        if total > 0.0 {
            let mut row = counts.row_mut(s);
            row /= total;
        } else {
            unvisited.push(s);
            counts.row_mut(s).fill(1.0 / n_states as f64);
        }
    }
    Ok(EmpiricalTransitions {
        matrix: counts,
        unvisited,
    })
}

/// Action frequencies per state; unvisited states get the uniform policy.
pub fn empirical_behavior_policy(dataset: &Dataset) -> Result<StochasticPolicy> {
    let mut counts = DMatrix::<f64>::zeros(dataset.n_states, dataset.n_actions);
    for t in &dataset.trajectories {
        for (&s, &a) in t.states.iter().zip(&t.actions) {
            counts[(s, a)] += 1.0;
        }
    }
    for s in 0..dataset.n_states {
        let total = counts.row(s).sum();
        if total > 0.0 {
            let mut row = counts.row_mut(s);
            row /= total;
        } else {
            counts.row_mut(s).fill(1.0 / dataset.n_actions as f64);
        }
    }
    StochasticPolicy::new(counts)
}

/// Contiguous slice `states[start ..= start + len]` of trajectory `parent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtrajectory {
    pub parent: usize,
    pub start: usize,
    pub len: usize,
    pub states: Vec<usize>,
}

/// Subtrajectory length window, in transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl LengthRange {
    pub const DEFAULT: LengthRange = LengthRange { min: 5, max: 100 };

    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min > max {
            return Err(Error::InvalidArgument(format!("length range [{min}, {max}] is empty")));
        }
        Ok(Self { min, max })
    }
}

/// Draw `n_sub` subtrajectories: parent uniform among trajectories with at
/// least `range.max` transitions, length uniform on the range, start offset
/// uniform among valid offsets.
pub fn sample_subtrajectories(
    dataset: &Dataset,
    n_sub: usize,
    range: LengthRange,
    seed: u64,
) -> Result<Vec<Subtrajectory>> {
    if n_sub == 0 {
        return Err(Error::InvalidArgument("n_sub must be >= 1".into()));
    }
    let range = LengthRange::new(range.min, range.max)?;
    let eligible: Vec<usize> = dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() >= range.max)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "subtrajectory length {} exceeds every trajectory length",
            range.max
        )));
    }
    let mut rng = rng::stream(seed, "subtrajectories", 0);
    Ok((0..n_sub)
        .map(|_| {
            let parent = eligible[rng.random_range(0..eligible.len())];
            let len = rng.random_range(range.min..=range.max);
            let traj = &dataset.trajectories[parent];
            let start = rng.random_range(0..=traj.len() - len);
            Subtrajectory {
                parent,
                start,
                len,
                states: traj.states[start..=start + len].to_vec(),
            }
        })
        .collect())
}
