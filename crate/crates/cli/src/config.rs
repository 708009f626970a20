//! Experiment configuration (JSON) and its validation.

use std::fmt;
use std::path::{Path, PathBuf};

use btdz_core::dataset::{BehaviorSpec, LengthRange, DEFAULT_N_TRAJ, DEFAULT_TRAJ_LEN};
use btdz_core::engine::{default_probe_size, DEFAULT_LIBRARY_SIZE, DEFAULT_RIDGE, DEFAULT_VI_TOL};
use btdz_core::envs::{self, NamedReward, BENCHMARK_DISCOUNT};
use btdz_core::features::FeatureFamily;
use btdz_core::gmm::{EmOptions, DEFAULT_COMPONENTS, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use btdz_core::mdp::TabularMdp;
use btdz_core::tasks::PdataSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSpec {
    Builtin(String),
    File(PathBuf),
}

fn default_n_tau() -> usize {
    4000
}
fn default_len_min() -> usize {
    LengthRange::DEFAULT.min
}
fn default_len_max() -> usize {
    LengthRange::DEFAULT.max
}
fn default_k() -> usize {
    DEFAULT_COMPONENTS
}
fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}
fn default_em_tol() -> f64 {
    DEFAULT_TOL
}

/// Subtrajectory extraction: `N_tau` slices with lengths in `[len_min, len_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionParams {
    #[serde(default = "default_n_tau")]
    pub n_tau: usize,
    #[serde(default = "default_len_min")]
    pub len_min: usize,
    #[serde(default = "default_len_max")]
    pub len_max: usize,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            n_tau: default_n_tau(),
            len_min: default_len_min(),
            len_max: default_len_max(),
        }
    }
}

impl ExtractionParams {
    pub fn pdata_spec(&self) -> Result<PdataSpec, CliError> {
        Ok(PdataSpec {
            n_sub: self.n_tau,
            lengths: LengthRange::new(self.len_min, self.len_max).map_err(CliError::config)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BtdParams {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, flatten)]
    pub extraction: ExtractionParams,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_em_tol")]
    pub tol: f64,
}

impl Default for BtdParams {
    fn default() -> Self {
        Self {
            k: default_k(),
            extraction: ExtractionParams::default(),
            max_iters: default_max_iters(),
            tol: default_em_tol(),
        }
    }
}

impl BtdParams {
    pub fn em_options(&self) -> EmOptions {
        EmOptions {
            components: self.k,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplerSpec {
    Uniform,
    Btd(BtdParams),
    FullTrajectory,
    Subtrajectory(ExtractionParams),
    Mixed {
        alpha: f64,
        #[serde(default)]
        btd: BtdParams,
    },
}

impl SamplerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerSpec::Uniform => "uniform",
            SamplerSpec::Btd(_) => "btd",
            SamplerSpec::FullTrajectory => "full_trajectory",
            SamplerSpec::Subtrajectory(_) => "subtrajectory",
            SamplerSpec::Mixed { .. } => "mixed",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            SamplerSpec::Mixed { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }

    /// The GMM parameters when this sampler needs a fitted GMM.
    pub fn gmm_params(&self) -> Option<&BtdParams> {
        match self {
            SamplerSpec::Btd(p) | SamplerSpec::Mixed { btd: p, .. } => Some(p),
            _ => None,
        }
    }

    pub fn k(&self) -> Option<usize> {
        self.gmm_params().map(|p| p.k)
    }

    /// Filename-safe tag, e.g. `mixed-a0.25`.
    pub fn tag(&self) -> String {
        match self {
            SamplerSpec::Mixed { alpha, .. } => format!("mixed-a{alpha}"),
            SamplerSpec::Btd(p) => format!("btd-k{}", p.k),
            other => other.name().to_string(),
        }
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

fn default_goal_fraction() -> f64 {
    BehaviorSpec::default().goal_fraction
}
fn default_epsilon() -> f64 {
    BehaviorSpec::default().epsilon
}
fn default_n_traj() -> usize {
    DEFAULT_N_TRAJ
}
fn default_traj_len() -> usize {
    DEFAULT_TRAJ_LEN
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default = "default_traj_len")]
    pub traj_len: usize,
    #[serde(default = "default_goal_fraction")]
    pub goal_fraction: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_traj: default_n_traj(),
            traj_len: default_traj_len(),
            goal_fraction: default_goal_fraction(),
            epsilon: default_epsilon(),
        }
    }
}

impl DatasetParams {
    pub fn behavior(&self) -> BehaviorSpec {
        BehaviorSpec {
            goal_fraction: self.goal_fraction,
            epsilon: self.epsilon,
        }
    }
}

fn default_n_z() -> usize {
    2000
}
fn default_n_policies() -> usize {
    512
}
fn default_n_quadratic() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Params {
    #[serde(default = "default_n_z")]
    pub n_z: usize,
    #[serde(default = "default_n_policies")]
    pub n_policies: usize,
    #[serde(default = "default_n_quadratic")]
    pub n_quadratic: usize,
}

impl Default for Prop1Params {
    fn default() -> Self {
        Self {
            n_z: default_n_z(),
            n_policies: default_n_policies(),
            n_quadratic: default_n_quadratic(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Dim,
    Alpha,
    GmmK,
    Sampler,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Dim => "dim",
            SweepAxis::Alpha => "alpha",
            SweepAxis::GmmK => "gmm_k",
            SweepAxis::Sampler => "sampler",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "dim" => Ok(SweepAxis::Dim),
            "alpha" => Ok(SweepAxis::Alpha),
            "gmm_k" => Ok(SweepAxis::GmmK),
            "sampler" => Ok(SweepAxis::Sampler),
            other => Err(CliError::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// Axis plus values; sampler values are sampler names (`uniform`, `btd`,
/// `subtrajectory`, `full_trajectory`, `mixed:<alpha>`), the rest numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<serde_json::Value>,
    #[serde(default)]
    pub svg: bool,
}

fn default_library_size() -> usize {
    DEFAULT_LIBRARY_SIZE
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}
fn default_vi_tol() -> f64 {
    DEFAULT_VI_TOL
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSpec,
    /// Overrides the discount of the MDP; built-ins default to 0.95.
    #[serde(default)]
    pub gamma: Option<f64>,
    pub feature_family: FeatureFamily,
    pub d: usize,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default = "default_library_size")]
    pub library_size: usize,
    /// Defaults to `min(n_states, 512)`.
    #[serde(default)]
    pub probe_size: Option<usize>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_vi_tol")]
    pub vi_tol: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Built-ins fall back to their own four tasks when empty.
    #[serde(default)]
    pub test_tasks: Vec<NamedReward>,
    #[serde(default)]
    pub prop1: Prop1Params,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // relative MDP paths resolve against the config's directory
        if let MdpSpec::File(p) = &cfg.mdp {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.mdp = MdpSpec::File(dir.join(p));
                }
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest: [u8; 32] = Sha256::digest(canonical.as_bytes()).into();
        btdz_core::dataset::hex(&digest)
    }

    pub fn check_files(&self) -> Result<(), CliError> {
        if let MdpSpec::File(p) = &self.mdp {
            check(p.is_file(), || format!("MDP file {} does not exist", p.display()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let MdpSpec::Builtin(name) = &self.mdp {
            check(envs::BENCHMARK_NAMES.contains(&name.as_str()), || {
                format!("unknown built-in MDP '{name}' (known: {})", envs::BENCHMARK_NAMES.join(", "))
            })?;
        } else {
            check(!self.test_tasks.is_empty(), || "an MDP file needs explicit test_tasks".into())?;
        }
        if let Some(g) = self.gamma {
            check((0.0..1.0).contains(&g), || format!("gamma must lie in [0, 1), got {g}"))?;
        }
        check(self.d >= 1, || "d must be >= 1".into())?;
        check(self.library_size >= 1, || "library_size must be >= 1".into())?;
        check(self.probe_size != Some(0), || "probe_size must be >= 1".into())?;
        check(self.ridge >= 0.0 && self.ridge.is_finite(), || "ridge must be >= 0".into())?;
        check(self.vi_tol > 0.0, || "vi_tol must be positive".into())?;
        check(!self.seeds.is_empty(), || "seeds must be non-empty".into())?;
        check(self.dataset.n_traj >= 1 && self.dataset.traj_len >= 1, || {
            "dataset n_traj and traj_len must be >= 1".into()
        })?;
        self.dataset.behavior().validate().map_err(CliError::config)?;
        check(self.prop1.n_z >= 2 && self.prop1.n_policies >= 2, || {
            "prop1 n_z and n_policies must be >= 2".into()
        })?;
        for t in &self.test_tasks {
            check(t.reward.iter().all(|r| r.is_finite()), || format!("test task {} has non-finite rewards", t.name))?;
        }
        self.validate_sampler(&self.sampler)?;
        if let Some(s) = &self.sweep {
            check(!s.values.is_empty(), || "sweep values must be non-empty".into())?;
            for v in &s.values {
                self.apply_axis(s.axis, v)?;
            }
        }
        Ok(())
    }

    fn validate_sampler(&self, s: &SamplerSpec) -> Result<(), CliError> {
        let extraction = match s {
            SamplerSpec::Subtrajectory(e) => Some(e),
            _ => s.gmm_params().map(|p| &p.extraction),
        };
        if let Some(e) = extraction {
            check(e.n_tau >= 1, || "n_tau must be >= 1".into())?;
            e.pdata_spec()?;
            check(e.len_max <= self.dataset.traj_len, || {
                format!("len_max {} exceeds traj_len {}", e.len_max, self.dataset.traj_len)
            })?;
        }
        if let Some(p) = s.gmm_params() {
            check(p.k >= 1, || "K must be >= 1".into())?;
            check(p.k <= p.extraction.n_tau, || format!("K = {} exceeds n_tau = {}", p.k, p.extraction.n_tau))?;
            check(p.max_iters >= 1 && p.tol > 0.0, || "EM needs max_iters >= 1 and tol > 0".into())?;
        }
        if let Some(a) = s.alpha() {
            check((0.0..=1.0).contains(&a), || format!("alpha must lie in [0, 1], got {a}"))?;
        }
        Ok(())
    }

    /// Copy of this config with one axis value applied.
    pub fn apply_axis(&self, axis: SweepAxis, value: &serde_json::Value) -> Result<Self, CliError> {
        let mut out = self.clone();
        out.sweep = None;
        let num = || {
            value
                .as_f64()
                .ok_or_else(|| CliError::Config(format!("sweep value {value} is not a number")))
        };
        let int = || {
            value
                .as_u64()
                .ok_or_else(|| CliError::Config(format!("sweep value {value} is not a non-negative integer")))
        };
        let gmm = self.sampler.gmm_params().copied().unwrap_or_default();
        match axis {
            SweepAxis::Dim => out.d = int()? as usize,
            SweepAxis::Alpha => {
                out.sampler = SamplerSpec::Mixed {
                    alpha: num()?,
                    btd: gmm,
                }
            }
            SweepAxis::GmmK => {
                let k = int()? as usize;
                out.sampler = match self.sampler {
                    SamplerSpec::Mixed { alpha, btd } => SamplerSpec::Mixed {
                        alpha,
                        btd: BtdParams { k, ..btd },
                    },
                    _ => SamplerSpec::Btd(BtdParams { k, ..gmm }),
                }
            }
            SweepAxis::Sampler => {
                let name = value
                    .as_str()
                    .ok_or_else(|| CliError::Config(format!("sampler sweep value {value} is not a string")))?;
                out.sampler = parse_sampler(name, gmm)?;
            }
        }
        out.validate_sampler(&out.sampler)?;
        check(out.d >= 1, || "d must be >= 1".into())?;
        Ok(out)
    }

    pub fn load_mdp(&self) -> Result<TabularMdp, CliError> {
        let mdp = match &self.mdp {
            MdpSpec::Builtin(name) => envs::benchmark(name, self.gamma.unwrap_or(BENCHMARK_DISCOUNT))
                .map_err(CliError::config)?
                .mdp,
            MdpSpec::File(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read MDP {}: {e}", p.display())))?;
                let mdp = TabularMdp::from_json(&text).map_err(CliError::config)?;
                match self.gamma {
                    Some(g) => mdp.with_discount(g).map_err(CliError::config)?,
                    None => mdp,
                }
            }
        };
        Ok(mdp)
    }

    pub fn env_name(&self) -> String {
        match &self.mdp {
            MdpSpec::Builtin(name) => name.clone(),
            MdpSpec::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "mdp".into()),
        }
    }

    pub fn resolved_test_tasks(&self, n_states: usize) -> Result<Vec<NamedReward>, CliError> {
        let tasks = if self.test_tasks.is_empty() {
            match &self.mdp {
                MdpSpec::Builtin(name) => envs::benchmark(name, BENCHMARK_DISCOUNT)
                    .map_err(CliError::config)?
                    .test_tasks,
                MdpSpec::File(_) => Vec::new(),
            }
        } else {
            self.test_tasks.clone()
        };
        for t in &tasks {
            check(t.reward.len() == n_states, || {
                format!("test task {} has {} rewards for {n_states} states", t.name, t.reward.len())
            })?;
        }
        Ok(tasks)
    }

    pub fn probe_size(&self, n_states: usize) -> usize {
        self.probe_size.unwrap_or_else(|| default_probe_size(n_states))
    }
}

pub fn parse_sampler(name: &str, gmm: BtdParams) -> Result<SamplerSpec, CliError> {
    if let Some(a) = name.strip_prefix("mixed:") {
        let alpha: f64 = a
            .parse()
            .map_err(|_| CliError::Config(format!("bad mixture weight in '{name}'")))?;
        return Ok(SamplerSpec::Mixed { alpha, btd: gmm });
    }
    match name {
        "uniform" => Ok(SamplerSpec::Uniform),
        "btd" => Ok(SamplerSpec::Btd(gmm)),
        "full_trajectory" => Ok(SamplerSpec::FullTrajectory),
        "subtrajectory" => Ok(SamplerSpec::Subtrajectory(gmm.extraction)),
        other => Err(CliError::Config(format!("unknown sampler '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"mdp": {"builtin": "corridor"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "btd", "k": 5}}"#
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        assert_eq!(c.library_size, 64);
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.probe_size(12), 12);
        assert_eq!(c.sampler.k(), Some(5));
        assert_eq!(c.sampler.gmm_params().unwrap().extraction.n_tau, 4000);
        assert_eq!(c.resolved_test_tasks(12).unwrap().len(), 4);
    }

    #[test]
    fn round_trips_losslessly() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut other = c.clone();
        other.d = 9;
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            r#"{"mdp": {"builtin": "nope"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "uniform"}}"#,
            r#"{"mdp": {"builtin": "corridor"}, "feature_family": "lra_sr", "d": 0, "sampler": {"kind": "uniform"}}"#,
            r#"{"mdp": {"builtin": "corridor"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "mixed", "alpha": 2}}"#,
            r#"{"mdp": {"builtin": "corridor"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "uniform"}, "bogus": 1}"#,
            r#"{"mdp": {"builtin": "corridor"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "btd", "k": 10, "n_tau": 5}}"#,
            r#"{"mdp": {"file": "x.json"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "uniform"}}"#,
            r#"{"mdp": {"builtin": "corridor"}, "feature_family": "lra_sr", "d": 8, "sampler": {"kind": "uniform"}, "seeds": []}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn axis_application() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        let v = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap();
        assert_eq!(c.apply_axis(SweepAxis::Dim, &v("16")).unwrap().d, 16);
        assert_eq!(c.apply_axis(SweepAxis::Alpha, &v("0.25")).unwrap().sampler.alpha(), Some(0.25));
        assert_eq!(c.apply_axis(SweepAxis::GmmK, &v("3")).unwrap().sampler.k(), Some(3));
        let s = c.apply_axis(SweepAxis::Sampler, &v("\"mixed:0.5\"")).unwrap();
        assert_eq!(s.sampler.tag(), "mixed-a0.5");
        assert!(c.apply_axis(SweepAxis::Sampler, &v("\"nope\"")).is_err());
        assert!(c.apply_axis(SweepAxis::Dim, &v("\"x\"")).is_err());
    }
}
