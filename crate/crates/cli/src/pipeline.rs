//! Experiment stages with on-disk artifacts.
//!
//! A run is a list of cells (a config specialized to one sweep value, plus
//! a seed). Shared artifacts are produced in ordered phases (datasets,
//! features, GMMs, oracles) before the cells run in parallel, so no stage
//! waits on another while holding a lock and results never depend on the
//! worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use btdz_core::dataset::{generate_dataset, Dataset};
use btdz_core::engine::{
    train_policy_library, zero_shot_eval_with_oracle, oracle_return, EvalSettings, PolicyLibrary, ProbeSpec,
};
use btdz_core::envs::NamedReward;
use btdz_core::features::FeatureFamily;
use btdz_core::gmm::{fit_gmm, Gmm};
use btdz_core::io::{self, write_atomic};
use btdz_core::mdp::{policy_values, FeatureMap, TabularMdp};
use btdz_core::rng;
use btdz_core::tasks::{build_pdata, heuristic_tasks, sample_btd, sample_mixed, sample_uniform_sphere, HeuristicMode, TaskVectorSet};
use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{BtdParams, ExperimentConfig, SamplerSpec};
use crate::error::CliError;
use crate::report::ReportRow;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
    pub force: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            jobs: 1,
            force: false,
        }
    }

    /// Run `f` on a pool of `jobs` workers.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", self.jobs)))?;
        Ok(pool.install(f))
    }
}

/// Whether a missing upstream artifact is built or is an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Build,
    Require,
}

#[derive(Debug, Clone, Copy)]
pub struct Prerequisites {
    pub datasets: Access,
    pub gmms: Access,
    pub libraries: Access,
}

impl Prerequisites {
    pub const BUILD_ALL: Self = Self {
        datasets: Access::Build,
        gmms: Access::Build,
        libraries: Access::Build,
    };
}

/// One unit of work: a fully specialized config and one seed.
#[derive(Debug, Clone)]
pub struct Cell {
    pub cfg: ExperimentConfig,
    pub seed: u64,
}

fn short_key<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("key serializes");
    let digest: [u8; 32] = Sha256::digest(json.as_bytes()).into();
    btdz_core::dataset::hex(&digest[..4])
}

fn notice_skip(path: &Path) {
    log::info!("skip {}: already exists (use --force to recompute)", path.display());
}

fn needs_dataset(cfg: &ExperimentConfig) -> bool {
    matches!(cfg.feature_family, FeatureFamily::LraP | FeatureFamily::LraSr)
        || !matches!(cfg.sampler, SamplerSpec::Uniform)
}

pub fn dataset_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("dataset_seed{seed}.jsonl"))
}

pub fn features_path(out: &Path, family: FeatureFamily, d: usize, seed: u64) -> PathBuf {
    out.join(format!("features_{family}_d{d}_seed{seed}.bin"))
}

pub fn pdata_path(out: &Path, family: FeatureFamily, d: usize, p: &BtdParams, seed: u64) -> PathBuf {
    let e = &p.extraction;
    out.join(format!(
        "pdata_{family}_d{d}_n{}_l{}-{}_seed{seed}.bin",
        e.n_tau, e.len_min, e.len_max
    ))
}

pub fn gmm_path(out: &Path, family: FeatureFamily, d: usize, p: &BtdParams, seed: u64) -> PathBuf {
    out.join(format!("gmm_{family}_d{d}_k{}_{}_seed{seed}.json", p.k, short_key(p)))
}

pub fn library_path(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    let key = short_key(&(&cfg.sampler, cfg.library_size, cfg.vi_tol));
    out.join(format!(
        "library_{}_d{}_{}_{key}_seed{seed}.bin",
        cfg.feature_family,
        cfg.d,
        cfg.sampler.tag()
    ))
}

fn missing(path: &Path, hint: &str) -> CliError {
    CliError::MissingFile(format!("{} (run `{hint}` first)", path.display()))
}

/// Shared state for one command invocation on one MDP.
pub struct Workspace {
    pub base: ExperimentConfig,
    pub opts: RunOptions,
    pub mdp: TabularMdp,
    pub env: String,
    pub tasks: Vec<NamedReward>,
    pub prereqs: Prerequisites,
}

/// Shared artifacts, keyed for lookup by the cells.
#[derive(Default)]
struct Shared {
    datasets: BTreeMap<u64, Dataset>,
    features: BTreeMap<(FeatureFamily, usize, u64), FeatureMap>,
    gmms: BTreeMap<(FeatureFamily, usize, String, u64), Gmm>,
    oracles: Vec<f64>,
}

impl Workspace {
    pub fn new(base: ExperimentConfig, opts: RunOptions, prereqs: Prerequisites) -> Result<Self, CliError> {
        base.check_files()?;
        let mdp = base.load_mdp()?;
        let tasks = base.resolved_test_tasks(mdp.n_states())?;
        Ok(Self {
            env: base.env_name(),
            base,
            opts,
            mdp,
            tasks,
            prereqs,
        })
    }

    pub fn cells(&self, configs: &[ExperimentConfig]) -> Vec<Cell> {
        configs
            .iter()
            .flat_map(|cfg| {
                self.base.seeds.iter().map(move |&seed| Cell {
                    cfg: cfg.clone(),
                    seed,
                })
            })
            .collect()
    }

    /// Load or generate the dataset of one seed.
    pub fn dataset(&self, seed: u64, access: Access) -> Result<Dataset, CliError> {
        let path = dataset_path(&self.opts.out, seed);
        let p = &self.base.dataset;
        if path.is_file() && !(self.opts.force && access == Access::Build) {
            let ds = Dataset::read_jsonl(BufReader::new(File::open(&path)?))?;
            let matches = ds.check_mdp(&self.mdp).is_ok()
                && ds.seed == seed
                && ds.behavior == p.behavior()
                && ds.trajectories.len() == p.n_traj
                && ds.trajectories.iter().all(|t| t.len() == p.traj_len);
            if !matches {
                return Err(CliError::Config(format!(
                    "{} was generated with different settings; use --force or another --out",
                    path.display()
                )));
            }
            if access == Access::Build {
                notice_skip(&path);
            }
            return Ok(ds);
        }
        if access == Access::Require {
            return Err(missing(&path, "btdz gen-dataset"));
        }
        let ds = generate_dataset(&self.mdp, p.n_traj, p.traj_len, p.behavior(), seed)?;
        write_atomic(&path, &ds.to_jsonl_bytes()?)?;
        log::info!("wrote {}", path.display());
        Ok(ds)
    }

    pub fn gen_datasets(&self) -> Result<Vec<PathBuf>, CliError> {
        for &seed in &self.base.seeds {
            self.dataset(seed, Access::Build)?;
        }
        Ok(self.base.seeds.iter().map(|&s| dataset_path(&self.opts.out, s)).collect())
    }

    fn build_features(&self, shared: &Shared, family: FeatureFamily, d: usize, seed: u64) -> Result<FeatureMap, CliError> {
        let phi = family.build(&self.mdp, shared.datasets.get(&seed), d, seed)?;
        let path = features_path(&self.opts.out, family, d, seed);
        if !path.is_file() || self.opts.force {
            write_atomic(&path, &io::feature_map_to_bytes(&phi))?;
        }
        Ok(phi)
    }

    fn gmm(
        &self,
        ds: Option<&Dataset>,
        phi: &FeatureMap,
        family: FeatureFamily,
        p: &BtdParams,
        seed: u64,
        access: Access,
    ) -> Result<Gmm, CliError> {
        let d = phi.dim();
        let path = gmm_path(&self.opts.out, family, d, p, seed);
        if path.is_file() && !(self.opts.force && access == Access::Build) {
            let gmm = Gmm::from_json(&std::fs::read_to_string(&path)?)?;
            if gmm.dim() != d {
                return Err(CliError::Config(format!("{} has dimension {}, expected {d}", path.display(), gmm.dim())));
            }
            if access == Access::Build {
                notice_skip(&path);
            }
            return Ok(gmm);
        }
        if access == Access::Require {
            return Err(missing(&path, "btdz fit-btd"));
        }
        let ds = ds.ok_or_else(|| missing(&dataset_path(&self.opts.out, seed), "btdz gen-dataset"))?;
        let pdata = build_pdata(ds, phi, self.mdp.discount(), p.extraction.pdata_spec()?, seed)?;
        write_atomic(
            &pdata_path(&self.opts.out, family, d, p, seed),
            &io::task_set_to_bytes(&pdata.tasks),
        )?;
        let fit = fit_gmm(&pdata.tasks, p.em_options(), seed)?;
        if !fit.converged {
            log::warn!("EM for {} stopped at max_iters without converging", path.display());
        }
        write_atomic(&path, fit.gmm.to_json()?.as_bytes())?;
        log::info!("wrote {} ({} components)", path.display(), fit.gmm.n_components());
        Ok(fit.gmm)
    }

    /// Produce the shared artifacts every cell needs.
    fn prepare(&self, cells: &[Cell], want_gmms: bool, want_oracles: bool) -> Result<Shared, CliError> {
        let mut shared = Shared::default();
        let data_seeds: BTreeSet<u64> = cells.iter().filter(|c| needs_dataset(&c.cfg)).map(|c| c.seed).collect();
        for seed in data_seeds {
            let ds = self.dataset(seed, self.prereqs.datasets)?;
            shared.datasets.insert(seed, ds);
        }

        let feature_keys: BTreeSet<(FeatureFamily, usize, u64)> =
            cells.iter().map(|c| (c.cfg.feature_family, c.cfg.d, c.seed)).collect();
        let built = feature_keys
            .into_par_iter()
            .map(|(f, d, s)| Ok(((f, d, s), self.build_features(&shared, f, d, s)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        shared.features.extend(built);

        if want_gmms {
            let mut gmm_keys: BTreeMap<(FeatureFamily, usize, String, u64), BtdParams> = BTreeMap::new();
            for c in cells {
                if let Some(p) = c.cfg.sampler.gmm_params() {
                    gmm_keys.insert((c.cfg.feature_family, c.cfg.d, short_key(p), c.seed), *p);
                }
            }
            let fitted = gmm_keys
                .into_par_iter()
                .map(|(key, p)| {
                    let (family, d, _, seed) = key;
                    let phi = &shared.features[&(family, d, seed)];
                    let gmm = self.gmm(shared.datasets.get(&seed), phi, family, &p, seed, self.prereqs.gmms)?;
                    Ok((key.clone(), gmm))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            shared.gmms.extend(fitted);
        }

        if want_oracles {
            let tol = self.base.vi_tol;
            shared.oracles = self
                .tasks
                .par_iter()
                .map(|t| oracle_return(&self.mdp, &t.vector(), tol))
                .collect::<Result<Vec<_>, _>>()?;
        }
        Ok(shared)
    }

    pub fn fit_btd(&self) -> Result<Vec<PathBuf>, CliError> {
        let p = self.base.sampler.gmm_params().ok_or_else(|| {
            CliError::Config(format!("sampler '{}' does not use a GMM", self.base.sampler.name()))
        })?;
        let cells = self.cells(std::slice::from_ref(&self.base));
        self.prepare(&cells, true, false)?;
        Ok(cells
            .iter()
            .map(|c| gmm_path(&self.opts.out, c.cfg.feature_family, c.cfg.d, p, c.seed))
            .collect())
    }

    fn training_tasks(&self, shared: &Shared, cell: &Cell, phi: &FeatureMap) -> Result<TaskVectorSet, CliError> {
        let cfg = &cell.cfg;
        let (d, n, seed) = (cfg.d, cfg.library_size, cell.seed);
        let gmm = || -> Result<&Gmm, CliError> {
            let p = cfg.sampler.gmm_params().expect("GMM sampler");
            Ok(&shared.gmms[&(cfg.feature_family, d, short_key(p), seed)])
        };
        let dataset = || {
            shared
                .datasets
                .get(&seed)
                .ok_or_else(|| missing(&dataset_path(&self.opts.out, seed), "btdz gen-dataset"))
        };
        let gamma = self.mdp.discount();
        Ok(match &cfg.sampler {
            SamplerSpec::Uniform => sample_uniform_sphere(d, n, seed)?,
            SamplerSpec::Btd(_) => sample_btd(gmm()?, n, seed)?,
            SamplerSpec::Mixed { alpha, .. } => sample_mixed(*alpha, gmm()?, d, n, seed)?,
            SamplerSpec::Subtrajectory(e) => heuristic_tasks(
                dataset()?,
                phi,
                gamma,
                HeuristicMode::Subtrajectory,
                e.pdata_spec()?,
                n,
                seed,
            )?,
            SamplerSpec::FullTrajectory => heuristic_tasks(
                dataset()?,
                phi,
                gamma,
                HeuristicMode::FullTrajectory,
                Default::default(),
                n,
                seed,
            )?,
        })
    }

    fn library(&self, shared: &Shared, cell: &Cell) -> Result<PolicyLibrary, CliError> {
        let cfg = &cell.cfg;
        let phi = &shared.features[&(cfg.feature_family, cfg.d, cell.seed)];
        let path = library_path(&self.opts.out, cfg, cell.seed);
        let access = self.prereqs.libraries;
        if path.is_file() && !(self.opts.force && access == Access::Build) {
            let lib = io::library_from_bytes(&io::read_file(&path)?)?;
            lib.check_compatible(&self.mdp, phi).map_err(|e| {
                CliError::Config(format!("{} does not match this config: {e}", path.display()))
            })?;
            if access == Access::Build {
                notice_skip(&path);
            }
            return Ok(lib);
        }
        if access == Access::Require {
            return Err(missing(&path, "btdz train"));
        }
        let tasks = self.training_tasks(shared, cell, phi)?;
        let lib = train_policy_library(&self.mdp, phi, &tasks, cfg.vi_tol)?;
        write_atomic(&path, &io::library_to_bytes(&lib))?;
        Ok(lib)
    }

    /// Train (or load) the library of every seed of the base config.
    pub fn train(&self) -> Result<Vec<PathBuf>, CliError> {
        let cells = self.cells(std::slice::from_ref(&self.base));
        let shared = self.prepare(&cells, self.prereqs.libraries == Access::Build, false)?;
        cells
            .par_iter()
            .map(|c| {
                self.library(&shared, c)?;
                Ok(library_path(&self.opts.out, &c.cfg, c.seed))
            })
            .collect()
    }

    fn eval_cell(&self, shared: &Shared, cell: &Cell) -> Result<Vec<ReportRow>, CliError> {
        let cfg = &cell.cfg;
        let lib = self.library(shared, cell)?;
        let phi = &shared.features[&(cfg.feature_family, cfg.d, cell.seed)];
        let n = self.mdp.n_states();
        let settings = EvalSettings {
            probe: ProbeSpec {
                size: cfg.probe_size(n),
                with_replacement: true,
            },
            ridge: cfg.ridge,
            tol: cfg.vi_tol,
        };
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let start = Instant::now();
                let probe_seed = rng::stream(cell.seed, "probe-seed", i as u64).next_u64();
                let r = zero_shot_eval_with_oracle(
                    &self.mdp,
                    &lib,
                    phi,
                    &task.vector(),
                    settings,
                    probe_seed,
                    Some(shared.oracles[i]),
                )?;
                let gpi_gap = gpi_gap(&self.mdp, &lib, phi, &r.inferred.raw, &r.policy)?;
                Ok(ReportRow {
                    env: self.env.clone(),
                    feature_family: cfg.feature_family.to_string(),
                    d: cfg.d,
                    sampler: cfg.sampler.name().to_string(),
                    alpha: cfg.sampler.alpha(),
                    k: cfg.sampler.k(),
                    seed: cell.seed,
                    task_name: task.name.clone(),
                    ret: r.ret,
                    oracle: r.oracle,
                    ratio: r.ratio,
                    gpi_gap,
                    wall_ms: start.elapsed().as_millis(),
                })
            })
            .collect()
    }

    /// Evaluate every cell on every test task, rows in cell order.
    pub fn evaluate(&self, configs: &[ExperimentConfig]) -> Result<Vec<ReportRow>, CliError> {
        let cells = self.cells(configs);
        let shared = self.prepare(&cells, self.prereqs.libraries == Access::Build, true)?;
        let per_cell = cells
            .par_iter()
            .map(|c| self.eval_cell(&shared, c))
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(per_cell.into_iter().flatten().collect())
    }
}

/// Relative margin `min_s (V_gpi(s) - max_i V_i(s))` under the reward
/// `Phi z`; GPI guarantees it is non-negative.
pub fn gpi_gap(
    mdp: &TabularMdp,
    lib: &PolicyLibrary,
    phi: &FeatureMap,
    z: &DVector<f64>,
    gpi: &btdz_core::mdp::DeterministicPolicy,
) -> Result<f64, CliError> {
    let reward = phi.reward(z)?;
    let v_gpi = policy_values(mdp, gpi, &reward)?;
    let mut worst = f64::INFINITY;
    let mut scale = 1.0f64;
    for s in 0..mdp.n_states() {
        let best = lib
            .entries()
            .iter()
            .map(|e| e.sf.psi(s, e.policy.action(s)).dot(z))
            .fold(f64::NEG_INFINITY, f64::max);
        scale = scale.max(best.abs()).max(v_gpi[s].abs());
        worst = worst.min(v_gpi[s] - best);
    }
    Ok(worst / scale)
}
