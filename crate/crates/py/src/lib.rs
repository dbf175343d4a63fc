//! Python bindings: configuration, data generation, training, routing and augmentation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmow_core::adapt::{self, AdapterInit, Persistence, RefinementConfig};
use tmow_core::config::{load_config, RunConfig};
use tmow_core::harness::{augment_domain, scenario_zero_shot};
use tmow_core::pipeline::{generate_data, heldout_items, identifiability, train_pipeline, TrainedRun};
use tmow_core::router::{PrototypeSet, RouterInput};
use tmow_core::TmowError;

fn err(e: TmowError) -> PyErr {
    match e {
        TmowError::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        TmowError::Io { .. } | TmowError::Degenerate(_) | TmowError::Generation(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Validated run configuration.
#[pyclass(name = "Config", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text; omitted keys take their defaults.
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(toml).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_config(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.router.k
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.router.tau
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.refinement.alpha
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={:?}, experts={})", self.inner.hash(), self.inner.n_experts())
    }
}

/// Expert demonstrations for every configured domain, as JSON Lines.
#[pyfunction]
fn generate_jsonl(py: Python<'_>, config: &PyConfig, seed: u64) -> PyResult<String> {
    let cfg = config.inner.clone();
    py.detach(|| generate_data(&cfg, seed)?.to_jsonl()).map_err(err)
}

/// Runs the full training pipeline.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig, seed: u64) -> PyResult<Run> {
    let cfg = config.inner.clone();
    let run = py.detach(|| train_pipeline(&cfg, seed)).map_err(err)?;
    Ok(Run { cfg, seed, run })
}

/// Trained mixture, router and data of one seed.
#[pyclass]
struct Run {
    cfg: RunConfig,
    seed: u64,
    run: TrainedRun,
}

#[pymethods]
impl Run {
    #[getter]
    fn n_experts(&self) -> usize {
        self.run.artifacts.mixture.n_experts()
    }

    #[getter]
    fn seen_domains(&self) -> Vec<String> {
        self.run.artifacts.dataset.seen.iter().map(|d| d.domain_id.clone()).collect()
    }

    #[getter]
    fn unseen_domains(&self) -> Vec<String> {
        self.run.artifacts.dataset.unseen.iter().map(|d| d.domain_id.clone()).collect()
    }

    /// Share of held-out observations whose final-layer best expert is their own domain.
    fn identifiability(&self, py: Python<'_>) -> PyResult<f64> {
        py.detach(|| {
            let a = &self.run.artifacts;
            let items = heldout_items(&self.cfg, &a.vocab, &a.dataset, self.seed)?;
            identifiability(&a.router, &items)
        })
        .map_err(err)
    }

    /// Success rate per variant ("base", "tmow", "no-refine") and domain group
    /// ("seen", "unseen", "all").
    fn zero_shot(&self, py: Python<'_>) -> PyResult<BTreeMap<String, BTreeMap<String, f64>>> {
        let run = py
            .detach(|| scenario_zero_shot(&self.run.artifacts, &self.cfg.eval_settings(self.seed), &serde_json::Value::Null))
            .map_err(err)?;
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for row in &run.report.rows {
            if ["seen", "unseen", "all"].contains(&row.domain.as_str()) {
                out.entry(row.scenario.clone()).or_default().insert(row.domain.clone(), row.sr);
            }
        }
        Ok(out)
    }

    /// Per-layer mixture weights for the opening observation of a sampled episode.
    #[pyo3(signature = (domain_id, episode_seed = 0))]
    fn route(&self, domain_id: &str, episode_seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let a = &self.run.artifacts;
        let domain = a
            .dataset
            .domain(domain_id)
            .ok_or_else(|| PyKeyError::new_err(domain_id.to_string()))?;
        let ep = domain.sample_episode(&mut ChaCha8Rng::seed_from_u64(episode_seed)).map_err(err)?;
        let input = RouterInput::new(&a.vocab, &self.cfg.env.relation_weights, &ep.instruction, &ep.initial).map_err(err)?;
        Ok(a.router.route(&input, self.cfg.router.k, self.cfg.router.tau).map_err(err)?.weights)
    }

    /// Adds an expert for `domain_id` from its first `shots` demonstrations.
    #[pyo3(signature = (domain_id, shots, scratch = false))]
    fn augment(&mut self, py: Python<'_>, domain_id: &str, shots: usize, scratch: bool) -> PyResult<String> {
        let init = if scratch { AdapterInit::Scratch } else { AdapterInit::Distilled };
        let settings = self.cfg.eval_settings(self.seed);
        let art = &mut self.run.artifacts;
        let domain = art
            .dataset
            .domain(domain_id)
            .cloned()
            .ok_or_else(|| PyKeyError::new_err(domain_id.to_string()))?;
        let (mut mixture, mut router) = (art.mixture.clone(), art.router.clone());
        let report = py
            .detach(|| augment_domain(&mut mixture, &mut router, art, &domain, shots, init, &settings))
            .map_err(err)?;
        art.mixture = mixture;
        art.router = router;
        serde_json::to_string(&report).map_err(|e| err(e.into()))
    }

    /// Writes `mixture.ckpt.json` and `router.ckpt.json` into `dir`.
    fn save(&self, dir: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
        let a = &self.run.artifacts;
        std::fs::create_dir_all(&dir).map_err(|e| err(TmowError::io(&dir, e)))?;
        let m = dir.join("mixture.ckpt.json");
        let r = dir.join("router.ckpt.json");
        a.mixture.to_checkpoint(&a.vocab.hash(), self.seed).and_then(|c| c.save(&m)).map_err(err)?;
        a.router.to_checkpoint(self.seed, &self.cfg.hash()).and_then(|c| c.save(&r)).map_err(err)?;
        Ok((m, r))
    }
}

/// Top-K routing of per-layer embeddings against per-layer expert prototypes
/// (`prototypes[layer][expert]`). Returns `(scores, weights)`.
#[pyfunction]
fn route(
    embeddings: Vec<Vec<f64>>,
    prototypes: Vec<Vec<Vec<f64>>>,
    k: usize,
    tau: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = tmow_core::router::route(&embeddings, &PrototypeSet { layers: prototypes }, k, tau).map_err(err)?;
    Ok((d.scores, d.weights))
}

/// One refinement step of every prototype toward the live embeddings.
#[pyfunction]
#[pyo3(signature = (prototypes, embeddings, alpha = 0.5, tau_r = 1.0, exact = true))]
fn refine_prototypes(
    prototypes: Vec<Vec<Vec<f64>>>,
    embeddings: Vec<Vec<f64>>,
    alpha: f64,
    tau_r: f64,
    exact: bool,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let mut set = PrototypeSet { layers: prototypes };
    let cfg = RefinementConfig {
        alpha,
        tau_r,
        persistence: Persistence::PerEpisode,
        exact,
    };
    adapt::refine_prototypes(&mut set, &embeddings, &cfg).map_err(err)?;
    Ok(set.layers)
}

#[pymodule]
fn tmow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(generate_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(refine_prototypes, m)?)?;
    Ok(())
}
