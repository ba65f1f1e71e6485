//! Python bindings for the main types and operations: dataset
//! generation and I/O, density fitting, agent training, augmentation,
//! and the experiment pipeline.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use bosa_core::agent::{self, ActorCriticState, BosaConfig, Variant};
use bosa_core::augment::{self, NoiseSpec, PseudoModel};
use bosa_core::dataset::{self, DomainTag, OfflineDataset};
use bosa_core::density::{
    self, BehaviorDensity, CvaeTrainConfig, SupportThreshold, TransitionDensity,
};
use bosa_core::envs::{BehaviorSpec, EnvSpec, Family, Quality};
use bosa_core::harness::{self, ExperimentConfig};
use bosa_core::metrics;
use bosa_core::rng::Stream;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_array(rows: &[Vec<f64>], what: &str) -> PyResult<Array2<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err(format!("{what}: empty input")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Ok(Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]))
}

#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: OfflineDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.meta.provenance.clone()
    }

    fn content_hash(&self) -> String {
        dataset::content_hash(&self.inner)
    }

    /// One transition as (state, action, reward, next_state, done, tag).
    fn transition(&self, i: usize) -> PyResult<(Vec<f64>, Vec<f64>, f64, Vec<f64>, bool, String)> {
        let t = self
            .inner
            .transitions
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        let tag = match t.tag {
            DomainTag::Target => "target",
            DomainTag::Source => "source",
            DomainTag::Generated => "generated",
        };
        Ok((
            t.state.clone(),
            t.action.clone(),
            t.reward,
            t.next_state.clone(),
            t.done,
            tag.to_string(),
        ))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::write_file(&path, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: dataset::read_file(&path).map_err(err)?,
        })
    }
}

#[pyfunction]
#[pyo3(signature = (family, n, tier="medium", mass=1.0, noise=0.0, seed=0))]
fn gen_data(
    family: &str,
    n: usize,
    tier: &str,
    mass: f64,
    noise: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let fam = Family::parse(family).map_err(err)?;
    let spec = EnvSpec::new(fam, mass, noise).map_err(err)?;
    let tag = if mass == 1.0 && noise == 0.0 {
        DomainTag::Target
    } else {
        DomainTag::Source
    };
    let tier = Quality::parse(tier).map_err(err)?;
    Ok(PyDataset {
        inner: dataset::collect(&spec, &BehaviorSpec::tier(tier), n, tag, seed).map_err(err)?,
    })
}

#[pyfunction]
fn mix(target: &PyDataset, source: &PyDataset) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: dataset::mix(&target.inner, &source.inner).map_err(err)?,
    })
}

#[pyfunction]
fn subsample(data: &PyDataset, fraction: f64, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: dataset::subsample(&data.inner, fraction, seed).map_err(err)?,
    })
}

#[pyclass(name = "BehaviorDensity")]
struct PyBehaviorDensity {
    inner: BehaviorDensity,
}

#[pymethods]
impl PyBehaviorDensity {
    /// Importance-sampled log pi_beta(a|s) per row.
    #[pyo3(signature = (states, actions, l_samples=10, seed=0))]
    fn log_likelihood(
        &self,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        l_samples: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let s = rows_to_array(&states, "states")?;
        let a = rows_to_array(&actions, "actions")?;
        self.inner
            .log_likelihood(&s, &a, &mut Stream::derive(seed, "py-behavior"), l_samples)
            .map_err(err)
    }

    #[getter]
    fn dataset_hash(&self) -> String {
        self.inner.dataset_hash.clone()
    }
}

#[pyclass(name = "TransitionDensity")]
struct PyTransitionDensity {
    inner: TransitionDensity,
}

#[pymethods]
impl PyTransitionDensity {
    #[pyo3(signature = (states, actions, next_states, l_samples=10, seed=0))]
    fn log_likelihood(
        &self,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        next_states: Vec<Vec<f64>>,
        l_samples: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let s = rows_to_array(&states, "states")?;
        let a = rows_to_array(&actions, "actions")?;
        let ns = rows_to_array(&next_states, "next_states")?;
        self.inner
            .log_likelihood(&s, &a, &ns, &mut Stream::derive(seed, "py-transition"), l_samples)
            .map_err(err)
    }

    /// Indicator min-ensemble log-likelihood > log_threshold, per row.
    #[pyo3(signature = (log_threshold, states, actions, next_states, l_samples=10, seed=0))]
    fn in_support(
        &self,
        log_threshold: f64,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        next_states: Vec<Vec<f64>>,
        l_samples: usize,
        seed: u64,
    ) -> PyResult<Vec<bool>> {
        let s = rows_to_array(&states, "states")?;
        let a = rows_to_array(&actions, "actions")?;
        let ns = rows_to_array(&next_states, "next_states")?;
        self.inner
            .in_support(
                &SupportThreshold::from_log(log_threshold),
                &s,
                &a,
                &ns,
                &mut Stream::derive(seed, "py-support"),
                l_samples,
            )
            .map_err(err)
    }

    #[getter]
    fn dataset_hash(&self) -> String {
        self.inner.dataset_hash.clone()
    }
}

fn cvae_cfg(hidden: usize, depth: usize, iters: usize) -> CvaeTrainConfig {
    CvaeTrainConfig {
        hidden_dim: hidden,
        depth,
        iters,
        ..Default::default()
    }
}

#[pyfunction]
#[pyo3(signature = (d_mix, hidden=96, depth=3, iters=4000, seed=0))]
fn train_behavior_density(
    py: Python<'_>,
    d_mix: &PyDataset,
    hidden: usize,
    depth: usize,
    iters: usize,
    seed: u64,
) -> PyResult<PyBehaviorDensity> {
    let d = d_mix.inner.clone();
    let cfg = cvae_cfg(hidden, depth, iters);
    let bd = py
        .detach(move || density::train_behavior_density(&d, &cfg, seed))
        .map_err(err)?;
    Ok(PyBehaviorDensity { inner: bd })
}

#[pyfunction]
#[pyo3(signature = (d_target, k=5, hidden=96, depth=3, iters=4000, seed=0))]
fn train_transition_ensemble(
    py: Python<'_>,
    d_target: &PyDataset,
    k: usize,
    hidden: usize,
    depth: usize,
    iters: usize,
    seed: u64,
) -> PyResult<PyTransitionDensity> {
    let d = d_target.inner.clone();
    let cfg = cvae_cfg(hidden, depth, iters);
    let td = py
        .detach(move || density::train_transition_ensemble(&d, k, &cfg, seed))
        .map_err(err)?;
    Ok(PyTransitionDensity { inner: td })
}

#[pyclass(name = "Agent")]
struct PyAgent {
    state: ActorCriticState,
    cfg: BosaConfig,
    family: Family,
}

#[pymethods]
impl PyAgent {
    #[new]
    #[pyo3(signature = (family, variant="full", seed=0, hidden=64, depth=3, batch_size=256,
                        eps_th=-2.526, eps_prime_th=-2.526, lambda_policy=0.1,
                        conservation_weight=0.1, likelihood_samples=4,
                        support_weight=5.0, support_pin=2.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        family: &str,
        variant: &str,
        seed: u64,
        hidden: usize,
        depth: usize,
        batch_size: usize,
        eps_th: f64,
        eps_prime_th: f64,
        lambda_policy: f64,
        conservation_weight: f64,
        likelihood_samples: usize,
        support_weight: f64,
        support_pin: f64,
    ) -> PyResult<Self> {
        let fam = Family::parse(family).map_err(err)?;
        let variant = Variant::parse(variant)
            .ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}")))?;
        let cfg = BosaConfig {
            variant,
            hidden_dim: hidden,
            depth,
            batch_size,
            eps_th,
            eps_prime_th,
            lambda_policy,
            conservation_weight,
            likelihood_samples,
            support_weight,
            support_pin,
            ..Default::default()
        };
        let state = ActorCriticState::new(
            fam.state_dim(),
            fam.action_dim(),
            &cfg,
            &mut Stream::derive(seed, "py-agent"),
        )
        .map_err(err)?;
        Ok(PyAgent {
            state,
            cfg,
            family: fam,
        })
    }

    /// Run training steps; returns (final pass-rate, final lambda).
    #[pyo3(signature = (d_train, d_target, steps, behavior=None, trans=None, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        d_train: &PyDataset,
        d_target: &PyDataset,
        steps: usize,
        behavior: Option<&PyBehaviorDensity>,
        trans: Option<&PyTransitionDensity>,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let cfg = self.cfg.clone();
        let d_train = d_train.inner.clone();
        let d_tgt = d_target.inner.clone();
        let behavior = behavior.map(|b| b.inner.clone());
        let trans = trans.map(|t| t.inner.clone());
        let mut state = self.state.clone();
        let out = py.detach(move || -> Result<_, agent::AgentError> {
            let mut rng = Stream::derive(seed, "py-train");
            let mut last = (1.0, state.lambda);
            for _ in 0..steps {
                let d = agent::train_step(
                    &mut state,
                    &cfg,
                    &d_train,
                    &d_tgt,
                    behavior.as_ref(),
                    trans.as_ref(),
                    &mut rng,
                )?;
                last = (d.pass_rate, d.lambda);
            }
            Ok((state, last))
        });
        let (state, last) = out.map_err(err)?;
        self.state = state;
        Ok(last)
    }

    fn act(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        agent::act(&self.state, &state).map_err(err)
    }

    /// Normalized score on the target environment.
    #[pyo3(signature = (episodes=10, seed=0))]
    fn evaluate(&self, py: Python<'_>, episodes: usize, seed: u64) -> PyResult<f64> {
        let spec = EnvSpec::target(self.family);
        let state = self.state.clone();
        py.detach(move || {
            metrics::evaluate(&state, &spec, episodes, &Stream::derive(seed, "py-eval"))
                .map(|r| r.normalized_score)
        })
        .map_err(err)
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.state.lambda
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }
}

#[pyfunction]
#[pyo3(signature = (d_target, amplitude, n, seed=0))]
fn noise_augment(d_target: &PyDataset, amplitude: f64, n: usize, seed: u64) -> PyResult<PyDataset> {
    let mut rng = Stream::derive(seed, "py-noise");
    Ok(PyDataset {
        inner: augment::noise_augment(&d_target.inner, NoiseSpec::new(amplitude), n, &mut rng)
            .map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (d_target, n, model_budget=500, seed=0))]
fn model_augment(
    py: Python<'_>,
    d_target: &PyDataset,
    n: usize,
    model_budget: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    let d = d_target.inner.clone();
    let inner = py
        .detach(move || -> Result<_, augment::AugmentError> {
            let model = PseudoModel::fit(&d, &CvaeTrainConfig::default(), model_budget, seed)?;
            let mut rng = Stream::derive(seed, "py-model-augment");
            augment::model_augment(&d, &model, n, &mut rng)
        })
        .map_err(err)?;
    Ok(PyDataset { inner })
}

#[pyfunction]
fn transfer_deltas(score_10: f64, score_cross: f64, best_100: f64) -> PyResult<(f64, f64)> {
    let d = metrics::transfer_deltas(score_10, score_cross, best_100).map_err(err)?;
    Ok((d.x, d.y))
}

/// Execute a pipeline config; returns rows as
/// (variant, dataset, mean, std, seeds).
#[pyfunction]
fn run_pipeline(
    py: Python<'_>,
    config_path: PathBuf,
) -> PyResult<Vec<(String, String, f64, f64, usize)>> {
    let cfg = ExperimentConfig::from_file(Path::new(&config_path)).map_err(err)?;
    let report = py.detach(move || harness::run_pipeline(&cfg)).map_err(err)?;
    Ok(report
        .rows
        .into_iter()
        .map(|r| (r.variant, r.dataset, r.mean, r.std, r.seeds))
        .collect())
}

#[pymodule]
fn bosa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBehaviorDensity>()?;
    m.add_class::<PyTransitionDensity>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(mix, m)?)?;
    m.add_function(wrap_pyfunction!(subsample, m)?)?;
    m.add_function(wrap_pyfunction!(train_behavior_density, m)?)?;
    m.add_function(wrap_pyfunction!(train_transition_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(noise_augment, m)?)?;
    m.add_function(wrap_pyfunction!(model_augment, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
