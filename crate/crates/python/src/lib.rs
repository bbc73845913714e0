//! Python bindings: corpora, configuration, training, evaluation and
//! checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nfa_core::checkpoint::Checkpoint;
use nfa_core::config::RunConfig;
use nfa_core::eval::{self, fit_documents, perplexity_report, spectrum_report};
use nfa_core::sparse::{self as core_sparse, CorpusFormat};
use nfa_core::synthetic::{synthetic_split, SyntheticConfig};
use nfa_core::train::{self as core_train, encoder_inputs, train_epoch};
use nfa_core::{Corpus as CoreCorpus, FeatureStats, Nfa, SparseVector, TrainState, VariationalParams};

fn py_err(e: nfa_core::Error) -> PyErr {
    match e {
        nfa_core::Error::Io { .. } | nfa_core::Error::RawIo(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for nfa_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn sparse(dim: usize, counts: Vec<(usize, f64)>) -> PyResult<SparseVector> {
    SparseVector::from_pairs(dim, counts).py()
}

fn pairs(x: &SparseVector) -> Vec<(usize, f64)> {
    x.iter().collect()
}

/// A collection of sparse count vectors over a fixed vocabulary.
#[pyclass(module = "nfa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    /// `docs` is a list of `[(index, count), ...]` lists.
    #[new]
    fn new(docs: Vec<Vec<(usize, f64)>>, vocab_size: usize) -> PyResult<Self> {
        let docs = docs.into_iter().map(|d| sparse(vocab_size, d)).collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: CoreCorpus::new(docs, vocab_size).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, format = "triples", vocab_size = None))]
    fn load(path: PathBuf, format: &str, vocab_size: Option<usize>) -> PyResult<Self> {
        let format: CorpusFormat = format.parse().py()?;
        Ok(Self {
            inner: core_sparse::load_corpus(path, format, vocab_size).py()?,
        })
    }

    /// Train/test corpora drawn from a random ground-truth generator.
    #[staticmethod]
    #[pyo3(signature = (n_train, n_test, vocab = 2000, latent_dim = 10, mean_length = 30.0, seed = 0))]
    fn synthetic(
        n_train: usize,
        n_test: usize,
        vocab: usize,
        latent_dim: usize,
        mean_length: f64,
        seed: u64,
    ) -> PyResult<(Self, Self)> {
        let cfg = SyntheticConfig {
            vocab,
            latent_dim,
            mean_length,
            seed,
            ..SyntheticConfig::default()
        };
        let (_, train, test) = synthetic_split(&cfg, n_train, n_test).py()?;
        Ok((Self { inner: train }, Self { inner: test }))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_triples(path).py()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn total_tokens(&self) -> f64 {
        self.inner.total_tokens()
    }

    fn __len__(&self) -> usize {
        self.inner.doc_count()
    }

    fn doc(&self, i: usize) -> PyResult<Vec<(usize, f64)>> {
        if i >= self.inner.doc_count() {
            return Err(PyValueError::new_err(format!("document {i} out of range")));
        }
        Ok(pairs(self.inner.doc(i)))
    }

    /// Keeps the `l` most frequent features. Returns the restricted corpus
    /// and the kept original ids.
    fn restrict_top_l(&self, l: usize) -> PyResult<(Self, Vec<usize>)> {
        let (c, kept) = core_sparse::restrict_top_l(&self.inner, l).py()?;
        Ok((Self { inner: c }, kept))
    }

    fn select_features(&self, kept: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: core_sparse::select_features(&self.inner, &kept).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Corpus(docs={}, vocab_size={})", self.inner.doc_count(), self.inner.vocab_size())
    }
}

/// Run configuration. Keyword arguments use the config-file key names.
#[pyclass(module = "nfa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = match v.extract::<Vec<usize>>() {
                    Ok(list) => list.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                    Err(_) => v.str()?.to_string(),
                };
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => value,
                };
                inner.set(&key, &value).py()?;
            }
        }
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    /// Parsed `{key: value}` view, values as strings.
    fn to_dict(&self) -> Vec<(String, String)> {
        self.inner
            .serialize()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
            .collect()
    }

    fn __str__(&self) -> String {
        self.inner.serialize()
    }
}

/// Generator, inference network and optimizer state.
#[pyclass(module = "nfa")]
struct Model {
    config: RunConfig,
    nfa: Nfa,
    state: TrainState,
    stats: Option<FeatureStats>,
    best_score: f64,
    since_best: u64,
}

impl Model {
    fn stats(&self) -> PyResult<&FeatureStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has not been trained; feature statistics are unknown"))
    }

    fn inputs(&self, docs: &[SparseVector]) -> PyResult<Vec<SparseVector>> {
        encoder_inputs(self.config.train.features, self.stats()?, docs).py()
    }

    fn local(&self, steps: Option<usize>) -> core_train::LocalOptConfig {
        core_train::LocalOptConfig {
            steps: steps.unwrap_or(self.config.eval_inner_steps),
            ..self.config.train.local_opt()
        }
    }
}

#[pymethods]
impl Model {
    #[new]
    fn new(config: &Config, vocab_size: usize) -> PyResult<Self> {
        let nfa = Nfa::new(&config.inner.train, vocab_size).py()?;
        let state = TrainState::new(&nfa, &config.inner.train);
        Ok(Self {
            config: config.inner.clone(),
            nfa,
            state,
            stats: None,
            best_score: f64::INFINITY,
            since_best: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).py()?;
        Ok(Self {
            config: ck.config,
            nfa: ck.model,
            state: ck.state,
            stats: Some(ck.stats),
            best_score: ck.best_score,
            since_best: ck.since_best,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            config: self.config.clone(),
            model: self.nfa.clone(),
            state: self.state.clone(),
            stats: self.stats()?.clone(),
            best_score: self.best_score,
            since_best: self.since_best,
        }
        .save(path)
        .py()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.nfa.vocab_size()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.nfa.latent_dim()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.state.epoch
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.state.updates
    }

    #[getter]
    fn config(&self) -> Config {
        Config {
            inner: self.config.clone(),
        }
    }

    /// One pass over `corpus`. Feature statistics are fixed by the first
    /// corpus seen. Returns `{epoch, mean_elbo, mean_kl, updates}`.
    fn train_epoch<'py>(&mut self, py: Python<'py>, corpus: &Corpus) -> PyResult<Bound<'py, PyDict>> {
        if self.stats.is_none() {
            self.stats = Some(corpus.inner.stats());
        }
        let inputs = self.inputs(corpus.inner.docs())?;
        let m = py
            .detach(|| train_epoch(&mut self.nfa, &corpus.inner, &inputs, &self.config.train, &mut self.state))
            .py()?;
        let d = PyDict::new(py);
        d.set_item("epoch", m.epoch)?;
        d.set_item("mean_elbo", m.mean_elbo)?;
        d.set_item("mean_kl", m.mean_kl)?;
        d.set_item("updates", m.updates)?;
        Ok(d)
    }

    /// Variational parameters `(mu, logvar)` from the inference network.
    fn encode(&self, counts: Vec<(usize, f64)>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let x = sparse(self.nfa.vocab_size(), counts)?;
        let input = self.inputs(std::slice::from_ref(&x))?.remove(0);
        let (psi, _) = self.nfa.encoder.encode(&input).py()?;
        Ok((psi.mu, psi.logvar))
    }

    /// `log μ(z)` over the vocabulary.
    fn log_mu(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.nfa.generator.forward(&z).py()?.log_mu)
    }

    /// Held-out perplexity bounds `(amortized, optimized)`.
    #[pyo3(signature = (corpus, steps = None, seed = 0))]
    fn perplexity(&self, py: Python<'_>, corpus: &Corpus, steps: Option<usize>, seed: u64) -> PyResult<(f64, f64)> {
        let docs = corpus.inner.docs();
        let inputs = self.inputs(docs)?;
        let local = self.local(steps);
        let r = py
            .detach(|| fit_documents(&self.nfa, docs, &inputs, &local, seed).and_then(|f| perplexity_report(&f, docs)))
            .py()?;
        Ok((r.amortized, r.optimized))
    }

    /// Descending singular values of the Jacobian of `log μ` at `z = 0`.
    fn spectrum(&self) -> PyResult<Vec<f64>> {
        Ok(spectrum_report(&self.nfa.generator, 1.0).py()?.singular_values)
    }

    /// Spearman correlation between `KL(ψ(x) ‖ ψ*)` and rare-token counts.
    #[pyo3(signature = (corpus, steps = None, rare_frac = eval::DEFAULT_RARE_FRAC, seed = 0))]
    fn kl_rare_rho(
        &self,
        py: Python<'_>,
        corpus: &Corpus,
        steps: Option<usize>,
        rare_frac: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let docs = corpus.inner.docs();
        let inputs = self.inputs(docs)?;
        let local = self.local(steps);
        let stats = self.stats()?;
        let r = py
            .detach(|| eval::kl_rare_report(&self.nfa, docs, &inputs, stats, &local, rare_frac, seed))
            .py()?;
        Ok(r.rho)
    }

    /// Top `n` items for a user's fold-in feedback.
    #[pyo3(signature = (feedback, n = 100, exclude_fold_in = true))]
    fn recommend(&self, feedback: Vec<(usize, f64)>, n: usize, exclude_fold_in: bool) -> PyResult<Vec<usize>> {
        let x = sparse(self.nfa.vocab_size(), feedback)?;
        let input = self.inputs(std::slice::from_ref(&x))?.remove(0);
        let mut ranking =
            eval::rank_items(&self.nfa.generator, &self.nfa.encoder, &input, &x, exclude_fold_in).py()?;
        ranking.truncate(n);
        Ok(ranking)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(vocab_size={}, latent_dim={}, mode={}, epoch={})",
            self.nfa.vocab_size(),
            self.nfa.latent_dim(),
            self.config.train.mode,
            self.state.epoch
        )
    }
}

#[pyfunction]
fn kl_to_prior(mu: Vec<f64>, logvar: Vec<f64>) -> PyResult<f64> {
    Ok(nfa_core::encoder::kl_to_prior(&VariationalParams::new(mu, logvar).py()?))
}

#[pyfunction]
fn kl_between(a: (Vec<f64>, Vec<f64>), b: (Vec<f64>, Vec<f64>)) -> PyResult<f64> {
    let a = VariationalParams::new(a.0, a.1).py()?;
    let b = VariationalParams::new(b.0, b.1).py()?;
    nfa_core::encoder::kl_between(&a, &b).py()
}

fn target_vector(ranking: &[usize], targets: &[usize]) -> PyResult<SparseVector> {
    let dim = ranking.iter().chain(targets).max().map_or(0, |m| m + 1);
    SparseVector::from_pairs(dim, targets.iter().map(|&t| (t, 1.0))).py()
}

#[pyfunction]
fn recall_at_n(ranking: Vec<usize>, targets: Vec<usize>, n: usize) -> PyResult<f64> {
    eval::recall_at_n(&ranking, &target_vector(&ranking, &targets)?, n).py()
}

#[pyfunction]
fn ndcg_at_n(ranking: Vec<usize>, targets: Vec<usize>, n: usize) -> PyResult<f64> {
    eval::ndcg_at_n(&ranking, &target_vector(&ranking, &targets)?, n).py()
}

#[pyfunction]
fn anneal_weight(update: u64, total: u64) -> f64 {
    core_train::anneal_weight(update, total)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&a, &b).py()
}

#[pymodule]
fn nfa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(kl_to_prior, m)?)?;
    m.add_function(wrap_pyfunction!(kl_between, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_n, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_n, m)?)?;
    m.add_function(wrap_pyfunction!(anneal_weight, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    Ok(())
}
