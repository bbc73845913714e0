//! Sparse corpora drawn from a known generator.

use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::mlp::{Activation, MlpSpec};
use crate::model::Generator;
use crate::sparse::{Corpus, SparseVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub vocab: usize,
    pub mean_length: f64,
    /// Multiplier on the Glorot-initialized weights.
    pub weight_scale: f64,
    /// Output biases are `−s · ln(v + 1)`, giving a Zipf-like marginal.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            hidden: vec![100, 100],
            vocab: 2000,
            mean_length: 30.0,
            weight_scale: 2.0,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

/// The ground-truth generator of `cfg`.
pub fn true_generator(cfg: &SyntheticConfig) -> Result<Generator> {
    let mut dims = vec![cfg.latent_dim];
    dims.extend(&cfg.hidden);
    dims.push(cfg.vocab);
    let spec = MlpSpec::new(dims, Activation::Tanh)?;
    let mut rng = Rng::derive(cfg.seed, 0);
    let mut gen = Generator::new(spec, &mut rng);
    let n = gen.layers().len();
    for (l, layer) in gen.layers_mut().iter_mut().enumerate() {
        for w in layer.weight.as_mut_slice() {
            *w *= cfg.weight_scale;
        }
        if l + 1 == n {
            for (v, b) in layer.bias.iter_mut().enumerate() {
                *b = -cfg.zipf_exponent * ((v + 1) as f64).ln();
            }
        }
    }
    Ok(gen)
}

/// `n_docs` documents with Poisson lengths (at least one token each).
/// `stream` selects an independent draw, so train and test sets can share
/// a generator without sharing noise.
pub fn sample_corpus(gen: &Generator, n_docs: usize, mean_length: f64, seed: u64, stream: u64) -> Result<Corpus> {
    if !(mean_length > 0.0) {
        return Err(Error::InvalidArgument(format!("mean document length must be positive, got {mean_length}")));
    }
    let poisson = Poisson::new(mean_length).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = Rng::derive(seed, 1 + stream);
    let docs = (0..n_docs)
        .map(|_| {
            let n = (poisson.sample(&mut rng) as usize).max(1);
            gen.sample_document(&mut rng, n)
        })
        .collect::<Result<Vec<SparseVector>>>()?;
    Corpus::new(docs, gen.vocab_size())
}

/// Ground truth plus train and test corpora.
pub fn synthetic_split(cfg: &SyntheticConfig, n_train: usize, n_test: usize) -> Result<(Generator, Corpus, Corpus)> {
    let gen = true_generator(cfg)?;
    let train = sample_corpus(&gen, n_train, cfg.mean_length, cfg.seed, 0)?;
    let test = sample_corpus(&gen, n_test, cfg.mean_length, cfg.seed, 1)?;
    Ok((gen, train, test))
}
