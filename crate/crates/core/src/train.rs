//! Objectives, Adam, local variational refinement and the epoch drivers.
//!
//! Three modes share one loop:
//!
//! * `vae`: θ and φ are updated jointly from the bound at ψ(x).
//! * `svi`: ψ starts at the prior, is refined for `M` steps per example and
//!   only θ is updated.
//! * `hybrid`: ψ starts at ψ(x) and is refined for `M` steps; θ is updated
//!   from the refined bound, then φ from the bound at ψ(x) under the new θ.
//!
//! Every example draws its noise from a stream derived from
//! `(seed, epoch, document index)`, and minibatch gradients are reduced over
//! fixed-size chunks in a fixed order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::encoder::{kl_to_prior, Encoder, EncoderGrads, EncoderSpec, VariationalParams};
use crate::error::{Error, Result};
use crate::math::{gaussian_sample, Rng};
use crate::mlp::{Activation, MlpGrads, MlpSpec};
use crate::model::{multinomial_log_likelihood, Generator};
use crate::sparse::{normalize_counts, tfidf_l2, Corpus, FeatureStats, SparseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Vae,
    Svi,
    Hybrid,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Mode::Vae),
            "svi" => Ok(Mode::Svi),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vae => "vae",
            Mode::Svi => "svi",
            Mode::Hybrid => "hybrid",
        })
    }
}

/// Representation fed to the inference network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Features {
    /// Counts divided by document length.
    Norm,
    /// L2-normalized TF-IDF.
    Tfidf,
}

impl std::str::FromStr for Features {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Features::Norm),
            "tfidf" => Ok(Features::Tfidf),
            other => Err(Error::InvalidArgument(format!("unknown feature type {other:?}"))),
        }
    }
}

impl std::fmt::Display for Features {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Features::Norm => "norm",
            Features::Tfidf => "tfidf",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiOptimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for PsiOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(PsiOptimizer::Adam),
            "sgd" => Ok(PsiOptimizer::Sgd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for PsiOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PsiOptimizer::Adam => "adam",
            PsiOptimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Number of refinement steps on ψ per example (`M`).
    pub inner_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub features: Features,
    /// Updates over which the KL weight ramps from 0 to 1; 0 disables.
    pub anneal_updates: u64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub psi_optimizer: PsiOptimizer,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Monte Carlo samples per gradient estimate.
    pub samples: usize,
    /// Stop the inner loop early when the relative change of the evaluation
    /// bound falls below this value; 0 disables.
    pub inner_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            inner_steps: 100,
            batch_size: 500,
            epochs: 10,
            seed: 0,
            latent_dim: 100,
            generator_hidden: vec![100, 100],
            encoder_hidden: vec![100, 100],
            activation: Activation::Tanh,
            features: Features::Tfidf,
            anneal_updates: 0,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            lr_psi: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            psi_optimizer: PsiOptimizer::Adam,
            logvar_min: -8.0,
            logvar_max: 8.0,
            samples: 1,
            inner_tol: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1");
        }
        if self.samples == 0 {
            return bad("samples must be >= 1");
        }
        if self.encoder_hidden.is_empty() {
            return bad("encoder_hidden needs at least one layer");
        }
        if self.generator_hidden.contains(&0) || self.encoder_hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        if !(self.logvar_min < self.logvar_max) {
            return bad("logvar_min must be below logvar_max");
        }
        for (name, lr) in [("lr_theta", self.lr_theta), ("lr_phi", self.lr_phi), ("lr_psi", self.lr_psi)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn generator_spec(&self, vocab: usize) -> Result<MlpSpec> {
        let mut dims = vec![self.latent_dim];
        dims.extend(&self.generator_hidden);
        dims.push(vocab);
        MlpSpec::new(dims, self.activation)
    }

    pub fn encoder_spec(&self, vocab: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim: vocab,
            hidden: self.encoder_hidden.clone(),
            latent_dim: self.latent_dim,
            activation: self.activation,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn local_opt(&self) -> LocalOptConfig {
        LocalOptConfig {
            steps: self.inner_steps,
            optimizer: self.psi_optimizer,
            adam: self.adam(self.lr_psi),
            logvar_bounds: (self.logvar_min, self.logvar_max),
            samples: self.samples,
            eval_samples: 1,
            tol: self.inner_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor first and second moments with a shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors(config: AdamConfig, tensors: &[&[f64]]) -> Self {
        let shapes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected Adam step. With `maximize` the parameters move
    /// along `grads` (ascent), otherwise against them.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], maximize: bool) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} tensors", self.m.len()),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    format!("tensor {i} of length {}", self.m[i].len()),
                    format!("{} params, {} grads", p.len(), g.len()),
                ));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let sign = if maximize { 1.0 } else { -1.0 };
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] += sign * lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear KL-weight ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnealSchedule {
    pub total_updates: u64,
    pub current: u64,
}

impl AnnealSchedule {
    pub fn weight(&self) -> f64 {
        anneal_weight(self.current, self.total_updates)
    }
}

/// `1` when `total == 0`, else `min(1, update / total)`.
pub fn anneal_weight(update: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        (update as f64 / total as f64).min(1.0)
    }
}

/// The generative and inference networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Nfa {
    pub generator: Generator,
    pub encoder: Encoder,
}

impl Nfa {
    pub fn new(config: &TrainConfig, vocab: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, STREAM_INIT);
        let generator = Generator::new(config.generator_spec(vocab)?, &mut rng);
        let encoder = Encoder::new(config.encoder_spec(vocab), &mut rng)?
            .with_logvar_bounds((config.logvar_min, config.logvar_max));
        Ok(Self { generator, encoder })
    }

    pub fn vocab_size(&self) -> usize {
        self.generator.vocab_size()
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.latent_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.generator.is_finite() && self.encoder.is_finite()
    }
}

/// Encoder input for every document.
pub fn encoder_inputs(features: Features, stats: &FeatureStats, docs: &[SparseVector]) -> Result<Vec<SparseVector>> {
    docs.iter()
        .map(|d| match features {
            Features::Tfidf => tfidf_l2(stats, d),
            Features::Norm => Ok(normalize_counts(d)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    /// `loglik − weight · kl`.
    pub value: f64,
    pub loglik: f64,
    pub kl: f64,
}

impl ElboParts {
    /// The unweighted bound `loglik − kl`.
    pub fn bound(&self) -> f64 {
        self.loglik - self.kl
    }
}

/// Single-sample bound at `z = mu + σ ⊙ eps`, analytic KL.
pub fn elbo(gen: &Generator, psi: &VariationalParams, x: &SparseVector, eps: &[f64], anneal: f64) -> Result<ElboParts> {
    let z = psi.sample_with(eps);
    let fwd = gen.forward(&z)?;
    let loglik = multinomial_log_likelihood(&fwd.log_mu, x)?;
    let kl = kl_to_prior(psi);
    Ok(ElboParts {
        value: loglik - anneal * kl,
        loglik,
        kl,
    })
}

/// Gradient of the bound w.r.t. the variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGrad {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Chain rule from `∂loglik/∂z` to (μ, logvar), plus the analytic KL term.
fn psi_grad_from_z(psi: &VariationalParams, eps: &[f64], grad_z: &[f64], anneal: f64) -> PsiGrad {
    let k = psi.dim();
    let mut mu = Vec::with_capacity(k);
    let mut logvar = Vec::with_capacity(k);
    for i in 0..k {
        let sigma = (0.5 * psi.logvar[i]).exp();
        mu.push(grad_z[i] - anneal * psi.mu[i]);
        logvar.push(0.5 * sigma * eps[i] * grad_z[i] - anneal * 0.5 * (psi.logvar[i].exp() - 1.0));
    }
    PsiGrad { mu, logvar }
}

pub fn elbo_grad_psi(
    gen: &Generator,
    psi: &VariationalParams,
    x: &SparseVector,
    eps: &[f64],
    anneal: f64,
) -> Result<(ElboParts, PsiGrad)> {
    let z = psi.sample_with(eps);
    let fwd = gen.forward(&z)?;
    let loglik = multinomial_log_likelihood(&fwd.log_mu, x)?;
    let kl = kl_to_prior(psi);
    let gz = gen.grad_z(&fwd, x)?;
    Ok((
        ElboParts {
            value: loglik - anneal * kl,
            loglik,
            kl,
        },
        psi_grad_from_z(psi, eps, &gz, anneal),
    ))
}

/// Adds `scale · ∇θ` of the bound into `acc`. The KL term has no θ
/// dependence, so the weight only affects the returned value.
pub fn elbo_grad_theta_accumulate(
    gen: &Generator,
    psi: &VariationalParams,
    x: &SparseVector,
    eps: &[f64],
    anneal: f64,
    scale: f64,
    acc: &mut MlpGrads,
) -> Result<ElboParts> {
    let z = psi.sample_with(eps);
    let fwd = gen.forward(&z)?;
    let loglik = multinomial_log_likelihood(&fwd.log_mu, x)?;
    gen.backward_accumulate(&fwd, x, scale, acc)?;
    let kl = kl_to_prior(psi);
    Ok(ElboParts {
        value: loglik - anneal * kl,
        loglik,
        kl,
    })
}

pub fn elbo_grad_theta(
    gen: &Generator,
    psi: &VariationalParams,
    x: &SparseVector,
    eps: &[f64],
    anneal: f64,
) -> Result<(ElboParts, MlpGrads)> {
    let mut acc = gen.zero_grads();
    let parts = elbo_grad_theta_accumulate(gen, psi, x, eps, anneal, 1.0, &mut acc)?;
    Ok((parts, acc))
}

/// Gradient w.r.t. φ of the bound at ψ(x̃), optionally accumulating ∇θ of
/// the same single-sample bound (one shared forward pass).
#[allow(clippy::too_many_arguments)]
pub fn elbo_grad_phi_accumulate(
    gen: &Generator,
    enc: &Encoder,
    x_enc: &SparseVector,
    x: &SparseVector,
    eps: &[f64],
    anneal: f64,
    scale: f64,
    acc_phi: &mut EncoderGrads,
    acc_theta: Option<&mut MlpGrads>,
) -> Result<ElboParts> {
    let (psi, cache) = enc.encode(x_enc)?;
    let z = psi.sample_with(eps);
    let fwd = gen.forward(&z)?;
    let loglik = multinomial_log_likelihood(&fwd.log_mu, x)?;
    let gz = match acc_theta {
        Some(acc) => gen.backward_accumulate(&fwd, x, scale, acc)?,
        None => gen.grad_z(&fwd, x)?,
    };
    let g = psi_grad_from_z(&psi, eps, &gz, anneal);
    enc.backward_accumulate(&cache, &g.mu, &g.logvar, scale, acc_phi)?;
    let kl = kl_to_prior(&psi);
    Ok(ElboParts {
        value: loglik - anneal * kl,
        loglik,
        kl,
    })
}

pub fn elbo_grad_phi(
    gen: &Generator,
    enc: &Encoder,
    x_enc: &SparseVector,
    x: &SparseVector,
    eps: &[f64],
    anneal: f64,
) -> Result<(ElboParts, EncoderGrads)> {
    let mut acc = enc.zero_grads();
    let parts = elbo_grad_phi_accumulate(gen, enc, x_enc, x, eps, anneal, 1.0, &mut acc, None)?;
    Ok((parts, acc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptConfig {
    pub steps: usize,
    pub optimizer: PsiOptimizer,
    pub adam: AdamConfig,
    pub logvar_bounds: (f64, f64),
    /// Noise draws averaged per gradient step.
    pub samples: usize,
    /// Fixed noise draws used to score iterates.
    pub eval_samples: usize,
    pub tol: f64,
}

impl Default for LocalOptConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            optimizer: PsiOptimizer::Adam,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            logvar_bounds: (-8.0, 8.0),
            samples: 1,
            eval_samples: 1,
            tol: 0.0,
        }
    }
}

/// Outcome of [`optimize_local_psi`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    /// Best iterate under the evaluation noise.
    pub psi: VariationalParams,
    /// Evaluation bound of every iterate, `trace[0]` being the start.
    pub trace: Vec<f64>,
    pub best_step: usize,
}

impl LocalFit {
    pub fn best_value(&self) -> Option<f64> {
        self.trace.get(self.best_step).copied()
    }
}

/// Mean bound over a fixed set of noise draws.
pub fn elbo_on(gen: &Generator, psi: &VariationalParams, x: &SparseVector, eval_eps: &[Vec<f64>], anneal: f64) -> Result<f64> {
    let mut s = 0.0;
    for e in eval_eps {
        s += elbo(gen, psi, x, e, anneal)?.value;
    }
    Ok(s / eval_eps.len() as f64)
}

/// Refines `psi0` for `cfg.steps` ascent steps with fresh noise per step,
/// returning the iterate with the highest bound on one held-fixed set of
/// evaluation draws. With zero steps `psi0` is returned untouched and no
/// randomness is consumed.
pub fn optimize_local_psi(
    gen: &Generator,
    x: &SparseVector,
    psi0: &VariationalParams,
    cfg: &LocalOptConfig,
    rng: &mut Rng,
    anneal: f64,
) -> Result<LocalFit> {
    if cfg.steps == 0 {
        return Ok(LocalFit {
            psi: psi0.clone(),
            trace: Vec::new(),
            best_step: 0,
        });
    }
    let k = psi0.dim();
    let eval_eps = (0..cfg.eval_samples.max(1))
        .map(|_| gaussian_sample(rng, k))
        .collect::<Result<Vec<_>>>()?;
    optimize_local_psi_with(gen, x, psi0, cfg, rng, anneal, &eval_eps)
}

/// [`optimize_local_psi`] with caller-supplied evaluation draws.
pub fn optimize_local_psi_with(
    gen: &Generator,
    x: &SparseVector,
    psi0: &VariationalParams,
    cfg: &LocalOptConfig,
    rng: &mut Rng,
    anneal: f64,
    eval_eps: &[Vec<f64>],
) -> Result<LocalFit> {
    refine_psi(
        psi0,
        cfg,
        rng,
        |psi| elbo_on(gen, psi, x, eval_eps, anneal),
        |psi, eps| Ok(elbo_grad_psi(gen, psi, x, eps, anneal)?.1),
    )
}

/// Best-iterate stochastic ascent on ψ for an arbitrary objective.
/// `value` scores an iterate (on fixed noise); `grad` returns the gradient
/// for one fresh noise draw.
pub fn refine_psi<V, G>(psi0: &VariationalParams, cfg: &LocalOptConfig, rng: &mut Rng, value: V, grad: G) -> Result<LocalFit>
where
    V: Fn(&VariationalParams) -> Result<f64>,
    G: Fn(&VariationalParams, &[f64]) -> Result<PsiGrad>,
{
    let k = psi0.dim();
    let start = value(psi0)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(start);
    let mut best = psi0.clone();
    let mut best_step = 0;
    let mut best_value = start;

    let mut psi = psi0.clone();
    let mut adam = AdamState::new(cfg.adam, &[k, k]);
    let samples = cfg.samples.max(1);
    for step in 1..=cfg.steps {
        let mut g_mu = vec![0.0; k];
        let mut g_lv = vec![0.0; k];
        for _ in 0..samples {
            let eps = gaussian_sample(rng, k)?;
            let g = grad(&psi, &eps)?;
            for i in 0..k {
                g_mu[i] += g.mu[i] / samples as f64;
                g_lv[i] += g.logvar[i] / samples as f64;
            }
        }
        match cfg.optimizer {
            PsiOptimizer::Adam => {
                adam.step(&mut [&mut psi.mu, &mut psi.logvar], &[&g_mu, &g_lv], true)?;
            }
            PsiOptimizer::Sgd => {
                for i in 0..k {
                    psi.mu[i] += cfg.adam.lr * g_mu[i];
                    psi.logvar[i] += cfg.adam.lr * g_lv[i];
                }
            }
        }
        psi.clamp_logvar(cfg.logvar_bounds);
        if !psi.is_finite() {
            break;
        }
        let v = value(&psi)?;
        let prev = *trace.last().expect("starts nonempty");
        trace.push(v);
        if v > best_value {
            best_value = v;
            best_step = step;
            best = psi.clone();
        }
        if cfg.tol > 0.0 && ((v - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tol {
            break;
        }
    }
    Ok(LocalFit {
        psi: best,
        trace,
        best_step,
    })
}

/// Optimizer state and counters carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam_theta: AdamState,
    pub adam_phi: AdamState,
    /// Parameter updates performed so far (drives annealing).
    pub updates: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Shuffling stream.
    pub rng: Rng,
}

impl TrainState {
    pub fn new(model: &Nfa, config: &TrainConfig) -> Self {
        Self {
            adam_theta: AdamState::for_tensors(config.adam(config.lr_theta), &model.generator.tensors()),
            adam_phi: AdamState::for_tensors(config.adam(config.lr_phi), &model.encoder.tensors()),
            updates: 0,
            epoch: 0,
            rng: Rng::derive(config.seed, STREAM_SHUFFLE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Mean unweighted bound of the ψ used for the θ update.
    pub mean_elbo: f64,
    pub mean_kl: f64,
    pub updates: u64,
}

const STREAM_INIT: u64 = (1 << 63) | (1 << 62);
const STREAM_SHUFFLE: u64 = (1 << 63) | (1 << 62) | 1;
/// Documents per reduction chunk.
const CHUNK: usize = 8;

/// Noise stream of one document in one epoch.
pub fn doc_stream(seed: u64, epoch: u64, doc: usize) -> Rng {
    Rng::derive(seed, ((epoch & 0x7FFF_FFFF) << 32) | (doc as u64 & 0xFFFF_FFFF))
}

/// Stream for the encoder step of the hybrid update, disjoint from
/// [`doc_stream`].
fn phi_stream(seed: u64, epoch: u64, doc: usize) -> Rng {
    Rng::derive(seed, (1 << 63) | ((epoch & 0x3FFF_FFFF) << 32) | (doc as u64 & 0xFFFF_FFFF))
}

/// Gradients summed over a minibatch (already scaled to a mean) together
/// with the summed per-example bound and KL.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub theta: Option<MlpGrads>,
    pub phi: Option<EncoderGrads>,
    pub elbo_sum: f64,
    pub kl_sum: f64,
}

fn add_into(dst: &mut [&mut [f64]], src: &[&[f64]]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s.iter()) {
            *a += b;
        }
    }
}

/// Sums chunk partials in chunk order.
fn reduce(parts: Vec<BatchGrads>) -> BatchGrads {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("nonempty batch");
    for p in it {
        if let (Some(a), Some(b)) = (acc.theta.as_mut(), p.theta.as_ref()) {
            add_into(&mut a.tensors_mut(), &b.tensors());
        }
        if let (Some(a), Some(b)) = (acc.phi.as_mut(), p.phi.as_ref()) {
            add_into(&mut a.tensors_mut(), &b.tensors());
        }
        acc.elbo_sum += p.elbo_sum;
        acc.kl_sum += p.kl_sum;
    }
    acc
}

fn draws(rng: &mut Rng, samples: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    (0..samples).map(|_| gaussian_sample(rng, k)).collect()
}

/// Mode actually run: without refinement the hybrid update is the joint
/// update.
pub fn effective_mode(config: &TrainConfig) -> Mode {
    match config.mode {
        Mode::Hybrid if config.inner_steps == 0 => Mode::Vae,
        m => m,
    }
}

/// Mean gradient of the θ step over `batch` (and of the φ step in `vae`
/// mode). Example `d` draws its noise from [`doc_stream`]`(seed, epoch, d)`.
pub fn batch_gradients(
    model: &Nfa,
    corpus: &Corpus,
    inputs: &[SparseVector],
    batch: &[usize],
    config: &TrainConfig,
    epoch: u64,
    anneal: f64,
) -> Result<BatchGrads> {
    let mode = effective_mode(config);
    let (gen, enc) = (&model.generator, &model.encoder);
    let k = model.latent_dim();
    let samples = config.samples;
    let local = config.local_opt();
    let scale = 1.0 / (batch.len() * samples) as f64;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<BatchGrads> {
            let mut theta = gen.zero_grads();
            let mut phi = (mode == Mode::Vae).then(|| enc.zero_grads());
            let (mut elbo_sum, mut kl_sum) = (0.0, 0.0);
            for &d in chunk {
                let x = corpus.doc(d);
                let mut rng = doc_stream(config.seed, epoch, d);
                let mut bound = 0.0;
                let mut kl = 0.0;
                match mode {
                    Mode::Vae => {
                        let acc_phi = phi.as_mut().expect("allocated for vae");
                        for eps in draws(&mut rng, samples, k)? {
                            let p = elbo_grad_phi_accumulate(
                                gen,
                                enc,
                                &inputs[d],
                                x,
                                &eps,
                                anneal,
                                scale,
                                acc_phi,
                                Some(&mut theta),
                            )?;
                            bound += p.bound();
                            kl = p.kl;
                        }
                    }
                    Mode::Svi | Mode::Hybrid => {
                        let psi0 = if mode == Mode::Svi {
                            VariationalParams::prior(k)
                        } else {
                            enc.encode(&inputs[d])?.0
                        };
                        let fit = optimize_local_psi(gen, x, &psi0, &local, &mut rng, anneal)?;
                        for eps in draws(&mut rng, samples, k)? {
                            let p = elbo_grad_theta_accumulate(gen, &fit.psi, x, &eps, anneal, scale, &mut theta)?;
                            bound += p.bound();
                            kl = p.kl;
                        }
                    }
                }
                elbo_sum += bound / samples as f64;
                kl_sum += kl;
            }
            Ok(BatchGrads {
                theta: Some(theta),
                phi,
                elbo_sum,
                kl_sum,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(parts))
}

/// Mean φ gradient of the bound at ψ(x) over `batch` (the encoder step of
/// the hybrid update).
pub fn encoder_gradients(
    model: &Nfa,
    corpus: &Corpus,
    inputs: &[SparseVector],
    batch: &[usize],
    config: &TrainConfig,
    epoch: u64,
    anneal: f64,
) -> Result<EncoderGrads> {
    let (gen, enc) = (&model.generator, &model.encoder);
    let k = model.latent_dim();
    let samples = config.samples;
    let scale = 1.0 / (batch.len() * samples) as f64;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<BatchGrads> {
            let mut phi = enc.zero_grads();
            for &d in chunk {
                let mut rng = phi_stream(config.seed, epoch, d);
                for eps in draws(&mut rng, samples, k)? {
                    elbo_grad_phi_accumulate(gen, enc, &inputs[d], corpus.doc(d), &eps, anneal, scale, &mut phi, None)?;
                }
            }
            Ok(BatchGrads {
                theta: None,
                phi: Some(phi),
                elbo_sum: 0.0,
                kl_sum: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(parts).phi.expect("phi gradients"))
}

/// One pass over the nonempty documents of `corpus` in shuffled minibatches.
/// `inputs[d]` is the encoder representation of document `d`.
pub fn train_epoch(
    model: &mut Nfa,
    corpus: &Corpus,
    inputs: &[SparseVector],
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochMetrics> {
    use rand::seq::SliceRandom;

    if inputs.len() != corpus.doc_count() {
        return Err(Error::shape(corpus.doc_count(), inputs.len()));
    }
    if corpus.vocab_size() != model.vocab_size() {
        return Err(Error::DimMismatch {
            data: corpus.vocab_size(),
            model: model.vocab_size(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.doc_count()).filter(|&d| !corpus.doc(d).is_empty()).collect();
    if order.is_empty() {
        return Err(Error::InvalidArgument("training corpus has no nonempty documents".into()));
    }
    order.shuffle(&mut state.rng);

    let epoch = state.epoch;
    let mode = effective_mode(config);
    let (mut total_elbo, mut total_kl) = (0.0, 0.0);
    for batch in order.chunks(config.batch_size) {
        let anneal = anneal_weight(state.updates, config.anneal_updates);
        let g = batch_gradients(model, corpus, inputs, batch, config, epoch, anneal)?;
        total_elbo += g.elbo_sum;
        total_kl += g.kl_sum;

        let grads_theta = g.theta.expect("theta gradients");
        state
            .adam_theta
            .step(&mut model.generator.tensors_mut(), &grads_theta.tensors(), true)?;
        let grads_phi = match mode {
            Mode::Vae => g.phi,
            // φ is fitted to the bound at ψ(x) under the updated θ.
            Mode::Hybrid => Some(encoder_gradients(model, corpus, inputs, batch, config, epoch, anneal)?),
            Mode::Svi => None,
        };
        if let Some(gp) = grads_phi {
            state.adam_phi.step(&mut model.encoder.tensors_mut(), &gp.tensors(), true)?;
        }
        state.updates += 1;
        if !model.is_finite() {
            return Err(Error::NonFinite("model parameters after update"));
        }
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch: state.epoch,
        mean_elbo: total_elbo / order.len() as f64,
        mean_kl: total_kl / order.len() as f64,
        updates: state.updates,
    })
}
