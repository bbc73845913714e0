//! The generative network `p(x | z; θ)`: an MLP from the latent space to
//! vocabulary logits followed by a multinomial likelihood.

use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::math::{gaussian_sample, Matrix, Rng};
use crate::mlp::{Activation, Layer, Mlp, MlpCache, MlpGrads, MlpSpec};
use crate::sparse::SparseVector;

/// Generator parameters θ. Hidden layers use the spec's activation, the
/// output layer is linear.
#[derive(Debug, Clone)]
pub struct Generator {
    mlp: Mlp,
    revision: u64,
}

impl PartialEq for Generator {
    fn eq(&self, other: &Self) -> bool {
        self.mlp == other.mlp
    }
}

/// Result of [`Generator::forward`].
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub gamma: Vec<f64>,
    pub log_mu: Vec<f64>,
    probs: Vec<f64>,
    cache: MlpCache,
    revision: u64,
}

impl GeneratorForward {
    pub fn mu(&self) -> Vec<f64> {
        self.probs.clone()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGrads {
    pub params: MlpGrads,
    pub grad_z: Vec<f64>,
}

/// Which output the Jacobian differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianTarget {
    #[default]
    LogMu,
    Gamma,
}

impl std::str::FromStr for JacobianTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmu" | "log_mu" => Ok(Self::LogMu),
            "gamma" => Ok(Self::Gamma),
            other => Err(Error::InvalidArgument(format!("unknown jacobian target {other:?}"))),
        }
    }
}

impl Generator {
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::glorot(spec, false, rng),
            revision: 0,
        }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        Self {
            mlp: Mlp::zeros(spec, false),
            revision: 0,
        }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::from_layers(spec, layers, false)?,
            revision: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        self.mlp.spec()
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.spec().input_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.mlp.spec().output_dim()
    }

    pub fn activation(&self) -> Activation {
        self.mlp.spec().activation
    }

    pub fn layers(&self) -> &[Layer] {
        self.mlp.layers()
    }

    /// Mutable access to the layers. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.revision += 1;
        self.mlp.layers_mut()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.mlp.tensors()
    }

    /// Mutable parameter tensors. Invalidates outstanding forward caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        self.mlp.tensors_mut()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        self.mlp.zero_grads()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, z: &[f64]) -> Result<GeneratorForward> {
        let cache = self.mlp.forward(z)?;
        let gamma = cache.output().to_vec();
        let m = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::NonFinite("generator logits"));
        }
        let mut probs: Vec<f64> = gamma.iter().map(|&g| (g - m).exp()).collect();
        let s: f64 = probs.iter().sum();
        let lse = m + s.ln();
        let log_mu = gamma.iter().map(|g| g - lse).collect();
        for p in &mut probs {
            *p /= s;
        }
        Ok(GeneratorForward {
            gamma,
            log_mu,
            probs,
            cache,
            revision: self.revision,
        })
    }

    fn check_fresh(&self, fwd: &GeneratorForward) -> Result<()> {
        if fwd.revision != self.revision {
            return Err(Error::StaleCache);
        }
        Ok(())
    }

    /// Gradient of the log-likelihood at the logits: `x − N·μ`.
    fn grad_gamma(fwd: &GeneratorForward, x: &SparseVector) -> Result<Vec<f64>> {
        if x.dim() != fwd.log_mu.len() {
            return Err(Error::DimMismatch {
                data: x.dim(),
                model: fwd.log_mu.len(),
            });
        }
        let n = x.total();
        let mut g: Vec<f64> = fwd.probs.iter().map(|p| -n * p).collect();
        for (i, v) in x.iter() {
            g[i] += v;
        }
        Ok(g)
    }

    /// Exact gradients of `multinomial_log_likelihood` w.r.t. every tensor
    /// and w.r.t. `z`.
    pub fn backward(&self, fwd: &GeneratorForward, x: &SparseVector) -> Result<GeneratorGrads> {
        let mut params = self.zero_grads();
        let grad_z = self.backward_accumulate(fwd, x, 1.0, &mut params)?;
        Ok(GeneratorGrads { params, grad_z })
    }

    /// Adds `scale ·` the parameter gradients into `acc` and returns the
    /// gradient w.r.t. `z`.
    pub fn backward_accumulate(
        &self,
        fwd: &GeneratorForward,
        x: &SparseVector,
        scale: f64,
        acc: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.check_fresh(fwd)?;
        let g = Self::grad_gamma(fwd, x)?;
        Ok(self
            .mlp
            .backward(&fwd.cache, &g, Some((acc, scale)), true)?
            .expect("input gradient requested"))
    }

    /// Gradient of the log-likelihood w.r.t. `z` only.
    pub fn grad_z(&self, fwd: &GeneratorForward, x: &SparseVector) -> Result<Vec<f64>> {
        self.check_fresh(fwd)?;
        let g = Self::grad_gamma(fwd, x)?;
        Ok(self
            .mlp
            .backward(&fwd.cache, &g, None, true)?
            .expect("input gradient requested"))
    }

    /// `V × K` Jacobian of `log μ(z)` (or of `γ(z)`), assembled by
    /// propagating the `K` input tangents forward through the network.
    pub fn jacobian(&self, z: &[f64], target: JacobianTarget) -> Result<Matrix> {
        let fwd = self.forward(z)?;
        let layers = self.mlp.layers();
        let act = self.activation();
        let mut tangent = layers[0].weight.clone();
        for l in 1..layers.len() {
            // scale rows by the activation derivative of layer l - 1
            let (pre, post) = (fwd.cache.pre_of(l - 1), fwd.cache.post_of(l - 1));
            for r in 0..tangent.rows() {
                let d = act.derivative(pre[r], post[r]);
                for v in tangent.row_mut(r) {
                    *v *= d;
                }
            }
            tangent = layers[l].weight.matmul(&tangent)?;
        }
        if target == JacobianTarget::LogMu {
            let mu = fwd.mu();
            let mean = tangent.mul_t_vec(&mu);
            for r in 0..tangent.rows() {
                for (v, m) in tangent.row_mut(r).iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
        }
        Ok(tangent)
    }

    pub fn jacobian_log_mu(&self, z: &[f64]) -> Result<Matrix> {
        self.jacobian(z, JacobianTarget::LogMu)
    }

    /// Draws `z ~ N(0, I)` and then `n_tokens` words from `Mult(μ(z))`.
    pub fn sample_document(&self, rng: &mut Rng, n_tokens: usize) -> Result<SparseVector> {
        let z = gaussian_sample(rng, self.latent_dim())?;
        self.sample_document_at(&z, rng, n_tokens)
    }

    pub fn sample_document_at(&self, z: &[f64], rng: &mut Rng, n_tokens: usize) -> Result<SparseVector> {
        if n_tokens == 0 {
            return Ok(SparseVector::empty(self.vocab_size()));
        }
        let mu = self.forward(z)?.mu();
        let dist = WeightedIndex::new(&mu)
            .map_err(|e| Error::InvalidArgument(format!("cannot sample from μ(z): {e}")))?;
        let mut counts = vec![0.0; mu.len()];
        for _ in 0..n_tokens {
            counts[dist.sample(rng)] += 1.0;
        }
        SparseVector::from_dense(&counts)
    }
}

/// `Σ_v x_v · log μ_v` over the nonzeros of `x`; the multinomial base
/// measure is omitted.
pub fn multinomial_log_likelihood(log_mu: &[f64], x: &SparseVector) -> Result<f64> {
    if x.dim() != log_mu.len() {
        return Err(Error::DimMismatch {
            data: x.dim(),
            model: log_mu.len(),
        });
    }
    Ok(x.iter().map(|(i, v)| v * log_mu[i]).sum())
}
