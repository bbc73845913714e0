//! Inference network `q_φ(z | x)`: an MLP trunk with linear heads for the
//! mean and the diagonal log-variance, plus the Gaussian helpers used
//! around it.

use crate::error::{Error, Result};
use crate::math::{axpy, Matrix, Rng};
use crate::mlp::{glorot_matrix, Activation, Layer, Mlp, MlpCache, MlpGrads, MlpSpec};
use crate::sparse::SparseVector;

pub const DEFAULT_LOGVAR_BOUNDS: (f64, f64) = (-8.0, 8.0);

/// Diagonal Gaussian `N(mu, diag(exp(logvar)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl VariationalParams {
    /// The standard normal prior.
    pub fn prior(k: usize) -> Self {
        Self {
            mu: vec![0.0; k],
            logvar: vec![0.0; k],
        }
    }

    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::shape(mu.len(), logvar.len()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn clamp_logvar(&mut self, (lo, hi): (f64, f64)) {
        for l in &mut self.logvar {
            *l = l.clamp(lo, hi);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.logvar).all(|v| v.is_finite())
    }

    /// `z = mu + exp(logvar / 2) ⊙ eps`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect()
    }
}

/// Draws `eps ~ N(0, I)` and returns `(z, eps)`.
pub fn reparameterize(psi: &VariationalParams, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..psi.dim()).map(|_| rng.standard_normal()).collect();
    (psi.sample_with(&eps), eps)
}

/// `KL(q ‖ N(0, I)) = ½ Σ (μ² + e^{logvar} − logvar − 1)`.
pub fn kl_to_prior(psi: &VariationalParams) -> f64 {
    0.5 * psi
        .mu
        .iter()
        .zip(&psi.logvar)
        .map(|(m, l)| m * m + l.exp() - l - 1.0)
        .sum::<f64>()
}

/// `KL(a ‖ b)` between diagonal Gaussians.
pub fn kl_between(a: &VariationalParams, b: &VariationalParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let mut s = 0.0;
    for k in 0..a.dim() {
        let (la, lb) = (a.logvar[k], b.logvar[k]);
        let d = b.mu[k] - a.mu[k];
        s += (la - lb).exp() + d * d * (-lb).exp() - 1.0 + lb - la;
    }
    Ok(0.5 * s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    /// Trunk hidden widths; at least one layer.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl EncoderSpec {
    fn trunk_spec(&self) -> Result<MlpSpec> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "the inference network needs at least one hidden layer".into(),
            ));
        }
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        MlpSpec::new(dims, self.activation)
    }

    fn head_width(&self) -> usize {
        *self.hidden.last().expect("validated")
    }
}

/// Encoder parameters φ = {trunk, W_mu, W_logvar}.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    trunk: Mlp,
    w_mu: Matrix,
    w_logvar: Matrix,
    logvar_bounds: (f64, f64),
    revision: u64,
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.trunk == other.trunk
            && self.w_mu == other.w_mu
            && self.w_logvar == other.w_logvar
            && self.logvar_bounds == other.logvar_bounds
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    trunk: MlpCache,
    raw_logvar: Vec<f64>,
    revision: u64,
}

/// Gradients shaped like an [`Encoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub trunk: MlpGrads,
    pub w_mu: Matrix,
    pub w_logvar: Matrix,
}

impl EncoderGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.trunk.tensors();
        t.push(self.w_mu.as_slice());
        t.push(self.w_logvar.as_slice());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.trunk.tensors_mut();
        t.push(self.w_mu.as_mut_slice());
        t.push(self.w_logvar.as_mut_slice());
        t
    }
}

impl Encoder {
    /// Glorot-initialized trunk and heads.
    pub fn new(spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        let trunk = Mlp::glorot(spec.trunk_spec()?, true, rng);
        let (h, k) = (spec.head_width(), spec.latent_dim);
        Ok(Self {
            w_mu: glorot_matrix(k, h, rng),
            w_logvar: glorot_matrix(k, h, rng),
            spec,
            trunk,
            logvar_bounds: DEFAULT_LOGVAR_BOUNDS,
            revision: 0,
        })
    }

    pub fn zeros(spec: EncoderSpec) -> Result<Self> {
        let trunk = Mlp::zeros(spec.trunk_spec()?, true);
        let (h, k) = (spec.head_width(), spec.latent_dim);
        Ok(Self {
            spec,
            trunk,
            w_mu: Matrix::zeros(k, h),
            w_logvar: Matrix::zeros(k, h),
            logvar_bounds: DEFAULT_LOGVAR_BOUNDS,
            revision: 0,
        })
    }

    pub fn from_parts(
        spec: EncoderSpec,
        trunk_layers: Vec<Layer>,
        w_mu: Matrix,
        w_logvar: Matrix,
        logvar_bounds: (f64, f64),
    ) -> Result<Self> {
        let trunk = Mlp::from_layers(spec.trunk_spec()?, trunk_layers, true)?;
        let (h, k) = (spec.head_width(), spec.latent_dim);
        for m in [&w_mu, &w_logvar] {
            if m.rows() != k || m.cols() != h {
                return Err(Error::shape(format!("{k}x{h} head"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        Ok(Self {
            spec,
            trunk,
            w_mu,
            w_logvar,
            logvar_bounds,
            revision: 0,
        })
    }

    pub fn with_logvar_bounds(mut self, bounds: (f64, f64)) -> Self {
        self.logvar_bounds = bounds;
        self
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn logvar_bounds(&self) -> (f64, f64) {
        self.logvar_bounds
    }

    pub fn trunk_layers(&self) -> &[Layer] {
        self.trunk.layers()
    }

    pub fn w_mu(&self) -> &Matrix {
        &self.w_mu
    }

    pub fn w_logvar(&self) -> &Matrix {
        &self.w_logvar
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            trunk: self.trunk.zero_grads(),
            w_mu: Matrix::zeros(self.w_mu.rows(), self.w_mu.cols()),
            w_logvar: Matrix::zeros(self.w_logvar.rows(), self.w_logvar.cols()),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.trunk.tensors();
        t.push(self.w_mu.as_slice());
        t.push(self.w_logvar.as_slice());
        t
    }

    /// Mutable parameter tensors. Invalidates outstanding caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        let mut t = self.trunk.tensors_mut();
        t.push(self.w_mu.as_mut_slice());
        t.push(self.w_logvar.as_mut_slice());
        t
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `ψ(x̃) = (W_mu h(x̃), clamp(W_logvar h(x̃)))`.
    pub fn encode(&self, x: &SparseVector) -> Result<(VariationalParams, EncoderCache)> {
        let trunk = self.trunk.forward_sparse(x)?;
        let h = trunk.output();
        let mu = self.w_mu.mul_vec(h);
        let raw_logvar = self.w_logvar.mul_vec(h);
        let mut psi = VariationalParams {
            mu,
            logvar: raw_logvar.clone(),
        };
        psi.clamp_logvar(self.logvar_bounds);
        Ok((
            psi,
            EncoderCache {
                trunk,
                raw_logvar,
                revision: self.revision,
            },
        ))
    }

    /// Gradients of a scalar loss w.r.t. φ given its gradients at the two
    /// heads. Clamped log-variance coordinates pass no gradient.
    pub fn backward(&self, cache: &EncoderCache, grad_mu: &[f64], grad_logvar: &[f64]) -> Result<EncoderGrads> {
        let mut g = self.zero_grads();
        self.backward_accumulate(cache, grad_mu, grad_logvar, 1.0, &mut g)?;
        Ok(g)
    }

    pub fn backward_accumulate(
        &self,
        cache: &EncoderCache,
        grad_mu: &[f64],
        grad_logvar: &[f64],
        scale: f64,
        acc: &mut EncoderGrads,
    ) -> Result<()> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache);
        }
        let k = self.spec.latent_dim;
        if grad_mu.len() != k || grad_logvar.len() != k {
            return Err(Error::shape(k, grad_mu.len().max(grad_logvar.len())));
        }
        let (lo, hi) = self.logvar_bounds;
        let g_lv: Vec<f64> = grad_logvar
            .iter()
            .zip(&cache.raw_logvar)
            .map(|(&g, &r)| if (lo..=hi).contains(&r) { g } else { 0.0 })
            .collect();
        let h = cache.trunk.output();
        for r in 0..k {
            if grad_mu[r] != 0.0 {
                axpy(scale * grad_mu[r], h, acc.w_mu.row_mut(r));
            }
            if g_lv[r] != 0.0 {
                axpy(scale * g_lv[r], h, acc.w_logvar.row_mut(r));
            }
        }
        let mut grad_h = self.w_mu.mul_t_vec(grad_mu);
        axpy(1.0, &self.w_logvar.mul_t_vec(&g_lv), &mut grad_h);
        self.trunk
            .backward(&cache.trunk, &grad_h, Some((&mut acc.trunk, scale)), false)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gaussian_sample;
    use proptest::prelude::*;
    use crate::math::Rng;

    fn spec(v: usize, hidden: &[usize], k: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim: v,
            hidden: hidden.to_vec(),
            latent_dim: k,
            activation: Activation::Tanh,
        }
    }

    fn doc(v: usize, rng: &mut Rng) -> SparseVector {
        let pairs: Vec<(usize, f64)> = (0..5).map(|_| ((rng.uniform() * v as f64) as usize, rng.uniform() + 0.1)).collect();
        SparseVector::from_pairs(v, pairs).unwrap()
    }

    /// Independent dense re-implementation of the forward map.
    fn reference_encode(e: &Encoder, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        for layer in e.trunk_layers() {
            h = (0..layer.bias.len())
                .map(|r| (layer.bias[r] + (0..h.len()).map(|c| layer.weight.get(r, c) * h[c]).sum::<f64>()).tanh())
                .collect();
        }
        let head = |m: &Matrix| (0..m.rows()).map(|r| (0..h.len()).map(|c| m.get(r, c) * h[c]).sum::<f64>()).collect::<Vec<f64>>();
        let mut lv = head(e.w_logvar());
        for l in &mut lv {
            *l = l.clamp(-8.0, 8.0);
        }
        (head(e.w_mu()), lv)
    }

    #[test]
    fn zero_encoder_outputs_prior() {
        let e = Encoder::zeros(spec(6, &[4, 4], 3)).unwrap();
        let (psi, _) = e.encode(&SparseVector::empty(6)).unwrap();
        assert_eq!(psi, VariationalParams::prior(3));
    }

    #[test]
    fn encode_is_deterministic_and_matches_reference() {
        let mut rng = Rng::new(4);
        let e = Encoder::new(spec(12, &[7, 5], 3), &mut rng).unwrap();
        let x = doc(12, &mut rng);
        let (a, _) = e.encode(&x).unwrap();
        let (b, _) = e.encode(&x).unwrap();
        assert_eq!(a, b);
        let (mu, lv) = reference_encode(&e, &x.to_dense());
        for (p, q) in a.mu.iter().zip(&mu).chain(a.logvar.iter().zip(&lv)) {
            assert!((p - q).abs() < 1e-13);
        }
        assert!(e.encode(&SparseVector::empty(11)).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_prior(&VariationalParams::prior(4)), 0.0);
        let one = VariationalParams::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_to_prior(&one) - 0.5).abs() < 1e-12);
        let two = VariationalParams::new(vec![1.0, -2.0], vec![4f64.ln(), 0.0]).unwrap();
        // ½(1 + 4 − ln 4 − 1) + ½(4 + 1 − 0 − 1) = 4 − ln 2
        let expect = 4.0 - 2f64.ln();
        assert!((expect - 3.306_852_819_440_055).abs() < 1e-12);
        assert!((kl_to_prior(&two) - expect).abs() < 1e-12);

        let a = VariationalParams::prior(1);
        let b = VariationalParams::new(vec![1.0], vec![2f64.ln()]).unwrap();
        let expect = 0.5 * (0.5 + 0.5 - 1.0 + 2f64.ln());
        assert!((expect - 0.346_573_590_279_972_6).abs() < 1e-12);
        assert!((kl_between(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert_eq!(kl_between(&two, &two).unwrap(), 0.0);
        assert!(kl_between(&a, &two).is_err());
    }

    #[test]
    fn reparameterize_limits() {
        let mut rng = Rng::new(1);
        let psi = VariationalParams::new(vec![1.5, -0.5], vec![-8.0, -8.0]).unwrap();
        let (z, eps) = reparameterize(&psi, &mut rng);
        for k in 0..2 {
            assert!((z[k] - psi.mu[k]).abs() <= (-4f64).exp() * eps[k].abs() + 1e-15);
        }
        let prior = VariationalParams::prior(3);
        let (z, eps) = reparameterize(&prior, &mut Rng::new(2));
        assert_eq!(z, eps);
        assert_eq!(reparameterize(&prior, &mut Rng::new(2)).0, z);
    }

    #[test]
    fn zero_head_gradients_give_zero_grads() {
        let mut rng = Rng::new(3);
        let e = Encoder::new(spec(8, &[5, 4], 2), &mut rng).unwrap();
        let (_, cache) = e.encode(&doc(8, &mut rng)).unwrap();
        let g = e.backward(&cache, &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_is_linear_in_head_gradients() {
        let mut rng = Rng::new(5);
        let e = Encoder::new(spec(8, &[5, 4], 2), &mut rng).unwrap();
        let (_, cache) = e.encode(&doc(8, &mut rng)).unwrap();
        let (m1, l1, m2, l2) = ([0.3, -1.0], [0.5, 0.2], [-0.7, 0.1], [1.1, -0.4]);
        let g1 = e.backward(&cache, &m1, &l1).unwrap();
        let g2 = e.backward(&cache, &m2, &l2).unwrap();
        let sum_m = [m1[0] + m2[0], m1[1] + m2[1]];
        let sum_l = [l1[0] + l2[0], l1[1] + l2[1]];
        let g = e.backward(&cache, &sum_m, &sum_l).unwrap();
        for ((a, b), c) in g1.tensors().iter().zip(g2.tensors()).zip(g.tensors()) {
            for i in 0..a.len() {
                assert!((a[i] + b[i] - c[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let e = Encoder::new(spec(10, &[6, 5], 3), &mut rng).unwrap();
        let x = doc(10, &mut rng);
        let wm = gaussian_sample(&mut rng, 3).unwrap();
        let wl = gaussian_sample(&mut rng, 3).unwrap();
        let loss = |e: &Encoder| {
            let (p, _) = e.encode(&x).unwrap();
            crate::math::dot(&p.mu, &wm) + crate::math::dot(&p.logvar, &wl)
        };
        let (_, cache) = e.encode(&x).unwrap();
        let g = e.backward(&cache, &wm, &wl).unwrap();
        let h = 1e-5;
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
        for (t, an) in analytic.iter().enumerate() {
            for i in 0..an.len() {
                let mut ep = e.clone();
                ep.tensors_mut()[t][i] += h;
                let mut em = e.clone();
                em.tensors_mut()[t][i] -= h;
                let fd = (loss(&ep) - loss(&em)) / (2.0 * h);
                assert!((fd - an[i]).abs() <= 1e-5 * fd.abs().max(1.0), "t{t}[{i}] {fd} vs {}", an[i]);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(0);
        let mut e = Encoder::new(spec(4, &[3], 2), &mut rng).unwrap();
        let (_, cache) = e.encode(&SparseVector::new(4, vec![1], vec![1.0]).unwrap()).unwrap();
        e.tensors_mut()[0][0] = 0.5;
        assert!(matches!(e.backward(&cache, &[1.0, 0.0], &[0.0, 0.0]), Err(Error::StaleCache)));
    }

    fn arb_psi(k: usize) -> impl Strategy<Value = VariationalParams> {
        (prop::collection::vec(-5.0f64..5.0, k), prop::collection::vec(-8.0f64..8.0, k))
            .prop_map(|(m, l)| VariationalParams::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn kl_properties(a in arb_psi(4), b in arb_psi(4)) {
            prop_assert!(kl_to_prior(&a) >= 0.0);
            prop_assert!(kl_between(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(kl_between(&a, &a).unwrap(), 0.0);
            let prior = VariationalParams::prior(4);
            prop_assert!((kl_between(&a, &prior).unwrap() - kl_to_prior(&a)).abs() <= 1e-12 * kl_to_prior(&a).max(1.0));
        }
    }
}
