//! Fully connected layer stack with hand-written backpropagation.

use crate::error::{Error, Result};
use crate::math::{axpy, Matrix, Rng};
use crate::sparse::SparseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `h`.
    #[inline]
    pub(crate) fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Layer sizes, input first and output last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs an input and at least one layer".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dimensions must be >= 1".into()));
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| a * (2.0 * rng.uniform() - 1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

#[derive(Debug, Clone)]
pub(crate) enum MlpInput {
    Dense(Vec<f64>),
    Sparse(SparseVector),
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: MlpInput,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
    /// Output of every layer (equals `pre` on an identity output layer).
    post: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }

    pub(crate) fn pre_of(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    pub(crate) fn post_of(&self, l: usize) -> &[f64] {
        &self.post[l]
    }
}

/// Gradients shaped like an [`Mlp`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    /// Apply the activation to the last layer as well.
    activate_output: bool,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.activate_output == other.activate_output
            && self.layers == other.layers
    }
}

impl Mlp {
    pub fn zeros(spec: MlpSpec, activate_output: bool) -> Self {
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            spec,
            layers,
            activate_output,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(spec: MlpSpec, activate_output: bool, rng: &mut Rng) -> Self {
        let mut mlp = Self::zeros(spec, activate_output);
        for layer in &mut mlp.layers {
            layer.weight = glorot_matrix(layer.weight.rows(), layer.weight.cols(), rng);
        }
        mlp
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>, activate_output: bool) -> Result<Self> {
        if layers.len() != spec.layer_count() {
            return Err(Error::shape(
                format!("{} layers", spec.layer_count()),
                layers.len(),
            ));
        }
        for (l, (layer, w)) in layers.iter().zip(spec.layer_dims.windows(2)).enumerate() {
            if layer.weight.rows() != w[1] || layer.weight.cols() != w[0] || layer.bias.len() != w[1] {
                return Err(Error::shape(
                    format!("layer {l}: {}x{} weight, {} bias", w[1], w[0], w[1]),
                    format!(
                        "{}x{} weight, {} bias",
                        layer.weight.rows(),
                        layer.weight.cols(),
                        layer.bias.len()
                    ),
                ));
            }
        }
        Ok(Self {
            spec,
            layers,
            activate_output,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activate_output(&self) -> bool {
        self.activate_output
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .spec
                .layer_dims
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn activated(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.activate_output
    }

    fn finish_layer(&self, l: usize, pre: Vec<f64>, cache: &mut MlpCache) {
        let post = if self.activated(l) {
            pre.iter().map(|&a| self.spec.activation.apply(a)).collect()
        } else {
            pre.clone()
        };
        cache.pre.push(pre);
        cache.post.push(post);
    }

    fn run_from_second(&self, cache: &mut MlpCache) {
        for l in 1..self.layers.len() {
            let layer = &self.layers[l];
            let mut pre = layer.weight.mul_vec(&cache.post[l - 1]);
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            self.finish_layer(l, pre, cache);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::shape(self.spec.input_dim(), x.len()));
        }
        let layer = &self.layers[0];
        let mut pre = layer.weight.mul_vec(x);
        for (p, b) in pre.iter_mut().zip(&layer.bias) {
            *p += b;
        }
        let mut cache = MlpCache {
            input: MlpInput::Dense(x.to_vec()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        self.finish_layer(0, pre, &mut cache);
        self.run_from_second(&mut cache);
        Ok(cache)
    }

    /// Forward pass whose first layer exploits a sparse input.
    pub fn forward_sparse(&self, x: &SparseVector) -> Result<MlpCache> {
        if x.dim() != self.spec.input_dim() {
            return Err(Error::DimMismatch {
                data: x.dim(),
                model: self.spec.input_dim(),
            });
        }
        let layer = &self.layers[0];
        let mut pre = layer.bias.clone();
        for (r, p) in pre.iter_mut().enumerate() {
            let row = layer.weight.row(r);
            *p += x.iter().map(|(j, v)| row[j] * v).sum::<f64>();
        }
        let mut cache = MlpCache {
            input: MlpInput::Sparse(x.clone()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        self.finish_layer(0, pre, &mut cache);
        self.run_from_second(&mut cache);
        Ok(cache)
    }

    /// Backpropagates `grad_out` (gradient at the network output).
    ///
    /// Parameter gradients scaled by `scale` are added into `grads` when it
    /// is given; the input gradient is returned when `want_input` is set.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &[f64],
        mut grads: Option<(&mut MlpGrads, f64)>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        if cache.pre.len() != self.layers.len() || grad_out.len() != self.spec.output_dim() {
            return Err(Error::StaleCache);
        }
        let mut grad_h = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let delta: Vec<f64> = if self.activated(l) {
                grad_h
                    .iter()
                    .zip(cache.pre[l].iter().zip(&cache.post[l]))
                    .map(|(g, (&a, &h))| g * self.spec.activation.derivative(a, h))
                    .collect()
            } else {
                grad_h
            };
            if let Some((g, scale)) = grads.as_mut() {
                let gl = &mut g.layers[l];
                axpy(*scale, &delta, &mut gl.bias);
                if l == 0 {
                    match &cache.input {
                        MlpInput::Dense(x) => {
                            for (r, &d) in delta.iter().enumerate() {
                                if d != 0.0 {
                                    axpy(*scale * d, x, gl.weight.row_mut(r));
                                }
                            }
                        }
                        MlpInput::Sparse(x) => {
                            for (r, &d) in delta.iter().enumerate() {
                                let row = gl.weight.row_mut(r);
                                let sd = *scale * d;
                                for (j, v) in x.iter() {
                                    row[j] += sd * v;
                                }
                            }
                        }
                    }
                } else {
                    let input = &cache.post[l - 1];
                    for (r, &d) in delta.iter().enumerate() {
                        if d != 0.0 {
                            axpy(*scale * d, input, gl.weight.row_mut(r));
                        }
                    }
                }
            }
            if l > 0 || want_input {
                grad_h = layer.weight.mul_t_vec(&delta);
            } else {
                return Ok(None);
            }
        }
        Ok(Some(grad_h))
    }
}
