//! The correction energy: a fully connected network `R^D -> R` with
//! hand-derived reverse passes for input and parameter gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::featurestore::{Archive, TensorFile};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `x · sigmoid(x)`
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::InvalidConfig(format!("unknown activation code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" | "swish" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<Dense>,
}

impl ParamGradient {
    pub fn zeros_like(net: &EnergyMlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Flat views in the order `w0, b0, w1, b1, ...`.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn max_abs_diff(&self, other: &ParamGradient) -> f64 {
        self.slices()
            .into_iter()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

struct ForwardCache {
    // inputs[l] is the input to layer l; pre[l] its pre-activation.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl EnergyMlp {
    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "layer sizes need at least an input and an output".into(),
            ));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::InvalidConfig(format!(
                "final layer size must be 1, got {}",
                dims.last().unwrap()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: bias length {} vs {} outputs",
                    l.bias.len(),
                    l.weight.nrows()
                )));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.weight.ncols(),
                    layers[i - 1].weight.nrows()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("layer {i} has non-finite parameters")));
            }
        }
        if layers.last().unwrap().weight.nrows() != 1 {
            return Err(Error::ShapeMismatch("output dimension must be 1".into()));
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Layer sizes from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weight.nrows()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable flat views in the order `w0, b0, w1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().unwrap(),
                    l.bias.as_slice_mut().unwrap(),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    fn check_batch(&self, zs: &ArrayView2<'_, f64>) -> Result<()> {
        if zs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: zs.ncols(),
            });
        }
        Ok(())
    }

    fn forward(&self, zs: ArrayView2<'_, f64>) -> (Array1<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = zs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = h.dot(&layer.weight.t()) + &layer.bias;
            let next = if l == last {
                a.clone()
            } else {
                a.mapv(|x| self.activation.apply(x))
            };
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        (h.column(0).to_owned(), ForwardCache { inputs, pre })
    }

    /// Backpropagates `upstream` (one weight per row) and returns the
    /// gradient with respect to the network input, optionally accumulating
    /// parameter gradients.
    fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView1<'_, f64>,
        mut params: Option<&mut ParamGradient>,
    ) -> Array2<f64> {
        let mut delta = upstream.to_owned().insert_axis(Axis(1));
        for l in (0..self.layers.len()).rev() {
            if let Some(g) = params.as_deref_mut() {
                g.layers[l].weight += &delta.t().dot(&cache.inputs[l]);
                g.layers[l].bias += &delta.sum_axis(Axis(0));
            }
            let mut back = delta.dot(&self.layers[l].weight);
            if l > 0 {
                let act = self.activation;
                back.zip_mut_with(&cache.pre[l - 1], |d, &a| *d *= act.derivative(a));
            }
            delta = back;
        }
        delta
    }

    pub fn energy(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self.energy_batch(z.insert_axis(Axis(0)))?[0])
    }

    pub fn energy_batch(&self, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_batch(&zs)?;
        Ok(self.forward(zs).0)
    }

    pub fn grad_input(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let (_, g) = self.energy_and_grad_input_batch(z.insert_axis(Axis(0)))?;
        Ok(g.row(0).to_owned())
    }

    /// Energies and `∇_z E` for every row.
    pub fn energy_and_grad_input_batch(
        &self,
        zs: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_batch(&zs)?;
        let (e, cache) = self.forward(zs);
        let ones = Array1::ones(zs.nrows());
        let g = self.backward(&cache, ones.view(), None);
        Ok((e, g))
    }

    /// Gradient of `Σ_b upstream_b · E(z_b)` with respect to every parameter.
    pub fn grad_params(
        &self,
        batch: ArrayView2<'_, f64>,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<ParamGradient> {
        self.check_batch(&batch)?;
        if batch.nrows() == 0 {
            return Err(Error::EmptyInput("parameter-gradient batch"));
        }
        if upstream.len() != batch.nrows() {
            return Err(Error::DimensionMismatch {
                expected: batch.nrows(),
                actual: upstream.len(),
            });
        }
        let (_, cache) = self.forward(batch);
        let mut g = ParamGradient::zeros_like(self);
        self.backward(&cache, upstream, Some(&mut g));
        Ok(g)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert("activation", TensorFile::scalar_u32(self.activation.code()));
        a.insert("depth", TensorFile::scalar_u32(self.layers.len() as u32));
        for (i, l) in self.layers.iter().enumerate() {
            a.insert(format!("layer{i}.weight"), TensorFile::from_matrix_f64(&l.weight)?);
            a.insert(
                format!("layer{i}.bias"),
                TensorFile::from_vector_f64(l.bias.as_slice().unwrap())?,
            );
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let activation = Activation::from_code(a.get("activation")?.to_u32_vec()?[0])?;
        let depth = a.get("depth")?.to_u32_vec()?[0] as usize;
        let layers = (0..depth)
            .map(|i| {
                Ok(Dense {
                    weight: a.get(&format!("layer{i}.weight"))?.to_matrix()?,
                    bias: a.get(&format!("layer{i}.bias"))?.to_vector()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, activation)
    }
}

pub fn mlp_init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<EnergyMlp> {
    EnergyMlp::init(dims, Activation::Silu, rng)
}

pub fn mlp_energy(net: &EnergyMlp, z: ArrayView1<'_, f64>) -> Result<f64> {
    net.energy(z)
}

pub fn mlp_grad_input(net: &EnergyMlp, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    net.grad_input(z)
}

pub fn mlp_grad_params(
    net: &EnergyMlp,
    batch: ArrayView2<'_, f64>,
    upstream: ArrayView1<'_, f64>,
) -> Result<ParamGradient> {
    net.grad_params(batch, upstream)
}

/// Hidden-layer shape `[D, H, ..., H, 1]`.
pub fn layer_sizes(input_dim: usize, hidden_width: usize, hidden_layers: usize) -> Vec<usize> {
    std::iter::once(input_dim)
        .chain(std::iter::repeat_n(hidden_width, hidden_layers))
        .chain(std::iter::once(1))
        .collect()
}
