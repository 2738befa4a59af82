use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::store::{put_f32s, put_u32, to_u32, write_bytes, Reader};

pub const MODEL_MAGIC: [u8; 4] = *b"RGBM";
pub const MODEL_VERSION: u32 = 1;

/// Nonlinearity applied after every hidden layer. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    Identity,
    #[default]
    Softplus,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Softplus => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Softplus),
            2 => Ok(Activation::Tanh),
            other => Err(Error::InvalidData(format!("unknown activation code {other}"))),
        }
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            // ln(1 + e^z), stable for large |z|
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Tanh => z.tanh(),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// The box network: an MLP `d → … → 2d` whose output halves are the two raw corners.
///
/// Parameters live in one flat vector, layer by layer, each layer stored as its
/// row-major weight matrix (`out × in`) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxNetModel {
    layer_dims: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; the last entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pub pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("cache always holds the input")
    }
}

fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl BoxNetModel {
    /// Zero-initialized model.
    pub fn zeros(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        check_layer_dims(&layer_dims)?;
        let n = param_count(&layer_dims);
        Ok(BoxNetModel {
            layer_dims,
            activation,
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights and zero biases, drawn from `seed`.
    pub fn init(layer_dims: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, activation)?;
        let mut rng = seed::rng(seed);
        for l in 0..model.n_layers() {
            let (fan_in, fan_out) = (model.layer_dims[l], model.layer_dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = model.layer_range(l);
            for p in &mut model.params[w] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    /// Builds a model from explicit parameters.
    pub fn from_params(layer_dims: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        check_layer_dims(&layer_dims)?;
        let expected = param_count(&layer_dims);
        if params.len() != expected {
            return Err(Error::InvalidData(format!(
                "{} parameters given, layer dims {:?} need {expected}",
                params.len(),
                layer_dims
            )));
        }
        Ok(BoxNetModel {
            layer_dims,
            activation,
            params,
        })
    }

    /// Default architecture `d → hidden… → 2d`.
    pub fn layer_dims_for(dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(dim);
        dims.extend_from_slice(hidden);
        dims.push(2 * dim);
        dims
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Index ranges of layer `l`'s weight matrix and bias inside `params`.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let offset = param_count(&self.layer_dims[..=l]);
        let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
        let w = offset..offset + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    /// Rounds every parameter to the nearest f32, the precision of the checkpoint format.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate.
    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.n_layers());
        inputs.push(x.to_vec());
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_range(l);
            let fan_in = self.layer_dims[l];
            let input = &inputs[l];
            let z: Vec<f64> = self.params[w]
                .chunks_exact(fan_in)
                .zip(&self.params[b])
                .map(|(row, bias)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + bias)
                .collect();
            let last = l + 1 == self.n_layers();
            let h = if last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            inputs.push(h);
        }
        let out = inputs.last().unwrap();
        if out.iter().any(|v| !v.is_finite()) {
            // NaN/inf parameters always propagate to the output
            return Err(Error::Numeric("network output is not finite".into()));
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Returns the raw corner pre-images `(a, b)`: first and second halves of the output.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cached(x)?;
        let (a, b) = cache.output().split_at(self.dim());
        Ok((a.to_vec(), b.to_vec()))
    }

    /// Accumulates `∂/∂params` into `grad` given `∂/∂output`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_output: &[f64], grad: &mut [f64]) {
        let mut g_z = grad_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (w, b) = self.layer_range(l);
            let fan_in = self.layer_dims[l];
            let input = &cache.inputs[l];
            for (o, &gz) in g_z.iter().enumerate() {
                let row = &mut grad[w.start + o * fan_in..w.start + (o + 1) * fan_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += gz * x);
                grad[b.start + o] += gz;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[w];
            let mut g_in = vec![0.0; fan_in];
            for (o, &gz) in g_z.iter().enumerate() {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                g_in.iter_mut().zip(row).for_each(|(g, w)| *g += gz * w);
            }
            let z_prev = &cache.pre[l - 1];
            g_z = g_in
                .iter()
                .zip(z_prev)
                .map(|(g, &z)| g * self.activation.derivative(z))
                .collect();
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_finite()?;
        let mut out = Vec::with_capacity(16 + 4 * self.layer_dims.len() + 4 * self.params.len());
        out.extend_from_slice(&MODEL_MAGIC);
        put_u32(&mut out, MODEL_VERSION);
        put_u32(&mut out, self.activation.code());
        put_u32(&mut out, to_u32(self.layer_dims.len(), "layer count")?);
        for &d in &self.layer_dims {
            put_u32(&mut out, to_u32(d, "layer width")?);
        }
        let params: Vec<f32> = self.params.iter().map(|&p| p as f32).collect();
        put_f32s(&mut out, &params);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::Version(version));
        }
        let activation = Activation::from_code(r.u32("activation")?)?;
        let n_dims = r.u32("layer count")? as usize;
        let layer_dims: Vec<usize> = r
            .u32s(n_dims, "layer dims")?
            .into_iter()
            .map(|d| d as usize)
            .collect();
        check_layer_dims(&layer_dims)?;
        let params = r.f32s(param_count(&layer_dims), "parameters")?;
        r.finish()?;
        let model = Self::from_params(
            layer_dims,
            activation,
            params.into_iter().map(f64::from).collect(),
        )?;
        model.check_finite()?;
        Ok(model)
    }

    /// Writes an `RGBM` checkpoint. Parameters are stored as f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_layer_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidData("need at least one layer".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidData("layer widths must be positive".into()));
    }
    let (first, last) = (dims[0], *dims.last().unwrap());
    if last != 2 * first {
        return Err(Error::InvalidData(format!(
            "output width {last} must be twice the input width {first}"
        )));
    }
    Ok(())
}
