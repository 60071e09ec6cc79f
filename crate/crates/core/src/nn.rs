//! Small differentiable building blocks on top of candle.
//!
//! candle-nn ships fused kernels for layer norm, softmax and rotary embeddings
//! that have no backward pass, so everything here is composed from primitive
//! tensor ops. Parameters are created through [`ParamStore`] from an explicit
//! seed so that two runs with the same seed start from identical weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named, ordered collection of trainable variables.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor> {
        let count = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..count).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<Tensor> {
        let count = shape.iter().product();
        let values = (0..count)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name.into(), values, shape)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let count = shape.iter().product();
        self.insert(name.into(), vec![0.0; count], shape)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Snapshot of the current values, detached from the autograd graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every variable with the value of the same name in `values`.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if values.len() != self.vars.len() {
            let extra: Vec<_> = values.keys().filter(|k| !self.vars.contains_key(*k)).collect();
            return Err(Error::Incompatible(format!(
                "checkpoint holds unexpected parameters {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(&self.snapshot()?, path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        self.assign(&load_tensors(path, &self.device)?)
    }

    /// SHA-256 over parameter names and their raw values.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(&self.snapshot()?)
    }
}

pub fn save_tensors(tensors: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let map: HashMap<String, Tensor> = tensors.clone().into_iter().collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Incompatible(format!("missing weights file {}", path.display())));
    }
    Ok(candle_core::safetensors::load(path, device)?.into_iter().collect())
}

pub fn checksum_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Dense layer `y = x W + b` applied over the last axis of any-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound)?;
        let bias = Some(store.uniform(format!("{name}.bias"), &[fan_out], bound)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound)?;
        Ok(Self { weight, bias: None })
    }

    /// All-zero weights and bias; used for adaLN modulation so gated residual
    /// branches start switched off.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.zeros(format!("{name}.weight"), &[fan_in, fan_out])?;
        let bias = Some(store.zeros(format!("{name}.bias"), &[fan_out])?);
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let dims = xs.dims().to_vec();
        let fan_in = *dims.last().expect("linear input needs at least one axis");
        let rows = xs.elem_count() / fan_in;
        let flat = xs.reshape((rows, fan_in))?.matmul(&self.weight)?;
        let flat = match &self.bias {
            Some(b) => flat.broadcast_add(b)?,
            None => flat,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[1];
        flat.reshape(out_dims)
    }
}

/// Layer normalization over the last axis without learnable affine parameters.
pub fn layer_norm(xs: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let mean = xs.mean_keepdim(D::Minus1)?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

/// Layer normalization with a learnable gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), vec![1.0; dim], &[dim])?;
        let bias = store.zeros(format!("{name}.bias"), &[dim])?;
        Ok(Self {
            gain,
            bias,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        layer_norm(xs, self.eps)?
            .broadcast_mul(&self.gain)?
            .broadcast_add(&self.bias)
    }
}

/// Two-layer perceptron with SiLU activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim_in, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim_out)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(xs)?.silu()?)
    }
}

/// `(batch, seq, heads * head_dim) -> (batch, heads, seq, head_dim)`
pub fn split_heads(xs: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, s, w) = xs.dims3()?;
    xs.reshape((b, s, heads, w / heads))?
        .transpose(1, 2)?
        .contiguous()
}

/// Inverse of [`split_heads`].
pub fn merge_heads(xs: &Tensor) -> candle_core::Result<Tensor> {
    let (b, h, s, d) = xs.dims4()?;
    xs.transpose(1, 2)?.contiguous()?.reshape((b, s, h * d))
}

/// Scaled dot-product attention on `(batch, heads, seq, head_dim)` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
    let head_dim = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (head_dim as f64).sqrt()))?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    weights.matmul(v)
}

/// Rotary position tables for sequences of length `seq` and even `head_dim`.
#[derive(Debug, Clone)]
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
}

impl Rotary {
    pub fn new(seq: usize, head_dim: usize, base: f64, dtype: DType, device: &Device) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head width, got {head_dim}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            cos: Tensor::from_vec(cos, (seq, half), device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (seq, half), device)?.to_dtype(dtype)?,
        })
    }

    /// Rotates pairs `(x_i, x_{i + d/2})` of a `(batch, heads, seq, head_dim)` tensor.
    pub fn apply(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let half = xs.dim(D::Minus1)? / 2;
        let x1 = xs.narrow(D::Minus1, 0, half)?;
        let x2 = xs.narrow(D::Minus1, half, half)?;
        let a = (x1.broadcast_mul(&self.cos)? - x2.broadcast_mul(&self.sin)?)?;
        let b = (x1.broadcast_mul(&self.sin)? + x2.broadcast_mul(&self.cos)?)?;
        Tensor::cat(&[a, b], D::Minus1)
    }
}

/// Sinusoidal features of a batch of scalars, `(batch,) -> (batch, dim)`.
pub fn sinusoidal_features(xs: &Tensor, dim: usize, scale: f64) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), xs.device())?.to_dtype(xs.dtype())?;
    let args = (xs.unsqueeze(1)? * scale)?.broadcast_mul(&freqs)?;
    Tensor::cat(&[args.cos()?, args.sin()?], 1)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.sqr()?.mean_all()
}

/// Rescales gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut total = 0.0f64;
    for var in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for var in vars {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g * factor)?);
            }
        }
    }
    Ok(norm)
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
