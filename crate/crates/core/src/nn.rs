//! Parameter storage and the small set of layers shared by every module.
//!
//! Layers follow the row-vector convention: a token matrix `X` of shape
//! `(batch, tokens, d_in)` is projected as `X · W` with `W` of shape
//! `(d_in, d_out)`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::TensorData;
use crate::error::{Error, Result};

/// Additive bias given to masked attention keys. Large enough that
/// `exp(bias - max)` underflows to exactly zero in both f32 and f64.
const MASK_BIAS: f64 = -1e30;

/// Deterministic parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }
}

/// A named, ordered collection of parameters belonging to one component.
///
/// Every parameter lives in a [`Var`]. Modules receive either the tracked
/// tensor (trainable sets) or a detached view sharing the same storage
/// (frozen sets), so frozen parameters never enter the autograd graph.
pub struct ParamSet {
    namespace: String,
    trainable: bool,
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new(namespace: &str, dtype: DType, device: &Device, trainable: bool) -> Self {
        Self {
            namespace: namespace.to_string(),
            trainable,
            dtype,
            device: device.clone(),
            entries: Vec::new(),
        }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Parameter(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        };
        self.entries.push((name, var));
        Ok(handle)
    }

    /// Parameters in registration order, with fully-qualified names.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Var)> {
        self.entries
            .iter()
            .map(move |(n, v)| (format!("{}/{}", self.namespace, n), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        let local = name
            .strip_prefix(&self.namespace)
            .and_then(|s| s.strip_prefix('/'))
            .unwrap_or(name);
        self.entries
            .iter()
            .find(|(n, _)| n == local)
            .map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of every parameter as f32 data keyed by qualified name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, TensorData>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.iter() {
            out.insert(name, TensorData::from_tensor(var.as_tensor())?);
        }
        Ok(out)
    }

    /// Overwrite parameters from a snapshot. Every parameter must be present.
    pub fn load(&self, snapshot: &BTreeMap<String, TensorData>) -> Result<()> {
        for (name, var) in self.iter() {
            let data = snapshot
                .get(&name)
                .ok_or_else(|| Error::Container(format!("missing tensor `{name}`")))?;
            if data.dims != var.dims() {
                return Err(Error::Container(format!(
                    "tensor `{name}` has dims {:?}, expected {:?}",
                    data.dims,
                    var.dims()
                )));
            }
            let t = data.to_tensor(&self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Scoped parameter builder handed to module constructors.
pub struct Params<'a> {
    set: &'a mut ParamSet,
    init: &'a mut Initializer,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn new(set: &'a mut ParamSet, init: &'a mut Initializer) -> Self {
        Self {
            set,
            init,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Params<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Params {
            set: self.set,
            init: self.init,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = self.init.normal(n, std);
        let q = self.qualify(name);
        self.set.register(q, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let q = self.qualify(name);
        self.set.register(q, vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn dtype(&self) -> DType {
        self.set.dtype
    }

    pub fn device(&self) -> &Device {
        &self.set.device
    }
}

/// Affine map `x · W + b` over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &mut Params, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_std(p, d_in, d_out, bias, std)
    }

    pub fn with_std(
        p: &mut Params,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = p.normal("weight", &[d_in, d_out], std)?;
        let bias = if bias {
            Some(p.zeros("bias", &[d_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &mut Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.constant("gamma", &[dim], 1.0)?,
            beta: p.zeros("beta", &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// 2-D convolution over NCHW tensors.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &mut Params,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        // He-style scaling keeps activation magnitudes stable through
        // SiLU stacks of random frozen layers.
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = p.normal("weight", &[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt())?;
        let bias = if bias {
            Some(p.zeros("bias", &[c_out])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => {
                let c = b.dim(0)?;
                y.broadcast_add(&b.reshape((1, c, 1, 1))?)?
            }
            None => y,
        })
    }
}

/// Softmax over the last dimension. The max shift is detached: softmax is
/// shift-invariant, so the gradient is unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Softmax over dimension 1 of a `(batch, n, p)` tensor.
pub fn softmax_dim1(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Softmax of `scores` (batch, queries, keys) with invalid keys removed.
/// `key_mask` is `(batch, keys)` holding 1.0 for valid keys and 0.0 for
/// padding. Masked keys get weight exactly zero; a row with no valid key
/// falls back to uniform weights instead of NaN.
pub fn masked_softmax(scores: &Tensor, key_mask: &Tensor) -> Result<Tensor> {
    let (b, k) = key_mask.dims2()?;
    let bias = key_mask
        .affine(-MASK_BIAS, MASK_BIAS)?
        .reshape((b, 1, k))?;
    softmax_last(&scores.broadcast_add(&bias)?)
}

/// Multi-head scaled dot-product self-attention with padding masks.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(p: &mut Params, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Parameter(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut p.sub("q"), dim, dim, true)?,
            k: Linear::new(&mut p.sub("k"), dim, dim, true)?,
            v: Linear::new(&mut p.sub("v"), dim, dim, true)?,
            o: Linear::new(&mut p.sub("o"), dim, dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        Ok(x
            .reshape((b, t, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * self.heads, t, dh))?)
    }

    /// Attention weights of shape `(batch, heads, tokens, tokens)`.
    pub fn weights(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let mask_h = mask
            .unsqueeze(1)?
            .broadcast_as((b, self.heads, t))?
            .contiguous()?
            .reshape((b * self.heads, t))?;
        let w = masked_softmax(&scores, &mask_h)?;
        Ok(w.reshape((b, self.heads, t, t))?)
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let w = self
            .weights(x, mask)?
            .reshape((b * self.heads, t, t))?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let ctx = w
            .matmul(&v)?
            .reshape((b, self.heads, t, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.o.forward(&ctx)
    }
}

/// Post-norm transformer encoder layer: self-attention and a GELU
/// feed-forward block, each wrapped in residual + layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(p: &mut Params, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(&mut p.sub("attn"), dim, heads)?,
            norm1: LayerNorm::new(&mut p.sub("norm1"), dim)?,
            ff1: Linear::new(&mut p.sub("ff1"), dim, ff_dim, true)?,
            ff2: Linear::new(&mut p.sub("ff2"), ff_dim, dim, true)?,
            norm2: LayerNorm::new(&mut p.sub("norm2"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&(x + self.attn.forward(x, mask)?)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.gelu()?)?;
        self.norm2.forward(&(&h + ff)?)
    }
}

/// Zero out padded token rows: `x` is `(batch, tokens, dim)`, `mask` is
/// `(batch, tokens)` with 1.0 on real tokens.
pub fn mask_rows(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&mask.unsqueeze(2)?)?)
}

/// Per-row select: rows where `mask` (batch, tokens) is non-zero come from
/// `on_true`, the others from `on_false`. Both operands are untouched bitwise.
pub fn select_rows(mask: &Tensor, on_true: &Tensor, on_false: &Tensor) -> Result<Tensor> {
    let cond = mask
        .unsqueeze(2)?
        .broadcast_as(on_true.shape())?
        .gt(0.5)?;
    Ok(cond.where_cond(on_true, on_false)?)
}

/// Group normalization of `(batch, C, h, w)` without affine parameters:
/// each sample's channel group is shifted to zero mean and unit variance
/// over its channels and positions.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{groups} groups do not divide {c} channels")));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(2)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?.reshape((b, c, h, w))?)
}

/// Nearest-neighbour upsampling of `(batch, C, h, w)` by an integer factor.
/// Built from a broadcast so that gradients accumulate correctly when the
/// input also feeds other ops.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Row-stochastic linear interpolation matrix mapping `n_in` samples to
/// `n_out` samples with half-pixel centers (no corner alignment).
pub fn bilinear_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of a `(batch, h, w)` map to `(batch, out_h, out_w)`,
/// expressed as two matrix products so that it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    Ok(ry.broadcast_matmul(x)?.broadcast_matmul(&rx)?)
}

/// Logistic function written through `tanh`, whose backward pass stays
/// finite for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// L2-normalize rows along the last dimension with `sqrt(|x|^2 + eps^2)`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}
