//! Gumbel-normalized hard assignment of pixels to query tokens.
//!
//! Every tensor here is laid out `(batch, tokens, pixels)` except the
//! one-hot rows, which are `(batch, pixels, tokens)`. Softmax and argmax run
//! over the token axis, one distribution per pixel.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::softmax_dim1;

/// Source of the Gumbel(0, 1) perturbation used in training mode.
pub enum GumbelNoise {
    Sampled(ChaCha8Rng),
    /// Training-mode path without perturbation.
    Zero,
}

impl GumbelNoise {
    pub fn seeded(seed: u64) -> Self {
        Self::Sampled(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample(&mut self, shape: (usize, usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
        match self {
            Self::Zero => Ok(Tensor::zeros(shape, dtype, device)?),
            Self::Sampled(rng) => {
                let n = shape.0 * shape.1 * shape.2;
                let v: Vec<f64> = (0..n).map(|_| gumbel(rng)).collect();
                Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
            }
        }
    }
}

/// `-ln(-ln u)` with `u` drawn from the open interval (0, 1).
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

#[derive(Clone, Debug)]
pub struct AssignmentBundle {
    /// Cosine similarities `(batch, M, P)`.
    pub s_pixel: Tensor,
    /// Per-pixel softmax over tokens `(batch, M, P)`.
    pub s_gumbel: Tensor,
    /// One-hot rows `(batch, P, M)`.
    pub s_onehot: Tensor,
    /// Straight-through assignment `(batch, M, P)`; its value is `s_onehotᵀ`.
    pub s_mask: Tensor,
    pub tau: f64,
    pub noise: Tensor,
}

impl AssignmentBundle {
    /// `s_onehotᵀ` as `(batch, M, P)`.
    pub fn onehot_t(&self) -> Result<Tensor> {
        Ok(self.s_onehot.transpose(1, 2)?.contiguous()?)
    }

    /// Hold the discrete choice and the stop-gradient value constant.
    pub fn freeze(&self) -> Result<FrozenAssignment> {
        Ok(FrozenAssignment {
            onehot_t: self.onehot_t()?.detach(),
            gumbel: self.s_gumbel.detach(),
        })
    }

    /// Token index chosen by every pixel, `[batch][pixel]`.
    pub fn labels(&self) -> Result<Vec<Vec<usize>>> {
        let rows = self.s_onehot.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(rows
            .iter()
            .map(|b| b.iter().map(|r| r.iter().position(|x| *x == 1.0).unwrap_or(0)).collect())
            .collect())
    }
}

/// Constants captured from one evaluation. Re-running with them replaces the
/// piecewise-constant parts of the straight-through estimator by fixed values,
/// which makes the composite smooth in the parameters for finite differences.
#[derive(Clone, Debug)]
pub struct FrozenAssignment {
    pub onehot_t: Tensor,
    pub gumbel: Tensor,
}

/// One-hot rows `(batch, P, M)` of the per-pixel argmax over tokens of a
/// `(batch, M, P)` tensor; ties go to the lowest token index.
pub fn onehot_argmax(scores: &Tensor) -> Result<Tensor> {
    let (b, m, p) = scores.dims3()?;
    let v = scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = vec![0.0f64; b * p * m];
    for bi in 0..b {
        for pi in 0..p {
            let mut best = 0;
            for mi in 1..m {
                if v[(bi * m + mi) * p + pi] > v[(bi * m + best) * p + pi] {
                    best = mi;
                }
            }
            out[(bi * p + pi) * m + best] = 1.0;
        }
    }
    Ok(Tensor::from_vec(out, (b, p, m), scores.device())?.to_dtype(scores.dtype())?)
}

/// `tau` is a one-element tensor so that a learnable temperature receives
/// gradients. `noise` has the shape of `s_pixel` and is all zero in eval mode.
pub fn gumbel_assign(
    s_pixel: &Tensor,
    tau: &Tensor,
    noise: &Tensor,
    frozen: Option<&FrozenAssignment>,
) -> Result<AssignmentBundle> {
    let tau_value = tau.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let tau_value = match tau_value.as_slice() {
        [t] => *t,
        _ => return Err(Error::Shape(format!("tau must hold one value, got {:?}", tau.dims()))),
    };
    if !(tau_value > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau_value}")));
    }
    if noise.dims() != s_pixel.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match similarities {:?}",
            noise.dims(),
            s_pixel.dims()
        )));
    }
    let s_gumbel = softmax_dim1(&(s_pixel + noise)?.broadcast_div(tau)?)?;
    let (onehot_t, sg) = match frozen {
        Some(f) => (f.onehot_t.clone(), f.gumbel.clone()),
        None => (
            onehot_argmax(&s_gumbel)?.transpose(1, 2)?.contiguous()?,
            s_gumbel.detach(),
        ),
    };
    // (S_gumbel - sg(S_gumbel)) is exactly zero in value, so adding the
    // one-hot last reproduces it bit for bit.
    let s_mask = ((&s_gumbel - &sg)? + &onehot_t)?;
    Ok(AssignmentBundle {
        s_pixel: s_pixel.clone(),
        s_gumbel,
        s_onehot: onehot_t.transpose(1, 2)?.contiguous()?,
        s_mask,
        tau: tau_value,
        noise: noise.clone(),
    })
}
