//! Context-perception adapter.
//!
//! Refines token features in five steps:
//!
//! 1. `H = Encoder(L)` — masked transformer stack over the tokens.
//! 2. `H' = softmax(L W_q (L W_k)^T / sqrt(D_l)) · H W_v + L`.
//! 3. `H_enh = FC2(ReLU(FC1(H'))) + H'`.
//! 4. `H_llm = H_enh · A · B` — low-rank adjustment, `B` starts at zero.
//! 5. `L_hat = alpha · H_llm + (1 - alpha) · L`, `alpha` starts at zero.
//!
//! With `B = 0` and `alpha = 0` the adapter is an exact identity at
//! initialization. Padded token rows are passed through from `L`, which
//! holds zeros there.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::LinguisticFeatures;
use crate::error::{Error, Result};
use crate::nn::{
    mask_rows, masked_softmax, select_rows, EncoderLayer, Initializer, Linear, ParamSet, Params,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpAdapterConfig {
    pub depth: usize,
    pub heads: usize,
    pub rank: usize,
    /// Hidden width of the two-layer projection block.
    pub projection_dim: usize,
    /// Master switch; when off the adapter passes `L` through untouched.
    pub enable_adapter: bool,
    pub enable_context: bool,
    pub enable_object_reasoning: bool,
    pub enable_domain_adjust: bool,
    pub lora_init_std: f64,
}

impl Default for CpAdapterConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            rank: 8,
            projection_dim: 64,
            enable_adapter: true,
            enable_context: true,
            enable_object_reasoning: true,
            enable_domain_adjust: true,
            lora_init_std: 0.02,
        }
    }
}

impl CpAdapterConfig {
    pub fn validate(&self, text_dim: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Parameter("cp_adapter.rank must be at least 1".into()));
        }
        if self.heads == 0 || text_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "cp_adapter.heads {} must divide the text width {text_dim}",
                self.heads
            )));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("cp_adapter.projection_dim must be positive".into()));
        }
        Ok(())
    }
}

pub struct CpAdapter {
    cfg: CpAdapterConfig,
    dim: usize,
    encoder: Vec<EncoderLayer>,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    proj_in: Linear,
    proj_out: Linear,
    lora_a: Tensor,
    lora_b: Tensor,
    alpha: Tensor,
}

impl CpAdapter {
    pub fn new(p: &mut Params, cfg: &CpAdapterConfig, dim: usize) -> Result<Self> {
        cfg.validate(dim)?;
        let encoder = (0..cfg.depth)
            .map(|i| EncoderLayer::new(&mut p.sub(&format!("encoder{i}")), dim, cfg.heads, 2 * dim))
            .collect::<Result<Vec<_>>>()?;
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            cfg: cfg.clone(),
            dim,
            encoder,
            w_q: p.normal("w_q", &[dim, dim], std)?,
            w_k: p.normal("w_k", &[dim, dim], std)?,
            w_v: p.normal("w_v", &[dim, dim], std)?,
            proj_in: Linear::new(&mut p.sub("proj_in"), dim, cfg.projection_dim, true)?,
            proj_out: Linear::new(&mut p.sub("proj_out"), cfg.projection_dim, dim, true)?,
            lora_a: p.normal("lora_a", &[dim, cfg.rank], cfg.lora_init_std)?,
            lora_b: p.zeros("lora_b", &[cfg.rank, dim])?,
            alpha: p.zeros("alpha", &[1])?,
        })
    }

    /// Standalone adapter with its own parameter set (namespace `cp_adapter`).
    pub fn build(
        cfg: &CpAdapterConfig,
        dim: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, ParamSet)> {
        let mut set = ParamSet::new("cp_adapter", dtype, device, true);
        let mut init = Initializer::new(seed);
        let adapter = Self::new(&mut Params::new(&mut set, &mut init), cfg, dim)?;
        Ok((adapter, set))
    }

    pub fn config(&self) -> &CpAdapterConfig {
        &self.cfg
    }

    fn check(&self, l: &LinguisticFeatures) -> Result<()> {
        let (_, _, d) = l.dims();
        if d != self.dim {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {d}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Global context modeling. Padded rows of the result are zero.
    pub fn global_context_encode(&self, l: &LinguisticFeatures) -> Result<Tensor> {
        self.check(l)?;
        let mut h = l.values.clone();
        for layer in &self.encoder {
            h = layer.forward(&h, &l.mask)?;
        }
        if self.encoder.is_empty() {
            return Ok(h);
        }
        mask_rows(&h, &l.mask)
    }

    /// Self-attention weights `(batch, heads, l_m, l_m)` of encoder layer `layer`
    /// given that layer's input.
    pub fn context_attention_weights(&self, layer: usize, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let l = self
            .encoder
            .get(layer)
            .ok_or_else(|| Error::Index(format!("no encoder layer {layer}")))?;
        l.attn.weights(x, mask)
    }

    /// Object-aware attention weights `(batch, l_m, l_m)`; queries and keys
    /// come from `L`, padded keys get zero weight.
    pub fn object_attention_weights(&self, l: &LinguisticFeatures) -> Result<Tensor> {
        let q = l.values.broadcast_matmul(&self.w_q)?;
        let k = l.values.broadcast_matmul(&self.w_k)?;
        let scores = (q.matmul(&k.t()?)? / (self.dim as f64).sqrt())?;
        masked_softmax(&scores, &l.mask)
    }

    /// `H' = Attention(L_q, L_k, H_v) + L`.
    pub fn object_aware_attend(&self, h: &Tensor, l: &LinguisticFeatures) -> Result<Tensor> {
        if h.dims() != l.values.dims() {
            return Err(Error::Shape(format!(
                "context features {:?} do not match text {:?}",
                h.dims(),
                l.values.dims()
            )));
        }
        let w = self.object_attention_weights(l)?;
        let hv = h.broadcast_matmul(&self.w_v)?;
        Ok((w.matmul(&hv)? + &l.values)?)
    }

    /// `H_enh = Projection(H') + H'`.
    pub fn project_enhance(&self, h_prime: &Tensor) -> Result<Tensor> {
        let hidden = self.proj_in.forward(h_prime)?.relu()?;
        Ok((self.proj_out.forward(&hidden)? + h_prime)?)
    }

    /// `H_llm = H_enh · (A · B)`, applied per token row.
    pub fn domain_adjust(&self, h_enh: &Tensor) -> Result<Tensor> {
        Ok(h_enh
            .broadcast_matmul(&self.lora_a)?
            .broadcast_matmul(&self.lora_b)?)
    }

    /// The materialized `D_l x D_l` adjustment matrix `A · B`.
    pub fn adjustment_matrix(&self) -> Result<Tensor> {
        Ok(self.lora_a.matmul(&self.lora_b)?)
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn forward(&self, l: &LinguisticFeatures) -> Result<LinguisticFeatures> {
        self.check(l)?;
        if !self.cfg.enable_adapter {
            return Ok(l.clone());
        }
        let h = if self.cfg.enable_context {
            self.global_context_encode(l)?
        } else {
            l.values.clone()
        };
        let h_prime = if self.cfg.enable_object_reasoning {
            self.object_aware_attend(&h, l)?
        } else {
            h
        };
        let h_enh = self.project_enhance(&h_prime)?;
        let h_llm = if self.cfg.enable_domain_adjust {
            self.domain_adjust(&h_enh)?
        } else {
            h_enh
        };
        let fused = gated_fuse(&h_llm, &l.values, &self.alpha)?;
        Ok(l.with_values(select_rows(&l.mask, &fused, &l.values)?))
    }
}

/// `alpha · H_llm + (1 - alpha) · L` with a one-element `alpha` tensor.
pub fn gated_fuse(h_llm: &Tensor, l: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if h_llm.dims() != l.dims() {
        return Err(Error::Shape(format!(
            "adjusted features {:?} do not match text {:?}",
            h_llm.dims(),
            l.dims()
        )));
    }
    let keep = alpha.affine(-1.0, 1.0)?;
    Ok((h_llm.broadcast_mul(alpha)? + l.broadcast_mul(&keep)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;

    const DIM: usize = 8;

    fn features(b: usize, t: usize, lens: &[usize], seed: u64) -> LinguisticFeatures {
        let dev = Device::Cpu;
        let mut init = Initializer::new(seed);
        let v = Tensor::from_vec(init.normal(b * t * DIM, 1.0), (b, t, DIM), &dev).unwrap();
        let mut m = vec![0f64; b * t];
        for (i, &n) in lens.iter().enumerate() {
            for j in 0..n {
                m[i * t + j] = 1.0;
            }
        }
        let mask = Tensor::from_vec(m, (b, t), &dev).unwrap();
        LinguisticFeatures::new(mask_rows(&v, &mask).unwrap(), mask).unwrap()
    }

    fn adapter(cfg: CpAdapterConfig) -> (CpAdapter, ParamSet) {
        CpAdapter::build(&cfg, DIM, 3, DType::F64, &Device::Cpu).unwrap()
    }

    fn small() -> CpAdapterConfig {
        CpAdapterConfig {
            heads: 2,
            rank: 2,
            projection_dim: 6,
            ..Default::default()
        }
    }

    fn set(params: &ParamSet, name: &str, values: Vec<f64>) {
        let var = params.get(name).unwrap();
        let t = Tensor::from_vec(values, var.dims(), &Device::Cpu).unwrap();
        var.set(&t).unwrap();
    }

    fn v3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
        t.to_vec3::<f64>().unwrap()
    }

    #[test]
    fn identity_at_init() {
        let (a, _) = adapter(small());
        let l = features(3, 5, &[5, 2, 0], 11);
        let out = a.forward(&l).unwrap();
        let x = l.values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let y = out.values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn depth_zero_context_is_identity() {
        let (a, _) = adapter(CpAdapterConfig {
            depth: 0,
            ..small()
        });
        let l = features(2, 4, &[4, 1], 1);
        assert_eq!(v3(&a.global_context_encode(&l).unwrap()), v3(&l.values));
    }

    #[test]
    fn context_attention_mask_law() {
        let (a, _) = adapter(small());
        let l = features(2, 5, &[3, 1], 2);
        let w = a
            .context_attention_weights(0, &l.values, &l.mask)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let w: Vec<Vec<Vec<Vec<f64>>>> = (0..2)
            .map(|b| v3(&w.get(b).unwrap()))
            .collect();
        for (b, n) in [(0usize, 3usize), (1, 1)] {
            for head in &w[b] {
                for row in head.iter().take(n) {
                    let s: f64 = row[..n].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    assert!(row[n..].iter().all(|x| *x == 0.0));
                }
            }
        }
        // a single real token attends only to itself
        for head in &w[1] {
            assert_eq!(head[0][0], 1.0);
        }
    }

    #[test]
    fn value_projection_zero_leaves_text() {
        let (a, p) = adapter(small());
        set(&p, "w_v", vec![0.0; DIM * DIM]);
        let l = features(1, 4, &[4], 5);
        let h = a.global_context_encode(&l).unwrap();
        let out = a.object_aware_attend(&h, &l).unwrap();
        assert_eq!(v3(&out), v3(&l.values));
    }

    #[test]
    fn single_token_identity_projections() {
        let (a, p) = adapter(small());
        let eye: Vec<f64> = (0..DIM * DIM)
            .map(|i| if i / DIM == i % DIM { 1.0 } else { 0.0 })
            .collect();
        for n in ["w_q", "w_k", "w_v"] {
            set(&p, n, eye.clone());
        }
        let l = features(1, 3, &[1], 9);
        let h = features(1, 3, &[1], 10).values;
        let out = v3(&a.object_aware_attend(&h, &l).unwrap());
        let (hv, lv) = (v3(&h), v3(&l.values));
        for j in 0..DIM {
            assert!((out[0][0][j] - (hv[0][0][j] + lv[0][0][j])).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_attention_by_hand() {
        // D_l = 8 but only the first coordinate is non-zero, so the scores are
        // products of scalars.
        let (a, p) = adapter(small());
        let mut wq = vec![0.0; DIM * DIM];
        let mut wk = vec![0.0; DIM * DIM];
        wq[0] = 2.0;
        wk[0] = 0.5;
        set(&p, "w_q", wq);
        set(&p, "w_k", wk);
        let mut v = vec![0.0; 2 * DIM];
        v[0] = 1.0;
        v[DIM] = 3.0;
        let dev = Device::Cpu;
        let l = LinguisticFeatures::new(
            Tensor::from_vec(v, (1, 2, DIM), &dev).unwrap(),
            Tensor::new(&[[1.0f64, 1.0]], &dev).unwrap(),
        )
        .unwrap();
        let w = v3(&a.object_attention_weights(&l).unwrap());
        let scale = (DIM as f64).sqrt();
        for (i, xi) in [1.0f64, 3.0].iter().enumerate() {
            let s: Vec<f64> = [1.0f64, 3.0].iter().map(|xj| 2.0 * xi * 0.5 * xj / scale).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..2 {
                assert!((w[0][i][j] - s[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_residual_and_dead_relu() {
        let (a, p) = adapter(small());
        let x = features(1, 3, &[3], 4).values;
        for n in ["proj_in.weight", "proj_out.weight"] {
            let len = p.get(n).unwrap().elem_count();
            set(&p, n, vec![0.0; len]);
        }
        assert_eq!(v3(&a.project_enhance(&x).unwrap()), v3(&x));

        // Strongly negative first-layer bias: every hidden unit is dead.
        let (a, p) = adapter(small());
        set(&p, "proj_in.weight", vec![0.0; DIM * 6]);
        set(&p, "proj_in.bias", vec![-1.0; 6]);
        assert_eq!(v3(&a.project_enhance(&x).unwrap()), v3(&x));
    }

    #[test]
    fn projection_scalar_hand_case() {
        let cfg = CpAdapterConfig {
            heads: 1,
            rank: 1,
            projection_dim: 1,
            depth: 0,
            ..Default::default()
        };
        let (a, p) = CpAdapter::build(&cfg, 1, 0, DType::F64, &Device::Cpu).unwrap();
        set(&p, "proj_in.weight", vec![1.0]);
        set(&p, "proj_out.weight", vec![3.0]);
        let x = Tensor::new(&[[[2.0f64]]], &Device::Cpu).unwrap();
        assert_eq!(v3(&a.project_enhance(&x).unwrap())[0][0][0], 8.0);
    }

    #[test]
    fn domain_adjust_cases() {
        let (a, _) = adapter(small());
        let x = features(2, 3, &[3, 3], 6).values;
        assert!(v3(&a.domain_adjust(&x).unwrap()).iter().flatten().flatten().all(|v| *v == 0.0));

        let full = CpAdapterConfig {
            rank: DIM,
            ..small()
        };
        let (a, p) = adapter(full);
        let eye: Vec<f64> = (0..DIM * DIM)
            .map(|i| if i / DIM == i % DIM { 1.0 } else { 0.0 })
            .collect();
        set(&p, "lora_a", eye.clone());
        set(&p, "lora_b", eye);
        assert_eq!(v3(&a.domain_adjust(&x).unwrap()), v3(&x));
    }

    #[test]
    fn zero_rank_rejected() {
        let cfg = CpAdapterConfig {
            rank: 0,
            ..small()
        };
        assert!(matches!(
            CpAdapter::build(&cfg, DIM, 0, DType::F64, &Device::Cpu),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gate_endpoints() {
        let dev = Device::Cpu;
        let h = features(1, 3, &[3], 7).values;
        let l = features(1, 3, &[3], 8).values;
        let zero = Tensor::new(&[0.0f64], &dev).unwrap();
        let one = Tensor::new(&[1.0f64], &dev).unwrap();
        assert_eq!(v3(&gated_fuse(&h, &l, &zero).unwrap()), v3(&l));
        assert_eq!(v3(&gated_fuse(&h, &l, &one).unwrap()), v3(&h));
        let half = Tensor::new(&[0.5f64], &dev).unwrap();
        let two = Tensor::new(&[[[2.0f64]]], &dev).unwrap();
        let z = Tensor::new(&[[[0.0f64]]], &dev).unwrap();
        assert_eq!(v3(&gated_fuse(&two, &z, &half).unwrap())[0][0][0], 1.0);
    }

    #[test]
    fn disabling_object_reasoning_bypasses_attention() {
        let cfg = CpAdapterConfig {
            enable_object_reasoning: false,
            ..small()
        };
        let (a, p) = adapter(cfg);
        set(&p, "alpha", vec![1.0]);
        let rank = 2;
        set(&p, "lora_b", vec![0.1; rank * DIM]);
        let l = features(1, 4, &[4], 12);
        let out = v3(&a.forward(&l).unwrap().values);
        let h = a.global_context_encode(&l).unwrap();
        let expect = v3(&a.domain_adjust(&a.project_enhance(&h).unwrap()).unwrap());
        for (x, y) in out.iter().flatten().flatten().zip(expect.iter().flatten().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
