//! Object-aware query interaction layer: text injection into the query
//! tokens, cosine matching against fused pixels, hard assignment and token
//! update.

use candle_core::Tensor;

use super::assign::{gumbel_assign, AssignmentBundle, FrozenAssignment};
use super::fuse::FusedVisual;
use crate::backbones::LinguisticFeatures;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, masked_softmax, LayerNorm, Linear, Params};

pub const NORM_EPS: f64 = 1e-8;

pub struct Oaqil {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_c: Tensor,
    pub w_t: Tensor,
    pub w_d: Tensor,
    pub log_tau: Tensor,
    norm_text: LayerNorm,
    mlp_norm: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
    norm_out: LayerNorm,
    query_dim: usize,
    hard: bool,
}

impl Oaqil {
    pub fn new(
        p: &mut Params,
        query_dim: usize,
        text_dim: usize,
        fused_channels: usize,
        tau_init: f64,
        hard: bool,
    ) -> Result<Self> {
        if !(tau_init > 0.0) {
            return Err(Error::Parameter(format!("tau_init must be positive, got {tau_init}")));
        }
        let sq = 1.0 / (query_dim as f64).sqrt();
        let st = 1.0 / (text_dim as f64).sqrt();
        let sf = 1.0 / (fused_channels as f64).sqrt();
        Ok(Self {
            w_q: p.normal("w_q", &[query_dim, query_dim], sq)?,
            w_k: p.normal("w_k", &[text_dim, query_dim], st)?,
            w_v: p.normal("w_v", &[text_dim, query_dim], st)?,
            w_c: p.normal("w_c", &[query_dim, query_dim], sq)?,
            w_t: p.normal("w_t", &[query_dim, query_dim], sq)?,
            w_d: p.normal("w_d", &[fused_channels, query_dim], sf)?,
            log_tau: p.constant("log_tau", &[1], tau_init.ln())?,
            norm_text: LayerNorm::new(&mut p.sub("norm_text"), query_dim)?,
            mlp_norm: LayerNorm::new(&mut p.sub("mlp_norm"), query_dim)?,
            mlp_in: Linear::new(&mut p.sub("mlp_in"), query_dim, 2 * query_dim, true)?,
            mlp_out: Linear::new(&mut p.sub("mlp_out"), 2 * query_dim, query_dim, true)?,
            norm_out: LayerNorm::new(&mut p.sub("norm_out"), query_dim)?,
            query_dim,
            hard,
        })
    }

    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.log_tau.exp()?)
    }

    /// Cross-attention from tokens `(batch, M, C_q)` to text; padded text
    /// positions receive no weight.
    pub fn inject_text(&self, q: &Tensor, text: &LinguisticFeatures) -> Result<Tensor> {
        let (_, _, cq) = q.dims3()?;
        let (_, _, dl) = text.values.dims3()?;
        if cq != self.query_dim || dl != self.w_k.dim(0)? {
            return Err(Error::Shape(format!(
                "tokens width {cq} / text width {dl} do not match layer ({}, {})",
                self.query_dim,
                self.w_k.dim(0)?
            )));
        }
        let q_q = q.broadcast_matmul(&self.w_q)?;
        let l_k = text.values.broadcast_matmul(&self.w_k)?;
        let l_v = text.values.broadcast_matmul(&self.w_v)?;
        let scores = (q_q.matmul(&l_k.transpose(1, 2)?)? / (cq as f64).sqrt())?;
        let attn = masked_softmax(&scores, &text.mask)?;
        Ok(attn.matmul(&l_v)?.broadcast_matmul(&self.w_c)?)
    }

    /// Projected visual rows `flatten(V) W_d`: `(batch, P, C_q)`.
    pub fn project_pixels(&self, fused: &FusedVisual) -> Result<Tensor> {
        Ok(fused.flatten()?.broadcast_matmul(&self.w_d)?)
    }

    /// Cosine similarity `(batch, M, P)` between projected tokens and pixels.
    pub fn pixel_similarity(&self, q_l: &Tensor, fused: &FusedVisual) -> Result<Tensor> {
        let t = l2_normalize(&q_l.broadcast_matmul(&self.w_t)?, NORM_EPS)?;
        let d = l2_normalize(&self.project_pixels(fused)?, NORM_EPS)?;
        Ok(t.matmul(&d.transpose(1, 2)?)?)
    }

    /// `MLP(S · flatten(V) W_d) + Q_l W_t`, where `S` is the straight-through
    /// assignment (or the soft one when hard assignment is disabled).
    pub fn update_tokens(&self, bundle: &AssignmentBundle, fused: &FusedVisual, q_l: &Tensor) -> Result<Tensor> {
        let pooled = self.pool(bundle, fused)?;
        let h = self.mlp_in.forward(&self.mlp_norm.forward(&pooled)?)?.gelu()?;
        Ok((self.mlp_out.forward(&h)? + q_l.broadcast_matmul(&self.w_t)?)?)
    }

    /// Assignment-weighted sum of projected pixels per token.
    pub fn pool(&self, bundle: &AssignmentBundle, fused: &FusedVisual) -> Result<Tensor> {
        let s = if self.hard { &bundle.s_mask } else { &bundle.s_gumbel };
        Ok(s.matmul(&self.project_pixels(fused)?)?)
    }

    /// One full layer. `noise` is the Gumbel sample (zeros in eval mode).
    pub fn forward(
        &self,
        q: &Tensor,
        text: &LinguisticFeatures,
        fused: &FusedVisual,
        noise: &Tensor,
        frozen: Option<&FrozenAssignment>,
    ) -> Result<(Tensor, AssignmentBundle)> {
        let injected = self.inject_text(q, text)?;
        let q_l = self.norm_text.forward(&(q + injected)?)?;
        let s_pixel = self.pixel_similarity(&q_l, fused)?;
        let bundle = gumbel_assign(&s_pixel, &self.tau()?, noise, frozen)?;
        let q_u = self.update_tokens(&bundle, fused, &q_l)?;
        Ok((self.norm_out.forward(&q_u)?, bundle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Initializer, ParamSet};
    use candle_core::{DType, Device};

    struct Fixture {
        set: ParamSet,
        layer: Oaqil,
    }

    fn fixture(cq: usize, dl: usize, cf: usize, hard: bool) -> Fixture {
        let mut set = ParamSet::new("t", DType::F64, &Device::Cpu, true);
        let mut init = Initializer::new(11);
        let layer = Oaqil::new(&mut Params::new(&mut set, &mut init), cq, dl, cf, 1.0, hard).unwrap();
        Fixture { set, layer }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut init = Initializer::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(init.normal(n, 1.0), shape, &Device::Cpu).unwrap()
    }

    fn text(values: Tensor, valid: &[usize]) -> LinguisticFeatures {
        let (b, l, _) = values.dims3().unwrap();
        let mut m = vec![0.0f64; b * l];
        for (bi, n) in valid.iter().enumerate() {
            for j in 0..*n {
                m[bi * l + j] = 1.0;
            }
        }
        LinguisticFeatures::new(values, Tensor::from_vec(m, (b, l), &Device::Cpu).unwrap()).unwrap()
    }

    fn set(f: &Fixture, name: &str, t: &Tensor) {
        f.set.get(name).unwrap().set(t).unwrap();
    }

    fn v2(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    #[test]
    fn single_text_token_broadcasts_its_value_row() {
        let f = fixture(4, 3, 2, true);
        let l = text(rand(&[1, 3, 3], 1), &[1]);
        let q = rand(&[1, 5, 4], 2);
        let out = f.layer.inject_text(&q, &l).unwrap().get(0).unwrap();
        let row = l.values.get(0).unwrap().narrow(0, 0, 1).unwrap();
        let want = row.matmul(&f.layer.w_v).unwrap().matmul(&f.layer.w_c).unwrap();
        let want = v2(&want)[0].clone();
        for r in v2(&out) {
            for (a, b) in r.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        set(&f, "w_c", &Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap());
        let zero = f.layer.inject_text(&q, &l).unwrap();
        assert!(zero.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn two_by_two_cross_attention_by_hand() {
        let f = fixture(2, 2, 2, true);
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        for n in ["w_q", "w_k", "w_v", "w_c"] {
            set(&f, n, &eye);
        }
        let q = Tensor::new(&[[[1.0f64, 0.0], [0.0, 2.0]]], &Device::Cpu).unwrap();
        let lv = Tensor::new(&[[[1.0f64, 1.0], [3.0, -1.0]]], &Device::Cpu).unwrap();
        let out = f.layer.inject_text(&q, &text(lv, &[2])).unwrap().get(0).unwrap();
        // scores / sqrt(2): query0 -> (1, 3)/r2, query1 -> (2, -2)/r2
        let r2 = 2f64.sqrt();
        let soft = |a: f64, b: f64| {
            let (ea, eb) = ((a / r2).exp(), (b / r2).exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (a0, b0) = soft(1.0, 3.0);
        let (a1, b1) = soft(2.0, -2.0);
        let want = [[a0 + 3.0 * b0, a0 - b0], [a1 + 3.0 * b1, a1 - b1]];
        let got = v2(&out);
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[i][j] - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_pairwise_cosine_loop() {
        let f = fixture(4, 3, 5, true);
        let q_l = rand(&[2, 3, 4], 3);
        let fused = FusedVisual {
            values: rand(&[2, 5, 2, 3], 4),
            level_pair: "t".into(),
        };
        let s = f.layer.pixel_similarity(&q_l, &fused).unwrap().to_vec3::<f64>().unwrap();
        let wt = v2(&f.layer.w_t);
        let wd = v2(&f.layer.w_d);
        let q = q_l.to_vec3::<f64>().unwrap();
        let v = fused.values.to_dtype(DType::F64).unwrap();
        for b in 0..2 {
            let vb = v.get(b).unwrap().flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
            for m in 0..3 {
                let t: Vec<f64> = (0..4).map(|j| (0..4).map(|i| q[b][m][i] * wt[i][j]).sum()).collect();
                for p in 0..6 {
                    let d: Vec<f64> = (0..4).map(|j| (0..5).map(|c| vb[c][p] * wd[c][j]).sum()).collect();
                    let dot: f64 = t.iter().zip(&d).map(|(a, b)| a * b).sum();
                    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nd = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let cos = dot / (nt * nd);
                    assert!((s[b][m][p] - cos).abs() < 1e-6);
                    assert!(s[b][m][p].abs() <= 1.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn identical_and_orthogonal_directions() {
        let f = fixture(2, 2, 2, true);
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        set(&f, "w_t", &eye);
        set(&f, "w_d", &eye);
        let q_l = Tensor::new(&[[[3.0f64, 0.0]]], &Device::Cpu).unwrap();
        // pixel 0 = (2, 0), pixel 1 = (0, 5)
        let fused = FusedVisual {
            values: Tensor::new(&[[[[2.0f64, 0.0]], [[0.0, 5.0]]]], &Device::Cpu).unwrap(),
            level_pair: "t".into(),
        };
        let s = f.layer.pixel_similarity(&q_l, &fused).unwrap().to_vec3::<f64>().unwrap();
        assert!((s[0][0][0] - 1.0).abs() < 1e-12);
        assert_eq!(s[0][0][1], 0.0);
    }

    fn bundle_for(f: &Fixture, q_l: &Tensor, fused: &FusedVisual) -> AssignmentBundle {
        let s = f.layer.pixel_similarity(q_l, fused).unwrap();
        gumbel_assign(&s, &f.layer.tau().unwrap(), &s.zeros_like().unwrap(), None).unwrap()
    }

    #[test]
    fn pooling_matches_per_token_sum() {
        let f = fixture(4, 3, 5, true);
        let q_l = rand(&[1, 3, 4], 5);
        let fused = FusedVisual {
            values: rand(&[1, 5, 3, 3], 6),
            level_pair: "t".into(),
        };
        let bundle = bundle_for(&f, &q_l, &fused);
        let pooled = v2(&f.layer.pool(&bundle, &fused).unwrap().get(0).unwrap());
        let proj = v2(&f.layer.project_pixels(&fused).unwrap().get(0).unwrap());
        let labels = &bundle.labels().unwrap()[0];
        for m in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..9).filter(|p| labels[*p] == m).map(|p| proj[p][j]).sum();
                assert!((pooled[m][j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn everything_on_token_zero() {
        let f = fixture(3, 3, 3, true);
        let fused = FusedVisual {
            values: rand(&[1, 3, 2, 2], 7),
            level_pair: "t".into(),
        };
        let s_pixel = Tensor::new(&[[[0.9f64; 4], [0.1; 4]]], &Device::Cpu).unwrap();
        let bundle = gumbel_assign(&s_pixel, &f.layer.tau().unwrap(), &s_pixel.zeros_like().unwrap(), None).unwrap();
        let pooled = v2(&f.layer.pool(&bundle, &fused).unwrap().get(0).unwrap());
        let total = f.layer.project_pixels(&fused).unwrap().sum(1).unwrap().to_vec2::<f64>().unwrap();
        for j in 0..3 {
            assert!((pooled[0][j] - total[0][j]).abs() < 1e-12);
            assert_eq!(pooled[1][j], 0.0);
        }
    }

    #[test]
    fn zero_mlp_leaves_residual() {
        let f = fixture(4, 3, 5, true);
        for n in ["mlp_in.weight", "mlp_out.weight"] {
            let shape = f.set.get(n).unwrap().dims().to_vec();
            set(&f, n, &Tensor::zeros(shape, DType::F64, &Device::Cpu).unwrap());
        }
        let q_l = rand(&[1, 3, 4], 8);
        let fused = FusedVisual {
            values: rand(&[1, 5, 2, 2], 9),
            level_pair: "t".into(),
        };
        let bundle = bundle_for(&f, &q_l, &fused);
        let q_u = f.layer.update_tokens(&bundle, &fused, &q_l).unwrap();
        let want = q_l.broadcast_matmul(&f.layer.w_t).unwrap();
        assert_eq!(
            q_u.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            want.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn eval_layer_is_deterministic() {
        let f = fixture(4, 3, 5, true);
        let q = rand(&[2, 3, 4], 10);
        let l = text(rand(&[2, 4, 3], 11), &[2, 4]);
        let fused = FusedVisual {
            values: rand(&[2, 5, 4, 4], 12),
            level_pair: "t".into(),
        };
        let z = Tensor::zeros((2, 3, 16), DType::F64, &Device::Cpu).unwrap();
        let (a, ba) = f.layer.forward(&q, &l, &fused, &z, None).unwrap();
        let (b, bb) = f.layer.forward(&q, &l, &fused, &z, None).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert_eq!(ba.labels().unwrap(), bb.labels().unwrap());
        assert_eq!(a.dims(), &[2, 3, 4]);
    }
}
