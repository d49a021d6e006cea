use candle_core::Tensor;

use super::assign::AssignmentBundle;
use crate::error::Result;
use crate::nn::{resize_bilinear, Linear, Params};

/// Per-token relevance scores weighting the final assignment maps.
pub struct MaskHead {
    pub score: Linear,
}

impl MaskHead {
    pub fn new(p: &mut Params, query_dim: usize) -> Result<Self> {
        Ok(Self {
            score: Linear::new(&mut p.sub("score"), query_dim, 1, true)?,
        })
    }

    /// Relevance `s`: `(batch, M)`.
    pub fn scores(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.score.forward(tokens)?.squeeze(2)?)
    }

    /// Mask logits `(batch, out_h, out_w)`. Training mode weights the soft
    /// assignment, eval mode the one-hot maps.
    pub fn predict_mask(
        &self,
        tokens: &Tensor,
        assignment: &AssignmentBundle,
        fused_hw: (usize, usize),
        out_hw: (usize, usize),
        train: bool,
    ) -> Result<Tensor> {
        let weights = if train {
            assignment.s_gumbel.clone()
        } else {
            assignment.onehot_t()?
        };
        Ok(mask_from_scores(&self.scores(tokens)?, &weights, fused_hw, out_hw)?)
    }
}

/// `sᵀ · A` reshaped to the fused grid and resized bilinearly.
pub fn mask_from_scores(
    scores: &Tensor,
    weights: &Tensor,
    fused_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Tensor> {
    let (b, _) = scores.dims2()?;
    let low = scores.unsqueeze(1)?.matmul(weights)?.reshape((b, fused_hw.0, fused_hw.1))?;
    resize_bilinear(&low, out_hw.0, out_hw.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;
    use crate::pcmrd::assign::gumbel_assign;
    use candle_core::{DType, Device};

    fn bundle(seed: u64) -> AssignmentBundle {
        let mut init = Initializer::new(seed);
        let s = Tensor::from_vec(init.normal(3 * 16, 0.5), (1, 3, 16), &Device::Cpu).unwrap();
        let g = Tensor::from_vec(init.normal(3 * 16, 1.0), (1, 3, 16), &Device::Cpu).unwrap();
        gumbel_assign(&s, &Tensor::new(&[0.8f64], &Device::Cpu).unwrap(), &g, None).unwrap()
    }

    #[test]
    fn zero_scores_give_zero_logits() {
        let a = bundle(1);
        let s = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        for w in [a.s_gumbel.clone(), a.onehot_t().unwrap()] {
            let out = mask_from_scores(&s, &w, (4, 4), (16, 16)).unwrap();
            assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn single_unit_score_selects_assignment_map() {
        let a = bundle(2);
        let s = Tensor::new(&[[0.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let out = mask_from_scores(&s, &a.onehot_t().unwrap(), (4, 4), (4, 4)).unwrap();
        let got = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let labels = &a.labels().unwrap()[0];
        for p in 0..16 {
            assert_eq!(got[p], if labels[p] == 1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn train_logits_match_weighted_sum() {
        let a = bundle(3);
        let s = [0.3f64, -1.2, 2.0];
        let st = Tensor::new(&[s], &Device::Cpu).unwrap();
        let out = mask_from_scores(&st, &a.s_gumbel, (4, 4), (4, 4)).unwrap();
        let got = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = a.s_gumbel.to_vec3::<f64>().unwrap();
        for p in 0..16 {
            let want: f64 = (0..3).map(|m| s[m] * g[0][m][p]).sum();
            assert!((got[p] - want).abs() < 1e-6);
        }
    }
}
