//! Closed-form forward noising with a linear variance schedule.
//!
//! The segmentation pipeline itself never adds noise; this is exposed for
//! completeness and for statistical checks.

use candle_core::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly increasing variances from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative product at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(self.alpha_bars[t - 1])
    }
}

/// `x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise` for 1-based `t`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let abar = schedule.alpha_bar(t)?;
    noised(x0, abar, noise)
}

/// Same combination for an explicit cumulative product `abar` in `[0, 1]`.
pub fn noised(x0: &Tensor, abar: f64, noise: &Tensor) -> Result<Tensor> {
    if x0.dims() != noise.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match input {:?}",
            noise.dims(),
            x0.dims()
        )));
    }
    Ok(((x0 * abar.sqrt())? + (noise * (1.0 - abar).sqrt())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn single_step() {
        let s = DiffusionSchedule::linear(1, 0.02, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.02]);
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.02);
    }

    #[test]
    fn two_steps_by_hand() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9, 0.9 * 0.8]);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(4, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::linear(4, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::linear(4, 0.1, 1.0).is_err());
        let s = DiffusionSchedule::linear(4, 0.1, 0.2).unwrap();
        assert!(matches!(s.alpha_bar(0), Err(Error::Index(_))));
        assert!(matches!(s.alpha_bar(5), Err(Error::Index(_))));
    }

    #[test]
    fn identity_and_noise_free_cases() {
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[1.5f64, -2.0, 0.25], &dev).unwrap();
        let noise = Tensor::new(&[0.3f64, 0.1, -0.7], &dev).unwrap();
        let same = noised(&x0, 1.0, &noise).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(same, vec![1.5, -2.0, 0.25]);

        let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let zeros = noise.zeros_like().unwrap();
        let xt = forward_diffuse(&x0, 7, &s, &zeros).unwrap().to_vec1::<f64>().unwrap();
        let k = s.alpha_bar(7).unwrap().sqrt();
        for (a, b) in xt.iter().zip([1.5, -2.0, 0.25]) {
            assert_eq!(*a, b * k);
        }
        // input untouched
        assert_eq!(x0.to_vec1::<f64>().unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(forward_diffuse(&x0, 11, &s, &noise).is_err());
    }

    proptest! {
        #[test]
        fn schedule_law(steps in 1usize..200, a in 1e-5f64..0.4, gap in 1e-4f64..0.5) {
            let b = (a + gap).min(0.999);
            prop_assume!(b > a);
            let s = DiffusionSchedule::linear(steps, a, b).unwrap();
            let mut prod = 1.0;
            for t in 1..=steps {
                prod *= 1.0 - s.betas()[t - 1];
                prop_assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
                prop_assert!(s.alpha_bar(t).unwrap() > 0.0 && s.alpha_bar(t).unwrap() < 1.0);
                if t > 1 {
                    prop_assert!(s.betas()[t - 1] > s.betas()[t - 2]);
                    prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                }
            }
        }
    }
}
