//! Frozen stand-in encoders: text encoder, latent image encoder and the
//! text-conditioned multi-scale feature extractor.

pub mod diffusion;
pub mod latent;
pub mod text;
pub mod unet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use diffusion::{forward_diffuse, DiffusionSchedule};
pub use latent::{LatentEncoder, LatentRepresentation};
pub use text::{LinguisticFeatures, TextEncoder, TokenSequence};
pub use unet::{FeatureExtractor, MultiScaleFeatures};

use crate::error::{Error, Result};
use crate::nn::{Initializer, ParamSet, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    /// Maximum expression length `l_m`.
    pub max_tokens: usize,
    /// Text feature width `D_l`.
    pub text_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub latent_channels: usize,
    pub downsample: usize,
    pub pyramid_channels: [usize; 4],
    pub frozen: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_tokens: 20,
            text_dim: 64,
            text_depth: 1,
            text_heads: 4,
            latent_channels: 32,
            downsample: 8,
            pyramid_channels: [32, 64, 128, 256],
            frozen: true,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbones: {m}")));
        if self.vocab_size == 0 || self.max_tokens == 0 || self.text_dim == 0 {
            return bad("vocab_size, max_tokens and text_dim must be positive".into());
        }
        if self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return bad(format!(
                "text_dim {} must be divisible by text_heads {}",
                self.text_dim, self.text_heads
            ));
        }
        if self.latent_channels == 0 || self.pyramid_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if !matches!(self.downsample, 2 | 4 | 8 | 16 | 32) {
            return bad(format!(
                "downsample {} must be a power of two in 2..=32",
                self.downsample
            ));
        }
        Ok(())
    }
}

/// The three pre-trained components and their parameters.
pub struct BackboneBundle {
    pub text: TextEncoder,
    pub latent: LatentEncoder,
    pub extractor: FeatureExtractor,
    pub params: ParamSet,
    pub frozen: bool,
}

impl BackboneBundle {
    /// Build with `trainable` controlling whether parameters join the graph.
    /// A frozen bundle is always built detached.
    pub fn new(cfg: &BackboneConfig, dtype: DType, device: &Device, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new("backbones", dtype, device, trainable);
        let mut init = Initializer::new(cfg.seed);
        let mut p = Params::new(&mut params, &mut init);
        let text = TextEncoder::new(
            &mut p.sub("text"),
            cfg.vocab_size,
            cfg.max_tokens,
            cfg.text_dim,
            cfg.text_depth,
            cfg.text_heads,
        )?;
        let latent = LatentEncoder::new(&mut p.sub("latent"), cfg.latent_channels, cfg.downsample)?;
        let extractor = FeatureExtractor::new(
            &mut p.sub("unet"),
            cfg.latent_channels,
            cfg.pyramid_channels,
            cfg.text_dim,
            cfg.downsample,
        )?;
        Ok(Self {
            text,
            latent,
            extractor,
            params,
            frozen: cfg.frozen,
        })
    }

    pub fn encode_text(&self, tokens: &[TokenSequence]) -> Result<LinguisticFeatures> {
        self.text.encode(tokens)
    }

    pub fn encode_image_latent(&self, images: &Tensor) -> Result<LatentRepresentation> {
        self.latent.encode(images)
    }

    pub fn extract_multiscale(
        &self,
        z: &LatentRepresentation,
        refined_text: &LinguisticFeatures,
    ) -> Result<MultiScaleFeatures> {
        self.extractor.extract(z, refined_text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            text_dim: 16,
            max_tokens: 6,
            text_heads: 2,
            latent_channels: 8,
            pyramid_channels: [4, 8, 8, 16],
            ..Default::default()
        }
    }

    fn random_images(b: usize, h: usize, seed: u64) -> Tensor {
        let mut init = Initializer::new(seed);
        let v: Vec<f32> = init.normal(b * 3 * h * h, 1.0).iter().map(|x| *x as f32).collect();
        Tensor::from_vec(v, (b, 3, h, h), &Device::Cpu).unwrap()
    }

    #[test]
    fn empty_expression_is_all_zero() {
        let bb = BackboneBundle::new(&tiny(), DType::F32, &Device::Cpu, false).unwrap();
        let l = bb.encode_text(&[TokenSequence::new(vec![], 6).unwrap()]).unwrap();
        assert_eq!(l.dims(), (1, 6, 16));
        let v = l.values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        let m = l.mask.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn text_errors() {
        let bb = BackboneBundle::new(&tiny(), DType::F32, &Device::Cpu, false).unwrap();
        let err = bb
            .encode_text(&[TokenSequence::new(vec![64], 6).unwrap()])
            .unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 64, vocab: 64 }));
        assert!(matches!(
            TokenSequence::new(vec![1; 7], 6),
            Err(Error::Length { len: 7, max: 6 })
        ));
    }

    #[test]
    fn text_is_deterministic_and_pads_zero() {
        let bb = BackboneBundle::new(&tiny(), DType::F64, &Device::Cpu, false).unwrap();
        let toks = [TokenSequence::new(vec![3, 9, 2], 6).unwrap()];
        let a = bb.encode_text(&toks).unwrap().values.to_vec3::<f64>().unwrap();
        let b = bb.encode_text(&toks).unwrap().values.to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
        for row in &a[0][3..] {
            assert!(row.iter().all(|x| *x == 0.0));
        }
        assert!(a[0][0].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn one_token_lookup_matches_table() {
        let cfg = BackboneConfig {
            text_depth: 0,
            ..tiny()
        };
        let bb = BackboneBundle::new(&cfg, DType::F64, &Device::Cpu, false).unwrap();
        let table = bb.text.embedding.to_vec2::<f64>().unwrap();
        let pos0 = bb.text.positions().get(0).unwrap().to_vec1::<f64>().unwrap();
        let batch: Vec<_> = (0..cfg.vocab_size as u32)
            .map(|id| TokenSequence::new(vec![id], cfg.max_tokens).unwrap())
            .collect();
        let out = bb.encode_text(&batch).unwrap().values.to_vec3::<f64>().unwrap();
        for (id, sample) in out.iter().enumerate() {
            for j in 0..cfg.text_dim {
                assert!((sample[0][j] - pos0[j] - table[id][j]).abs() < 1e-12);
            }
            assert!(sample[1..].iter().flatten().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn latent_shapes_and_zero_image() {
        let bb = BackboneBundle::new(&BackboneConfig::default(), DType::F32, &Device::Cpu, false).unwrap();
        let z = bb.encode_image_latent(&random_images(2, 64, 1)).unwrap();
        assert_eq!(z.values.dims(), &[2, 32, 8, 8]);
        let zero = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let z0 = bb.encode_image_latent(&zero).unwrap();
        assert!(z0.values.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|x| *x == 0.0));
        let odd = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(bb.encode_image_latent(&odd), Err(Error::Shape(_))));
    }

    #[test]
    fn latent_is_bytewise_deterministic() {
        let a = BackboneBundle::new(&BackboneConfig::default(), DType::F32, &Device::Cpu, false).unwrap();
        let b = BackboneBundle::new(&BackboneConfig::default(), DType::F32, &Device::Cpu, false).unwrap();
        let img = random_images(1, 64, 5);
        let za = a.encode_image_latent(&img).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let zb = b.encode_image_latent(&img).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&za), bits(&zb));
    }

    #[test]
    fn pyramid_and_live_conditioning() {
        let cfg = tiny();
        let bb = BackboneBundle::new(&cfg, DType::F64, &Device::Cpu, false).unwrap();
        let img = random_images(1, 64, 2).to_dtype(DType::F64).unwrap();
        let z = bb.encode_image_latent(&img).unwrap();
        let la = bb.encode_text(&[TokenSequence::new(vec![1, 2, 3], 6).unwrap()]).unwrap();
        let lb = bb.encode_text(&[TokenSequence::new(vec![4, 5], 6).unwrap()]).unwrap();
        let fa = bb.extract_multiscale(&z, &la).unwrap();
        let fb = bb.extract_multiscale(&z, &lb).unwrap();
        assert_eq!(fa.spatial_sizes().unwrap(), [(16, 16), (8, 8), (4, 4), (2, 2)]);
        let chans: Vec<_> = fa.levels.iter().map(|l| l.dim(1).unwrap()).collect();
        assert_eq!(chans, cfg.pyramid_channels.to_vec());
        let differs = fa.levels.iter().zip(&fb.levels).any(|(a, b)| {
            let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            a != b
        });
        assert!(differs);
        let again = bb.extract_multiscale(&z, &la).unwrap();
        for (x, y) in fa.levels.iter().zip(&again.levels) {
            assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                y.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn pyramid_for_other_downsample_factors() {
        for f in [4, 16] {
            let cfg = BackboneConfig {
                downsample: f,
                ..tiny()
            };
            let bb = BackboneBundle::new(&cfg, DType::F32, &Device::Cpu, false).unwrap();
            let z = bb.encode_image_latent(&random_images(1, 64, 3)).unwrap();
            assert_eq!(z.values.dims()[2], 64 / f);
            let l = bb.encode_text(&[TokenSequence::new(vec![1], 6).unwrap()]).unwrap();
            let fs = bb.extract_multiscale(&z, &l).unwrap();
            assert_eq!(fs.spatial_sizes().unwrap(), [(16, 16), (8, 8), (4, 4), (2, 2)]);
        }
    }
}
