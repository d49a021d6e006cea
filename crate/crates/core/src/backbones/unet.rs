//! Text-conditioned encoder/decoder producing the four-level feature
//! pyramid from a latent code in a single forward pass.

use candle_core::Tensor;

use super::latent::LatentRepresentation;
use super::text::LinguisticFeatures;
use crate::error::{Error, Result};
use crate::nn::{group_norm, masked_softmax, upsample_nearest, Conv2d, Linear, Params};

/// Pyramid `{V_1..V_4}`; level `i` (0-based) is `(batch, C_i, H/2^(i+2), W/2^(i+2))`.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub levels: [Tensor; 4],
}

impl MultiScaleFeatures {
    /// Spatial size `(h, w)` of every level, finest first.
    pub fn spatial_sizes(&self) -> Result<[(usize, usize); 4]> {
        let mut out = [(0, 0); 4];
        for (o, l) in out.iter_mut().zip(&self.levels) {
            let (_, _, h, w) = l.dims4()?;
            *o = (h, w);
        }
        Ok(out)
    }
}

/// Residual single-head cross-attention from pixels to text tokens.
struct TextCrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl TextCrossAttention {
    fn new(p: &mut Params, channels: usize, text_dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&mut p.sub("q"), channels, channels, false)?,
            k: Linear::new(&mut p.sub("k"), text_dim, channels, false)?,
            v: Linear::new(&mut p.sub("v"), text_dim, channels, false)?,
            o: Linear::new(&mut p.sub("o"), channels, channels, false)?,
        })
    }

    fn forward(&self, x: &Tensor, text: &LinguisticFeatures) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let pixels = x.flatten_from(2)?.transpose(1, 2)?;
        let q = self.q.forward(&pixels)?;
        let k = self.k.forward(&text.values)?;
        let v = self.v.forward(&text.values)?;
        let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
        let attn = masked_softmax(&scores, &text.mask)?;
        let out = self
            .o
            .forward(&attn.matmul(&v)?)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

const GN_EPS: f64 = 1e-5;

/// Convolution, group normalization, SiLU.
fn block(conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let y = conv.forward(x)?;
    let c = y.dim(1)?;
    let groups = [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1);
    Ok(group_norm(&y, groups, GN_EPS)?.silu()?)
}

pub struct FeatureExtractor {
    stem: Conv2d,
    down3: Conv2d,
    down4: Conv2d,
    mid: Conv2d,
    up3: Conv2d,
    up2: Conv2d,
    up1: Conv2d,
    xattn: [TextCrossAttention; 4],
    latent_factor: usize,
}

impl FeatureExtractor {
    pub fn new(
        p: &mut Params,
        latent_channels: usize,
        channels: [usize; 4],
        text_dim: usize,
        latent_factor: usize,
    ) -> Result<Self> {
        if !matches!(latent_factor, 2 | 4 | 8 | 16 | 32) {
            return Err(Error::Parameter(format!(
                "downsample factor {latent_factor} must be a power of two in 2..=32"
            )));
        }
        if channels.contains(&0) {
            return Err(Error::Parameter("pyramid channels must be positive".into()));
        }
        let [c1, c2, c3, c4] = channels;
        let xattn = [
            TextCrossAttention::new(&mut p.sub("xattn1"), c1, text_dim)?,
            TextCrossAttention::new(&mut p.sub("xattn2"), c2, text_dim)?,
            TextCrossAttention::new(&mut p.sub("xattn3"), c3, text_dim)?,
            TextCrossAttention::new(&mut p.sub("xattn4"), c4, text_dim)?,
        ];
        Ok(Self {
            stem: Conv2d::new(&mut p.sub("stem"), latent_channels, c2, 3, 1, 1, true)?,
            down3: Conv2d::new(&mut p.sub("down3"), c2, c3, 3, 2, 1, true)?,
            down4: Conv2d::new(&mut p.sub("down4"), c3, c4, 3, 2, 1, true)?,
            mid: Conv2d::new(&mut p.sub("mid"), c4, c4, 3, 1, 1, true)?,
            up3: Conv2d::new(&mut p.sub("up3"), c4 + c3, c3, 3, 1, 1, true)?,
            up2: Conv2d::new(&mut p.sub("up2"), c3 + c2, c2, 3, 1, 1, true)?,
            up1: Conv2d::new(&mut p.sub("up1"), c2 + latent_channels, c1, 3, 1, 1, true)?,
            xattn,
            latent_factor,
        })
    }

    /// Bring the latent to 1/8 of the image resolution.
    fn to_eighth(&self, z: &Tensor) -> Result<Tensor> {
        Ok(match self.latent_factor {
            8 => z.clone(),
            f if f < 8 => z.avg_pool2d(8 / f)?,
            f => upsample_nearest(z, f / 8)?,
        })
    }

    pub fn extract(
        &self,
        z: &LatentRepresentation,
        text: &LinguisticFeatures,
    ) -> Result<MultiScaleFeatures> {
        let (_, _, h, w) = z.values.dims4()?;
        let (img_h, img_w) = (h * self.latent_factor, w * self.latent_factor);
        if img_h % 32 != 0 || img_w % 32 != 0 {
            return Err(Error::Shape(format!(
                "image size {img_h}x{img_w} must be divisible by 32 for a four-level pyramid"
            )));
        }
        let z8 = self.to_eighth(&z.values)?;
        let e2 = block(&self.stem, &z8)?;
        let e3 = block(&self.down3, &e2)?;
        let e4 = block(&self.down4, &e3)?;
        let v4 = self.xattn[3].forward(&block(&self.mid, &e4)?, text)?;

        let up = |x: &Tensor| upsample_nearest(x, 2);
        let d3 = Tensor::cat(&[&up(&v4)?, &e3], 1)?;
        let v3 = self.xattn[2].forward(&block(&self.up3, &d3)?, text)?;
        let d2 = Tensor::cat(&[&up(&v3)?, &e2], 1)?;
        let v2 = self.xattn[1].forward(&block(&self.up2, &d2)?, text)?;
        // The finest level also reads the latent; otherwise it keeps almost no
        // object layout.
        let d1 = Tensor::cat(&[&up(&v2)?, &up(&z8)?], 1)?;
        let v1 = self.xattn[0].forward(&block(&self.up1, &d1)?, text)?;
        Ok(MultiScaleFeatures {
            levels: [v1, v2, v3, v4],
        })
    }
}
