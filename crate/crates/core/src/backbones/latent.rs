use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Params};

/// Latent image code `(batch, c, H/f, W/f)`.
#[derive(Clone, Debug)]
pub struct LatentRepresentation {
    pub values: Tensor,
}

/// Stand-in image encoder: one bias-free patchifying convolution with
/// kernel and stride equal to the downsample factor.
pub struct LatentEncoder {
    conv: Conv2d,
    factor: usize,
}

impl LatentEncoder {
    pub fn new(p: &mut Params, channels: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Parameter("downsample factor must be positive".into()));
        }
        Ok(Self {
            conv: Conv2d::new(&mut p.sub("patchify"), 3, channels, factor, factor, 0, false)?,
            factor,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// `image` is `(batch, 3, H, W)`.
    pub fn encode(&self, image: &Tensor) -> Result<LatentRepresentation> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by the downsample factor {}",
                self.factor
            )));
        }
        Ok(LatentRepresentation {
            values: self.conv.forward(image)?,
        })
    }
}
