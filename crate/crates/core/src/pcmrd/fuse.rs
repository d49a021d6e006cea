use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{group_norm, Conv2d, Params};

pub const FUSED_NORM_EPS: f64 = 1e-5;

/// Fused visual map `(batch, C_f, h, w)` at the shallower level's resolution.
#[derive(Clone, Debug)]
pub struct FusedVisual {
    pub values: Tensor,
    /// Human-readable description of the two fused inputs, e.g. `"V3+V4"`.
    pub level_pair: String,
}

impl FusedVisual {
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.values.dims4()?;
        Ok((h, w))
    }

    /// Pixels as rows: `(batch, h*w, C_f)`, row-major over `(y, x)`.
    pub fn flatten(&self) -> Result<Tensor> {
        Ok(self.values.flatten_from(2)?.transpose(1, 2)?)
    }
}

/// Nearest-neighbour x2 upsampling of the deeper map, channel concatenation
/// with the shallower map, a 1x1 projection and GELU, then every channel is
/// standardized over the map. Without the last step the channels share a
/// large common offset and cosine matching sends every pixel to one token.
pub struct ScaleFusion {
    proj: Conv2d,
    use_deep: bool,
}

impl ScaleFusion {
    pub fn new(
        p: &mut Params,
        deep_channels: usize,
        shallow_channels: usize,
        out_channels: usize,
        use_deep: bool,
    ) -> Result<Self> {
        let c_in = shallow_channels + if use_deep { deep_channels } else { 0 };
        Ok(Self {
            proj: Conv2d::new(&mut p.sub("proj"), c_in, out_channels, 1, 1, 0, true)?,
            use_deep,
        })
    }

    pub fn forward(&self, deep: &Tensor, shallow: &Tensor, level_pair: String) -> Result<FusedVisual> {
        let (_, _, dh, dw) = deep.dims4()?;
        let (_, _, sh, sw) = shallow.dims4()?;
        if (2 * dh, 2 * dw) != (sh, sw) {
            return Err(Error::Shape(format!(
                "levels are not adjacent: deep {dh}x{dw}, shallow {sh}x{sw}"
            )));
        }
        let x = if self.use_deep {
            Tensor::cat(&[&upsample2(deep)?, shallow], 1)?
        } else {
            shallow.clone()
        };
        let y = self.proj.forward(&x)?.gelu()?;
        let c = y.dim(1)?;
        Ok(FusedVisual {
            values: group_norm(&y, c, FUSED_NORM_EPS)?,
            level_pair,
        })
    }
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    crate::nn::upsample_nearest(x, 2)
}
