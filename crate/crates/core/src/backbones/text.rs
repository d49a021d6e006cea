use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{mask_rows, EncoderLayer, Params};

/// A tokenized referring expression with its padded length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    max_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: max_len,
            });
        }
        Ok(Self { ids, max_len })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `true` for the leading real tokens, `false` for padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.max_len).map(|i| i < self.ids.len()).collect()
    }
}

/// Token-wise text features `(batch, l_m, D_l)` and the matching validity
/// mask `(batch, l_m)` holding 1.0 on real tokens.
#[derive(Clone, Debug)]
pub struct LinguisticFeatures {
    pub values: Tensor,
    pub mask: Tensor,
}

impl LinguisticFeatures {
    pub fn new(values: Tensor, mask: Tensor) -> Result<Self> {
        let (b, t, _) = values.dims3()?;
        let (mb, mt) = mask.dims2()?;
        if (b, t) != (mb, mt) {
            return Err(Error::Shape(format!(
                "text features {:?} do not match mask {:?}",
                values.dims(),
                mask.dims()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[1], d[2])
    }

    pub fn with_values(&self, values: Tensor) -> Self {
        Self {
            values,
            mask: self.mask.clone(),
        }
    }
}

/// Build the `(batch, l_m)` float mask for a batch of sequences.
pub fn batch_mask(tokens: &[TokenSequence], max_len: usize, device: &Device) -> Result<Tensor> {
    let mut m = Vec::with_capacity(tokens.len() * max_len);
    for t in tokens {
        m.extend((0..max_len).map(|i| if i < t.len() { 1f32 } else { 0f32 }));
    }
    Ok(Tensor::from_vec(m, (tokens.len(), max_len), device)?)
}

/// Fixed sinusoidal position table of shape `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let a = p as f64 * freq;
            out[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Stand-in text encoder: embedding table, sinusoidal positions and a
/// small self-attention stack.
pub struct TextEncoder {
    pub embedding: Tensor,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    max_len: usize,
    vocab: usize,
}

impl TextEncoder {
    pub fn new(
        p: &mut Params,
        vocab: usize,
        max_len: usize,
        dim: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        let embedding = p.normal("embedding", &[vocab, dim], 1.0)?;
        let positions = Tensor::from_vec(sinusoidal_positions(max_len, dim), (max_len, dim), p.device())?
            .to_dtype(p.dtype())?;
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(&mut p.sub(&format!("layer{i}")), dim, heads, 2 * dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding,
            positions,
            layers,
            max_len,
            vocab,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn encode(&self, tokens: &[TokenSequence]) -> Result<LinguisticFeatures> {
        if tokens.is_empty() {
            return Err(Error::Usage("empty token batch".into()));
        }
        let dev = self.embedding.device();
        let mut ids = Vec::with_capacity(tokens.len() * self.max_len);
        for t in tokens {
            if t.len() > self.max_len {
                return Err(Error::Length {
                    len: t.len(),
                    max: self.max_len,
                });
            }
            for &id in t.ids() {
                if id as usize >= self.vocab {
                    return Err(Error::Vocabulary {
                        id,
                        vocab: self.vocab,
                    });
                }
            }
            ids.extend_from_slice(t.ids());
            ids.extend(std::iter::repeat(0).take(self.max_len - t.len()));
        }
        let b = tokens.len();
        let d = self.embedding.dim(1)?;
        let ids = Tensor::from_vec(ids, b * self.max_len, dev)?;
        let mut x = self
            .embedding
            .index_select(&ids, 0)?
            .reshape((b, self.max_len, d))?
            .broadcast_add(&self.positions)?;
        let mask = batch_mask(tokens, self.max_len, dev)?.to_dtype(x.dtype())?;
        for layer in &self.layers {
            x = layer.forward(&x, &mask)?;
        }
        LinguisticFeatures::new(mask_rows(&x, &mask)?, mask)
    }
}
