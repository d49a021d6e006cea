//! Full pipeline: frozen encoders, adapter and decoder.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneBundle, BackboneConfig, LinguisticFeatures, MultiScaleFeatures, TokenSequence};
use crate::cp_adapter::{CpAdapter, CpAdapterConfig};
use crate::error::{Error, Result};
use crate::nn::{Initializer, ParamSet, Params};
use crate::pcmrd::{DecoderOutput, FrozenAssignment, Mode, Pcmrd, PcmrdConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbones: BackboneConfig,
    pub cp_adapter: CpAdapterConfig,
    pub pcmrd: PcmrdConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbones.validate()?;
        self.cp_adapter.validate(self.backbones.text_dim)?;
        self.pcmrd.validate()
    }
}

pub struct ModelOutput {
    pub text: LinguisticFeatures,
    pub refined: LinguisticFeatures,
    pub features: MultiScaleFeatures,
    pub decoder: DecoderOutput,
}

pub struct DiffRis {
    cfg: ModelConfig,
    pub backbones: BackboneBundle,
    pub adapter: CpAdapter,
    pub adapter_params: ParamSet,
    pub decoder: Pcmrd,
    pub decoder_params: ParamSet,
}

impl DiffRis {
    /// `init_seed` drives the adapter and decoder initialization; the
    /// encoders use their own configured seed. `train_backbones` puts the
    /// encoder parameters into the autograd graph.
    pub fn new(cfg: &ModelConfig, init_seed: u64, dtype: DType, device: &Device, train_backbones: bool) -> Result<Self> {
        cfg.validate()?;
        let backbones = BackboneBundle::new(&cfg.backbones, dtype, device, train_backbones)?;
        let mut init = Initializer::new(init_seed);
        let mut adapter_params = ParamSet::new("cp_adapter", dtype, device, true);
        let adapter = CpAdapter::new(&mut Params::new(&mut adapter_params, &mut init), &cfg.cp_adapter, cfg.backbones.text_dim)?;
        let mut decoder_params = ParamSet::new("pcmrd", dtype, device, true);
        let decoder = Pcmrd::new(
            &mut Params::new(&mut decoder_params, &mut init),
            &cfg.pcmrd,
            cfg.backbones.pyramid_channels,
            cfg.backbones.text_dim,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            backbones,
            adapter,
            adapter_params,
            decoder,
            decoder_params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.adapter_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.adapter_params.device()
    }

    /// Parameters the optimizer updates, qualified names first.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = Vec::new();
        if self.backbones.params.is_trainable() {
            out.extend(self.backbones.params.iter().map(|(n, v)| (n, v.clone())));
        }
        out.extend(self.adapter_params.iter().map(|(n, v)| (n, v.clone())));
        out.extend(self.decoder_params.iter().map(|(n, v)| (n, v.clone())));
        out
    }

    pub fn tokens(&self, ids: &[Vec<u32>]) -> Result<Vec<TokenSequence>> {
        ids.iter()
            .map(|t| TokenSequence::new(t.clone(), self.cfg.backbones.max_tokens))
            .collect()
    }

    /// `images` is `(batch, 3, H, W)` with values in `[0, 1]`.
    pub fn forward(
        &self,
        images: &Tensor,
        tokens: &[TokenSequence],
        mode: Mode,
        frozen: Option<&[FrozenAssignment]>,
    ) -> Result<ModelOutput> {
        let (b, _, h, w) = images.dims4()?;
        if b != tokens.len() {
            return Err(Error::Shape(format!("{b} images but {} expressions", tokens.len())));
        }
        let text = self.backbones.encode_text(tokens)?;
        let refined = self.adapter.forward(&text)?;
        let z = self.backbones.encode_image_latent(&images.affine(2.0, -1.0)?)?;
        let features = self.backbones.extract_multiscale(&z, &refined)?;
        let dec_text = if self.cfg.pcmrd.use_refined_text_in_decoder { &refined } else { &text };
        let decoder = self.decoder.forward(&features, dec_text, (h, w), mode, frozen)?;
        Ok(ModelOutput {
            text,
            refined,
            features,
            decoder,
        })
    }
}
