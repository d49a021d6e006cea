//! Progressive cross-modal reasoning decoder.
//!
//! Three stages run from coarse to fine. Stage 1 fuses `(V3, V4)`, stage 2
//! fuses the stage-1 map with `V2`, and stage 3 fuses the stage-2 map with
//! `V1`. Each stage passes the running query tokens through its interaction
//! layers. The mask head reads the final tokens and the final assignment.

pub mod assign;
pub mod fuse;
pub mod head;
pub mod oaqil;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use assign::{gumbel_assign, onehot_argmax, AssignmentBundle, FrozenAssignment, GumbelNoise};
pub use fuse::{FusedVisual, ScaleFusion};
pub use head::MaskHead;
pub use oaqil::Oaqil;

use crate::backbones::{LinguisticFeatures, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{Initializer, ParamSet, Params};

/// Fused width, shared by all stages or given per stage (coarse to fine).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageChannels {
    Uniform(usize),
    PerStage([usize; 3]),
}

impl StageChannels {
    pub fn get(&self, stage: usize) -> usize {
        match self {
            Self::Uniform(c) => *c,
            Self::PerStage(cs) => cs[stage],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcmrdConfig {
    /// Number of query tokens `M`.
    pub num_queries: usize,
    /// Token width `C_q`.
    pub query_dim: usize,
    pub fused_channels: StageChannels,
    pub oaqil_per_stage: usize,
    pub tau_init: f64,
    pub query_init_std: f64,
    pub use_refined_text_in_decoder: bool,
    /// When off, each stage sees only its shallower input.
    pub multi_scale_fusion: bool,
    /// When off, tokens pool with the soft assignment instead of the
    /// straight-through one.
    pub hard_assignment: bool,
}

impl Default for PcmrdConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            query_dim: 64,
            fused_channels: StageChannels::Uniform(64),
            oaqil_per_stage: 1,
            tau_init: 1.0,
            query_init_std: 0.02,
            use_refined_text_in_decoder: true,
            multi_scale_fusion: true,
            hard_assignment: true,
        }
    }
}

impl PcmrdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pcmrd: {m}")));
        if self.num_queries == 0 || self.query_dim == 0 {
            return bad("num_queries and query_dim must be positive");
        }
        if (0..3).any(|s| self.fused_channels.get(s) == 0) {
            return bad("fused_channels must be positive");
        }
        if self.oaqil_per_stage == 0 {
            return bad("oaqil_per_stage must be at least 1 (the mask head reads the last assignment)");
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(Error::Parameter(format!("pcmrd.tau_init must be positive, got {}", self.tau_init)));
        }
        Ok(())
    }
}

/// How the decoder runs.
pub enum Mode<'a> {
    /// Zero noise, one-hot maps in the head.
    Eval,
    /// Gumbel noise from the given source, soft maps in the head.
    Train(&'a mut GumbelNoise),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Tokens after each stage, `(batch, M, C_q)`.
    pub stage_tokens: Vec<Tensor>,
    /// Assignments per stage, one per interaction layer.
    pub stage_assignments: Vec<Vec<AssignmentBundle>>,
    pub fused: Vec<FusedVisual>,
    /// `(batch, H, W)`.
    pub mask_logits: Tensor,
}

impl DecoderOutput {
    pub fn final_assignment(&self) -> &AssignmentBundle {
        self.stage_assignments
            .last()
            .and_then(|s| s.last())
            .expect("decoder always runs at least one layer")
    }

    /// Frozen copies of every assignment, in execution order.
    pub fn freeze(&self) -> Result<Vec<FrozenAssignment>> {
        self.stage_assignments.iter().flatten().map(|a| a.freeze()).collect()
    }
}

/// Run a stage's layers over the running tokens. With no layers the tokens
/// come back unchanged.
pub fn run_stage(
    layers: &[Oaqil],
    q: &Tensor,
    text: &LinguisticFeatures,
    fused: &FusedVisual,
    mode: &mut Mode,
    frozen: &mut dyn Iterator<Item = &FrozenAssignment>,
) -> Result<(Tensor, Vec<AssignmentBundle>)> {
    let mut q = q.clone();
    let mut bundles = Vec::with_capacity(layers.len());
    let (b, _, _) = q.dims3()?;
    let (h, w) = fused.spatial()?;
    let shape = (b, q.dim(1)?, h * w);
    for layer in layers {
        let noise = match mode {
            Mode::Eval => Tensor::zeros(shape, q.dtype(), q.device())?,
            Mode::Train(src) => src.sample(shape, q.dtype(), q.device())?,
        };
        let (next, bundle) = layer.forward(&q, text, fused, &noise, frozen.next())?;
        q = next;
        bundles.push(bundle);
    }
    Ok((q, bundles))
}

pub struct Pcmrd {
    cfg: PcmrdConfig,
    pub queries: Tensor,
    fusions: Vec<ScaleFusion>,
    stages: Vec<Vec<Oaqil>>,
    pub head: MaskHead,
}

impl Pcmrd {
    pub fn new(p: &mut Params, cfg: &PcmrdConfig, pyramid_channels: [usize; 4], text_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3, c4] = pyramid_channels;
        let cf = |s| cfg.fused_channels.get(s);
        let pairs = [(c4, c3), (cf(0), c2), (cf(1), c1)];
        let mut fusions = Vec::new();
        let mut stages = Vec::new();
        for (s, (deep, shallow)) in pairs.into_iter().enumerate() {
            let mut ps = p.sub(&format!("stage{}", s + 1));
            fusions.push(ScaleFusion::new(&mut ps.sub("fuse"), deep, shallow, cf(s), cfg.multi_scale_fusion)?);
            let layers = (0..cfg.oaqil_per_stage)
                .map(|i| {
                    Oaqil::new(
                        &mut ps.sub(&format!("oaqil{i}")),
                        cfg.query_dim,
                        text_dim,
                        cf(s),
                        cfg.tau_init,
                        cfg.hard_assignment,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(layers);
        }
        Ok(Self {
            cfg: cfg.clone(),
            queries: p.normal("queries", &[cfg.num_queries, cfg.query_dim], cfg.query_init_std)?,
            fusions,
            stages,
            head: MaskHead::new(&mut p.sub("head"), cfg.query_dim)?,
        })
    }

    /// Standalone decoder with its own parameter set (namespace `pcmrd`).
    pub fn build(
        cfg: &PcmrdConfig,
        pyramid_channels: [usize; 4],
        text_dim: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, ParamSet)> {
        let mut set = ParamSet::new("pcmrd", dtype, device, true);
        let mut init = Initializer::new(seed);
        let dec = Self::new(&mut Params::new(&mut set, &mut init), cfg, pyramid_channels, text_dim)?;
        Ok((dec, set))
    }

    pub fn config(&self) -> &PcmrdConfig {
        &self.cfg
    }

    pub fn stage_layers(&self, stage: usize) -> &[Oaqil] {
        &self.stages[stage]
    }

    pub fn fuse(&self, stage: usize, deep: &Tensor, shallow: &Tensor) -> Result<FusedVisual> {
        let names = ["V3+V4", "S1+V2", "S2+V1"];
        self.fusions[stage].forward(deep, shallow, names[stage].to_string())
    }

    /// `frozen`, when given, must hold one entry per interaction layer in
    /// execution order (see [`DecoderOutput::freeze`]).
    pub fn forward(
        &self,
        features: &MultiScaleFeatures,
        text: &LinguisticFeatures,
        out_hw: (usize, usize),
        mut mode: Mode,
        frozen: Option<&[FrozenAssignment]>,
    ) -> Result<DecoderOutput> {
        let n_layers = self.stages.iter().map(Vec::len).sum::<usize>();
        if let Some(f) = frozen {
            if f.len() != n_layers {
                return Err(Error::Shape(format!(
                    "expected {n_layers} frozen assignments, got {}",
                    f.len()
                )));
            }
        }
        let mut frozen_iter: Box<dyn Iterator<Item = &FrozenAssignment>> = match frozen {
            Some(f) => Box::new(f.iter()),
            None => Box::new(std::iter::empty()),
        };
        let [v1, v2, v3, v4] = &features.levels;
        let (b, _, _) = text.dims();
        let mut q = self
            .queries
            .unsqueeze(0)?
            .broadcast_as((b, self.cfg.num_queries, self.cfg.query_dim))?
            .contiguous()?;
        let mut stage_tokens = Vec::new();
        let mut stage_assignments = Vec::new();
        let mut fused_maps: Vec<FusedVisual> = Vec::new();
        let shallow = [v3, v2, v1];
        for s in 0..3 {
            let deep = if s == 0 { v4.clone() } else { fused_maps[s - 1].values.clone() };
            let fused = self.fuse(s, &deep, shallow[s])?;
            let (next, bundles) = run_stage(&self.stages[s], &q, text, &fused, &mut mode, &mut frozen_iter)?;
            q = next;
            stage_tokens.push(q.clone());
            stage_assignments.push(bundles);
            fused_maps.push(fused);
        }
        let last = fused_maps.last().expect("three stages");
        let assignment = stage_assignments[2].last().expect("validated layer count");
        let mask_logits = self
            .head
            .predict_mask(&q, assignment, last.spatial()?, out_hw, mode.is_train())?;
        Ok(DecoderOutput {
            stage_tokens,
            stage_assignments,
            fused: fused_maps,
            mask_logits,
        })
    }
}
