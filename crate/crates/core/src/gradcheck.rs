//! Finite-difference gradient checks and straight-through identities at
//! tiny dimensions in float64.
//!
//! Hard assignments are frozen after a first forward pass so that every
//! objective is smooth in the inputs under test. Each parameter tensor is
//! probed at its largest-gradient entry plus a few seeded random entries.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbones::LinguisticFeatures;
use crate::cp_adapter::CpAdapter;
use crate::error::{Error, Result};
use crate::model::{DiffRis, ModelConfig};
use crate::nn::{Initializer, ParamSet, Params};
use crate::pcmrd::{gumbel_assign, FusedVisual, GumbelNoise, Mode, Oaqil, StageChannels};
use crate::training::{segmentation_loss, LossWeights};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const ST_TOLERANCE: f64 = 1e-10;
const DENOM_FLOOR: f64 = 1e-6;
const RANDOM_PROBES: usize = 6;

pub const COMPONENTS: [&str; 5] = ["cp_adapter", "oaqil", "loss", "model", "straight_through"];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Tensor and flat index of the worst probe.
    pub worst: String,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentReport::passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.components
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::from("| component | max error | tolerance | probes | worst | status |\n|---|---|---|---|---|---|\n");
        for c in &self.components {
            let _ = writeln!(
                out,
                "| {} | {:.3e} | {:.0e} | {} | {} | {} |",
                c.name,
                c.max_error,
                c.tolerance,
                c.probes,
                c.worst,
                if c.passed() { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Straight-through instances to draw.
    pub st_instances: usize,
    /// Corrupt the analytic gradient of this component. Negative control.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            st_instances: 1000,
            inject_fault: None,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let mut init = Initializer::new(rng.random());
    Ok(Tensor::from_vec(init.normal(n, std), shape, &Device::Cpu)?)
}

/// Move every parameter away from its initialization so that zero-initialized
/// gates and low-rank factors carry gradient.
fn perturb(set: &ParamSet, rng: &mut ChaCha8Rng, std: f64) -> Result<()> {
    for (_, var) in set.iter() {
        let next = (var.as_tensor() + randn(rng, var.dims(), std)?)?;
        var.set(&next)?;
    }
    Ok(())
}

fn text_mask(lengths: &[usize], max_len: usize) -> Result<Tensor> {
    let m: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |i| if i < n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(m, (lengths.len(), max_len), &Device::Cpu)?)
}

/// Central differences against `backward` for sampled entries of `inputs`.
pub fn check_gradients(
    name: &str,
    inputs: &[(String, Var)],
    objective: &mut dyn FnMut() -> Result<Tensor>,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    fault: bool,
) -> Result<ComponentReport> {
    let grads = objective()?.backward()?;
    let mut report = ComponentReport {
        name: name.to_string(),
        max_error: 0.0,
        tolerance,
        probes: 0,
        worst: String::new(),
    };
    for (pname, var) in inputs {
        let n = var.elem_count();
        let mut analytic = match grads.get(var) {
            Some(g) => flat(g)?,
            None => vec![0.0; n],
        };
        if fault {
            for a in analytic.iter_mut() {
                *a = 1.5 * *a + 1e-2;
            }
        }
        let mut probes: Vec<usize> = if n <= RANDOM_PROBES + 1 {
            (0..n).collect()
        } else {
            sample(rng, n, RANDOM_PROBES).into_vec()
        };
        let top = (0..n)
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap_or(0);
        if !probes.contains(&top) {
            probes.push(top);
        }
        let base = var.as_tensor().detach().copy()?;
        let base_vals = flat(&base)?;
        for idx in probes {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut v = base_vals.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), var.device())?.to_dtype(var.dtype())?)?;
                scalar(&objective()?)
            };
            let plus = eval_at(STEP)?;
            let minus = eval_at(-STEP)?;
            var.set(&base)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.probes += 1;
            if err > report.max_error || report.worst.is_empty() {
                report.max_error = report.max_error.max(err);
                report.worst = format!("{pname}[{idx}]");
            }
        }
    }
    Ok(report)
}

/// Shrink a model configuration to gradcheck size while keeping its
/// switches: 32x32 images, four queries, eight tokens.
pub fn tiny_model(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.backbones.max_tokens = 8;
    c.backbones.text_dim = 16;
    c.backbones.text_depth = 1;
    c.backbones.text_heads = 2;
    c.backbones.latent_channels = 4;
    c.backbones.pyramid_channels = [4, 8, 8, 8];
    c.backbones.downsample = 8;
    c.cp_adapter.depth = c.cp_adapter.depth.min(1);
    c.cp_adapter.heads = 2;
    c.cp_adapter.rank = 2;
    c.cp_adapter.projection_dim = 8;
    c.pcmrd.num_queries = 4;
    c.pcmrd.query_dim = 8;
    c.pcmrd.fused_channels = StageChannels::Uniform(8);
    c.pcmrd.oaqil_per_stage = c.pcmrd.oaqil_per_stage.min(2);
    c
}

fn named(set: &ParamSet) -> Vec<(String, Var)> {
    set.iter().map(|(n, v)| (n, v.clone())).collect()
}

fn weighted_sum(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok((x * w)?.sum_all()?)
}

fn check_adapter(cfg: &ModelConfig, rng: &mut ChaCha8Rng, fault: bool) -> Result<ComponentReport> {
    let dim = cfg.backbones.text_dim;
    let len = cfg.backbones.max_tokens;
    let (adapter, set) = CpAdapter::build(&cfg.cp_adapter, dim, rng.random(), DType::F64, &Device::Cpu)?;
    perturb(&set, rng, 0.3)?;
    let mask = text_mask(&[len, len / 2 + 1], len)?;
    let x = Var::from_tensor(&randn(rng, &[2, len, dim], 1.0)?.broadcast_mul(&mask.unsqueeze(2)?)?)?;
    let w = randn(rng, &[2, len, dim], 1.0)?;
    let mut inputs = named(&set);
    inputs.push(("input".into(), x.clone()));
    let mut objective = || {
        let l = LinguisticFeatures::new(x.as_tensor().clone(), mask.clone())?;
        weighted_sum(&adapter.forward(&l)?.values, &w)
    };
    check_gradients("cp_adapter", &inputs, &mut objective, TOLERANCE, rng, fault)
}

fn check_oaqil(cfg: &ModelConfig, rng: &mut ChaCha8Rng, fault: bool) -> Result<ComponentReport> {
    let (cq, dl, cf, m) = (
        cfg.pcmrd.query_dim,
        cfg.backbones.text_dim,
        cfg.pcmrd.fused_channels.get(0),
        cfg.pcmrd.num_queries,
    );
    let len = cfg.backbones.max_tokens;
    let mut set = ParamSet::new("oaqil", DType::F64, &Device::Cpu, true);
    let mut init = Initializer::new(rng.random());
    let layer = Oaqil::new(
        &mut Params::new(&mut set, &mut init),
        cq,
        dl,
        cf,
        cfg.pcmrd.tau_init,
        cfg.pcmrd.hard_assignment,
    )?;
    perturb(&set, rng, 0.1)?;
    let mask = text_mask(&[len, 3], len)?;
    let text_values = Var::from_tensor(&randn(rng, &[2, len, dl], 1.0)?.broadcast_mul(&mask.unsqueeze(2)?)?)?;
    let text = LinguisticFeatures::new(text_values.as_tensor().clone(), mask)?;
    let q = Var::from_tensor(&randn(rng, &[2, m, cq], 1.0)?)?;
    let fused = Var::from_tensor(&randn(rng, &[2, cf, 4, 4], 1.0)?)?;
    let noise = GumbelNoise::seeded(rng.random()).sample((2, m, 16), DType::F64, &Device::Cpu)?;
    let fv = |v: &Var| FusedVisual {
        values: v.as_tensor().clone(),
        level_pair: "V3+V4".into(),
    };
    let (_, bundle) = layer.forward(q.as_tensor(), &text, &fv(&fused), &noise, None)?;
    let frozen = bundle.freeze()?;
    let w = randn(rng, &[2, m, cq], 1.0)?;
    let ws = randn(rng, &[2, m, 16], 1.0)?;
    let mut inputs = named(&set);
    inputs.push(("queries".into(), q.clone()));
    inputs.push(("fused".into(), fused.clone()));
    inputs.push(("text".into(), text_values.clone()));
    let mut objective = || {
        let (out, b) = layer.forward(q.as_tensor(), &text, &fv(&fused), &noise, Some(&frozen))?;
        Ok((weighted_sum(&out, &w)? + weighted_sum(&b.s_mask, &ws)?)?)
    };
    check_gradients("oaqil", &inputs, &mut objective, TOLERANCE, rng, fault)
}

fn check_loss(rng: &mut ChaCha8Rng, fault: bool) -> Result<ComponentReport> {
    let logits = Var::from_tensor(&randn(rng, &[2, 5, 5], 2.0)?)?;
    let y: Vec<f64> = (0..50).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let y = Tensor::from_vec(y, (2, 5, 5), &Device::Cpu)?;
    let w = LossWeights::default();
    let inputs = vec![("logits".to_string(), logits.clone())];
    let mut objective = || segmentation_loss(logits.as_tensor(), &y, &w);
    check_gradients("loss", &inputs, &mut objective, LOSS_TOLERANCE, rng, fault)
}

fn check_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng, fault: bool) -> Result<ComponentReport> {
    let model = DiffRis::new(cfg, rng.random(), DType::F64, &Device::Cpu, false)?;
    perturb(&model.adapter_params, rng, 0.1)?;
    perturb(&model.decoder_params, rng, 0.1)?;
    let len = cfg.backbones.max_tokens;
    let vocab = cfg.backbones.vocab_size as u32;
    let ids: Vec<Vec<u32>> = [len, 4]
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(1..vocab)).collect())
        .collect();
    let tokens = model.tokens(&ids)?;
    let images = randn(rng, &[2, 3, 32, 32], 0.3)?.affine(1.0, 0.5)?.clamp(0.0, 1.0)?;
    let y: Vec<f64> = (0..2 * 32 * 32).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let y = Tensor::from_vec(y, (2, 32, 32), &Device::Cpu)?;
    let noise_seed: u64 = rng.random();
    let mut noise = GumbelNoise::seeded(noise_seed);
    let frozen = model.forward(&images, &tokens, Mode::Train(&mut noise), None)?.decoder.freeze()?;
    let w = LossWeights::default();
    let inputs = model.trainable();
    let mut objective = || {
        let mut noise = GumbelNoise::seeded(noise_seed);
        let out = model.forward(&images, &tokens, Mode::Train(&mut noise), Some(&frozen))?;
        segmentation_loss(&out.decoder.mask_logits, &y, &w)
    };
    check_gradients("model", &inputs, &mut objective, TOLERANCE, rng, fault)
}

/// Forward `S_mask` must equal the one-hot assignment exactly and its
/// gradient must equal that of `S_gumbel`. A forward mismatch reports an
/// error of infinity.
pub fn check_straight_through(instances: usize, rng: &mut ChaCha8Rng, fault: bool) -> Result<ComponentReport> {
    let mut report = ComponentReport {
        name: "straight_through".into(),
        max_error: 0.0,
        tolerance: ST_TOLERANCE,
        probes: 0,
        worst: String::new(),
    };
    for i in 0..instances {
        let (b, m, p) = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(1..13));
        let s = Var::from_tensor(&randn(rng, &[b, m, p], 1.0)?)?;
        let tau = Tensor::new(&[rng.random_range(0.05..3.0f64)], &Device::Cpu)?;
        let noise = GumbelNoise::seeded(rng.random()).sample((b, m, p), DType::F64, &Device::Cpu)?;
        let w = randn(rng, &[b, m, p], 1.0)?;
        let a = gumbel_assign(s.as_tensor(), &tau, &noise, None)?;
        if flat(&a.s_mask)? != flat(&a.onehot_t()?)? {
            report.max_error = f64::INFINITY;
            report.worst = format!("instance {i} forward");
        }
        let g_mask = weighted_sum(&a.s_mask, &w)?.backward()?;
        let g_soft = weighted_sum(&a.s_gumbel, &w)?.backward()?;
        let x = g_mask.get(&s).map(flat).transpose()?.unwrap_or_else(|| vec![0.0; b * m * p]);
        let y = g_soft.get(&s).map(flat).transpose()?.unwrap_or_else(|| vec![0.0; b * m * p]);
        for (j, (x, y)) in x.iter().zip(&y).enumerate() {
            let x = if fault { x + 1e-6 } else { *x };
            let err = (x - y).abs();
            report.probes += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst = format!("instance {i} entry {j}");
            }
        }
    }
    Ok(report)
}

/// Run every check on the tiny version of `cfg`.
pub fn run(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(f) = &opts.inject_fault {
        if !COMPONENTS.contains(&f.as_str()) {
            return Err(Error::Usage(format!(
                "unknown component `{f}`; expected one of {}",
                COMPONENTS.join(", ")
            )));
        }
    }
    let fault = |name: &str| opts.inject_fault.as_deref() == Some(name);
    let cfg = tiny_model(cfg);
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let components = vec![
        check_adapter(&cfg, &mut rng, fault("cp_adapter"))?,
        check_oaqil(&cfg, &mut rng, fault("oaqil"))?,
        check_loss(&mut rng, fault("loss"))?,
        check_model(&cfg, &mut rng, fault("model"))?,
        check_straight_through(opts.st_instances, &mut rng, fault("straight_through"))?,
    ];
    Ok(GradcheckReport { components })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64, fault: Option<&str>) -> GradcheckReport {
        let opts = GradcheckOptions {
            seed,
            st_instances: 50,
            inject_fault: fault.map(String::from),
        };
        run(&ModelConfig::default(), &opts).unwrap()
    }

    #[test]
    fn default_config_passes() {
        let r = quick(0, None);
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.components.len(), COMPONENTS.len());
    }

    #[test]
    fn injected_fault_names_the_component() {
        for name in COMPONENTS {
            let r = quick(1, Some(name));
            assert_eq!(r.failing(), vec![name], "{}", r.table());
        }
    }

    #[test]
    fn unknown_fault_is_usage_error() {
        let opts = GradcheckOptions {
            inject_fault: Some("nope".into()),
            ..Default::default()
        };
        assert!(matches!(run(&ModelConfig::default(), &opts), Err(Error::Usage(_))));
    }

    #[test]
    fn quadratic_has_exact_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let mut f = || Ok(x.as_tensor().sqr()?.sum_all()?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_gradients("q", &[("x".into(), x.clone())], &mut f, 1e-8, &mut rng, false).unwrap();
        assert_eq!(r.probes, 3);
        assert!(r.passed(), "{r:?}");
    }
}
