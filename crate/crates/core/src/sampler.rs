//! Coupled reverse diffusion and its single-branch ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Models;
use crate::schedules::{
    ddim_sigma, ddim_step, gaussian_noise, predict_x0, reverse_pairs, timestep_spacing, DiscreteSchedule,
    GaussianSchedule,
};
use crate::segdm::{aided_residuals, resize_codec_encode, argmax_field, backbone_forward, probs_from_logits, segdm_reverse_batch};
use crate::srdm::{decode_image, predict_eps, lq_backbone_input, lq_condition, seg_residuals, sft_conditions};
use crate::synth::mix_seed;
use crate::tensor::Tensor;

/// Source of the mask condition for the image chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Exp (1): no mask condition.
    None,
    /// Exp (2): fixed backbone argmax.
    BackboneArgmax,
    /// Exp (3): mask chain without image feedback.
    Segdm,
    /// Exp (4): both chains coupled through the bridge.
    Coupled,
    /// Exp (5): fixed ground-truth mask.
    GtMask,
    /// Fixed all-background mask.
    ZeroMask,
}

impl Mode {
    pub const ABLATION: [Mode; 5] = [Mode::None, Mode::BackboneArgmax, Mode::Segdm, Mode::Coupled, Mode::GtMask];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::BackboneArgmax => "backbone_argmax",
            Mode::Segdm => "segdm",
            Mode::Coupled => "coupled",
            Mode::GtMask => "gt_mask",
            Mode::ZeroMask => "zero_mask",
        }
    }

    /// Ablation row number, if the mode is one of the five experiments.
    pub fn exp(self) -> Option<usize> {
        Mode::ABLATION.iter().position(|&m| m == self).map(|i| i + 1)
    }

    fn evolves_mask(self) -> bool {
        matches!(self, Mode::Segdm | Mode::Coupled)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "1" | "none" => Mode::None,
            "2" | "backbone_argmax" => Mode::BackboneArgmax,
            "3" | "segdm" => Mode::Segdm,
            "4" | "coupled" => Mode::Coupled,
            "5" | "gt_mask" => Mode::GtMask,
            "zero" | "zero_mask" => Mode::ZeroMask,
            _ => return Err(Error::Config(format!("unknown sampling mode {s:?}"))),
        };
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    #[serde(default)]
    pub trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 1.0,
            trajectory: false,
        }
    }
}

pub const TRAJECTORY_EVERY: usize = 5;

/// Intermediate predictions at one captured step.
#[derive(Clone, Debug)]
pub struct Frame {
    pub t: usize,
    /// Predicted clean image in `[0, 1]`.
    pub x0: Tensor<f32>,
    /// Argmax of the predicted clean mask, when the mask chain runs.
    pub mask: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Restored image `[C, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Final mask on the mask grid, absent for the unconditioned mode.
    pub mask: Option<Vec<usize>>,
    pub trajectory: Vec<Frame>,
}

/// One sampling request.
pub struct SampleInput<'a> {
    /// LQ image `[C, h, w]` in `[0, 1]`.
    pub lq: &'a Tensor<f32>,
    /// Ground-truth mask on the HQ grid, needed by [`Mode::GtMask`].
    pub gt_mask: Option<&'a [usize]>,
    pub seed: u64,
}

/// Image and mask noise streams for one scene.
pub fn scene_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    (
        ChaCha8Rng::seed_from_u64(mix_seed(seed, 1)),
        ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)),
    )
}

fn check_finite(t: &Tensor<f32>, what: &str, step: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at step {step}")))
    }
}

/// Runs the reverse process for a batch of scenes in lockstep. Each scene has
/// its own noise streams, so results do not depend on batch composition beyond
/// floating-point summation order.
pub fn sample_batch(
    models: &Models<f32>,
    gsched: &GaussianSchedule,
    dsched: &DiscreteSchedule,
    inputs: &[SampleInput],
    mode: Mode,
    cfg: &SamplerConfig,
) -> Result<Vec<SampleOutput>> {
    let nc = &models.cfg;
    let b = inputs.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    if dsched.steps() != gsched.steps() || dsched.classes() != nc.classes {
        return Err(Error::Config("image and mask schedules or class counts disagree".into()));
    }
    let ts = timestep_spacing(gsched.steps(), cfg.steps)?;
    let m = nc.mask_size();
    let n = m * m;
    let k = nc.classes;
    for inp in inputs {
        let s = inp.lq.shape();
        if s.len() != 3 || s[0] != nc.img_channels {
            return Err(Error::ShapeMismatch(format!("LQ image {s:?}")));
        }
    }
    let lq: Vec<Tensor<f32>> = inputs.iter().map(|i| i.lq.clone()).collect();
    let lq = Tensor::batch(&lq)?;
    let z_lq = lq_condition(&lq, nc.hq_size);
    let sft = sft_conditions(models, &z_lq)?;

    let mut img_rngs = Vec::with_capacity(b);
    let mut mask_rngs = Vec::with_capacity(b);
    for inp in inputs {
        let (a, m) = scene_rngs(inp.seed);
        img_rngs.push(a);
        mask_rngs.push(m);
    }
    let per = [nc.img_channels, nc.hq_size, nc.hq_size];
    let noise: Vec<Tensor<f32>> = img_rngs.iter_mut().map(|r| gaussian_noise(&per, r)).collect();
    let mut z = Tensor::batch(&noise)?;

    let needs_backbone = matches!(mode, Mode::BackboneArgmax | Mode::Segdm | Mode::Coupled);
    let backbone = if needs_backbone {
        Some(backbone_forward(models, &lq_backbone_input(&lq, m))?)
    } else {
        None
    };
    let fixed: Option<Vec<usize>> = match mode {
        Mode::None | Mode::Segdm | Mode::Coupled => None,
        Mode::BackboneArgmax => {
            let logits = &backbone.as_ref().expect("backbone").logits;
            let mut out = Vec::with_capacity(b * n);
            for i in 0..b {
                let item = &logits.data()[i * k * n..(i + 1) * k * n];
                out.extend(argmax_field(&probs_from_logits(item, k), k));
            }
            Some(out)
        }
        Mode::ZeroMask => Some(vec![0; b * n]),
        Mode::GtMask => {
            let mut out = Vec::with_capacity(b * n);
            for inp in inputs {
                let gt = inp.gt_mask.ok_or_else(|| Error::MissingGroundTruth(format!("scene with seed {} has no ground-truth mask", inp.seed)))?;
                out.extend(resize_codec_encode(gt, nc.hq_size, nc.hq_size, m, m, k)?);
            }
            Some(out)
        }
    };
    let mut s: Vec<usize> = if mode.evolves_mask() {
        mask_rngs
            .iter_mut()
            .flat_map(|r| (0..n).map(|_| r.gen_range(0..k)).collect::<Vec<_>>())
            .collect()
    } else {
        Vec::new()
    };

    let mut trajectory: Vec<Vec<Frame>> = vec![Vec::new(); b];
    let pairs = reverse_pairs(&ts);
    for (step, &(t, t_prev)) in pairs.iter().enumerate() {
        let tb = vec![t; b];
        let cond_mask: Option<&[usize]> = if mode.evolves_mask() { Some(&s) } else { fixed.as_deref() };
        let c = cond_mask.map(|mk| seg_residuals(models, &z, &tb, mk)).transpose()?;
        let eps = predict_eps(models, &z, &tb, Some(&sft), c.as_deref())?;
        check_finite(&eps, "noise prediction", step)?;

        let mut mask_logits = None;
        if mode.evolves_mask() {
            let feats = &backbone.as_ref().expect("backbone").features;
            let aid = if mode == Mode::Coupled { Some(aided_residuals(models, &z, t)?) } else { None };
            let (next, logits) = segdm_reverse_batch(
                models,
                dsched,
                &s,
                t + 1,
                (t_prev + 1) as usize,
                feats,
                aid.as_deref(),
                &mut mask_rngs,
            )?;
            check_finite(&logits, "mask logits", step)?;
            s = next;
            mask_logits = Some(logits);
        }

        if cfg.trajectory && (step % TRAJECTORY_EVERY == 0 || step + 1 == pairs.len()) {
            let x0 = decode_image(&predict_x0(gsched, &z, &eps, t)?);
            for (i, frames) in trajectory.iter_mut().enumerate() {
                let mask = mask_logits.as_ref().map(|l| {
                    let item = &l.data()[i * k * n..(i + 1) * k * n];
                    argmax_field(&probs_from_logits(item, k), k)
                });
                frames.push(Frame {
                    t,
                    x0: x0.item(i),
                    mask,
                });
            }
        }

        let sigma = ddim_sigma(gsched, t, t_prev, cfg.eta);
        let noise = if sigma > 0.0 {
            let items: Vec<Tensor<f32>> = img_rngs.iter_mut().map(|r| gaussian_noise(&per, r)).collect();
            Some(Tensor::batch(&items)?)
        } else {
            None
        };
        z = ddim_step(gsched, &z, &eps, t, t_prev, cfg.eta, noise.as_ref())?;
        check_finite(&z, "image state", step)?;
    }

    let images = decode_image(&z);
    let final_mask = if mode.evolves_mask() { Some(s) } else { fixed };
    Ok(trajectory
        .into_iter()
        .enumerate()
        .map(|(i, frames)| SampleOutput {
            image: images.item(i),
            mask: final_mask.as_ref().map(|f| f[i * n..(i + 1) * n].to_vec()),
            trajectory: frames,
        })
        .collect())
}

/// Single-scene coupled sampling.
pub fn coupled_sample(
    models: &Models<f32>,
    gsched: &GaussianSchedule,
    dsched: &DiscreteSchedule,
    lq: &Tensor<f32>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let input = SampleInput { lq, gt_mask: None, seed };
    Ok(sample_batch(models, gsched, dsched, &[input], Mode::Coupled, cfg)?.remove(0))
}

/// Single-scene sampling with the given mask source.
pub fn srdm_only_sample(
    models: &Models<f32>,
    gsched: &GaussianSchedule,
    dsched: &DiscreteSchedule,
    input: SampleInput,
    mode: Mode,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    Ok(sample_batch(models, gsched, dsched, &[input], mode, cfg)?.remove(0))
}
