//! Browser bindings for the demo page: a scene and degradation explorer, the
//! forward corruption of both chains at a chosen step, and schedule curves.
//!
//! Each export wraps a plain Rust function so the logic runs in native tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use segsr_core::dataset::mask_to_rgb;
use segsr_core::metrics::{seg_accuracy, texture_judge};
use segsr_core::schedules::{gaussian_noise, q_sample_continuous, q_sample_discrete, DiscreteSchedule, GaussianSchedule, MaskState};
use segsr_core::segdm::resize_codec_encode;
use segsr_core::srdm::{decode_image, encode_image};
use segsr_core::synth::{degrade_traced, gen_scene_with, mix_seed, DegradationParams, SceneGeometry};
use segsr_core::{Result, Tensor};

const STEPS: usize = 1000;
const PATCH: usize = 4;

fn rgba(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(4 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((img.data()[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn nearest_up(img: &Tensor<f32>, f: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1] * f, s[2] * f);
    let data = (0..c * h * w)
        .map(|i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            img.data()[(ch * s[1] + y / f) * s[2] + x / f]
        })
        .collect();
    Tensor::new(&[c, h, w], data).expect("shape")
}

fn judge_accuracy(img: &Tensor<f32>, cells: &[usize], cell: usize, k: usize) -> Result<f64> {
    Ok(seg_accuracy(&texture_judge(img, cell, k)?, cells, k)?.0)
}

/// One synthetic scene and its degradation, as RGBA buffers.
#[wasm_bindgen]
pub struct Scene {
    size: usize,
    lq_size: usize,
    hq: Vec<u8>,
    mask: Vec<u8>,
    lq: Vec<u8>,
    hq_acc: f64,
    lq_acc: f64,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn lq_size(&self) -> usize {
        self.lq_size
    }

    pub fn hq(&self) -> Vec<u8> {
        self.hq.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    pub fn lq(&self) -> Vec<u8> {
        self.lq.clone()
    }

    /// Texture-judge accuracy of the HQ image against the mask.
    #[wasm_bindgen(getter)]
    pub fn hq_acc(&self) -> f64 {
        self.hq_acc
    }

    /// Texture-judge accuracy of the upsampled LQ image against the mask.
    #[wasm_bindgen(getter)]
    pub fn lq_acc(&self) -> f64 {
        self.lq_acc
    }
}

pub fn scene(seed: u32, classes: usize, blur: f64, noise: f64, quant: u32) -> Result<Scene> {
    let geom = SceneGeometry::default();
    let (hq, mask) = gen_scene_with(&geom, seed as u64, classes)?;
    let params = DegradationParams {
        blur_sigma: blur,
        noise_sigma: noise,
        quant_levels: quant,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed as u64, 0xDE6));
    let lq = degrade_traced(&hq, &params, geom.factor, &mut rng)?.lq;
    let g = geom.grid();
    let cells: Vec<usize> = (0..g * g)
        .map(|i| mask[(i / g) * geom.cell * geom.size + (i % g) * geom.cell])
        .collect();
    Ok(Scene {
        size: geom.size,
        lq_size: geom.lq_size(),
        hq_acc: judge_accuracy(&hq, &cells, geom.cell, classes)?,
        lq_acc: judge_accuracy(&nearest_up(&lq, geom.factor), &cells, geom.cell, classes)?,
        hq: rgba(&hq),
        mask: rgba(&mask_to_rgb(&mask, geom.size, geom.size)?),
        lq: rgba(&lq),
    })
}

/// Generates scene `seed` with `classes` classes and degrades it with explicit
/// blur, noise and quantisation.
#[wasm_bindgen]
pub fn make_scene(seed: u32, classes: usize, blur: f64, noise: f64, quant: u32) -> std::result::Result<Scene, JsError> {
    scene(seed, classes, blur, noise, quant).map_err(|e| JsError::new(&e.to_string()))
}

/// Both chains of one scene corrupted to a common step.
#[wasm_bindgen]
pub struct Forward {
    size: usize,
    mask_size: usize,
    image: Vec<u8>,
    mask: Vec<u8>,
    image_alpha_bar: f64,
    mask_alpha_bar: f64,
    mask_kept: f64,
}

#[wasm_bindgen]
impl Forward {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn mask_size(&self) -> usize {
        self.mask_size
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn image_alpha_bar(&self) -> f64 {
        self.image_alpha_bar
    }

    #[wasm_bindgen(getter)]
    pub fn mask_alpha_bar(&self) -> f64 {
        self.mask_alpha_bar
    }

    /// Share of mask cells still showing their clean class.
    #[wasm_bindgen(getter)]
    pub fn mask_kept(&self) -> f64 {
        self.mask_kept
    }
}

pub fn forward(seed: u32, classes: usize, t: usize) -> Result<Forward> {
    let geom = SceneGeometry::default();
    let (hq, mask) = gen_scene_with(&geom, seed as u64, classes)?;
    let gs = GaussianSchedule::linear(STEPS, 1e-4, 0.02)?;
    let ds = DiscreteSchedule::linear(STEPS, classes, 0.02, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed as u64, t as u64));
    let z0 = encode_image(&hq);
    let eps = gaussian_noise(z0.shape(), &mut rng);
    let zt = q_sample_continuous(&gs, &z0, t, &eps)?;
    let m = geom.size / PATCH;
    let s0 = resize_codec_encode(&mask, geom.size, geom.size, m, m, classes)?;
    // the mask chain runs one step ahead of the image chain
    let clean = MaskState::new(s0.clone(), m, m, 0, classes)?;
    let st = q_sample_discrete(&ds, &clean, t + 1, &mut rng)?;
    let kept = st.classes.iter().zip(&s0).filter(|(a, b)| a == b).count() as f64 / s0.len() as f64;
    Ok(Forward {
        size: geom.size,
        mask_size: m,
        image: rgba(&decode_image(&zt)),
        mask: rgba(&mask_to_rgb(&st.classes, m, m)?),
        image_alpha_bar: gs.alpha_bar(t as i64),
        mask_alpha_bar: ds.alpha_bar(t + 1),
        mask_kept: kept,
    })
}

/// Corrupts scene `seed` to image step `t` and mask step `t + 1`.
#[wasm_bindgen]
pub fn forward_diffusion(seed: u32, classes: usize, t: usize) -> std::result::Result<Forward, JsError> {
    forward(seed, classes, t).map_err(|e| JsError::new(&e.to_string()))
}

/// Per-step curves of both linear schedules.
#[wasm_bindgen]
pub struct Curves {
    image_alpha_bar: Vec<f64>,
    mask_alpha_bar: Vec<f64>,
    mask_same_class: Vec<f64>,
}

#[wasm_bindgen]
impl Curves {
    /// `ᾱ_t` of the image chain for `t = 0 … T−1`.
    pub fn image_alpha_bar(&self) -> Vec<f64> {
        self.image_alpha_bar.clone()
    }

    /// Keep probability of the mask chain for mask steps `1 … T`.
    pub fn mask_alpha_bar(&self) -> Vec<f64> {
        self.mask_alpha_bar.clone()
    }

    /// Probability that a mask pixel shows its clean class, for mask steps `1 … T`.
    pub fn mask_same_class(&self) -> Vec<f64> {
        self.mask_same_class.clone()
    }
}

pub fn curves(steps: usize, image_beta: (f64, f64), mask_beta: (f64, f64), classes: usize) -> Result<Curves> {
    let gs = GaussianSchedule::linear(steps, image_beta.0, image_beta.1)?;
    let ds = DiscreteSchedule::linear(steps, classes, mask_beta.0, mask_beta.1)?;
    Ok(Curves {
        image_alpha_bar: gs.alpha_bars().to_vec(),
        mask_alpha_bar: (1..=steps).map(|t| ds.alpha_bar(t)).collect(),
        mask_same_class: (1..=steps).map(|t| ds.q_bar(t)[0]).collect(),
    })
}

/// Schedules for the given step count and linear β ranges.
#[wasm_bindgen]
pub fn schedule_curves(
    steps: usize,
    image_beta_start: f64,
    image_beta_end: f64,
    mask_beta_start: f64,
    mask_beta_end: f64,
    classes: usize,
) -> std::result::Result<Curves, JsError> {
    curves(steps, (image_beta_start, image_beta_end), (mask_beta_start, mask_beta_end), classes)
        .map_err(|e| JsError::new(&e.to_string()))
}
