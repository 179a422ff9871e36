//! Image diffusion branch: codec, training objectives and the reverse step.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::networks::{
    img_controller_forward, img_denoiser_forward, seg_controller_forward, Binders, Models, NetConfig, Trace,
};
use crate::nn::Role;
use crate::schedules::{ddim_sigma, ddim_step, gaussian_noise, q_sample_discrete, DiscreteSchedule, GaussianSchedule, LatentState, MaskState};
use crate::tensor::{self, one_hot, Float, Tensor};

/// Identity-codec image encoding `[0, 1] → [−1, 1]`.
pub fn encode_image<F: Float>(img: &Tensor<F>) -> Tensor<F> {
    let two = F::of(2.0);
    img.map(|v| two * v - F::one())
}

/// Inverse of [`encode_image`], clamped to `[0, 1]`.
pub fn decode_image<F: Float>(z: &Tensor<F>) -> Tensor<F> {
    let half = F::of(0.5);
    z.map(|v| ((v + F::one()) * half).max(F::zero()).min(F::one()))
}

fn batched<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    if x.shape().len() == 3 {
        let s = x.shape();
        x.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap()
    } else {
        x.clone()
    }
}

/// LQ images (`[C,h,w]` or `[B,C,h,w]` in `[0,1]`) bilinearly resized to the HQ
/// grid and encoded.
pub fn lq_condition<F: Float>(lq: &Tensor<F>, hq_size: usize) -> Tensor<F> {
    encode_image(&tensor::resize_bilinear(&batched(lq), hq_size, hq_size))
}

/// Backbone input: LQ images resized to the mask grid and encoded.
pub fn lq_backbone_input<F: Float>(lq: &Tensor<F>, mask_size: usize) -> Tensor<F> {
    let b = batched(lq);
    let (_, _, h, w) = b.dims4();
    if h == mask_size && w == mask_size {
        encode_image(&b)
    } else {
        encode_image(&tensor::resize_bilinear(&b, mask_size, mask_size))
    }
}

/// Per-item closed-form corruption of a batch at timesteps `ts`.
pub fn q_sample_batch<F: Float>(
    sched: &GaussianSchedule,
    z0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    z0.check_same(eps)?;
    let (b, ..) = z0.dims4();
    if ts.len() != b {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch {b}", ts.len())));
    }
    let per = z0.numel() / b;
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &t) in ts.iter().enumerate() {
        if t >= sched.steps() {
            return Err(Error::InvalidRange(format!("timestep {t} outside [0, {})", sched.steps())));
        }
        let ab = sched.alpha_bars()[t];
        let (a, s) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let z = &z0.data()[i * per..(i + 1) * per];
        let e = &eps.data()[i * per..(i + 1) * per];
        out.extend(z.iter().zip(e).map(|(&z, &e)| a * z + s * e));
    }
    Tensor::new(z0.shape(), out)
}

/// Corrupts per-item clean masks (`b` fields of `m×m`) to mask steps `ts_mask`.
pub fn q_sample_mask_batch<R: Rng + ?Sized>(
    sched: &DiscreteSchedule,
    s0: &[usize],
    m: usize,
    ts_mask: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = m * m;
    if s0.len() != ts_mask.len() * n {
        return Err(Error::ShapeMismatch(format!(
            "{} mask values for {} fields of {m}x{m}",
            s0.len(),
            ts_mask.len()
        )));
    }
    let mut out = Vec::with_capacity(s0.len());
    for (i, &t) in ts_mask.iter().enumerate() {
        let st = MaskState::new(s0[i * n..(i + 1) * n].to_vec(), m, m, 0, sched.classes())?;
        out.extend(q_sample_discrete(sched, &st, t, rng)?.classes);
    }
    Ok(out)
}

/// One-hot mask field for a batch, as a graph constant.
pub fn mask_node<F: Float>(g: &mut Graph<F>, cfg: &NetConfig, classes: &[usize]) -> Result<NodeId> {
    let m = cfg.mask_size();
    let n = m * m;
    if classes.is_empty() || classes.len() % n != 0 {
        return Err(Error::ShapeMismatch(format!("{} mask values for {m}x{m} fields", classes.len())));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= cfg.classes) {
        return Err(Error::ClassOutOfRange {
            value: bad,
            classes: cfg.classes,
        });
    }
    Ok(g.constant(one_hot(classes, classes.len() / n, cfg.classes, m, m)))
}

fn as_f64(ts: &[usize]) -> Vec<f64> {
    ts.iter().map(|&t| t as f64).collect()
}

/// Noise prediction with optional mask condition (through the Seg Controller)
/// and optional LQ condition (through the Img Controller and SFT).
pub fn srdm_eps_node<F: Float>(
    bind: &mut Binders<F>,
    g: &mut Graph<F>,
    z_t: NodeId,
    ts: &[usize],
    mask: Option<NodeId>,
    z_lq: Option<NodeId>,
) -> Result<NodeId> {
    let cfg = bind.cfg();
    let tf = as_f64(ts);
    let c = match mask {
        Some(s) => Some(seg_controller_forward(bind.get(Role::SegController), g, cfg, s, z_t, &tf)?),
        None => None,
    };
    let sft = match z_lq {
        Some(z) => Some(img_controller_forward(bind.get(Role::ImgController), g, cfg, z)?),
        None => None,
    };
    img_denoiser_forward(bind.get(Role::ImgDenoiser), g, cfg, z_t, &tf, sft.as_deref(), c.as_deref())
}

/// Mean squared noise-prediction error with an explicit noisy mask condition.
#[allow(clippy::too_many_arguments)]
pub fn srdm_loss_given_mask<F: Float>(
    models: &Models<F>,
    trainable: &[Role],
    sched: &GaussianSchedule,
    z0: &Tensor<F>,
    s_t: Option<&[usize]>,
    z_lq: Option<&Tensor<F>>,
    ts: &[usize],
    eps: &Tensor<F>,
) -> Result<Trace<F>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, trainable);
    let zt = q_sample_batch(sched, z0, ts, eps)?;
    let zt = g.constant(zt);
    let mask = s_t.map(|s| mask_node(&mut g, &models.cfg, s)).transpose()?;
    let zl = z_lq.map(|z| g.constant(z.clone()));
    let eps_hat = srdm_eps_node(&mut bind, &mut g, zt, ts, mask, zl)?;
    let loss = g.mse(eps_hat, eps.clone());
    Ok(Trace {
        graph: g,
        loss,
        parts: vec![("sr", loss)],
        leaves: bind.into_leaves(),
    })
}

/// Seg2Img objective: the denoiser conditioned only on the noisy mask `S_t`
/// drawn at mask step `t + 1`.
#[allow(clippy::too_many_arguments)]
pub fn loss_seg2img<F: Float, R: Rng + ?Sized>(
    models: &Models<F>,
    trainable: &[Role],
    sched: &GaussianSchedule,
    dsched: &DiscreteSchedule,
    z0: &Tensor<F>,
    s0: &[usize],
    ts: &[usize],
    eps: &Tensor<F>,
    rng: &mut R,
) -> Result<Trace<F>> {
    let ts_mask: Vec<usize> = ts.iter().map(|t| t + 1).collect();
    let s_t = q_sample_mask_batch(dsched, s0, models.cfg.mask_size(), &ts_mask, rng)?;
    srdm_loss_given_mask(models, trainable, sched, z0, Some(&s_t), None, ts, eps)
}

/// SR objective: as [`loss_seg2img`] plus the LQ condition.
#[allow(clippy::too_many_arguments)]
pub fn loss_sr<F: Float, R: Rng + ?Sized>(
    models: &Models<F>,
    trainable: &[Role],
    sched: &GaussianSchedule,
    dsched: &DiscreteSchedule,
    z0: &Tensor<F>,
    s0: &[usize],
    z_lq: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    rng: &mut R,
) -> Result<Trace<F>> {
    let ts_mask: Vec<usize> = ts.iter().map(|t| t + 1).collect();
    let s_t = q_sample_mask_batch(dsched, s0, models.cfg.mask_size(), &ts_mask, rng)?;
    srdm_loss_given_mask(models, trainable, sched, z0, Some(&s_t), Some(z_lq), ts, eps)
}

/// Precomputed SFT pairs for an encoded, upsampled LQ batch.
pub fn sft_conditions<F: Float>(models: &Models<F>, z_lq: &Tensor<F>) -> Result<Vec<(Tensor<F>, Tensor<F>)>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, &[]);
    let z = g.constant(z_lq.clone());
    let pairs = img_controller_forward(bind.get(Role::ImgController), &mut g, &models.cfg, z)?;
    Ok(pairs
        .into_iter()
        .map(|(a, b)| (g.value(a).clone(), g.value(b).clone()))
        .collect())
}

/// Noise prediction from precomputed conditions.
pub fn predict_eps<F: Float>(
    models: &Models<F>,
    z_t: &Tensor<F>,
    ts: &[usize],
    sft: Option<&[(Tensor<F>, Tensor<F>)]>,
    c: Option<&[Tensor<F>]>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, &[]);
    let z = g.constant(z_t.clone());
    let sft_ids: Option<Vec<(NodeId, NodeId)>> =
        sft.map(|p| p.iter().map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone()))).collect());
    let c_ids: Option<Vec<NodeId>> = c.map(|c| c.iter().map(|t| g.constant(t.clone())).collect());
    let tf = as_f64(ts);
    let out = img_denoiser_forward(
        bind.get(Role::ImgDenoiser),
        &mut g,
        &models.cfg,
        z,
        &tf,
        sft_ids.as_deref(),
        c_ids.as_deref(),
    )?;
    Ok(g.value(out).clone())
}

/// Seg Controller residuals for a batch of noisy images and masks.
pub fn seg_residuals<F: Float>(
    models: &Models<F>,
    z_t: &Tensor<F>,
    ts: &[usize],
    mask: &[usize],
) -> Result<Vec<Tensor<F>>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, &[]);
    let z = g.constant(z_t.clone());
    let s = mask_node(&mut g, &models.cfg, mask)?;
    let tf = as_f64(ts);
    let c = seg_controller_forward(bind.get(Role::SegController), &mut g, &models.cfg, s, z, &tf)?;
    Ok(c.into_iter().map(|id| g.value(id).clone()).collect())
}

/// One batched reverse step of the image chain, all items at step `t`. The
/// mask condition enters through the Seg Controller; `sft` is the precomputed
/// LQ condition. `rngs` holds one noise stream per item.
#[allow(clippy::too_many_arguments)]
pub fn srdm_reverse_batch<R: Rng>(
    models: &Models<f32>,
    sched: &GaussianSchedule,
    z_t: &Tensor<f32>,
    t: usize,
    t_prev: i64,
    sft: Option<&[(Tensor<f32>, Tensor<f32>)]>,
    mask: Option<&[usize]>,
    eta: f64,
    rngs: &mut [R],
) -> Result<Tensor<f32>> {
    let (b, ..) = z_t.dims4();
    if rngs.len() != b {
        return Err(Error::ShapeMismatch(format!("{} noise streams for batch {b}", rngs.len())));
    }
    let ts = vec![t; b];
    let c = mask.map(|m| seg_residuals(models, z_t, &ts, m)).transpose()?;
    let eps = predict_eps(models, z_t, &ts, sft, c.as_deref())?;
    let sigma = ddim_sigma(sched, t, t_prev, eta);
    let noise = if sigma > 0.0 {
        let per = &z_t.shape()[1..];
        let items: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| gaussian_noise(per, r)).collect();
        Some(Tensor::batch(&items)?)
    } else {
        None
    };
    ddim_step(sched, z_t, &eps, t, t_prev, eta, noise.as_ref())
}

/// Single-image form of [`srdm_reverse_batch`] on a [`LatentState`].
#[allow(clippy::too_many_arguments)]
pub fn srdm_reverse_step<R: Rng>(
    models: &Models<f32>,
    sched: &GaussianSchedule,
    z: &LatentState,
    t_prev: i64,
    sft: Option<&[(Tensor<f32>, Tensor<f32>)]>,
    s_t: Option<&MaskState>,
    eta: f64,
    rng: &mut R,
) -> Result<LatentState> {
    if z.t < 0 || t_prev >= z.t {
        return Err(Error::TimestepOrder { t: z.t, t_prev });
    }
    let zb = batched(&z.data);
    let next = srdm_reverse_batch(
        models,
        sched,
        &zb,
        z.t as usize,
        t_prev,
        sft,
        s_t.map(|s| s.classes.as_slice()),
        eta,
        std::slice::from_mut(rng),
    )?;
    Ok(LatentState {
        data: next.reshape(z.data.shape())?,
        t: t_prev,
    })
}
