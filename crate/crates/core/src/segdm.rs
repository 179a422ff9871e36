//! Mask diffusion branch: backbone, denoiser objectives and the categorical
//! reverse step.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::networks::{img_aided_forward, seg_backbone_forward, seg_denoiser_forward, Binders, Models, Trace};
use crate::nn::Role;
use crate::schedules::{discrete_posterior_spaced, sample_categorical, DiscreteSchedule, MaskState};
use crate::srdm::{mask_node, q_sample_batch, q_sample_mask_batch};
use crate::schedules::GaussianSchedule;
use crate::tensor::{Float, Tensor};

/// Nearest-neighbour resize of an `h × w` class field to `th × tw`; each output
/// cell takes the source sample at its top-left corner.
pub fn resize_codec_encode(mask: &[usize], h: usize, w: usize, th: usize, tw: usize, k: usize) -> Result<Vec<usize>> {
    if mask.len() != h * w || h == 0 || w == 0 || th == 0 || tw == 0 {
        return Err(Error::ShapeMismatch(format!("cannot resize {} values as {h}x{w} to {th}x{tw}", mask.len())));
    }
    if let Some(&bad) = mask.iter().find(|&&c| c >= k) {
        return Err(Error::ClassOutOfRange { value: bad, classes: k });
    }
    Ok(nearest(mask, h, w, th, tw))
}

/// Nearest-neighbour expansion of an `h × w` class field back to `th × tw`.
pub fn resize_codec_decode(s: &[usize], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<usize>> {
    if s.len() != h * w || h == 0 || w == 0 || th == 0 || tw == 0 {
        return Err(Error::ShapeMismatch(format!("cannot resize {} values as {h}x{w} to {th}x{tw}", s.len())));
    }
    Ok(nearest(s, h, w, th, tw))
}

fn nearest(src: &[usize], h: usize, w: usize, th: usize, tw: usize) -> Vec<usize> {
    (0..th * tw)
        .map(|i| src[(i / tw) * h / th * w + (i % tw) * w / tw])
        .collect()
}

fn as_f64(ts: &[usize]) -> Vec<f64> {
    ts.iter().map(|&t| t as f64).collect()
}

/// Channel-wise softmax of one `[K, H, W]` logit field, in `f64` and
/// channel-major order.
pub fn probs_from_logits<F: Float>(logits: &[F], k: usize) -> Vec<f64> {
    let n = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for p in 0..n {
        let mx = (0..k).map(|i| logits[i * n + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..k {
            let e = (logits[i * n + p].as_f64() - mx).exp();
            out[i * n + p] = e;
            s += e;
        }
        for i in 0..k {
            out[i * n + p] /= s;
        }
    }
    out
}

/// Per-pixel argmax of channel-major scores.
pub fn argmax_field(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len() / k;
    (0..n)
        .map(|p| {
            (1..k).fold(0, |best, i| if scores[i * n + p] > scores[best * n + p] { i } else { best })
        })
        .collect()
}

/// Cross-entropy of backbone logits against the clean masks.
pub fn loss_backbone<F: Float>(
    models: &Models<F>,
    trainable: &[Role],
    lq_in: &Tensor<F>,
    s0: &[usize],
) -> Result<Trace<F>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, trainable);
    let x = g.constant(lq_in.clone());
    let out = seg_backbone_forward(bind.get(Role::SegBackbone), &mut g, &models.cfg, x)?;
    check_targets(&g, out.logits, s0, models.cfg.classes)?;
    let loss = g.cross_entropy(out.logits, s0.to_vec());
    Ok(Trace {
        graph: g,
        loss,
        parts: vec![("ce", loss)],
        leaves: bind.into_leaves(),
    })
}

fn check_targets<F: Float>(g: &Graph<F>, logits: NodeId, s0: &[usize], k: usize) -> Result<()> {
    let (b, _, h, w) = g.value(logits).dims4();
    if s0.len() != b * h * w {
        return Err(Error::ShapeMismatch(format!("{} targets for {b}x{h}x{w} logits", s0.len())));
    }
    if let Some(&bad) = s0.iter().find(|&&c| c >= k) {
        return Err(Error::ClassOutOfRange { value: bad, classes: k });
    }
    Ok(())
}

/// Mask denoiser logits from an explicit noisy mask, with the backbone run on
/// `lq_in` and optional image aid from `z_t` at image steps `ts_mask − 1`.
pub fn segdm_logits_node<F: Float>(
    bind: &mut Binders<F>,
    g: &mut Graph<F>,
    lq_in: NodeId,
    s_t: NodeId,
    ts_mask: &[usize],
    z_t: Option<NodeId>,
) -> Result<NodeId> {
    let cfg = bind.cfg();
    let bb = seg_backbone_forward(bind.get(Role::SegBackbone), g, cfg, lq_in)?;
    let i = match z_t {
        Some(z) => {
            let ts_img = image_steps(ts_mask)?;
            Some(img_aided_forward(bind.get(Role::ImgAided), g, cfg, z, &as_f64(&ts_img))?)
        }
        None => None,
    };
    seg_denoiser_forward(
        bind.get(Role::SegDenoiser),
        g,
        cfg,
        s_t,
        &as_f64(ts_mask),
        &bb.features,
        i.as_deref(),
    )
}

fn image_steps(ts_mask: &[usize]) -> Result<Vec<usize>> {
    ts_mask
        .iter()
        .map(|&t| {
            t.checked_sub(1)
                .ok_or_else(|| Error::InvalidRange("mask step 0 has no image counterpart".into()))
        })
        .collect()
}

/// Clean-mask cross-entropy of the mask denoiser at mask steps `ts_mask`
/// (each in `[1, T]`). With `z0_eps` the image-aided branch sees the image
/// corrupted to the matching image step.
#[allow(clippy::too_many_arguments)]
pub fn loss_segdm<F: Float, R: Rng + ?Sized>(
    models: &Models<F>,
    trainable: &[Role],
    dsched: &DiscreteSchedule,
    gsched: &GaussianSchedule,
    lq_in: &Tensor<F>,
    s0: &[usize],
    ts_mask: &[usize],
    z0_eps: Option<(&Tensor<F>, &Tensor<F>)>,
    rng: &mut R,
) -> Result<Trace<F>> {
    let m = models.cfg.mask_size();
    let s_t = q_sample_mask_batch(dsched, s0, m, ts_mask, rng)?;
    let mut g = Graph::new();
    let mut bind = Binders::new(models, trainable);
    let x = g.constant(lq_in.clone());
    let s = mask_node(&mut g, &models.cfg, &s_t)?;
    let z = match z0_eps {
        Some((z0, eps)) => Some(g.constant(q_sample_batch(gsched, z0, &image_steps(ts_mask)?, eps)?)),
        None => None,
    };
    let logits = segdm_logits_node(&mut bind, &mut g, x, s, ts_mask, z)?;
    check_targets(&g, logits, s0, models.cfg.classes)?;
    let loss = g.cross_entropy(logits, s0.to_vec());
    Ok(Trace {
        graph: g,
        loss,
        parts: vec![("ce", loss)],
        leaves: bind.into_leaves(),
    })
}

/// Backbone features and logits for a batch of backbone inputs.
pub struct BackboneOut<F: Float = f32> {
    pub features: Vec<Tensor<F>>,
    pub logits: Tensor<F>,
}

pub fn backbone_forward<F: Float>(models: &Models<F>, lq_in: &Tensor<F>) -> Result<BackboneOut<F>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, &[]);
    let x = g.constant(lq_in.clone());
    let out = seg_backbone_forward(bind.get(Role::SegBackbone), &mut g, &models.cfg, x)?;
    Ok(BackboneOut {
        features: out.features.iter().map(|&id| g.value(id).clone()).collect(),
        logits: g.value(out.logits).clone(),
    })
}

/// Image-aided residuals `I` for noisy images at image step `t_img`.
pub fn aided_residuals<F: Float>(models: &Models<F>, z_t: &Tensor<F>, t_img: usize) -> Result<Vec<Tensor<F>>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, &[]);
    let z = g.constant(z_t.clone());
    let ts = vec![t_img as f64; z_t.dims4().0];
    let i = img_aided_forward(bind.get(Role::ImgAided), &mut g, &models.cfg, z, &ts)?;
    Ok(i.into_iter().map(|id| g.value(id).clone()).collect())
}

/// Clean-mask logits `[B, K, m, m]` from precomputed backbone features.
pub fn predict_mask_logits<F: Float>(
    models: &Models<F>,
    s_t: &[usize],
    t_mask: usize,
    features: &[Tensor<F>],
    i: Option<&[Tensor<F>]>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let mut bind = Binders::new(models, &[]);
    let s = mask_node(&mut g, &models.cfg, s_t)?;
    let b = g.value(s).dims4().0;
    let f: Vec<NodeId> = features.iter().map(|t| g.constant(t.clone())).collect();
    let i: Option<Vec<NodeId>> = i.map(|i| i.iter().map(|t| g.constant(t.clone())).collect());
    let out = seg_denoiser_forward(
        bind.get(Role::SegDenoiser),
        &mut g,
        &models.cfg,
        s,
        &vec![t_mask as f64; b],
        &f,
        i.as_deref(),
    )?;
    Ok(g.value(out).clone())
}

/// Reverse step from clean-mask logits `[K, h, w]`. Reaching step 0 returns
/// the argmax of the prediction; otherwise the spaced posterior is sampled.
pub fn segdm_step_from_logits<F: Float, R: Rng + ?Sized>(
    dsched: &DiscreteSchedule,
    s_t: &MaskState,
    logits: &[F],
    t_prev: usize,
    rng: &mut R,
) -> Result<MaskState> {
    let k = dsched.classes();
    if logits.len() != k * s_t.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} pixels and {k} classes",
            logits.len(),
            s_t.len()
        )));
    }
    if s_t.t == 0 || t_prev >= s_t.t {
        return Err(Error::TimestepOrder {
            t: s_t.t as i64,
            t_prev: t_prev as i64,
        });
    }
    let probs = probs_from_logits(logits, k);
    let classes = if t_prev == 0 {
        argmax_field(&probs, k)
    } else {
        let post = discrete_posterior_spaced(dsched, s_t, &probs, s_t.t, t_prev)?;
        sample_categorical(&post, k, rng)
    };
    Ok(MaskState {
        classes,
        h: s_t.h,
        w: s_t.w,
        t: t_prev,
    })
}

/// One batched reverse step of the mask chain, all items at mask step `t`.
/// Returns the new masks and the predicted clean logits.
#[allow(clippy::too_many_arguments)]
pub fn segdm_reverse_batch<R: Rng>(
    models: &Models<f32>,
    dsched: &DiscreteSchedule,
    s_t: &[usize],
    t: usize,
    t_prev: usize,
    features: &[Tensor<f32>],
    i: Option<&[Tensor<f32>]>,
    rngs: &mut [R],
) -> Result<(Vec<usize>, Tensor<f32>)> {
    let m = models.cfg.mask_size();
    let n = m * m;
    let k = models.cfg.classes;
    if s_t.len() != rngs.len() * n {
        return Err(Error::ShapeMismatch(format!("{} mask values for {} streams", s_t.len(), rngs.len())));
    }
    let logits = predict_mask_logits(models, s_t, t, features, i)?;
    let mut out = Vec::with_capacity(s_t.len());
    for (b, rng) in rngs.iter_mut().enumerate() {
        let st = MaskState::new(s_t[b * n..(b + 1) * n].to_vec(), m, m, t, k)?;
        let item = &logits.data()[b * k * n..(b + 1) * k * n];
        out.extend(segdm_step_from_logits(dsched, &st, item, t_prev, rng)?.classes);
    }
    Ok((out, logits))
}
