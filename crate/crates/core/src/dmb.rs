//! Bridge between the two chains: mask-to-image residuals `C` and
//! image-to-mask residuals `I`, plus the joint objective.

use rand::Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::networks::{Binders, Models, Trace};
use crate::nn::Role;
use crate::schedules::{DiscreteSchedule, GaussianSchedule, LatentState, MaskState};
use crate::segdm::{aided_residuals, segdm_logits_node};
use crate::srdm::{mask_node, q_sample_batch, q_sample_mask_batch, seg_residuals, srdm_eps_node};
use crate::tensor::{Float, Tensor};

/// Residuals exchanged at one joint step.
pub struct BridgeConditions {
    pub c: Vec<Tensor<f32>>,
    pub i: Vec<Tensor<f32>>,
}

/// Checks that the image state at step `t` pairs with the mask state at `t + 1`.
pub fn check_pair(z_t: i64, s_t: usize) -> Result<()> {
    if z_t < 0 || z_t + 1 != s_t as i64 {
        return Err(Error::TimestepMismatch { image: z_t, mask: s_t });
    }
    Ok(())
}

/// `C` from the Seg Controller and `I` from the Img-Aided encoder for one
/// image/mask pair.
pub fn bridge_conditions(models: &Models<f32>, z: &LatentState, s: &MaskState) -> Result<BridgeConditions> {
    check_pair(z.t, s.t)?;
    let zb = if z.data.shape().len() == 3 {
        let sh = z.data.shape();
        z.data.clone().reshape(&[1, sh[0], sh[1], sh[2]])?
    } else {
        z.data.clone()
    };
    let t = z.t as usize;
    let b = zb.dims4().0;
    Ok(BridgeConditions {
        c: seg_residuals(models, &zb, &vec![t; b], &s.classes)?,
        i: aided_residuals(models, &zb, t)?,
    })
}

/// Joint objective `L_SR + λ·L_IAC` on a shared corruption: image step `t`,
/// mask step `t + 1`, the same `z_t` and `S_t` feeding both branches.
#[allow(clippy::too_many_arguments)]
pub fn loss_joint<F: Float, R: Rng + ?Sized>(
    models: &Models<F>,
    trainable: &[Role],
    gsched: &GaussianSchedule,
    dsched: &DiscreteSchedule,
    z0: &Tensor<F>,
    s0: &[usize],
    z_lq: &Tensor<F>,
    lq_in: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    lambda: f64,
    rng: &mut R,
) -> Result<Trace<F>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidRange(format!("lambda {lambda} must be finite and >= 0")));
    }
    let ts_mask: Vec<usize> = ts.iter().map(|t| t + 1).collect();
    let s_t = q_sample_mask_batch(dsched, s0, models.cfg.mask_size(), &ts_mask, rng)?;
    let mut g = Graph::new();
    let mut bind = Binders::new(models, trainable);
    let zt = g.constant(q_sample_batch(gsched, z0, ts, eps)?);
    let s = mask_node(&mut g, &models.cfg, &s_t)?;
    let zl = g.constant(z_lq.clone());
    let eps_hat = srdm_eps_node(&mut bind, &mut g, zt, ts, Some(s), Some(zl))?;
    let l_sr = g.mse(eps_hat, eps.clone());
    let x = g.constant(lq_in.clone());
    let logits = segdm_logits_node(&mut bind, &mut g, x, s, &ts_mask, Some(zt))?;
    let l_iac = g.cross_entropy(logits, s0.to_vec());
    let weighted = g.scale(l_iac, F::of(lambda));
    let loss = g.add(l_sr, weighted);
    Ok(Trace {
        graph: g,
        loss,
        parts: vec![("sr", l_sr), ("iac", l_iac)],
        leaves: bind.into_leaves(),
    })
}
