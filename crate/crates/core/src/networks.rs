//! The six network roles. Every image-facing network works on a patchified grid:
//! a `p×p` space-to-depth stem maps the `H×W` image to `H/p × W/p`, which for the
//! default geometry coincides with the mask field resolution.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{
    conv, group_norm, linear, res_block, time_mlp, zero_conv, Binder, Init, ParamStore, Role, CONV_STD,
};
use crate::tensor::{Float, Tensor};

const TN: Init = Init::TruncNormal(CONV_STD);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub classes: usize,
    pub img_channels: usize,
    pub hq_size: usize,
    pub lq_size: usize,
    pub patch: usize,
    pub base_width: usize,
    pub mults: Vec<usize>,
    pub blocks: usize,
    pub seg_width: usize,
    pub temb_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            img_channels: 3,
            hq_size: 64,
            lq_size: 16,
            patch: 4,
            base_width: 32,
            mults: vec![1, 2, 2],
            blocks: 2,
            seg_width: 32,
            temb_dim: 32,
        }
    }
}

impl NetConfig {
    /// Side of the patchified working grid, also the mask field side.
    pub fn mask_size(&self) -> usize {
        self.hq_size / self.patch
    }

    pub fn levels(&self) -> usize {
        self.mults.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.img_channels == 0 || self.base_width == 0 || self.seg_width == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.patch == 0 || self.hq_size % self.patch != 0 {
            return bad(format!("patch {} must divide hq_size {}", self.patch, self.hq_size));
        }
        if self.lq_size == 0 || self.hq_size % self.lq_size != 0 {
            return bad(format!("lq_size {} must divide hq_size {}", self.lq_size, self.hq_size));
        }
        if self.levels() < 2 {
            return bad("need at least two scales".into());
        }
        if self.mults.contains(&0) {
            return bad("width multipliers must be positive".into());
        }
        let down = 1 << (self.levels() - 1);
        if self.mask_size() % down != 0 {
            return bad(format!(
                "working grid {} not divisible by {down} for {} scales",
                self.mask_size(),
                self.levels()
            ));
        }
        if self.blocks == 0 {
            return bad("need at least one residual block per scale".into());
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return bad(format!("temb_dim {} must be even and >= 2", self.temb_dim));
        }
        Ok(())
    }

    fn check_image(&self, g_shape: &[usize], what: &str) -> Result<()> {
        let want = [self.img_channels, self.hq_size, self.hq_size];
        if g_shape.len() != 4 || g_shape[1..] != want {
            return Err(Error::ShapeMismatch(format!(
                "{what} has shape {g_shape:?}, expected [B, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    fn check_mask(&self, g_shape: &[usize], what: &str) -> Result<()> {
        let m = self.mask_size();
        if g_shape.len() != 4 || g_shape[1..] != [self.classes, m, m] {
            return Err(Error::ShapeMismatch(format!(
                "{what} has shape {g_shape:?}, expected [B, {}, {m}, {m}]",
                self.classes
            )));
        }
        Ok(())
    }

    /// Per-scale shapes `[C, H, W]` of the encoder features of the image and
    /// mask denoisers.
    pub fn scale_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels())
            .map(|l| {
                let s = self.mask_size() >> l;
                [self.width(l), s, s]
            })
            .collect()
    }
}

fn check_scales<F: Float>(g: &Graph<F>, cfg: &NetConfig, ids: &[NodeId], batch: usize, what: &str) -> Result<()> {
    let shapes = cfg.scale_shapes();
    if ids.len() != shapes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} scales supplied, {} expected",
            ids.len(),
            shapes.len()
        )));
    }
    for (l, (&id, s)) in ids.iter().zip(&shapes).enumerate() {
        let got = g.value(id).shape();
        if got != [batch, s[0], s[1], s[2]] {
            return Err(Error::ShapeMismatch(format!(
                "{what}[{l}] has shape {got:?}, expected [{batch}, {}, {}, {}]",
                s[0], s[1], s[2]
            )));
        }
    }
    Ok(())
}

fn decoder<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    mut h: NodeId,
    skips: &[NodeId],
    residuals: Option<&[NodeId]>,
    temb: NodeId,
) -> NodeId {
    let levels = cfg.levels();
    for l in (0..levels).rev() {
        if l + 1 < levels {
            h = g.upsample(h, 2);
        }
        let skip = match residuals {
            Some(r) => g.add(skips[l], r[l]),
            None => skips[l],
        };
        h = g.concat(h, skip);
        for i in 0..cfg.blocks {
            h = res_block(b, g, &format!("dec.{l}.{i}"), h, cfg.width(l), Some(temb));
        }
    }
    h
}

/// Noise predictor. `sft` modulates the encoder output of each scale and `c`
/// is added to the decoder skip input of each scale.
pub fn img_denoiser_forward<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    z_t: NodeId,
    ts: &[f64],
    sft: Option<&[(NodeId, NodeId)]>,
    c: Option<&[NodeId]>,
) -> Result<NodeId> {
    let shape = g.value(z_t).shape().to_vec();
    cfg.check_image(&shape, "z_t")?;
    let batch = shape[0];
    if ts.len() != batch {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch {batch}", ts.len())));
    }
    if let Some(pairs) = sft {
        let gs: Vec<NodeId> = pairs.iter().map(|p| p.0).collect();
        let bs: Vec<NodeId> = pairs.iter().map(|p| p.1).collect();
        check_scales(g, cfg, &gs, batch, "sft gamma")?;
        check_scales(g, cfg, &bs, batch, "sft beta")?;
    }
    if let Some(c) = c {
        check_scales(g, cfg, c, batch, "C")?;
    }
    let temb = time_mlp(b, g, "time", ts, cfg.temb_dim);
    let x = g.space_to_depth(z_t, cfg.patch);
    let mut h = conv(b, g, "conv_in", x, cfg.width(0), 3, TN);
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        if l > 0 {
            h = g.avg_pool(h, 2);
        }
        for i in 0..cfg.blocks {
            h = res_block(b, g, &format!("enc.{l}.{i}"), h, cfg.width(l), Some(temb));
        }
        if let Some(pairs) = sft {
            h = g.sft(h, pairs[l].0, pairs[l].1);
        }
        skips.push(h);
    }
    h = res_block(b, g, "mid", h, cfg.width(cfg.levels() - 1), Some(temb));
    let h = decoder(b, g, cfg, h, &skips, c, temb);
    // no output norm: the head stays linear in the residual stream
    let h = g.silu(h);
    let p = cfg.patch;
    let out = conv(b, g, "conv_out", h, cfg.img_channels * p * p, 3, TN);
    // the stem narrows each patch, so a time-gated copy of the input patch
    // keeps every pixel reachable by the head
    let te = g.silu(temb);
    let gate = linear(b, g, "skip_gate", te, cfg.img_channels * p * p);
    let skip = g.mul_channel(x, gate);
    let out = g.add(out, skip);
    Ok(g.depth_to_space(out, p))
}

/// Time-independent LQ encoder emitting one zero-initialised `(gamma, beta)` pair
/// per denoiser scale.
pub fn img_controller_forward<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    z_lq: NodeId,
) -> Result<Vec<(NodeId, NodeId)>> {
    let shape = g.value(z_lq).shape().to_vec();
    cfg.check_image(&shape, "upsampled LQ")?;
    let x = g.space_to_depth(z_lq, cfg.patch);
    let mut h = conv(b, g, "conv_in", x, cfg.width(0), 3, TN);
    let mut out = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        if l > 0 {
            h = g.avg_pool(h, 2);
        }
        h = res_block(b, g, &format!("enc.{l}"), h, cfg.width(l), None);
        let gamma = conv(b, g, &format!("gamma.{l}"), h, cfg.width(l), 3, Init::Zeros);
        let beta = conv(b, g, &format!("beta.{l}"), h, cfg.width(l), 3, Init::Zeros);
        out.push((gamma, beta));
    }
    Ok(out)
}

pub struct BackboneNodes {
    pub features: Vec<NodeId>,
    pub logits: NodeId,
}

/// Coarse segmenter on the LQ image, `z_lq` being `[B, C, lq, lq]` in codec space.
pub fn seg_backbone_forward<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    lq: NodeId,
) -> Result<BackboneNodes> {
    let shape = g.value(lq).shape().to_vec();
    let m = cfg.mask_size();
    if shape.len() != 4 || shape[1..] != [cfg.img_channels, m, m] {
        return Err(Error::ShapeMismatch(format!(
            "backbone input {shape:?}, expected [B, {}, {m}, {m}]",
            cfg.img_channels
        )));
    }
    let sw = cfg.seg_width;
    let mut h = conv(b, g, "conv_in", lq, sw, 3, TN);
    for i in 0..2 {
        h = res_block(b, g, &format!("s0.{i}"), h, sw, None);
    }
    let f0 = h;
    h = g.avg_pool(h, 2);
    for i in 0..2 {
        h = res_block(b, g, &format!("s1.{i}"), h, 2 * sw, None);
    }
    let f1 = h;
    let up = g.upsample(f1, 2);
    let h = g.concat(f0, up);
    let h = res_block(b, g, "head", h, sw, None);
    let h = group_norm(b, g, "out_norm", h);
    let h = g.silu(h);
    let logits = conv(b, g, "conv_out", h, cfg.classes, 3, TN);
    Ok(BackboneNodes {
        features: vec![f0, f1],
        logits,
    })
}

/// Predicts clean-mask logits from a one-hot noisy mask. Backbone features are
/// concatenated at the scales they exist for; `i` is added to the encoder
/// output of every scale.
pub fn seg_denoiser_forward<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    s_onehot: NodeId,
    ts: &[f64],
    features: &[NodeId],
    i: Option<&[NodeId]>,
) -> Result<NodeId> {
    let shape = g.value(s_onehot).shape().to_vec();
    cfg.check_mask(&shape, "s_t")?;
    let batch = shape[0];
    if ts.len() != batch {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch {batch}", ts.len())));
    }
    if features.len() != 2 {
        return Err(Error::ShapeMismatch(format!("{} backbone scales, expected 2", features.len())));
    }
    if let Some(i) = i {
        check_scales(g, cfg, i, batch, "I")?;
    }
    let temb = time_mlp(b, g, "time", ts, cfg.temb_dim);
    let mut h = conv(b, g, "conv_in", s_onehot, cfg.width(0), 3, TN);
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        if l > 0 {
            h = g.avg_pool(h, 2);
        }
        if let Some(&f) = features.get(l) {
            h = g.concat(h, f);
        }
        for k in 0..cfg.blocks {
            h = res_block(b, g, &format!("enc.{l}.{k}"), h, cfg.width(l), Some(temb));
        }
        if let Some(i) = i {
            h = g.add(h, i[l]);
        }
        skips.push(h);
    }
    h = res_block(b, g, "mid", h, cfg.width(cfg.levels() - 1), Some(temb));
    let h = decoder(b, g, cfg, h, &skips, None, temb);
    let h = group_norm(b, g, "out_norm", h);
    let h = g.silu(h);
    Ok(conv(b, g, "conv_out", h, cfg.classes, 3, TN))
}

/// Encoder cloned from the image denoiser plus a mask hint, emitting one
/// zero-convolution residual per decoder skip site.
pub fn seg_controller_forward<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    s_onehot: NodeId,
    z_t: NodeId,
    ts: &[f64],
) -> Result<Vec<NodeId>> {
    let zs = g.value(z_t).shape().to_vec();
    cfg.check_image(&zs, "z_t")?;
    cfg.check_mask(g.value(s_onehot).shape(), "s_t")?;
    if ts.len() != zs[0] || g.value(s_onehot).shape()[0] != zs[0] {
        return Err(Error::ShapeMismatch("batch sizes of z_t, s_t and t differ".into()));
    }
    let temb = time_mlp(b, g, "time", ts, cfg.temb_dim);
    let x = g.space_to_depth(z_t, cfg.patch);
    let h = conv(b, g, "conv_in", x, cfg.width(0), 3, TN);
    let hint = conv(b, g, "hint", s_onehot, cfg.width(0), 3, TN);
    let mut h = g.add(h, hint);
    let mut out = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        if l > 0 {
            h = g.avg_pool(h, 2);
        }
        for i in 0..cfg.blocks {
            h = res_block(b, g, &format!("enc.{l}.{i}"), h, cfg.width(l), Some(temb));
        }
        out.push(zero_conv(b, g, &format!("zero.{l}"), h, cfg.width(l)));
    }
    Ok(out)
}

/// Light image encoder emitting one zero-convolution residual per mask
/// denoiser encoder scale.
pub fn img_aided_forward<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    cfg: &NetConfig,
    z_t: NodeId,
    ts: &[f64],
) -> Result<Vec<NodeId>> {
    let zs = g.value(z_t).shape().to_vec();
    cfg.check_image(&zs, "z_t")?;
    if ts.len() != zs[0] {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch {}", ts.len(), zs[0])));
    }
    let temb = time_mlp(b, g, "time", ts, cfg.temb_dim);
    let x = g.space_to_depth(z_t, cfg.patch);
    let mut h = conv(b, g, "conv_in", x, cfg.width(0), 3, TN);
    let mut out = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        if l > 0 {
            h = g.avg_pool(h, 2);
        }
        h = res_block(b, g, &format!("enc.{l}"), h, cfg.width(l), Some(temb));
        out.push(zero_conv(b, g, &format!("zero.{l}"), h, cfg.width(l)));
    }
    Ok(out)
}

/// All six parameter stores of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<F: Float = f32> {
    pub cfg: NetConfig,
    pub img_denoiser: ParamStore<F>,
    pub img_controller: ParamStore<F>,
    pub seg_backbone: ParamStore<F>,
    pub seg_denoiser: ParamStore<F>,
    pub seg_controller: ParamStore<F>,
    pub img_aided: ParamStore<F>,
}

/// Creates a role's parameters by tracing its forward pass on dummy inputs.
pub fn init_role<F: Float>(cfg: &NetConfig, role: Role, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new(role);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::mix_seed(seed, role as u64 + 1));
    let mut g = Graph::new();
    let mut b = Binder::init(&mut store, &mut rng);
    let (hq, m, k) = (cfg.hq_size, cfg.mask_size(), cfg.classes);
    let z = g.constant(Tensor::zeros(&[1, cfg.img_channels, hq, hq]));
    let s = g.constant(Tensor::zeros(&[1, k, m, m]));
    let ts = [0.0];
    match role {
        Role::ImgDenoiser => {
            img_denoiser_forward(&mut b, &mut g, cfg, z, &ts, None, None)?;
        }
        Role::ImgController => {
            img_controller_forward(&mut b, &mut g, cfg, z)?;
        }
        Role::SegBackbone => {
            let lq = g.constant(Tensor::zeros(&[1, cfg.img_channels, m, m]));
            seg_backbone_forward(&mut b, &mut g, cfg, lq)?;
        }
        Role::SegDenoiser => {
            let sw = cfg.seg_width;
            let f0 = g.constant(Tensor::zeros(&[1, sw, m, m]));
            let f1 = g.constant(Tensor::zeros(&[1, 2 * sw, m / 2, m / 2]));
            seg_denoiser_forward(&mut b, &mut g, cfg, s, &ts, &[f0, f1], None)?;
        }
        Role::SegController => {
            seg_controller_forward(&mut b, &mut g, cfg, s, z, &ts)?;
        }
        Role::ImgAided => {
            img_aided_forward(&mut b, &mut g, cfg, z, &ts)?;
        }
    }
    drop(b);
    Ok(store)
}

impl<F: Float> Models<F> {
    /// Fresh parameters; the Seg Controller starts as a copy of the Img
    /// Denoiser encoder.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let img_denoiser = init_role(cfg, Role::ImgDenoiser, seed)?;
        let mut seg_controller = init_role(cfg, Role::SegController, seed)?;
        seg_controller.copy_shared_from(&img_denoiser);
        Ok(Self {
            cfg: cfg.clone(),
            img_controller: init_role(cfg, Role::ImgController, seed)?,
            seg_backbone: init_role(cfg, Role::SegBackbone, seed)?,
            seg_denoiser: init_role(cfg, Role::SegDenoiser, seed)?,
            img_aided: init_role(cfg, Role::ImgAided, seed)?,
            img_denoiser,
            seg_controller,
        })
    }

    pub fn get(&self, role: Role) -> &ParamStore<F> {
        match role {
            Role::ImgDenoiser => &self.img_denoiser,
            Role::ImgController => &self.img_controller,
            Role::SegBackbone => &self.seg_backbone,
            Role::SegDenoiser => &self.seg_denoiser,
            Role::SegController => &self.seg_controller,
            Role::ImgAided => &self.img_aided,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut ParamStore<F> {
        match role {
            Role::ImgDenoiser => &mut self.img_denoiser,
            Role::ImgController => &mut self.img_controller,
            Role::SegBackbone => &mut self.seg_backbone,
            Role::SegDenoiser => &mut self.seg_denoiser,
            Role::SegController => &mut self.seg_controller,
            Role::ImgAided => &mut self.img_aided,
        }
    }

    pub fn cast<G: Float>(&self) -> Models<G> {
        Models {
            cfg: self.cfg.clone(),
            img_denoiser: self.img_denoiser.cast(),
            img_controller: self.img_controller.cast(),
            seg_backbone: self.seg_backbone.cast(),
            seg_denoiser: self.seg_denoiser.cast(),
            seg_controller: self.seg_controller.cast(),
            img_aided: self.img_aided.cast(),
        }
    }

    /// Resets every zero-initialised bridge output (Seg Controller and ImgAided
    /// zero convolutions) to zero.
    pub fn zero_bridge(&mut self) {
        for store in [&mut self.seg_controller, &mut self.img_aided] {
            for (name, t) in store.iter_mut() {
                if name.starts_with("zero.") {
                    t.data_mut().iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
    }
}

/// Per-role binders over one model for a single graph.
pub struct Binders<'a, F: Float = f32> {
    models: &'a Models<F>,
    trainable: Vec<Role>,
    binders: BTreeMap<Role, Binder<'a, F>>,
}

impl<'a, F: Float> Binders<'a, F> {
    pub fn new(models: &'a Models<F>, trainable: &[Role]) -> Self {
        Self {
            models,
            trainable: trainable.to_vec(),
            binders: BTreeMap::new(),
        }
    }

    pub fn cfg(&self) -> &'a NetConfig {
        &self.models.cfg
    }

    pub fn get(&mut self, role: Role) -> &mut Binder<'a, F> {
        let models = self.models;
        let trainable = self.trainable.contains(&role);
        self.binders
            .entry(role)
            .or_insert_with(|| Binder::new(models.get(role), trainable))
    }

    pub fn into_leaves(self) -> BTreeMap<Role, BTreeMap<String, NodeId>> {
        self.binders
            .into_iter()
            .map(|(r, b)| (r, b.into_leaves()))
            .collect()
    }
}

/// A recorded forward pass ending in a scalar loss.
pub struct Trace<F: Float = f32> {
    pub graph: Graph<F>,
    pub loss: NodeId,
    pub parts: Vec<(&'static str, NodeId)>,
    pub leaves: BTreeMap<Role, BTreeMap<String, NodeId>>,
}

impl<F: Float> Trace<F> {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).data()[0].as_f64()
    }

    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| self.graph.value(*id).data()[0].as_f64())
    }

    /// Gradients of the loss for every trainable parameter that was bound.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn gradients(&self) -> BTreeMap<Role, BTreeMap<String, Tensor<F>>> {
        let grads = self.graph.backward(self.loss);
        let mut out = BTreeMap::new();
        for (role, leaves) in &self.leaves {
            let mut m = BTreeMap::new();
            for (name, &id) in leaves {
                if !self.graph.needs_grad(id) {
                    continue;
                }
                let g = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(id).shape()));
                m.insert(name.clone(), g);
            }
            if !m.is_empty() {
                out.insert(*role, m);
            }
        }
        out
    }
}
