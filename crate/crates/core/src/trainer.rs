//! Six-stage training pipeline: plans, learning-rate shapes, AdamW and the
//! resumable stage runner.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_name, load_store, save_store, Container, Entry};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::dmb::loss_joint;
use crate::error::{Error, Result};
use crate::networks::{Models, Trace};
use crate::nn::Role;
use crate::schedules::{gaussian_noise, DiscreteSchedule, GaussianSchedule};
use crate::segdm::{loss_backbone, loss_segdm, resize_codec_encode};
use crate::srdm::{encode_image, loss_seg2img, loss_sr, lq_backbone_input, lq_condition};
use crate::synth::mix_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seg2imgPretrain,
    SrdmJoint,
    BackbonePretrain,
    SegdmTrain,
    ImgaidedTrain,
    FinalJoint,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Seg2imgPretrain,
        Stage::SrdmJoint,
        Stage::BackbonePretrain,
        Stage::SegdmTrain,
        Stage::ImgaidedTrain,
        Stage::FinalJoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Seg2imgPretrain => "seg2img_pretrain",
            Stage::SrdmJoint => "srdm_joint",
            Stage::BackbonePretrain => "backbone_pretrain",
            Stage::SegdmTrain => "segdm_train",
            Stage::ImgaidedTrain => "imgaided_train",
            Stage::FinalJoint => "final_joint",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn trainable(self) -> &'static [Role] {
        match self {
            Stage::Seg2imgPretrain => &[Role::SegController],
            Stage::SrdmJoint => &[Role::ImgDenoiser, Role::SegController, Role::ImgController],
            Stage::BackbonePretrain => &[Role::SegBackbone],
            Stage::SegdmTrain => &[Role::SegDenoiser],
            Stage::ImgaidedTrain => &[Role::ImgAided],
            Stage::FinalJoint => &[Role::SegController, Role::ImgAided, Role::ImgController],
        }
    }

    pub fn frozen(self) -> &'static [Role] {
        match self {
            Stage::Seg2imgPretrain => &[Role::ImgDenoiser],
            Stage::SrdmJoint | Stage::BackbonePretrain => &[],
            Stage::SegdmTrain => &[Role::SegBackbone],
            Stage::ImgaidedTrain => &[Role::SegBackbone, Role::SegDenoiser],
            Stage::FinalJoint => &[Role::ImgDenoiser, Role::SegBackbone, Role::SegDenoiser],
        }
    }

    /// Every role the stage reads or writes.
    pub fn roles(self) -> Vec<Role> {
        let mut r: Vec<Role> = self.trainable().iter().chain(self.frozen()).copied().collect();
        r.sort();
        r
    }

    /// The latest earlier stage that touched `role`, which provides its input
    /// checkpoint.
    pub fn provider(self, role: Role) -> Option<Stage> {
        Stage::ALL[..self.index()]
            .iter()
            .rev()
            .find(|s| s.roles().contains(&role))
            .copied()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Fixed { lr: f64 },
    Poly { lr0: f64, power: f64 },
    Halving { lr0: f64, every: usize, floor: f64 },
}

impl LrSchedule {
    /// Same shape with every rate multiplied by `f`; the halving floor is kept.
    pub fn scaled(self, f: f64) -> Self {
        match self {
            LrSchedule::Fixed { lr } => LrSchedule::Fixed { lr: lr * f },
            LrSchedule::Poly { lr0, power } => LrSchedule::Poly { lr0: lr0 * f, power },
            LrSchedule::Halving { lr0, every, floor } => LrSchedule::Halving { lr0: lr0 * f, every, floor },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Fixed { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Poly { lr0, power } => lr0 > 0.0 && lr0.is_finite() && power >= 0.0 && power.is_finite(),
            LrSchedule::Halving { lr0, every, floor } => {
                lr0 > 0.0 && lr0.is_finite() && every > 0 && floor >= 0.0 && floor.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Learning rate at `step ∈ [0, total)`.
pub fn lr_at(s: &LrSchedule, step: usize, total: usize) -> Result<f64> {
    if step >= total {
        return Err(Error::InvalidRange(format!("step {step} outside [0, {total})")));
    }
    Ok(match *s {
        LrSchedule::Fixed { lr } => lr,
        LrSchedule::Poly { lr0, power } => lr0 * (1.0 - step as f64 / total as f64).powf(power),
        LrSchedule::Halving { lr0, every, floor } => {
            let halvings = (step / every).min(i32::MAX as usize) as i32;
            (lr0 * 0.5f64.powi(halvings)).max(floor)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    #[default]
    Desk,
}

pub const DESK_ITERATION_DIVISOR: usize = 100;
pub const DESK_BATCH_DIVISOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub iterations: usize,
    pub batch: usize,
    pub lr: LrSchedule,
}

impl StagePlan {
    pub fn trainable(&self) -> &'static [Role] {
        self.stage.trainable()
    }

    pub fn frozen(&self) -> &'static [Role] {
        self.stage.frozen()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::Config(format!("stage {}: iterations and batch must be positive", self.stage)));
        }
        self.lr.validate()
    }
}

/// The six stages in order at paper or desk scale. Desk scale divides
/// iterations (and the halving interval) by 100 and batches by 4.
pub fn make_default_plan(scale: Scale) -> Vec<StagePlan> {
    let paper = [
        (Stage::Seg2imgPretrain, 160_000, 32, LrSchedule::Fixed { lr: 1e-5 }),
        (Stage::SrdmJoint, 160_000, 32, LrSchedule::Fixed { lr: 5e-5 }),
        (Stage::BackbonePretrain, 160_000, 16, LrSchedule::Poly { lr0: 6e-5, power: 1.0 }),
        (
            Stage::SegdmTrain,
            320_000,
            32,
            LrSchedule::Halving {
                lr0: 1.5e-4,
                every: 20_000,
                floor: 1e-6,
            },
        ),
        (Stage::ImgaidedTrain, 160_000, 32, LrSchedule::Fixed { lr: 1e-5 }),
        (Stage::FinalJoint, 320_000, 32, LrSchedule::Fixed { lr: 5e-5 }),
    ];
    paper
        .into_iter()
        .map(|(stage, iterations, batch, lr)| match scale {
            Scale::Paper => StagePlan {
                stage,
                iterations,
                batch,
                lr,
            },
            Scale::Desk => StagePlan {
                stage,
                iterations: iterations / DESK_ITERATION_DIVISOR,
                batch: batch / DESK_BATCH_DIVISOR,
                lr: match lr {
                    LrSchedule::Halving { lr0, every, floor } => LrSchedule::Halving {
                        lr0,
                        every: every / DESK_ITERATION_DIVISOR,
                        floor,
                    },
                    other => other,
                },
            },
        })
        .collect()
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;
pub const CLIP_NORM: f64 = 1.0;

type Moments = BTreeMap<Role, BTreeMap<String, Tensor<f32>>>;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Moments,
    v: Moments,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay: WEIGHT_DECAY,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn step(&mut self, models: &mut Models<f32>, grads: &Moments, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (&role, gmap) in grads {
            let store = models.get_mut(role);
            let ms = self.m.entry(role).or_default();
            let vs = self.v.entry(role).or_default();
            for (name, g) in gmap {
                let p = store.get_mut(name).expect("gradient for a bound parameter");
                let m = ms.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                let v = vs.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                let (lr, eps, wd) = (lr as f32, self.eps as f32, self.weight_decay as f32);
                let (bc1, bc2) = (bc1 as f32, bc2 as f32);
                for (((pv, &gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    let mh = *mv / bc1;
                    let vh = *vv / bc2;
                    *pv -= lr * (mh / (vh.sqrt() + eps) + wd * *pv);
                }
            }
        }
    }

    fn to_container(&self, c: &mut Container) {
        c.push_u64("adam.t", vec![self.t]);
        for (prefix, moments) in [("adam.m", &self.m), ("adam.v", &self.v)] {
            for (role, map) in moments {
                for (name, t) in map {
                    c.push_tensor(format!("{prefix}/{role}/{name}"), t.clone());
                }
            }
        }
    }

    fn from_container(c: &Container) -> Result<Self> {
        let mut opt = AdamW::default();
        for (name, e) in &c.entries {
            match (name.as_str(), e) {
                ("adam.t", Entry::U64(v)) if v.len() == 1 => opt.t = v[0],
                (n, Entry::F32(t)) if n.starts_with("adam.") => {
                    let mut parts = n.splitn(3, '/');
                    let (kind, role, pname) = (parts.next(), parts.next(), parts.next());
                    let (Some(kind), Some(role), Some(pname)) = (kind, role, pname) else {
                        return Err(Error::Malformed(format!("resume entry {n}")));
                    };
                    let role: Role = role.parse()?;
                    let target = match kind {
                        "adam.m" => &mut opt.m,
                        "adam.v" => &mut opt.v,
                        _ => return Err(Error::Malformed(format!("resume entry {n}"))),
                    };
                    target.entry(role).or_default().insert(pname.to_string(), t.clone());
                }
                _ => {}
            }
        }
        Ok(opt)
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Moments, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|m| m.values())
        .flat_map(|t| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut().flat_map(|m| m.values_mut()) {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Training tensors for one split, preprocessed once.
pub struct TrainData {
    /// Encoded HQ images `[3, S, S]`.
    pub z0: Vec<Tensor<f32>>,
    /// Encoded LQ images upsampled to the HQ grid.
    pub z_lq: Vec<Tensor<f32>>,
    /// Encoded LQ images on the mask grid.
    pub lq_in: Vec<Tensor<f32>>,
    /// Clean masks on the mask grid.
    pub s0: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset, split: Split, cfg: &RunConfig) -> Result<Self> {
        let net = &cfg.net;
        let m = net.mask_size();
        let samples = ds.split(split);
        if samples.is_empty() {
            return Err(Error::Config(format!("dataset has no {split:?} scenes")));
        }
        if ds.manifest.classes != net.classes || ds.manifest.geometry.size != net.hq_size {
            return Err(Error::Config(format!(
                "dataset (K={}, size {}) does not match the network (K={}, size {})",
                ds.manifest.classes, ds.manifest.geometry.size, net.classes, net.hq_size
            )));
        }
        let mut out = TrainData {
            z0: Vec::new(),
            z_lq: Vec::new(),
            lq_in: Vec::new(),
            s0: Vec::new(),
        };
        for s in samples {
            let mask = s.mask.as_ref().ok_or_else(|| {
                Error::MissingGroundTruth(format!("training scene {} has no mask file", s.index))
            })?;
            let lq = s.lq.clone();
            out.z0.push(encode_image(&s.hq));
            out.z_lq.push(lq_condition(&lq, net.hq_size).item(0));
            out.lq_in.push(lq_backbone_input(&lq, m).item(0));
            out.s0.push(resize_codec_encode(mask, net.hq_size, net.hq_size, m, m, net.classes)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }
}

/// Loads every role a stage touches: from the providing stage's checkpoint
/// when an earlier stage touched it, otherwise from the seeded initialisation.
pub fn load_stage_inputs(cfg: &RunConfig, stage: Stage, ckpt_dir: &Path) -> Result<Models<f32>> {
    let mut models = Models::init(&cfg.net, cfg.seeds.model)?;
    for role in stage.roles() {
        if let Some(src) = stage.provider(role) {
            let path = ckpt_dir.join(checkpoint_name(src.as_str(), role));
            if !path.exists() {
                return Err(Error::MissingCheckpoint {
                    stage: src.as_str().to_string(),
                    role: role.as_str().to_string(),
                    path,
                });
            }
            let store = load_store(&path, role)?;
            store.check_matches(models.get(role))?;
            *models.get_mut(role) = store;
        }
    }
    Ok(models)
}

/// Loads the final parameters of every role from the stages that last wrote them.
pub fn load_final_models(cfg: &RunConfig, ckpt_dir: &Path) -> Result<Models<f32>> {
    let mut models = Models::init(&cfg.net, cfg.seeds.model)?;
    for role in Role::ALL {
        let src = Stage::ALL
            .iter()
            .rev()
            .find(|s| s.roles().contains(&role))
            .copied()
            .expect("every role is touched");
        let path = ckpt_dir.join(checkpoint_name(src.as_str(), role));
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                stage: src.as_str().to_string(),
                role: role.as_str().to_string(),
                path,
            });
        }
        let store = load_store(&path, role)?;
        store.check_matches(models.get(role))?;
        *models.get_mut(role) = store;
    }
    Ok(models)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub parts: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    /// Loss of every step from 0.
    pub losses: Vec<f64>,
    pub rows: Vec<LogRow>,
    /// Steps executed by this call (less than the plan after a resume).
    pub steps_run: usize,
}

pub fn log_path(ckpt_dir: &Path, stage: Stage) -> PathBuf {
    ckpt_dir.join(format!("{stage}.log.csv"))
}

pub fn resume_path(ckpt_dir: &Path, stage: Stage) -> PathBuf {
    ckpt_dir.join(format!("{stage}.resume.sgsr"))
}

/// Mean of windows of `every` consecutive steps.
fn log_rows(plan: &StagePlan, losses: &[f64], parts: &[(f64, f64)], every: usize) -> Result<Vec<LogRow>> {
    let joint = plan.stage == Stage::FinalJoint;
    let mut rows = Vec::new();
    let mut end = every;
    while end <= losses.len() {
        let w = &losses[end - every..end];
        let p = joint.then(|| {
            let pw = &parts[end - every..end];
            let n = every as f64;
            (pw.iter().map(|p| p.0).sum::<f64>() / n, pw.iter().map(|p| p.1).sum::<f64>() / n)
        });
        rows.push(LogRow {
            step: end,
            loss: w.iter().sum::<f64>() / every as f64,
            lr: lr_at(&plan.lr, end - 1, plan.iterations)?,
            parts: p,
        });
        end += every;
    }
    Ok(rows)
}

pub fn write_log(path: &Path, stage: Stage, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from(if stage == Stage::FinalJoint {
        "step,loss,lr,part_sr,part_iac\n"
    } else {
        "step,loss,lr\n"
    });
    for r in rows {
        s.push_str(&format!("{},{},{}", r.step, r.loss, r.lr));
        if let Some((a, b)) = r.parts {
            s.push_str(&format!(",{a},{b}"));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Draws a batch for one step: scene indices, image steps, noise and the RNG
/// for the mask corruption, all from `(seed, step)`.
struct Batch {
    idx: Vec<usize>,
    ts: Vec<usize>,
    eps: Tensor<f32>,
    rng: ChaCha8Rng,
}

fn draw_batch(seed: u64, step: usize, b: usize, n: usize, t_max: usize, shape: &[usize]) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64));
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
    // mask steps uniform over [1, T]; image steps one below
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t_max) - 1).collect();
    let items: Vec<Tensor<f32>> = (0..b).map(|_| gaussian_noise(shape, &mut rng)).collect();
    let eps = Tensor::batch(&items)?;
    Ok(Batch { idx, ts, eps, rng })
}

fn gather(v: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = idx.iter().map(|&i| v[i].clone()).collect();
    Tensor::batch(&items)
}

/// The stage objective on one batch.
pub fn stage_trace(
    stage: Stage,
    models: &Models<f32>,
    cfg: &RunConfig,
    gs: &GaussianSchedule,
    dsch: &DiscreteSchedule,
    data: &TrainData,
    seed: u64,
    step: usize,
    batch: usize,
) -> Result<Trace<f32>> {
    let shape = data.z0[0].shape().to_vec();
    let mut bt = draw_batch(seed, step, batch, data.len(), gs.steps(), &shape)?;
    let s0: Vec<usize> = bt.idx.iter().flat_map(|&i| data.s0[i].iter().copied()).collect();
    let train = stage.trainable();
    let ts_mask: Vec<usize> = bt.ts.iter().map(|t| t + 1).collect();
    match stage {
        Stage::Seg2imgPretrain => {
            let z0 = gather(&data.z0, &bt.idx)?;
            loss_seg2img(models, train, gs, dsch, &z0, &s0, &bt.ts, &bt.eps, &mut bt.rng)
        }
        Stage::SrdmJoint => {
            let z0 = gather(&data.z0, &bt.idx)?;
            let zl = gather(&data.z_lq, &bt.idx)?;
            loss_sr(models, train, gs, dsch, &z0, &s0, &zl, &bt.ts, &bt.eps, &mut bt.rng)
        }
        Stage::BackbonePretrain => loss_backbone(models, train, &gather(&data.lq_in, &bt.idx)?, &s0),
        Stage::SegdmTrain => {
            let x = gather(&data.lq_in, &bt.idx)?;
            loss_segdm(models, train, dsch, gs, &x, &s0, &ts_mask, None, &mut bt.rng)
        }
        Stage::ImgaidedTrain => {
            let x = gather(&data.lq_in, &bt.idx)?;
            let z0 = gather(&data.z0, &bt.idx)?;
            loss_segdm(models, train, dsch, gs, &x, &s0, &ts_mask, Some((&z0, &bt.eps)), &mut bt.rng)
        }
        Stage::FinalJoint => {
            let z0 = gather(&data.z0, &bt.idx)?;
            let zl = gather(&data.z_lq, &bt.idx)?;
            let x = gather(&data.lq_in, &bt.idx)?;
            loss_joint(models, train, gs, dsch, &z0, &s0, &zl, &x, &bt.ts, &bt.eps, cfg.lambda, &mut bt.rng)
        }
    }
}

fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    mix_seed(cfg.seeds.train, 0x57A6E + stage.index() as u64)
}

fn save_resume(
    path: &Path,
    models: &Models<f32>,
    stage: Stage,
    opt: &AdamW,
    losses: &[f64],
    parts: &[(f64, f64)],
) -> Result<()> {
    let mut c = Container::new("resume");
    c.push_u64("step", vec![losses.len() as u64]);
    c.push_u64("losses", losses.iter().map(|l| l.to_bits()).collect());
    c.push_u64("parts", parts.iter().flat_map(|p| [p.0.to_bits(), p.1.to_bits()]).collect());
    for &role in stage.trainable() {
        for (name, t) in models.get(role).iter() {
            c.push_tensor(format!("param/{role}/{name}"), t.clone());
        }
    }
    opt.to_container(&mut c);
    c.save(path)
}

fn u64s<'a>(c: &'a Container, name: &str) -> Result<&'a [u64]> {
    match c.get(name) {
        Some(Entry::U64(v)) => Ok(v),
        _ => Err(Error::Malformed(format!("resume file lacks {name}"))),
    }
}

type Restored = (AdamW, Vec<f64>, Vec<(f64, f64)>);

fn load_resume(path: &Path, models: &mut Models<f32>, stage: Stage) -> Result<Restored> {
    let c = Container::load(path)?;
    if c.tag != "resume" {
        return Err(Error::Malformed(format!("{} is not a resume file", path.display())));
    }
    let step = u64s(&c, "step")?[0] as usize;
    let losses: Vec<f64> = u64s(&c, "losses")?.iter().map(|&b| f64::from_bits(b)).collect();
    let raw = u64s(&c, "parts")?;
    let parts: Vec<(f64, f64)> = raw
        .chunks_exact(2)
        .map(|p| (f64::from_bits(p[0]), f64::from_bits(p[1])))
        .collect();
    if losses.len() != step || parts.len() != step {
        return Err(Error::Malformed("resume step count disagrees with its history".into()));
    }
    for &role in stage.trainable() {
        let store = models.get_mut(role);
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let key = format!("param/{role}/{name}");
            match c.get(&key) {
                Some(Entry::F32(t)) if t.shape() == store.get(&name).unwrap().shape() => {
                    *store.get_mut(&name).unwrap() = t.clone();
                }
                _ => return Err(Error::MissingParam(format!("{key} in {}", path.display()))),
            }
        }
    }
    Ok((AdamW::from_container(&c)?, losses, parts))
}

/// Runs one stage, writing `<stage>.<role>.sgsr` for every role it touches and
/// `<stage>.log.csv`. With `resume`, continues from `<stage>.resume.sgsr` if
/// present. `progress` is called after every step with `(step, loss)`.
pub fn run_stage(
    plan: &StagePlan,
    cfg: &RunConfig,
    data: &TrainData,
    ckpt_dir: &Path,
    resume: bool,
    mut progress: impl FnMut(usize, f64),
) -> Result<StageReport> {
    plan.validate()?;
    cfg.validate()?;
    let stage = plan.stage;
    let gs = cfg.image_schedule()?;
    let dsch = cfg.mask_schedule()?;
    let mut models = load_stage_inputs(cfg, stage, ckpt_dir)?;
    let every = cfg.train.log_every;
    let ck_every = cfg.train.checkpoint_every;
    let rpath = resume_path(ckpt_dir, stage);
    let (mut opt, mut losses, mut parts) = if resume && rpath.exists() {
        load_resume(&rpath, &mut models, stage)?
    } else {
        (AdamW::default(), Vec::new(), Vec::new())
    };
    if losses.len() > plan.iterations {
        return Err(Error::Config(format!(
            "resume point {} is beyond the plan's {} iterations",
            losses.len(),
            plan.iterations
        )));
    }
    fs::create_dir_all(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))?;
    let seed = stage_seed(cfg, stage);
    let start = losses.len();
    for step in start..plan.iterations {
        let trace = stage_trace(stage, &models, cfg, &gs, &dsch, data, seed, step, plan.batch)?;
        let loss = trace.loss_value();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{stage} loss at step {step}")));
        }
        let p = (trace.part("sr").unwrap_or(0.0), trace.part("iac").unwrap_or(0.0));
        let mut grads = trace.gradients();
        drop(trace);
        clip_global_norm(&mut grads, CLIP_NORM);
        let lr = lr_at(&plan.lr, step, plan.iterations)?;
        opt.step(&mut models, &grads, lr);
        losses.push(loss);
        parts.push(p);
        progress(step, loss);
        let done = step + 1;
        if ck_every > 0 && done % ck_every == 0 && done < plan.iterations {
            save_resume(&rpath, &models, stage, &opt, &losses, &parts)?;
            write_log(&log_path(ckpt_dir, stage), stage, &log_rows(plan, &losses, &parts, every)?)?;
        }
    }
    for role in stage.roles() {
        save_store(&ckpt_dir.join(checkpoint_name(stage.as_str(), role)), models.get(role))?;
    }
    let rows = log_rows(plan, &losses, &parts, every)?;
    write_log(&log_path(ckpt_dir, stage), stage, &rows)?;
    if rpath.exists() {
        fs::remove_file(&rpath).map_err(|e| Error::io(&rpath, e))?;
    }
    Ok(StageReport {
        losses,
        rows,
        steps_run: plan.iterations - start,
    })
}
