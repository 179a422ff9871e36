//! Ablation harness: every sampling mode over the validation split.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{psnr, seg_accuracy, ssim, texture_judge};
use crate::networks::Models;
use crate::sampler::{sample_batch, Mode, SampleInput, SampleOutput};
use crate::segdm::resize_codec_encode;
use crate::synth::mix_seed;

pub const TSV_HEADER: &str = "mode\tpsnr\tssim\tacc\tmiou\tn";

/// Scores of one restored scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    pub mode: Mode,
    pub seed: u64,
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub acc: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub psnr: f64,
    pub ssim: f64,
    pub acc: f64,
    pub miou: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub scenes: Vec<SceneScore>,
}

impl AblationTable {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(TSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.mode, r.psnr, r.ssim, r.acc, r.miou, r.n
            );
        }
        s
    }

    /// Human-readable table with the experiment numbers of the ablation modes.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<6}{:<17}{:>9}{:>9}{:>9}{:>9}{:>6}\n",
            "Exp", "mask source", "PSNR", "SSIM", "ACC", "mIoU", "n"
        );
        for r in &self.rows {
            let exp = r.mode.exp().map_or("-".to_string(), |e| format!("({e})"));
            let _ = writeln!(
                s,
                "{:<6}{:<17}{:>9.3}{:>9.4}{:>9.4}{:>9.4}{:>6}",
                exp,
                r.mode.as_str(),
                r.psnr,
                r.ssim,
                r.acc,
                r.miou,
                r.n
            );
        }
        s
    }
}

/// Scores a restored image against its reference: PSNR and SSIM on the image,
/// pixel accuracy and mIoU of the texture-judged class field against the
/// reference mask on the mask grid.
pub fn score_restoration(
    restored: &crate::Tensor<f32>,
    hq: &crate::Tensor<f32>,
    gt_mask: &[usize],
    cfg: &RunConfig,
) -> Result<(f64, f64, f64, f64)> {
    let net = &cfg.net;
    let m = net.mask_size();
    let gt = resize_codec_encode(gt_mask, net.hq_size, net.hq_size, m, m, net.classes)?;
    let judged = texture_judge(restored, net.patch, net.classes)?;
    let (acc, miou) = seg_accuracy(&judged, &gt, net.classes)?;
    Ok((psnr(restored, hq, 1.0)?, ssim(restored, hq, 1.0)?, acc, miou))
}

/// Samples every validation scene under each mode and seed. `progress` is
/// called after every batch with `(mode, done, total)`.
pub fn ablation_run(
    models: &Models<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    modes: &[Mode],
    seeds: &[u64],
    mut progress: impl FnMut(Mode, usize, usize),
) -> Result<AblationTable> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one mode and one seed".into()));
    }
    let gs = cfg.image_schedule()?;
    let ds = cfg.mask_schedule()?;
    let val = data.split(Split::Val);
    if val.is_empty() {
        return Err(Error::Config("dataset has no validation scenes".into()));
    }
    let mut masks = Vec::with_capacity(val.len());
    for s in &val {
        masks.push(s.mask.as_deref().ok_or_else(|| {
            Error::MissingGroundTruth(format!("validation scene {} has no mask file", s.index))
        })?);
    }
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&seed| (0..val.len()).map(move |i| (seed, i)))
        .collect();
    let mut rows = Vec::new();
    let mut scenes = Vec::new();
    for &mode in modes {
        let mut acc_sum = [0.0f64; 4];
        for (done, chunk) in jobs.chunks(cfg.eval.batch).enumerate() {
            let inputs: Vec<SampleInput> = chunk
                .iter()
                .map(|&(seed, i)| SampleInput {
                    lq: &val[i].lq,
                    gt_mask: Some(masks[i]),
                    seed: mix_seed(seed, val[i].index as u64),
                })
                .collect();
            let outs: Vec<SampleOutput> = sample_batch(models, &gs, &ds, &inputs, mode, &cfg.sampler)?;
            for (&(seed, i), out) in chunk.iter().zip(&outs) {
                let (p, s, a, u) = score_restoration(&out.image, &val[i].hq, masks[i], cfg)?;
                for (acc, v) in acc_sum.iter_mut().zip([p, s, a, u]) {
                    *acc += v;
                }
                scenes.push(SceneScore {
                    mode,
                    seed,
                    index: val[i].index,
                    psnr: p,
                    ssim: s,
                    acc: a,
                    miou: u,
                });
            }
            progress(mode, (done * cfg.eval.batch + chunk.len()).min(jobs.len()), jobs.len());
        }
        let n = jobs.len() as f64;
        rows.push(AblationRow {
            mode,
            psnr: acc_sum[0] / n,
            ssim: acc_sum[1] / n,
            acc: acc_sum[2] / n,
            miou: acc_sum[3] / n,
            n: jobs.len(),
        });
    }
    Ok(AblationTable { rows, scenes })
}
