//! Image and segmentation metrics, and the texture judge that reads a class
//! field off a restored image.

use crate::error::{Error, Result};
use crate::synth::{texture_tile, TEXTURE_RMS};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

/// PSNR over the RGB-mean squared error, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    a.check_same(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(psnr_from_mse(mse, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
    }
}

fn gray(img: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("image [C, H, W] expected, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&img.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v as f64;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok((out, h, w))
}

/// Mean SSIM of the channel-mean images over all 8×8 windows (stride 1,
/// uniform weights) with data range `max_val`.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    a.check_same(b)?;
    let (ga, h, w) = gray(a)?;
    let (gb, ..) = gray(b)?;
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::ShapeMismatch(format!("image {h}x{w} smaller than the {win}x{win} window")));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let np = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (u, v) = (ga[y * w + x], gb[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = saa / np - ma * ma;
            let vb = sbb / np - mb * mb;
            let cov = sab / np - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pixel accuracy and mean IoU over the classes present in `gt`.
pub fn seg_accuracy(pred: &[usize], gt: &[usize], k: usize) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predicted vs {} reference pixels", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; k];
    let mut in_pred = vec![0usize; k];
    let mut in_gt = vec![0usize; k];
    let mut correct = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        for c in [p, g] {
            if c >= k {
                return Err(Error::ClassOutOfRange { value: c, classes: k });
            }
        }
        in_pred[p] += 1;
        in_gt[g] += 1;
        if p == g {
            inter[g] += 1;
            correct += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| in_gt[c] > 0).collect();
    let miou = present
        .iter()
        .map(|&c| inter[c] as f64 / (in_pred[c] + in_gt[c] - inter[c]) as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok((correct as f64 / gt.len() as f64, miou))
}

/// Minimum normalised texture response for a cell to count as textured.
pub const JUDGE_THRESHOLD: f64 = 0.5;

/// Reads one class per `cell × cell` block of an image from its luminance
/// texture: the block's zero-mean luminance is projected onto each class tile
/// and scaled by the expected texture amplitude. The best response wins if it
/// reaches [`JUDGE_THRESHOLD`]; otherwise the block is background.
pub fn texture_judge(img: &Tensor<f32>, cell: usize, k: usize) -> Result<Vec<usize>> {
    let (lum, h, w) = gray(img)?;
    if cell == 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::ShapeMismatch(format!("{h}x{w} image is not a whole number of {cell}-pixel cells")));
    }
    let tiles: Vec<Vec<f64>> = (1..k).map(|c| texture_tile(c, cell)).collect();
    let np = (cell * cell) as f64;
    let (gh, gw) = (h / cell, w / cell);
    let mut out = Vec::with_capacity(gh * gw);
    let mut block = vec![0.0; cell * cell];
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..cell {
                for dx in 0..cell {
                    block[dy * cell + dx] = lum[(gy * cell + dy) * w + gx * cell + dx];
                }
            }
            let mean = block.iter().sum::<f64>() / np;
            let mut best = (0, JUDGE_THRESHOLD);
            for (i, tile) in tiles.iter().enumerate() {
                let proj: f64 = block.iter().zip(tile).map(|(v, t)| (v - mean) * t).sum::<f64>() / np;
                let score = proj / TEXTURE_RMS;
                if score >= best.1 {
                    best = (i + 1, score);
                }
            }
            out.push(best.0);
        }
    }
    Ok(out)
}
