//! On-disk dataset layout and 8-bit PNG image I/O.
//!
//! ```text
//! root/manifest.json
//! root/hq/NNNNNN.png    RGB
//! root/lq/NNNNNN.png    RGB
//! root/mask/NNNNNN.png  grayscale, value = class index
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{mix_seed, scene_pair, DegradationParams, SceneGeometry};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// 90/10 split decided by a hash of the scene seed.
pub fn split_for(seed: u64) -> Split {
    if mix_seed(seed, 0x5B17) % 10 == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub degradation: DegradationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub classes: usize,
    pub seed: u64,
    pub geometry: SceneGeometry,
    pub scenes: Vec<SceneRecord>,
}

pub fn file_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit RGB.
pub fn write_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch(format!("RGB image expected, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(to_u8(img.data()[(c * h + y) * w + x]));
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &buf)
}

/// Display colours for class indices, cycled beyond ten classes.
pub const MASK_COLORS: [[f32; 3]; 10] = [
    [0.10, 0.10, 0.10],
    [0.90, 0.30, 0.25],
    [0.25, 0.70, 0.30],
    [0.25, 0.45, 0.90],
    [0.95, 0.80, 0.20],
    [0.70, 0.35, 0.85],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
    [0.95, 0.60, 0.75],
];

/// Colours an `h × w` class field as a `[3, h, w]` image.
pub fn mask_to_rgb(mask: &[usize], h: usize, w: usize) -> Result<Tensor<f32>> {
    if mask.len() != h * w {
        return Err(Error::ShapeMismatch(format!("{} mask values for {h}x{w}", mask.len())));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, &c) in mask.iter().enumerate() {
        let col = MASK_COLORS[c % MASK_COLORS.len()];
        for (ch, v) in col.iter().enumerate() {
            data[ch * h * w + i] = *v;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a class field as 8-bit grayscale.
pub fn write_mask(path: &Path, mask: &[usize], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::ShapeMismatch(format!("{} mask values for {h}x{w}", mask.len())));
    }
    let buf: Vec<u8> = mask
        .iter()
        .map(|&c| u8::try_from(c).map_err(|_| Error::ClassOutOfRange { value: c, classes: 256 }))
        .collect::<Result<_>>()?;
    write_png(path, w, h, png::ColorType::Grayscale, &buf)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |e: png::DecodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(img_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Reads an 8-bit PNG as a `[3, H, W]` image in `[0, 1]`. Gray inputs are
/// replicated and alpha is dropped.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, color, buf) = read_png(path)?;
    let ch = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "unexpanded palette image".into(),
            })
        }
    };
    let mut out = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let src = if ch < 3 { 0 } else { c };
            out[c * h * w + p] = buf[p * ch + src] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Reads a grayscale class field, returning `(classes, h, w)`.
pub fn read_mask(path: &Path, k: usize) -> Result<(Vec<usize>, usize, usize)> {
    let (w, h, color, buf) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("mask must be 8-bit grayscale, found {color:?}"),
        });
    }
    let classes: Vec<usize> = buf.iter().map(|&v| v as usize).collect();
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::ClassOutOfRange { value: bad, classes: k });
    }
    Ok((classes, h, w))
}

/// Generates `n` scenes and writes the full layout under `out`.
pub fn build_dataset(n: usize, seed: u64, k: usize, geom: &SceneGeometry, out: &Path) -> Result<Manifest> {
    geom.validate()?;
    let mut scenes = Vec::with_capacity(n);
    for index in 0..n {
        let scene_seed = mix_seed(seed, index as u64);
        let pair = scene_pair(geom, scene_seed, k)?;
        let name = file_name(index);
        write_rgb(&out.join("hq").join(&name), &pair.hq)?;
        write_rgb(&out.join("lq").join(&name), &pair.lq)?;
        write_mask(&out.join("mask").join(&name), &pair.mask, geom.size, geom.size)?;
        scenes.push(SceneRecord {
            index,
            seed: scene_seed,
            split: split_for(scene_seed),
            degradation: pair.params,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        classes: k,
        seed,
        geometry: *geom,
        scenes,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One loaded scene; `mask` may be absent for inputs without ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub hq: Tensor<f32>,
    pub lq: Tensor<f32>,
    pub mask: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: manifest version {} unsupported",
                mpath.display(),
                manifest.version
            )));
        }
        let g = manifest.geometry;
        let mut samples = Vec::with_capacity(manifest.scenes.len());
        for rec in &manifest.scenes {
            let name = file_name(rec.index);
            let hq = read_rgb(&root.join("hq").join(&name))?;
            let lq = read_rgb(&root.join("lq").join(&name))?;
            if hq.shape() != [3, g.size, g.size] || lq.shape() != [3, g.lq_size(), g.lq_size()] {
                return Err(Error::ShapeMismatch(format!("scene {name} does not match the manifest geometry")));
            }
            let mpath = root.join("mask").join(&name);
            let mask = if mpath.exists() {
                let (m, h, w) = read_mask(&mpath, manifest.classes)?;
                if (h, w) != (g.size, g.size) {
                    return Err(Error::ShapeMismatch(format!("mask {name} is {h}x{w}")));
                }
                Some(m)
            } else {
                None
            };
            samples.push(Sample {
                index: rec.index,
                hq,
                lq,
                mask,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.manifest
            .scenes
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == split)
            .map(|(_, s)| s)
            .collect()
    }
}
