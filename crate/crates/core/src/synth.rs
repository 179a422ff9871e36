//! Procedural scenes with exact masks, and the blur → downsample → noise →
//! quantize degradation that produces the LQ input.
//!
//! Regions are aligned to a grid of `cell × cell` pixel blocks that matches the
//! mask field, and every non-background class carries a luminance texture that
//! is phase-locked to that grid. The textures average to zero over a cell, so
//! the 4× area downsample removes them: the LQ image carries colour only, and
//! the class identity of colour-ambiguous regions must come from elsewhere.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// splitmix64 finaliser applied to `seed + salt`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Texture frequencies `(p, q)` per class `1..`, in cycles per cell. Any two are
/// orthogonal over a 4×4 cell.
pub const TEXTURE_FREQS: [(usize, usize); 9] =
    [(1, 0), (0, 1), (1, 1), (1, 3), (2, 0), (0, 2), (2, 2), (1, 2), (2, 1)];

pub const MAX_CLASSES: usize = TEXTURE_FREQS.len() + 1;

/// Per-pixel RMS of every class texture.
pub const TEXTURE_RMS: f64 = 0.08;

const COLOR_JITTER: f64 = 0.08;

/// Base colours; classes 3, 4 and 5 are deliberately close.
const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.50, 0.50, 0.52],
    [0.45, 0.62, 0.85],
    [0.42, 0.55, 0.25],
    [0.70, 0.38, 0.30],
    [0.66, 0.42, 0.34],
    [0.72, 0.44, 0.28],
    [0.30, 0.30, 0.62],
    [0.80, 0.75, 0.35],
    [0.35, 0.65, 0.62],
    [0.62, 0.35, 0.62],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegClassSet {
    names: Vec<String>,
}

impl SegClassSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidRange(format!("need K >= 2 classes, got {}", names.len())));
        }
        if names[0] != "background" {
            return Err(Error::InvalidRange("class 0 must be `background`".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::InvalidRange("class names must be unique".into()));
        }
        Ok(Self { names })
    }

    /// The toy class set: background, sky, ground and numbered object classes.
    pub fn toy(k: usize) -> Result<Self> {
        if !(2..=MAX_CLASSES).contains(&k) {
            return Err(Error::InvalidRange(format!("K must lie in [2, {MAX_CLASSES}], got {k}")));
        }
        let names = (0..k)
            .map(|i| match i {
                0 => "background".to_string(),
                1 => "sky".to_string(),
                2 => "ground".to_string(),
                _ => format!("object{}", i - 2),
            })
            .collect();
        Self::new(names)
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Texture tile of class `c ≥ 1` at pixel `(x, y)` for a given cell size, with
/// unit amplitude.
pub fn texture_value(class: usize, x: usize, y: usize, cell: usize) -> f64 {
    let (p, q) = TEXTURE_FREQS[class - 1];
    let phase = 2.0 * std::f64::consts::PI * ((p * x + q * y) % cell) as f64 / cell as f64;
    (phase + std::f64::consts::FRAC_PI_4).cos()
}

/// Unit-RMS texture tile of a class over one cell, row-major.
pub fn texture_tile(class: usize, cell: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..cell * cell)
        .map(|i| texture_value(class, i % cell, i / cell, cell))
        .collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
    raw.into_iter().map(|v| v / rms).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGeometry {
    pub size: usize,
    pub cell: usize,
    pub factor: usize,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            size: 64,
            cell: 4,
            factor: 4,
        }
    }
}

impl SceneGeometry {
    pub fn grid(&self) -> usize {
        self.size / self.cell
    }

    pub fn lq_size(&self) -> usize {
        self.size / self.factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell < 2 || self.size % self.cell != 0 || self.grid() < 4 {
            return Err(Error::Config(format!(
                "cell {} must be >= 2 and divide size {} into at least 4 cells",
                self.cell, self.size
            )));
        }
        if self.factor == 0 || self.size % self.factor != 0 {
            return Err(Error::Config(format!("factor {} must divide size {}", self.factor, self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Tri { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Tri { p } => {
                let s = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (s(p[0], p[1]), s(p[1], p[2]), s(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, grid: f64) -> Shape {
        let lo = grid * 0.15;
        let hi = grid * 0.85;
        match rng.gen_range(0..3) {
            0 => Shape::Disc {
                cx: rng.gen_range(lo..hi),
                cy: rng.gen_range(lo..hi),
                r: rng.gen_range(grid * 0.12..grid * 0.28),
            },
            1 => {
                let (w, h) = (rng.gen_range(grid * 0.2..grid * 0.5), rng.gen_range(grid * 0.2..grid * 0.5));
                let x0 = rng.gen_range(0.0..grid - w);
                let y0 = rng.gen_range(0.0..grid - h);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                }
            }
            _ => {
                let (cx, cy) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                let r = rng.gen_range(grid * 0.2..grid * 0.35);
                let a0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let p = [0, 1, 2].map(|i| {
                    let a = a0 + i as f64 * std::f64::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Tri { p }
            }
        }
    }
}

/// Generates an HQ image `[3, size, size]` in `[0, 1]` and its mask
/// (`size × size` class indices).
pub fn gen_scene_with(geom: &SceneGeometry, seed: u64, k: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    geom.validate()?;
    SegClassSet::toy(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = geom.grid();
    let gf = grid as f64;
    let mut cells = vec![0usize; grid * grid];
    let mut regions = 0;

    let object_classes: Vec<usize> = if k > 3 { (3..k).collect() } else { (1..k).collect() };
    let use_sky = k > 1 && rng.gen_bool(0.75);
    let use_ground = k > 2 && rng.gen_bool(0.75);
    let slope_sky: f64 = rng.gen_range(-0.3..0.3);
    let horizon: f64 = rng.gen_range(gf * 0.2..gf * 0.4);
    let slope_ground: f64 = rng.gen_range(-0.3..0.3);
    let ground_line: f64 = rng.gen_range(gf * 0.6..gf * 0.8);
    for cy in 0..grid {
        for cx in 0..grid {
            let (x, y) = (cx as f64 + 0.5, cy as f64 + 0.5);
            let dx = x - gf / 2.0;
            if use_sky && y < horizon + slope_sky * dx {
                cells[cy * grid + cx] = 1;
            } else if use_ground && y > ground_line + slope_ground * dx {
                cells[cy * grid + cx] = 2;
            }
        }
    }
    regions += use_sky as usize + use_ground as usize;

    let mut n_shapes = rng.gen_range(1..=3);
    if regions + n_shapes < 2 {
        n_shapes = 2 - regions;
    }
    let mut shape_regions: Vec<(Shape, usize)> = Vec::new();
    for _ in 0..n_shapes {
        let class = *object_classes.choose(&mut rng).unwrap();
        shape_regions.push((Shape::random(&mut rng, gf), class));
    }
    for (shape, class) in &shape_regions {
        for cy in 0..grid {
            for cx in 0..grid {
                if shape.contains(cx as f64 + 0.5, cy as f64 + 0.5) {
                    cells[cy * grid + cx] = *class;
                }
            }
        }
    }

    // one jittered colour per region: background, sky, ground, then each shape
    let jitter = Normal::new(0.0, COLOR_JITTER).unwrap();
    let jittered = |class: usize, rng: &mut ChaCha8Rng| -> [f64; 3] {
        PALETTE[class].map(|c| (c + jitter.sample(rng)).clamp(0.15, 0.85))
    };
    let bg_color = jittered(0, &mut rng);
    let sky_color = jittered(1.min(k - 1), &mut rng);
    let ground_color = jittered(2.min(k - 1), &mut rng);
    let shape_colors: Vec<[f64; 3]> = shape_regions.iter().map(|(_, c)| jittered(*c, &mut rng)).collect();

    // region id per cell: the last shape covering a cell wins, as for classes
    let mut region_color = vec![bg_color; grid * grid];
    for cy in 0..grid {
        for cx in 0..grid {
            let i = cy * grid + cx;
            region_color[i] = match cells[i] {
                1 if use_sky => sky_color,
                2 if use_ground => ground_color,
                _ => bg_color,
            };
            for (si, (shape, _)) in shape_regions.iter().enumerate() {
                if shape.contains(cx as f64 + 0.5, cy as f64 + 0.5) {
                    region_color[i] = shape_colors[si];
                }
            }
        }
    }

    let size = geom.size;
    let amp = TEXTURE_RMS;
    let tiles: Vec<Vec<f64>> = (0..k)
        .map(|c| if c == 0 { vec![0.0; geom.cell * geom.cell] } else { texture_tile(c, geom.cell) })
        .collect();
    let mut img = vec![0f32; 3 * size * size];
    let mut mask = vec![0usize; size * size];
    for y in 0..size {
        for x in 0..size {
            let ci = (y / geom.cell) * grid + x / geom.cell;
            let class = cells[ci];
            let col = region_color[ci];
            let tex = amp * tiles[class][(y % geom.cell) * geom.cell + x % geom.cell];
            // sky darkens slightly towards the horizon
            let shade = if class == 1 && use_sky { -0.12 * y as f64 / size as f64 } else { 0.0 };
            for ch in 0..3 {
                img[(ch * size + y) * size + x] = (col[ch] + tex + shade).clamp(0.0, 1.0) as f32;
            }
            mask[y * size + x] = class;
        }
    }
    Ok((Tensor::new(&[3, size, size], img).unwrap(), mask))
}

pub fn gen_scene(seed: u64, k: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    gen_scene_with(&SceneGeometry::default(), seed, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quant_levels: u32,
}

impl DegradationParams {
    pub const QUANT_CHOICES: [u32; 4] = [32, 64, 128, 256];

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            blur_sigma: rng.gen_range(0.2..=3.0),
            noise_sigma: rng.gen_range(0.0..=0.1),
            quant_levels: *Self::QUANT_CHOICES.choose(rng).unwrap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.2..=3.0).contains(&self.blur_sigma)
            || !(0.0..=0.1).contains(&self.noise_sigma)
            || !Self::QUANT_CHOICES.contains(&self.quant_levels)
        {
            return Err(Error::InvalidRange(format!("degradation parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with symmetric boundary extension.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - r, w);
                    acc += kv * src[(ch * h + y) * w + sx] as f64;
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - r, h);
                    acc += kv * tmp[(ch * h + sy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// Area-average downsampling of a `[C, H, W]` image.
pub fn area_downsample(img: &Tensor<f32>, f: usize) -> Tensor<f32> {
    let s = img.shape();
    let batched = img.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap();
    crate::tensor::avg_pool(&batched, f)
        .reshape(&[s[0], s[1] / f, s[2] / f])
        .unwrap()
}

/// Intermediate stages of one degradation.
#[derive(Clone, Debug)]
pub struct DegradationTrace {
    pub blurred: Tensor<f32>,
    pub downsampled: Tensor<f32>,
    pub noisy: Tensor<f32>,
    pub quantized: Tensor<f32>,
    pub lq: Tensor<f32>,
}

/// Applies explicit degradation parameters; `noise_rng` drives the additive noise.
pub fn degrade_traced(
    hq: &Tensor<f32>,
    params: &DegradationParams,
    factor: usize,
    noise_rng: &mut ChaCha8Rng,
) -> Result<DegradationTrace> {
    params.validate()?;
    let s = hq.shape();
    if s.len() != 3 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(Error::ShapeMismatch(format!("cannot downsample {s:?} by {factor}")));
    }
    let blurred = gaussian_blur(hq, params.blur_sigma);
    let downsampled = area_downsample(&blurred, factor);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).unwrap();
    let mut noisy = downsampled.clone();
    if params.noise_sigma > 0.0 {
        for v in noisy.data_mut() {
            *v += noise.sample(noise_rng) as f32;
        }
    }
    let l = (params.quant_levels - 1) as f32;
    let quantized = noisy.map(|v| (v * l).round() / l);
    let lq = quantized.map(|v| v.clamp(0.0, 1.0));
    Ok(DegradationTrace {
        blurred,
        downsampled,
        noisy,
        quantized,
        lq,
    })
}

/// Degrades with parameters and noise drawn from `seed`.
pub fn degrade(hq: &Tensor<f32>, seed: u64) -> Result<(Tensor<f32>, DegradationParams)> {
    degrade_with_factor(hq, seed, 4)
}

pub fn degrade_with_factor(hq: &Tensor<f32>, seed: u64, factor: usize) -> Result<(Tensor<f32>, DegradationParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xDE6));
    let params = DegradationParams::sample(&mut rng);
    let trace = degrade_traced(hq, &params, factor, &mut rng)?;
    Ok((trace.lq, params))
}

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub hq: Tensor<f32>,
    pub mask: Vec<usize>,
    pub lq: Tensor<f32>,
    pub seed: u64,
    pub params: DegradationParams,
}

pub fn scene_pair(geom: &SceneGeometry, seed: u64, k: usize) -> Result<ScenePair> {
    let (hq, mask) = gen_scene_with(geom, seed, k)?;
    let (lq, params) = degrade_with_factor(&hq, seed, geom.factor)?;
    Ok(ScenePair {
        hq,
        mask,
        lq,
        seed,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible() {
        let a = gen_scene(42, 6).unwrap();
        let b = gen_scene(42, 6).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(gen_scene(43, 6).unwrap().1, a.1);
    }

    #[test]
    fn present_classes_cover_a_cell() {
        for seed in 0..50 {
            let (hq, mask) = gen_scene(seed, 6).unwrap();
            assert!(hq.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut counts = [0usize; 6];
            mask.iter().for_each(|&c| counts[c] += 1);
            assert!(counts.iter().all(|&n| n == 0 || n >= 16));
            let non_bg = counts[1..].iter().filter(|&&n| n > 0).count();
            assert!(non_bg >= 1, "seed {seed}");
        }
    }

    #[test]
    fn textures_vanish_under_area_average() {
        for c in 1..MAX_CLASSES {
            let t = texture_tile(c, 4);
            assert!(t.iter().sum::<f64>().abs() < 1e-9);
            let rms = (t.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_survives_mild_degradation() {
        let hq = Tensor::full(&[3, 64, 64], 0.4f32);
        let p = DegradationParams {
            blur_sigma: 0.2,
            noise_sigma: 0.0,
            quant_levels: 256,
        };
        let tr = degrade_traced(&hq, &p, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.lq.shape(), &[3, 16, 16]);
        assert!(tr.lq.data().iter().all(|v| (v - 0.4).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn noise_moment() {
        let hq = Tensor::full(&[3, 256, 256], 0.5f32);
        let p = DegradationParams {
            blur_sigma: 1.0,
            noise_sigma: 0.05,
            quant_levels: 256,
        };
        let tr = degrade_traced(&hq, &p, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = tr.noisy.data();
        let n = d.len() as f64;
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(n >= 1e4);
        assert!((sd / 0.05 - 1.0).abs() < 0.1, "sd {sd}");
    }

    #[test]
    fn degradation_is_seeded() {
        let (hq, _) = gen_scene(3, 6).unwrap();
        let a = degrade(&hq, 11).unwrap();
        let b = degrade(&hq, 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        a.1.validate().unwrap();
    }

    #[test]
    fn class_set_rules() {
        assert_eq!(SegClassSet::toy(6).unwrap().k(), 6);
        assert!(SegClassSet::toy(1).is_err());
        assert!(SegClassSet::toy(11).is_err());
        assert!(SegClassSet::new(vec!["background".into(), "a".into(), "a".into()]).is_err());
        assert!(SegClassSet::new(vec!["sky".into(), "background".into()]).is_err());
    }
}
