//! Forward processes and reverse-step algebra for the Gaussian image chain and
//! the categorical mask chain.
//!
//! The image chain is indexed `t ∈ [0, T)` with `ᾱ(-1) = 1`. The mask chain is
//! indexed `t ∈ [0, T]` where `t = 0` is the clean mask; mask step `t` pairs with
//! image step `t - 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
}

fn linear_betas(t: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidRange("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if t == 1 {
        return Ok(vec![beta_start]);
    }
    let step = (beta_end - beta_start) / (t - 1) as f64;
    Ok((0..t)
        .map(|i| if i == t - 1 { beta_end } else { beta_start + step * i as f64 })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl GaussianSchedule {
    pub fn new(t: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        let betas = match kind {
            BetaKind::Linear => linear_betas(t, beta_start, beta_end)?,
        };
        Ok(Self::from_betas(betas))
    }

    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(t, beta_start, beta_end, BetaKind::Linear)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t`, with `ᾱ(-1) = 1`.
    pub fn alpha_bar(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bars[t as usize]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidRange(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1−ᾱ_t)·eps`.
pub fn q_sample_continuous<F: Float>(
    sched: &GaussianSchedule,
    z0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bars[t];
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// DDIM noise scale for the pair `(t, t_prev)`.
pub fn ddim_sigma(sched: &GaussianSchedule, t: usize, t_prev: i64, eta: f64) -> f64 {
    let ab_t = sched.alpha_bar(t as i64);
    let ab_p = sched.alpha_bar(t_prev);
    eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt()
}

/// One DDIM transition from `t` to `t_prev`. `noise` is required exactly when
/// the step is stochastic (`σ > 0`) and ignored otherwise.
pub fn ddim_step<F: Float>(
    sched: &GaussianSchedule,
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_prev: i64,
    eta: f64,
    noise: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    if t_prev >= t as i64 || t_prev < -1 {
        return Err(Error::TimestepOrder {
            t: t as i64,
            t_prev,
        });
    }
    sched.check_t(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidRange(format!("eta {eta} outside [0, 1]")));
    }
    z_t.check_same(eps_hat)?;
    let ab_t = sched.alpha_bar(t as i64);
    let ab_p = sched.alpha_bar(t_prev);
    let sigma = ddim_sigma(sched, t, t_prev, eta);
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sp = ab_p.sqrt();
    let mut out: Vec<F> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let (z, e) = (z.as_f64(), e.as_f64());
            let x0 = (z - sb * e) / sa;
            F::of(sp * x0 + dir * e)
        })
        .collect();
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::InvalidRange(format!("stochastic step {t}->{t_prev} needs noise"))
        })?;
        z_t.check_same(noise)?;
        for (o, &n) in out.iter_mut().zip(noise.data()) {
            *o += F::of(sigma * n.as_f64());
        }
    }
    Tensor::new(z_t.shape(), out)
}

/// Predicted clean sample `ẑ0 = (z_t − sqrt(1−ᾱ_t)·eps_hat)/sqrt(ᾱ_t)`.
pub fn predict_x0<F: Float>(
    sched: &GaussianSchedule,
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bars[t];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, |z, e| F::of((z.as_f64() - sb * e.as_f64()) / sa))
}

pub fn gaussian_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Categorical mask field with its diffusion timestep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskState {
    pub classes: Vec<usize>,
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl MaskState {
    pub fn new(classes: Vec<usize>, h: usize, w: usize, t: usize, k: usize) -> Result<Self> {
        if classes.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} values for {h}x{w}",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::ClassOutOfRange {
                value: bad,
                classes: k,
            });
        }
        Ok(Self { classes, h, w, t })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Diffusing image tensor with its timestep (`-1` denotes the clean sample).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub data: Tensor<f32>,
    pub t: i64,
}

/// Uniform-kernel categorical corruption. `q(t)` holds the transition into mask
/// step `t` (for `t ∈ [1, T]`) and `q_bar(t)` the cumulative product with
/// `q_bar(0) = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSchedule {
    k: usize,
    betas: Vec<f64>,
    q: Vec<Vec<f64>>,
    q_bar: Vec<Vec<f64>>,
    alpha_bars: Vec<f64>,
}

fn uniform_kernel(k: usize, keep: f64) -> Vec<f64> {
    let off = (1.0 - keep) / k as f64;
    let mut m = vec![off; k * k];
    for i in 0..k {
        m[i * k + i] += keep;
    }
    m
}

fn matmul(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..k {
                out[i * k + j] += av * b[l * k + j];
            }
        }
    }
    out
}

impl DiscreteSchedule {
    pub fn linear(t: usize, k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidRange(format!("need K >= 2, got {k}")));
        }
        Ok(Self::from_betas(k, linear_betas(t, beta_start, beta_end)?))
    }

    /// Builds from explicit rates; each must lie in `[0, 1)`.
    pub fn from_betas(k: usize, betas: Vec<f64>) -> Self {
        assert!(k >= 2 && !betas.is_empty());
        assert!(betas.iter().all(|b| (0.0..1.0).contains(b)));
        let mut q = vec![uniform_kernel(k, 1.0)];
        let mut q_bar = vec![uniform_kernel(k, 1.0)];
        let mut alpha_bars = vec![1.0];
        for &b in &betas {
            let step = uniform_kernel(k, 1.0 - b);
            let cum = matmul(q_bar.last().unwrap(), &step, k);
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
            q.push(step);
            q_bar.push(cum);
        }
        Self {
            k,
            betas,
            q,
            q_bar,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Row-major `K×K` single-step matrix into step `t ∈ [1, T]`.
    pub fn q(&self, t: usize) -> &[f64] {
        assert!(t >= 1, "q(0) is undefined");
        &self.q[t]
    }

    /// Row-major `K×K` cumulative matrix for `t ∈ [0, T]`.
    pub fn q_bar(&self, t: usize) -> &[f64] {
        &self.q_bar[t]
    }

    /// `∏_{i≤t}(1−β_i)` with the empty product at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Transition matrix from step `t_prev` to step `t`. Adjacent steps use the
    /// stored single-step matrix; wider spans use the uniform-kernel closed form
    /// with keep probability `ᾱ_t / ᾱ_{t_prev}`.
    pub fn span(&self, t_prev: usize, t: usize) -> Vec<f64> {
        assert!(t_prev < t);
        if t_prev + 1 == t {
            self.q[t].clone()
        } else {
            uniform_kernel(self.k, self.alpha_bars[t] / self.alpha_bars[t_prev])
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidRange(format!(
                "mask timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding residue: fall back to the last class with mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Resamples every pixel of a clean mask from its row of `Q_bar[t]`.
pub fn q_sample_discrete<R: Rng + ?Sized>(
    sched: &DiscreteSchedule,
    s0: &MaskState,
    t: usize,
    rng: &mut R,
) -> Result<MaskState> {
    if s0.t != 0 {
        return Err(Error::TimestepOrder {
            t: t as i64,
            t_prev: s0.t as i64,
        });
    }
    sched.check_t(t)?;
    let k = sched.k;
    let qb = sched.q_bar(t);
    let classes = s0
        .classes
        .iter()
        .map(|&c| {
            if c >= k {
                return Err(Error::ClassOutOfRange {
                    value: c,
                    classes: k,
                });
            }
            Ok(sample_row(&qb[c * k..(c + 1) * k], rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskState {
        classes,
        h: s0.h,
        w: s0.w,
        t,
    })
}

/// One single-step corruption from `s.t` to `s.t + 1`.
pub fn q_step_discrete<R: Rng + ?Sized>(
    sched: &DiscreteSchedule,
    s: &MaskState,
    rng: &mut R,
) -> Result<MaskState> {
    let t = s.t + 1;
    sched.check_t(t)?;
    let k = sched.k;
    let q = sched.q(t);
    let classes = s
        .classes
        .iter()
        .map(|&c| sample_row(&q[c * k..(c + 1) * k], rng))
        .collect();
    Ok(MaskState {
        classes,
        h: s.h,
        w: s.w,
        t,
    })
}

fn posterior_with(
    k: usize,
    span: &[f64],
    qb_prev: &[f64],
    qb_t: &[f64],
    t: usize,
    s_t: &MaskState,
    s0_probs: &[f64],
) -> Result<Vec<f64>> {
    let n = s_t.len();
    if s0_probs.len() != k * n {
        return Err(Error::ShapeMismatch(format!(
            "s0_probs has {} entries, expected {k}x{n}",
            s0_probs.len()
        )));
    }
    // m[kk][i][j] = q(s_prev=j | s_t=kk, s0=i)
    let mut m = vec![0.0; k * k * k];
    let mut valid = vec![true; k * k];
    for kk in 0..k {
        for i in 0..k {
            let den = qb_t[i * k + kk];
            if den == 0.0 {
                valid[kk * k + i] = false;
                continue;
            }
            for j in 0..k {
                m[(kk * k + i) * k + j] = span[j * k + kk] * qb_prev[i * k + j] / den;
            }
        }
    }
    let mut out = vec![0.0; k * n];
    for p in 0..n {
        let kk = s_t.classes[p];
        if kk >= k {
            return Err(Error::ClassOutOfRange {
                value: kk,
                classes: k,
            });
        }
        for i in 0..k {
            let w = s0_probs[i * n + p];
            if w == 0.0 {
                continue;
            }
            if !valid[kk * k + i] {
                return Err(Error::Degenerate { t, from: i, to: kk });
            }
            for j in 0..k {
                out[j * n + p] += w * m[(kk * k + i) * k + j];
            }
        }
    }
    Ok(out)
}

fn check_probs(k: usize, n: usize, probs: &[f64]) -> Result<()> {
    for p in 0..n {
        let s: f64 = (0..k).map(|i| probs[i * n + p]).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRange(format!(
                "s0 probabilities at pixel {p} sum to {s}"
            )));
        }
    }
    Ok(())
}

/// Per-pixel `q(s_{t−1} | s_t, ŝ0)` marginalised over `s0_probs`.
///
/// Probabilities are channel-major: entry `i * n + p` is class `i` at pixel `p`.
pub fn discrete_posterior(
    sched: &DiscreteSchedule,
    s_t: &MaskState,
    s0_probs: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    discrete_posterior_spaced(sched, s_t, s0_probs, t, t - 1)
}

/// As [`discrete_posterior`] but for a spaced pair `t_prev < t`.
pub fn discrete_posterior_spaced(
    sched: &DiscreteSchedule,
    s_t: &MaskState,
    s0_probs: &[f64],
    t: usize,
    t_prev: usize,
) -> Result<Vec<f64>> {
    if t == 0 || t_prev >= t {
        return Err(Error::TimestepOrder {
            t: t as i64,
            t_prev: t_prev as i64,
        });
    }
    sched.check_t(t)?;
    let k = sched.k;
    check_probs(k, s_t.len(), s0_probs)?;
    let span = sched.span(t_prev, t);
    posterior_with(k, &span, sched.q_bar(t_prev), sched.q_bar(t), t, s_t, s0_probs)
}

/// Draws one class per pixel from channel-major probabilities.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let n = probs.len() / k;
    let mut row = vec![0.0; k];
    (0..n)
        .map(|p| {
            for (i, r) in row.iter_mut().enumerate() {
                *r = probs[i * n + p];
            }
            sample_row(&row, rng)
        })
        .collect()
}

/// `steps` descending indices with stride `T / steps`, starting from 0.
pub fn timestep_spacing(t: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t {
        return Err(Error::InvalidRange(format!(
            "need 1 <= steps <= T, got steps={steps}, T={t}"
        )));
    }
    let stride = t / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}

/// Reverse transitions `(t, t_prev)` for a spacing, ending at `t_prev = -1`.
pub fn reverse_pairs(ts: &[usize]) -> Vec<(usize, i64)> {
    ts.iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).map_or(-1, |&p| p as i64)))
        .collect()
}
