//! Built-in oracle and property checks: schedule algebra against brute force,
//! analytic gradients against central differences, and the transparency of
//! freshly initialised bridges.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::networks::{img_denoiser_forward, NetConfig, Models};
use crate::nn::{res_block, zero_conv, Binder, ParamStore, Role};
use crate::sampler::{sample_batch, Mode, SampleInput, SamplerConfig};
use crate::schedules::{discrete_posterior, DiscreteSchedule, GaussianSchedule, MaskState};
use crate::segdm::loss_segdm;
use crate::srdm::{loss_sr, srdm_loss_given_mask};
use crate::tensor::Tensor;

/// Finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-3;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-3;
/// Largest accepted posterior deviation from Bayes enumeration.
pub const POSTERIOR_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Every built-in check, in a fixed order.
pub fn run_all() -> Vec<Check> {
    vec![
        check_posterior_enumeration(),
        check_discrete_composition(),
        check_continuous_composition(),
        check_grad_sft(),
        check_grad_zero_conv(),
        check_grad_res_block(),
        check_grad_tiny_denoiser(),
        wrap("bridge_transparency_losses", check_loss_transparency),
        wrap("bridge_transparency_sampling", check_sampling_transparency),
    ]
}

fn wrap(name: &'static str, f: fn() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
}

/// Row-major uniform kernel built from first principles.
fn kernel(k: usize, beta: f64) -> Vec<f64> {
    (0..k * k)
        .map(|ij| if ij / k == ij % k { 1.0 - beta + beta / k as f64 } else { beta / k as f64 })
        .collect()
}

fn mat_mul(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = (0..k).map(|l| a[i * k + l] * b[l * k + j]).sum();
        }
    }
    out
}

fn identity(k: usize) -> Vec<f64> {
    kernel(k, 0.0)
}

/// Posterior over `s_{t-1}` from the joint `p(s0) p(s_{t-1}|s0) p(s_t|s_{t-1})`.
pub fn bayes_posterior(betas: &[f64], k: usize, t: usize, s0: usize, st: usize) -> Vec<f64> {
    let mut qb = identity(k);
    for &b in &betas[..t - 1] {
        qb = mat_mul(&qb, &kernel(k, b), k);
    }
    let q = kernel(k, betas[t - 1]);
    let joint: Vec<f64> = (0..k).map(|j| qb[s0 * k + j] * q[j * k + st]).collect();
    let z: f64 = joint.iter().sum();
    joint.into_iter().map(|p| p / z).collect()
}

pub fn check_posterior_enumeration() -> Check {
    let mut worst = 0.0f64;
    for k in 2..=4 {
        for tt in 2..=10 {
            let betas: Vec<f64> = (0..tt).map(|i| 0.05 + 0.4 * i as f64 / (tt - 1) as f64).collect();
            let sched = DiscreteSchedule::from_betas(k, betas.clone());
            for t in 1..=tt {
                for s0 in 0..k {
                    let classes: Vec<usize> = (0..k).collect();
                    let st = MaskState::new(classes, 1, k, t, k).unwrap();
                    let mut probs = vec![0.0; k * k];
                    for p in 0..k {
                        probs[s0 * k + p] = 1.0;
                    }
                    let post = match discrete_posterior(&sched, &st, &probs, t) {
                        Ok(p) => p,
                        Err(e) => return Check::new("posterior_enumeration", false, format!("K={k} T={tt} t={t}: {e}")),
                    };
                    for (p, &x) in st.classes.iter().enumerate() {
                        let want = bayes_posterior(&betas, k, t, s0, x);
                        for (j, w) in want.iter().enumerate() {
                            worst = worst.max((post[j * k + p] - w).abs());
                        }
                    }
                }
            }
        }
    }
    Check::new(
        "posterior_enumeration",
        worst <= POSTERIOR_TOL,
        format!("max |Δ| = {worst:.2e} over K∈2..4, T∈2..10"),
    )
}

pub fn check_discrete_composition() -> Check {
    let k = 5;
    let sched = DiscreteSchedule::linear(50, k, 0.02, 0.5).unwrap();
    let mut qb = identity(k);
    let mut worst = 0.0f64;
    for t in 1..=50 {
        qb = mat_mul(&qb, &kernel(k, sched.betas()[t - 1]), k);
        let got = sched.q_bar(t);
        worst = qb.iter().zip(got).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Check::new("discrete_composition", worst < 1e-12, format!("max |Δ| = {worst:.2e}"))
}

pub fn check_continuous_composition() -> Check {
    let sched = GaussianSchedule::linear(1000, 1e-4, 0.02).unwrap();
    // iterate x_t = sqrt(1-β) x_{t-1} + sqrt(β) ε on mean and variance
    let (mut mean, mut var) = (1.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for (t, &b) in sched.betas().iter().enumerate() {
        mean *= (1.0 - b).sqrt();
        var = (1.0 - b) * var + b;
        let ab = sched.alpha_bar(t as i64);
        worst = worst.max((mean - ab.sqrt()).abs()).max((var - (1.0 - ab)).abs());
    }
    Check::new("continuous_composition", worst < 1e-10, format!("max |Δ| = {worst:.2e}"))
}

fn randn(shape: &[usize], sd: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Worst relative error, per tensor in the 2-norm, between analytic gradients
/// and central differences. `build` evaluates a scalar loss from the given
/// parameter tensors and returns the graph, loss node and one leaf per tensor.
/// At most `max_entries` entries per tensor are probed.
pub fn grad_check(
    params: &[Tensor<f64>],
    build: impl Fn(&[Tensor<f64>]) -> (Graph<f64>, NodeId, Vec<NodeId>),
    max_entries: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let (g, loss, leaves) = build(params);
    let grads = g.backward(loss);
    let mut work = params.to_vec();
    let eval = |ps: &[Tensor<f64>]| {
        let (g, l, _) = build(ps);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(leaves[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        let n = p.numel();
        let idx: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            (0..max_entries).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[pi].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[pi].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

fn grad_result(name: &'static str, err: f64) -> Check {
    Check::new(name, err < GRAD_TOL, format!("max relative error {err:.2e}"))
}

pub fn check_grad_sft() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = [2, 4, 3, 3];
    let params: Vec<Tensor<f64>> = (0..3).map(|_| randn(&shape, 1.0, &mut rng)).collect();
    let target = randn(&shape, 1.0, &mut rng);
    let err = grad_check(
        &params,
        |ps| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let y = g.sft(ids[0], ids[1], ids[2]);
            let l = g.mse(y, target.clone());
            (g, l, ids)
        },
        64,
        &mut rng,
    );
    grad_result("grad_sft", err)
}

/// Gradient check of a block built through a [`Binder`], over its input
/// tensors and every parameter.
fn binder_check(
    store: &ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    target: Tensor<f64>,
    forward: impl Fn(&mut Binder<f64>, &mut Graph<f64>, &[NodeId]) -> NodeId,
    max_entries: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let n_in = inputs.len();
    let mut params = inputs;
    params.extend(store.iter().map(|(_, t)| t.clone()));
    let role = store.role();
    grad_check(
        &params,
        |ps| {
            let mut s = ParamStore::new(role);
            for (n, t) in names.iter().zip(&ps[n_in..]) {
                s.insert(n.clone(), t.clone()).unwrap();
            }
            let mut g = Graph::new();
            let ins: Vec<NodeId> = ps[..n_in].iter().map(|p| g.leaf(p.clone(), true)).collect();
            let mut b = Binder::new(&s, true);
            let y = forward(&mut b, &mut g, &ins);
            let l = g.mse(y, target.clone());
            let mut ids = ins;
            ids.extend(names.iter().map(|n| b.leaves()[n]));
            (g, l, ids)
        },
        max_entries,
        rng,
    )
}

/// Initialises a store by tracing `forward`, then perturbs every parameter so
/// that zero and unit initialisations do not hide errors.
fn traced_store(
    role: Role,
    inputs: &[Tensor<f64>],
    forward: impl Fn(&mut Binder<f64>, &mut Graph<f64>, &[NodeId]) -> NodeId,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> ParamStore<f64> {
    let mut store = ParamStore::new(role);
    {
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut g = Graph::new();
        let ins: Vec<NodeId> = inputs.iter().map(|p| g.constant(p.clone())).collect();
        let mut b = Binder::init(&mut store, &mut init_rng);
        forward(&mut b, &mut g, &ins);
    }
    if jitter > 0.0 {
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    store
}

pub fn check_grad_zero_conv() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&[2, 3, 4, 4], 1.0, &mut rng);
    let target = randn(&[2, 5, 4, 4], 1.0, &mut rng);
    let fwd = |b: &mut Binder<f64>, g: &mut Graph<f64>, ins: &[NodeId]| zero_conv(b, g, "z", ins[0], 5);
    // fresh zero weights, then a perturbed copy
    let fresh = traced_store(Role::ImgAided, &[x.clone()], fwd, 0.0, &mut rng);
    let e0 = binder_check(&fresh, vec![x.clone()], target.clone(), fwd, 64, &mut rng);
    let moved = traced_store(Role::ImgAided, &[x.clone()], fwd, 0.3, &mut rng);
    let e1 = binder_check(&moved, vec![x], target, fwd, 64, &mut rng);
    grad_result("grad_zero_conv", e0.max(e1))
}

pub fn check_grad_res_block() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&[2, 8, 4, 4], 1.0, &mut rng);
    let temb = randn(&[2, 12], 1.0, &mut rng);
    let target = randn(&[2, 16, 4, 4], 1.0, &mut rng);
    let fwd = |b: &mut Binder<f64>, g: &mut Graph<f64>, ins: &[NodeId]| res_block(b, g, "rb", ins[0], 16, Some(ins[1]));
    let store = traced_store(Role::ImgDenoiser, &[x.clone(), temb.clone()], fwd, 0.2, &mut rng);
    let err = binder_check(&store, vec![x, temb], target, fwd, 48, &mut rng);
    grad_result("grad_res_block", err)
}

/// Smallest valid network: 8×8 images, 4×4 working grid, two scales.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        classes: 3,
        img_channels: 3,
        hq_size: 8,
        lq_size: 2,
        patch: 2,
        base_width: 8,
        mults: vec![1, 2],
        blocks: 1,
        seg_width: 8,
        temb_dim: 8,
    }
}

pub fn check_grad_tiny_denoiser() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = tiny_net();
    let z = randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let mut conds = Vec::new();
    for s in cfg.scale_shapes() {
        let shape = [2, s[0], s[1], s[2]];
        conds.push(randn(&shape, 0.3, &mut rng));
        conds.push(randn(&shape, 0.3, &mut rng));
        conds.push(randn(&shape, 0.3, &mut rng));
    }
    let target = randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let ts = [3.0, 117.0];
    let levels = cfg.levels();
    let fwd = |b: &mut Binder<f64>, g: &mut Graph<f64>, ins: &[NodeId]| {
        let sft: Vec<(NodeId, NodeId)> = (0..levels).map(|l| (ins[1 + 3 * l], ins[2 + 3 * l])).collect();
        let c: Vec<NodeId> = (0..levels).map(|l| ins[3 + 3 * l]).collect();
        img_denoiser_forward(b, g, &cfg, ins[0], &ts, Some(&sft), Some(&c)).unwrap()
    };
    let mut inputs = vec![z];
    inputs.extend(conds);
    let store = traced_store(Role::ImgDenoiser, &inputs, fwd, 0.1, &mut rng);
    let err = binder_check(&store, inputs, target, fwd, 24, &mut rng);
    grad_result("grad_tiny_denoiser", err)
}

fn tiny_batch(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Vec<usize>, Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let b = 2;
    let hq = cfg.hq_size;
    let m = cfg.mask_size();
    let z0 = randn(&[b, 3, hq, hq], 0.5, rng).cast();
    let s0: Vec<usize> = (0..b * m * m).map(|_| rng.gen_range(0..cfg.classes)).collect();
    let z_lq = randn(&[b, 3, hq, hq], 0.5, rng).cast();
    let lq_in = randn(&[b, 3, m, m], 0.5, rng).cast();
    let eps = randn(&[b, 3, hq, hq], 1.0, rng).cast();
    (z0, s0, z_lq, lq_in, eps)
}

/// With fresh bridge weights the mask condition and the image aid leave both
/// losses bitwise unchanged.
pub fn check_loss_transparency() -> Result<Check> {
    let cfg = tiny_net();
    let models = Models::<f32>::init(&cfg, 3)?;
    let gs = GaussianSchedule::linear(100, 1e-4, 0.02)?;
    let ds = DiscreteSchedule::linear(100, cfg.classes, 0.02, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (z0, s0, z_lq, lq_in, eps) = tiny_batch(&cfg, &mut rng);
    let ts = [4, 61];
    let with = loss_sr(&models, &[], &gs, &ds, &z0, &s0, &z_lq, &ts, &eps, &mut ChaCha8Rng::seed_from_u64(1))?;
    let without = srdm_loss_given_mask(&models, &[], &gs, &z0, None, Some(&z_lq), &ts, &eps)?;
    let d_sr = (with.loss_value() - without.loss_value()).abs();
    let ts_mask = [5, 62];
    let a = loss_segdm(&models, &[], &ds, &gs, &lq_in, &s0, &ts_mask, Some((&z0, &eps)), &mut ChaCha8Rng::seed_from_u64(2))?;
    let b = loss_segdm(&models, &[], &ds, &gs, &lq_in, &s0, &ts_mask, None, &mut ChaCha8Rng::seed_from_u64(2))?;
    let d_seg = (a.loss_value() - b.loss_value()).abs();
    Ok(Check::new(
        "bridge_transparency_losses",
        d_sr == 0.0 && d_seg == 0.0,
        format!("|Δ loss_sr| = {d_sr:.2e}, |Δ loss_segdm| = {d_seg:.2e}"),
    ))
}

/// With fresh bridge weights coupled sampling reproduces unconditioned sampling.
pub fn check_sampling_transparency() -> Result<Check> {
    let cfg = tiny_net();
    let models = Models::<f32>::init(&cfg, 4)?;
    let gs = GaussianSchedule::linear(100, 1e-4, 0.02)?;
    let ds = DiscreteSchedule::linear(100, cfg.classes, 0.02, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let lq: Tensor<f32> = randn(&[3, 2, 2], 0.2, &mut rng).map(|v| v + 0.5).cast();
    let scfg = SamplerConfig {
        steps: 10,
        eta: 1.0,
        trajectory: false,
    };
    let inputs = [SampleInput {
        lq: &lq,
        gt_mask: None,
        seed: 9,
    }];
    let a = sample_batch(&models, &gs, &ds, &inputs, Mode::Coupled, &scfg)?;
    let b = sample_batch(&models, &gs, &ds, &inputs, Mode::None, &scfg)?;
    let d = a[0].image.max_abs_diff(&b[0].image);
    Ok(Check::new(
        "bridge_transparency_sampling",
        d <= 1e-7,
        format!("max |Δ image| = {d:.2e}"),
    ))
}

/// Names of failing checks, keyed for lookup.
pub fn failures(checks: &[Check]) -> BTreeMap<&'static str, &str> {
    checks.iter().filter(|c| !c.passed).map(|c| (c.name, c.detail.as_str())).collect()
}
