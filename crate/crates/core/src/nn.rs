//! Parameter stores, the binder that turns stored tensors into graph leaves,
//! and the shared building blocks of every network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ImgDenoiser,
    ImgController,
    SegBackbone,
    SegDenoiser,
    SegController,
    ImgAided,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::ImgDenoiser,
        Role::ImgController,
        Role::SegBackbone,
        Role::SegDenoiser,
        Role::SegController,
        Role::ImgAided,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ImgDenoiser => "img_denoiser",
            Role::ImgController => "img_controller",
            Role::SegBackbone => "seg_backbone",
            Role::SegDenoiser => "seg_denoiser",
            Role::SegController => "seg_controller",
            Role::ImgAided => "img_aided",
        }
    }

    /// Roles of the segmentation diffusion branch.
    pub fn is_segdm(self) -> bool {
        matches!(self, Role::SegBackbone | Role::SegDenoiser)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}`")))
    }
}

/// Named tensors owned by one network role.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Float = f32> {
    role: Role,
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            params: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Malformed(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            role: self.role,
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that this store has exactly the names and shapes of `template`.
    pub fn check_matches(&self, template: &ParamStore<F>) -> Result<()> {
        if self.role != template.role {
            return Err(Error::Malformed(format!(
                "role {} where {} was expected",
                self.role, template.role
            )));
        }
        for (name, t) in &template.params {
            match self.params.get(name) {
                None => return Err(Error::MissingParam(format!("{}.{name}", self.role))),
                Some(v) if v.shape() != t.shape() => {
                    return Err(Error::ShapeMismatch(format!(
                        "{}.{name}: {:?} vs expected {:?}",
                        self.role,
                        v.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !template.params.contains_key(*k)) {
            return Err(Error::Malformed(format!(
                "unexpected parameter `{}.{extra}`",
                self.role
            )));
        }
        Ok(())
    }

    /// Copies every tensor whose name and shape also exist in `src`.
    pub fn copy_shared_from(&mut self, src: &ParamStore<F>) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if let Some(s) = src.params.get(name) {
                if s.shape() == t.shape() {
                    *t = s.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given σ, resampled outside ±2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
}

fn init_tensor<F: Float>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<F> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, F::one()),
        Init::TruncNormal(s) => {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let v: f64 = rng.sample(StandardNormal);
                    if v.abs() <= 2.0 {
                        break F::of(v * s);
                    }
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        }
    }
}

pub const CONV_STD: f64 = 0.02;

enum Source<'a, F: Float> {
    Use(&'a ParamStore<F>),
    Init(&'a mut ParamStore<F>, &'a mut ChaCha8Rng),
}

/// Resolves parameter names to graph leaves, creating them on first use when
/// initializing a store.
pub struct Binder<'a, F: Float = f32> {
    src: Source<'a, F>,
    trainable: bool,
    leaves: BTreeMap<String, NodeId>,
}

impl<'a, F: Float> Binder<'a, F> {
    pub fn new(store: &'a ParamStore<F>, trainable: bool) -> Self {
        Self {
            src: Source::Use(store),
            trainable,
            leaves: BTreeMap::new(),
        }
    }

    pub fn init(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            src: Source::Init(store, rng),
            trainable: false,
            leaves: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, g: &mut Graph<F>, name: &str, shape: &[usize], init: Init) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let value = match &mut self.src {
            Source::Use(store) => {
                let t = store
                    .get(name)
                    .unwrap_or_else(|| panic!("missing parameter {}.{name}", store.role()));
                assert_eq!(t.shape(), shape, "parameter {}.{name}", store.role());
                t.clone()
            }
            Source::Init(store, rng) => {
                let t = init_tensor(shape, init, rng);
                store.insert(name, t.clone()).expect("fresh parameter name");
                t
            }
        };
        let id = g.leaf(value, self.trainable);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn leaves(&self) -> &BTreeMap<String, NodeId> {
        &self.leaves
    }

    pub fn into_leaves(self) -> BTreeMap<String, NodeId> {
        self.leaves
    }
}

/// Largest of 8, 4, 2, 1 groups dividing `c`.
pub fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap()
}

pub fn conv<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    name: &str,
    x: NodeId,
    cout: usize,
    k: usize,
    init: Init,
) -> NodeId {
    let cin = g.value(x).dims4().1;
    let w = b.param(g, &format!("{name}.w"), &[cout, cin, k, k], init);
    let bias = b.param(g, &format!("{name}.b"), &[cout], Init::Zeros);
    g.conv2d(x, w, bias)
}

/// 1×1 convolution with all-zero initial weights and bias.
pub fn zero_conv<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    name: &str,
    x: NodeId,
    cout: usize,
) -> NodeId {
    conv(b, g, name, x, cout, 1, Init::Zeros)
}

pub fn linear<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    name: &str,
    x: NodeId,
    dout: usize,
) -> NodeId {
    let din = g.value(x).shape()[1];
    let w = b.param(g, &format!("{name}.w"), &[dout, din], Init::TruncNormal(CONV_STD));
    let bias = b.param(g, &format!("{name}.b"), &[dout], Init::Zeros);
    g.linear(x, w, bias)
}

pub fn group_norm<F: Float>(b: &mut Binder<F>, g: &mut Graph<F>, name: &str, x: NodeId) -> NodeId {
    let c = g.value(x).dims4().1;
    let gamma = b.param(g, &format!("{name}.g"), &[c], Init::Ones);
    let beta = b.param(g, &format!("{name}.b"), &[c], Init::Zeros);
    g.group_norm(x, gamma, beta, groups_for(c))
}

/// Pre-activation residual block with an optional per-channel time shift.
pub fn res_block<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    name: &str,
    x: NodeId,
    cout: usize,
    temb: Option<NodeId>,
) -> NodeId {
    let cin = g.value(x).dims4().1;
    let h = group_norm(b, g, &format!("{name}.n1"), x);
    let h = g.silu(h);
    let mut h = conv(b, g, &format!("{name}.c1"), h, cout, 3, Init::TruncNormal(CONV_STD));
    if let Some(te) = temb {
        let te = g.silu(te);
        let shift = linear(b, g, &format!("{name}.t"), te, cout);
        h = g.add_channel(h, shift);
    }
    let h = group_norm(b, g, &format!("{name}.n2"), h);
    let h = g.silu(h);
    let h = conv(b, g, &format!("{name}.c2"), h, cout, 3, Init::TruncNormal(CONV_STD));
    let skip = if cin == cout {
        x
    } else {
        conv(b, g, &format!("{name}.skip"), x, cout, 1, Init::TruncNormal(CONV_STD))
    };
    g.add(h, skip)
}

/// Sinusoidal features `[sin(t/ω_k)..., cos(t/ω_k)...]` with `ω_k` geometric
/// over `[1, 10^4]`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidRange(format!("embedding dim {dim} must be even and >= 2")));
    }
    let half = dim / 2;
    let omega = |k: usize| {
        if half == 1 {
            1.0
        } else {
            1e4f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (t / omega(k)).sin()));
    out.extend((0..half).map(|k| (t / omega(k)).cos()));
    Ok(out)
}

/// Time embedding MLP applied to a batch of timesteps; returns `[B, 4·dim]`.
pub fn time_mlp<F: Float>(
    b: &mut Binder<F>,
    g: &mut Graph<F>,
    name: &str,
    ts: &[f64],
    dim: usize,
) -> NodeId {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, dim).expect("valid embedding dim").into_iter().map(F::of));
    }
    let x = g.constant(Tensor::new(&[ts.len(), dim], data).unwrap());
    let h = linear(b, g, &format!("{name}.l1"), x, 4 * dim);
    let h = g.silu(h);
    linear(b, g, &format!("{name}.l2"), h, 4 * dim)
}

/// `feat ⊙ (1 + gamma) + beta` on plain tensors.
pub fn sft_modulate<F: Float>(feat: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<Tensor<F>> {
    feat.check_same(gamma)?;
    feat.check_same(beta)?;
    let data = feat
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((&f, &gm), &bt)| f * (F::one() + gm) + bt)
        .collect();
    Tensor::new(feat.shape(), data)
}
