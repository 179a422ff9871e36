//! A small define-by-run reverse-mode autodiff tape over NCHW tensors.
//!
//! Only the operations the networks in this crate need are implemented. Each op
//! stores what its backward pass needs; parent gradients are accumulated in a
//! single reverse sweep over the tape.

use crate::tensor::{self, gemm, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const GN_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    MulChannel {
        x: NodeId,
        v: NodeId,
    },
    Scale {
        x: NodeId,
        s: F,
    },
    Sft {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Silu(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    AvgPool {
        x: NodeId,
        f: usize,
    },
    Upsample {
        x: NodeId,
        f: usize,
    },
    SpaceToDepth {
        x: NodeId,
        p: usize,
    },
    DepthToSpace {
        x: NodeId,
        p: usize,
    },
    Concat(NodeId, NodeId),
    Mse {
        x: NodeId,
        target: Tensor<F>,
    },
    CrossEntropy {
        x: NodeId,
        targets: Vec<usize>,
        probs: Tensor<F>,
    },
    Sum(NodeId),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Float = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Grads<F>(Vec<Option<Tensor<F>>>);

impl<F: Float> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.0.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (bn, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], cin, "conv input channels {cin} vs weight {ws:?}");
        let (cout, k) = (ws[0], ws[2]);
        assert!(k % 2 == 1 && ws[3] == k);
        let n = bn * h * wd;
        let col = im2col(self.value(x).data(), bn, cin, h, wd, k);
        let mut y = vec![F::zero(); cout * n];
        gemm(cout, cin * k * k, n, self.value(w).data(), false, &col, false, &mut y, F::zero());
        let bias = self.value(b).data();
        let hw = h * wd;
        let mut out = vec![F::zero(); bn * cout * hw];
        for co in 0..cout {
            for bi in 0..bn {
                let src = &y[co * n + bi * hw..co * n + (bi + 1) * hw];
                let dst = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let ng = self.any_grad(&[x, w, b]);
        let value = Tensor::new(&[bn, cout, h, wd], out).unwrap();
        self.push(value, Op::Conv2d { x, w, b, k }, ng)
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1]);
        let (bn, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![F::zero(); bn * dout];
        gemm(bn, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut y, F::zero());
        let bias = self.value(b).data();
        for row in y.chunks_mut(dout) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.any_grad(&[x, w, b]);
        self.push(Tensor::new(&[bn, dout], y).unwrap(), Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_map(self.value(b), |p, q| p + q)
            .expect("add: shape mismatch");
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds `v: [B, C]` to every spatial position of `x: [B, C, H, W]`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (bn, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[bn, c]);
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let add = vv[i];
            for o in chunk {
                *o += add;
            }
        }
        let ng = self.any_grad(&[x, v]);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::AddChannel { x, v }, ng)
    }

    /// Multiplies every spatial position of `x: [B, C, H, W]` by `v: [B, C]`.
    pub fn mul_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (bn, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[bn, c]);
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let m = vv[i];
            for o in chunk {
                *o = *o * m;
            }
        }
        let ng = self.any_grad(&[x, v]);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::MulChannel { x, v }, ng)
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Scale { x, s }, ng)
    }

    /// Spatial feature transform `x * (1 + gamma) + beta`, all of one shape.
    pub fn sft(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        xv.check_same(self.value(gamma)).expect("sft gamma shape");
        xv.check_same(self.value(beta)).expect("sft beta shape");
        let out: Vec<F> = xv
            .data()
            .iter()
            .zip(self.value(gamma).data())
            .zip(self.value(beta).data())
            .map(|((&a, &g), &b)| a * (F::one() + g) + b)
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Sft { x, gamma, beta }, ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a / (F::one() + (-a).exp()));
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let (bn, c, h, w) = self.value(x).dims4();
        assert_eq!(c % groups, 0, "{c} channels into {groups} groups");
        let cg = c / groups;
        let hw = h * w;
        let gs = cg * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        let mut means = Vec::with_capacity(bn * groups);
        let mut rstds = Vec::with_capacity(bn * groups);
        let inv_n = F::of(1.0 / gs as f64);
        for bi in 0..bn {
            for g in 0..groups {
                let off = (bi * c + g * cg) * hw;
                let seg = &xv[off..off + gs];
                let mean = seg.iter().copied().sum::<F>() * inv_n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
                let rstd = F::one() / (var + F::of(GN_EPS)).sqrt();
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let o = off + cc * hw;
                    for i in 0..hw {
                        out[o + i] = (xv[o + i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            ng,
        )
    }

    pub fn avg_pool(&mut self, x: NodeId, f: usize) -> NodeId {
        let v = tensor::avg_pool(self.value(x), f);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::AvgPool { x, f }, ng)
    }

    pub fn upsample(&mut self, x: NodeId, f: usize) -> NodeId {
        let v = tensor::upsample_nearest(self.value(x), f);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Upsample { x, f }, ng)
    }

    pub fn space_to_depth(&mut self, x: NodeId, p: usize) -> NodeId {
        let v = tensor::space_to_depth(self.value(x), p);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::SpaceToDepth { x, p }, ng)
    }

    pub fn depth_to_space(&mut self, x: NodeId, p: usize) -> NodeId {
        let v = tensor::depth_to_space(self.value(x), p);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::DepthToSpace { x, p }, ng)
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (bn, ca, h, w) = self.value(a).dims4();
        let (bb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((bn, h, w), (bb, hb, wb), "concat geometry");
        let hw = h * w;
        let mut out = Vec::with_capacity(bn * (ca + cb) * hw);
        for bi in 0..bn {
            out.extend_from_slice(&self.value(a).data()[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let ng = self.any_grad(&[a, b]);
        self.push(
            Tensor::new(&[bn, ca + cb, h, w], out).unwrap(),
            Op::Concat(a, b),
            ng,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: NodeId, target: Tensor<F>) -> NodeId {
        let xv = self.value(x);
        xv.check_same(&target).expect("mse shape");
        let n = F::of(xv.numel() as f64);
        let s: F = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mse { x, target }, ng)
    }

    /// Mean per-pixel cross-entropy of channel logits against class targets.
    pub fn cross_entropy(&mut self, x: NodeId, targets: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let (bn, c, h, w) = xv.dims4();
        let hw = h * w;
        assert_eq!(targets.len(), bn * hw);
        let probs = tensor::softmax_channels(xv);
        let mut total = 0.0f64;
        for bi in 0..bn {
            for p in 0..hw {
                let t = targets[bi * hw + p];
                assert!(t < c, "target class {t} >= {c}");
                // log-sum-exp form keeps saturated logits finite
                let at = |ci: usize| xv.data()[(bi * c + ci) * hw + p].as_f64();
                let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|ci| (at(ci) - m).exp()).sum::<f64>().ln();
                total += lse - at(t);
            }
        }
        let ng = self.any_grad(&[x]);
        let loss = F::of(total / (bn * hw) as f64);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { x, targets, probs }, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: NodeId) -> Grads<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let want = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k } => {
                let (bn, cin, h, wd) = self.value(*x).dims4();
                let cout = self.value(*w).shape()[0];
                let (hw, n) = (h * wd, bn * h * wd);
                let kk = cin * k * k;
                let mut dy = vec![F::zero(); cout * n];
                for co in 0..cout {
                    for bi in 0..bn {
                        dy[co * n + bi * hw..co * n + (bi + 1) * hw].copy_from_slice(
                            &g.data()[(bi * cout + co) * hw..(bi * cout + co + 1) * hw],
                        );
                    }
                }
                if want(*b) {
                    let db: Vec<F> = dy.chunks(n).map(|r| r.iter().copied().sum()).collect();
                    accumulate(grads, *b, Tensor::new(&[cout], db).unwrap());
                }
                if want(*w) {
                    let col = im2col(self.value(*x).data(), bn, cin, h, wd, *k);
                    let mut dw = vec![F::zero(); cout * kk];
                    gemm(cout, n, kk, &dy, false, &col, true, &mut dw, F::zero());
                    let shape = self.value(*w).shape().to_vec();
                    accumulate(grads, *w, Tensor::new(&shape, dw).unwrap());
                }
                if want(*x) {
                    let mut dcol = vec![F::zero(); kk * n];
                    gemm(kk, cout, n, self.value(*w).data(), true, &dy, false, &mut dcol, F::zero());
                    let dx = col2im(&dcol, bn, cin, h, wd, *k);
                    accumulate(grads, *x, Tensor::new(&[bn, cin, h, wd], dx).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (bn, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                if want(*b) {
                    let mut db = vec![F::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[dout], db).unwrap());
                }
                if want(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    gemm(dout, bn, din, g.data(), true, self.value(*x).data(), false, &mut dw, F::zero());
                    accumulate(grads, *w, Tensor::new(&[dout, din], dw).unwrap());
                }
                if want(*x) {
                    let mut dx = vec![F::zero(); bn * din];
                    gemm(bn, dout, din, g.data(), false, self.value(*w).data(), false, &mut dx, F::zero());
                    accumulate(grads, *x, Tensor::new(&[bn, din], dx).unwrap());
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddChannel { x, v } => {
                if want(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if want(*v) {
                    let (_, _, h, w) = g.dims4();
                    let dv: Vec<F> = g.data().chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                    let shape = self.value(*v).shape().to_vec();
                    accumulate(grads, *v, Tensor::new(&shape, dv).unwrap());
                }
            }
            Op::MulChannel { x, v } => {
                let (_, _, h, w) = g.dims4();
                let hw = h * w;
                let vv = self.value(*v).data();
                if want(*x) {
                    let mut d = g.data().to_vec();
                    for (i, chunk) in d.chunks_mut(hw).enumerate() {
                        for o in chunk {
                            *o = *o * vv[i];
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape(), d).unwrap());
                }
                if want(*v) {
                    let dv: Vec<F> = g
                        .data()
                        .chunks(hw)
                        .zip(self.value(*x).data().chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let shape = self.value(*v).shape().to_vec();
                    accumulate(grads, *v, Tensor::new(&shape, dv).unwrap());
                }
            }
            Op::Scale { x, s } => {
                if want(*x) {
                    accumulate(grads, *x, g.map(|a| a * *s));
                }
            }
            Op::Sft { x, gamma, beta } => {
                if want(*x) {
                    let d = g.zip_map(self.value(*gamma), |dy, gm| dy * (F::one() + gm)).unwrap();
                    accumulate(grads, *x, d);
                }
                if want(*gamma) {
                    let d = g.zip_map(self.value(*x), |dy, xv| dy * xv).unwrap();
                    accumulate(grads, *gamma, d);
                }
                if want(*beta) {
                    accumulate(grads, *beta, g.clone());
                }
            }
            Op::Silu(x) => {
                let d = g
                    .zip_map(self.value(*x), |dy, a| {
                        let s = F::one() / (F::one() + (-a).exp());
                        dy * s * (F::one() + a * (F::one() - s))
                    })
                    .unwrap();
                accumulate(grads, *x, d);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let (cg, hw) = (c / groups, h * w);
                let gs = cg * hw;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let dyv = g.data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); xv.len()];
                let inv_n = F::of(1.0 / gs as f64);
                for bi in 0..bn {
                    for gi in 0..*groups {
                        let m = mean[bi * groups + gi];
                        let r = rstd[bi * groups + gi];
                        let off = (bi * c + gi * cg) * hw;
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for i in off + cc * hw..off + (cc + 1) * hw {
                                let xhat = (xv[i] - m) * r;
                                dgamma[ch] += dyv[i] * xhat;
                                dbeta[ch] += dyv[i];
                                let gg = dyv[i] * gv[ch];
                                sum_g += gg;
                                sum_gx += gg * xhat;
                            }
                        }
                        let mg = sum_g * inv_n;
                        let mgx = sum_gx * inv_n;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for i in off + cc * hw..off + (cc + 1) * hw {
                                let xhat = (xv[i] - m) * r;
                                dx[i] = r * (dyv[i] * gv[ch] - mg - xhat * mgx);
                            }
                        }
                    }
                }
                if want(*x) {
                    accumulate(grads, *x, Tensor::new(&[bn, c, h, w], dx).unwrap());
                }
                if want(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma).unwrap());
                }
                if want(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta).unwrap());
                }
            }
            Op::AvgPool { x, f } => {
                // adjoint of block mean is scaled nearest upsampling
                let up = tensor::upsample_nearest(g, *f);
                let s = F::of(1.0 / (f * f) as f64);
                accumulate(grads, *x, up.map(|a| a * s));
            }
            Op::Upsample { x, f } => {
                let down = tensor::avg_pool(g, *f);
                let s = F::of((f * f) as f64);
                accumulate(grads, *x, down.map(|a| a * s));
            }
            Op::SpaceToDepth { x, p } => {
                accumulate(grads, *x, tensor::depth_to_space(g, *p));
            }
            Op::DepthToSpace { x, p } => {
                accumulate(grads, *x, tensor::space_to_depth(g, *p));
            }
            Op::Concat(a, b) => {
                let (bn, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let mut da = Vec::with_capacity(bn * ca * hw);
                let mut db = Vec::with_capacity(bn * cb * hw);
                for bi in 0..bn {
                    let base = bi * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                if want(*a) {
                    accumulate(grads, *a, Tensor::new(&[bn, ca, h, w], da).unwrap());
                }
                if want(*b) {
                    accumulate(grads, *b, Tensor::new(&[bn, cb, h, w], db).unwrap());
                }
            }
            Op::Mse { x, target } => {
                let up = g.data()[0];
                let s = F::of(2.0 / target.numel() as f64) * up;
                let d = self.value(*x).zip_map(target, |a, b| (a - b) * s).unwrap();
                accumulate(grads, *x, d);
            }
            Op::CrossEntropy { x, targets, probs } => {
                let (bn, c, h, w) = probs.dims4();
                let hw = h * w;
                let s = g.data()[0] * F::of(1.0 / (bn * hw) as f64);
                let mut d = probs.clone();
                for bi in 0..bn {
                    for p in 0..hw {
                        let t = targets[bi * hw + p];
                        d.data_mut()[(bi * c + t) * hw + p] -= F::one();
                    }
                }
                for v in d.data_mut() {
                    *v *= s;
                }
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), up));
            }
        }
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Columns `[C*k*k, B*H*W]` for a stride-1 convolution with `k/2` zero padding.
fn im2col<F: Float>(x: &[F], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let pad = k / 2;
    let hw = h * w;
    let n = b * hw;
    let mut col = vec![F::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let dst = &mut col[row * n + bi * hw..row * n + (bi + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let so = sy * w + x0 + kx - pad;
                        dst[y * w + x0..y * w + x1].copy_from_slice(&src[so..so + (x1 - x0)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<F: Float>(col: &[F], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let pad = k / 2;
    let hw = h * w;
    let n = b * hw;
    let mut x = vec![F::zero(); b * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for bi in 0..b {
                    let src = &col[row * n + bi * hw..row * n + (bi + 1) * hw];
                    let dst = &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let so = (sy - pad) * w + x0 + kx - pad;
                        for (d, &s) in dst[so..so + (x1 - x0)]
                            .iter_mut()
                            .zip(&src[y * w + x0..y * w + x1])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (bn, cin, h, wd) = x.dims4();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let pad = k as isize / 2;
        let mut out = vec![0.0; bn * cout * h * wd];
        for bi in 0..bn {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((bi * cin + ci) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out[((bi * cout + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::new(&[2, 3, 5, 4], (0..120).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(&[4, 3, 3, 3], (0..108).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(Tensor::new(&[4], b.clone()).unwrap());
        let y = g.conv2d(xi, wi, bi);
        let expect = naive_conv(&x, &w, &b);
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_exact_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 7.5));
        let w = g.leaf(Tensor::zeros(&[4, 2, 1, 1]), true);
        let b = g.leaf(Tensor::zeros(&[4]), true);
        let y = g.conv2d(x, w, b);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let l = g.cross_entropy(x, vec![0, 1, 2, 3]);
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Builds a graph touching every op and returns (loss, parameter leaves).
    fn build(g: &mut Graph<f64>, vals: &[Tensor<f64>]) -> (NodeId, Vec<NodeId>) {
        let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let (x, w3, b3, w1, b1, gm, bt, lw, lb, sg, sb) = (
            ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8], ids[9], ids[10],
        );
        let h = g.conv2d(x, w3, b3);
        let h = g.group_norm(h, gm, bt, 2);
        let h = g.silu(h);
        let te = g.constant(Tensor::new(&[2, 3], lcg(6, 9)).unwrap());
        let shift = g.linear(te, lw, lb);
        let h = g.add_channel(h, shift);
        let h = g.mul_channel(h, shift);
        let h = g.sft(h, sg, sb);
        let p = g.avg_pool(h, 2);
        let u = g.upsample(p, 2);
        let h = g.concat(h, u);
        let h = g.conv2d(h, w1, b1);
        let d = g.space_to_depth(h, 2);
        let d = g.scale(d, 0.7);
        let h2 = g.depth_to_space(d, 2);
        let h = g.add(h, h2);
        let target = Tensor::new(g.value(h).shape(), lcg(g.value(h).numel(), 3)).unwrap();
        let l1 = g.mse(h, target);
        let ce = g.cross_entropy(h, (0..32).map(|i| i % 3).collect());
        let l = g.add(l1, ce);
        let s = g.sum(l);
        (s, ids)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shapes: [&[usize]; 11] = [
            &[2, 2, 4, 4],
            &[4, 2, 3, 3],
            &[4],
            &[3, 8, 1, 1],
            &[3],
            &[4],
            &[4],
            &[4, 3],
            &[4],
            &[2, 4, 4, 4],
            &[2, 4, 4, 4],
        ];
        let vals: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                let scale = if i == 5 { 0.0 } else { 0.5 };
                let off = if i == 5 { 1.0 } else { 0.0 };
                Tensor::new(s, lcg(n, i as u64 + 1).into_iter().map(|v| off + scale * v).collect()).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let (loss, ids) = build(&mut g, &vals);
        let grads = g.backward(loss);
        let h = 1e-5;
        for (pi, id) in ids.iter().enumerate() {
            let an = grads.get(*id).unwrap().clone();
            for j in 0..vals[pi].numel() {
                let f = |delta: f64| {
                    let mut v2 = vals.clone();
                    v2[pi].data_mut()[j] += delta;
                    let mut g2 = Graph::new();
                    let (l, _) = build(&mut g2, &v2);
                    g2.value(l).data()[0]
                };
                let num = (f(h) - f(-h)) / (2.0 * h);
                let a = an.data()[j];
                let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
                assert!(err < 1e-5, "input {pi} entry {j}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0), true);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv2d(x, w, b);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(x).is_none());
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
    }
}
