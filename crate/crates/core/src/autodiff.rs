//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly. Calling [`Graph::backward`]
//! on a scalar node walks the tape in reverse and returns a [`Gradients`]
//! table. Operations that are not part of the built-in set (image warping,
//! pose parameterization) plug in through [`CustomOp`].

use rayon::prelude::*;

use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an operation defined outside this module.
pub trait CustomOp: Send + Sync {
    /// Returns one gradient per input, `None` where the input is not
    /// differentiable or receives nothing.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Abs(Var),
    Sigmoid(Var),
    Elu(Var),
    Recip(Var),
    MulConst(Var, Tensor),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample(Var, usize),
    Concat(Vec<Var>),
    AvgPool(Var, usize),
    MeanChannels(Var),
    SampleMean(Var),
    DivBySample(Var, Var),
    DiffX(Var),
    DiffY(Var),
    Mean(Var),
    MaskedMean(Var, Vec<bool>, usize),
    MaskFill(Var, Vec<bool>),
    MinStack(Vec<Var>, Vec<u32>),
    GlobalAvgPool(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the parameter registered under `id`, if it was used.
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|&(_, node)| self.grads[node].as_ref())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in {what}");
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; gradients are never propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A differentiable leaf tagged with an external parameter id.
    pub fn param(&mut self, id: usize, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        elementwise(self.value(a), self.value(b), "add");
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        elementwise(self.value(a), self.value(b), "sub");
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        elementwise(self.value(a), self.value(b), "mul");
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        elementwise(self.value(a), self.value(b), "div");
        let t = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Shift(a), rg)
    }

    /// `k * a + c`.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let s = self.scale(a, k);
        self.shift(s, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let rg = self.rg(&[a]);
        self.push(t, Op::Elu(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Recip(a), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks, weights).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        elementwise(self.value(a), &k, "mul_const");
        let t = self.value(a).zip_map(&k, |x, y| x * y);
        let rg = self.rg(&[a]);
        self.push(t, Op::MulConst(a, k), rg)
    }

    /// 2-D convolution with zero padding. `w` is `[out, in, k, k]`, `b`
    /// is `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let geo = ConvGeom::new(xs.shape(), ws.shape(), stride, pad);
        let bias = b.map(|b| {
            let bt = self.value(b);
            assert_eq!(bt.shape(), [1, geo.co, 1, 1], "conv bias shape");
            bt.data().to_vec()
        });
        let out = conv_forward(xs, ws, bias.as_deref(), &geo);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let od = out.data_mut();
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Upsample(a, factor), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.value(parts[0]).shape();
        let c_total: usize = parts.iter().map(|p| self.value(*p).c()).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for i in 0..n {
            for p in parts {
                let t = self.value(*p);
                assert_eq!([t.n(), t.h(), t.w()], [n, h, w], "concat shape mismatch");
                data.extend_from_slice(t.sample(i));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec([n, c_total, h, w], data),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Stride-1 box filter of odd size `k` with reflection padding.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "avg_pool window must be odd");
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let r = (k / 2) as isize;
        let norm = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(x.shape());
        let od = out.data_mut();
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut od[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dy in -r..=r {
                        let yy = reflect(y as isize + dy, h);
                        for dx in -r..=r {
                            s += src[yy * w + reflect(xx as isize + dx, w)];
                        }
                    }
                    dst[y * w + xx] = s * norm;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::AvgPool(a, k), rg)
    }

    /// Mean over the channel axis, keeping a singleton channel.
    pub fn mean_channels(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let s = x.sample(i);
            let dst = &mut out.data_mut()[i * hw..(i + 1) * hw];
            for ch in 0..c {
                for (d, v) in dst.iter_mut().zip(&s[ch * hw..(ch + 1) * hw]) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= c as f64;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanChannels(a), rg)
    }

    /// Per-batch-entry mean, shape `[n, 1, 1, 1]`.
    pub fn sample_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.n();
        let data = (0..n)
            .map(|i| {
                let s = x.sample(i);
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec([n, 1, 1, 1], data), Op::SampleMean(a), rg)
    }

    /// Divides every batch entry of `a` by the matching scalar in `s`.
    pub fn div_by_sample(&mut self, a: Var, s: Var) -> Var {
        let x = self.value(a);
        let st = self.value(s);
        assert_eq!(st.shape(), [x.n(), 1, 1, 1], "div_by_sample scalar shape");
        let len = x.sample_len();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(len).enumerate() {
            let d = st.data()[i];
            for v in chunk {
                *v /= d;
            }
        }
        let rg = self.rg(&[a, s]);
        self.push(out, Op::DivBySample(a, s), rg)
    }

    /// Forward difference along x, width shrinks by one.
    pub fn diff_x(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let ow = w.saturating_sub(1);
        let mut out = Tensor::zeros([n, c, h, ow]);
        for (row, src) in out.data_mut().chunks_mut(ow.max(1)).zip(x.data().chunks(w)) {
            if ow == 0 {
                break;
            }
            for i in 0..ow {
                row[i] = src[i + 1] - src[i];
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::DiffX(a), rg)
    }

    /// Forward difference along y, height shrinks by one.
    pub fn diff_y(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let oh = h.saturating_sub(1);
        let mut out = Tensor::zeros([n, c, oh, w]);
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..w {
                    out.data_mut()[(p * oh + y) * w + xx] =
                        x.data()[(p * h + y + 1) * w + xx] - x.data()[(p * h + y) * w + xx];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::DiffY(a), rg)
    }

    /// Mean of all entries; 0 for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = if x.is_empty() { 0.0 } else { x.mean() };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean over entries where `mask` is set; 0 when nothing is selected.
    pub fn masked_mean(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "masked_mean mask length");
        let count = mask.iter().filter(|&&m| m).count();
        let sum: f64 = x
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let m = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::MaskedMean(a, mask, count), rg)
    }

    /// Replaces entries where `valid` is false by `+inf`.
    pub fn mask_fill_inf(&mut self, a: Var, valid: Vec<bool>) -> Var {
        self.mask_fill(a, valid, f64::INFINITY)
    }

    /// Replaces entries where `valid` is false by `fill`; those entries
    /// pass no gradient.
    pub fn mask_fill(&mut self, a: Var, valid: Vec<bool>, fill: f64) -> Var {
        let x = self.value(a);
        assert_eq!(valid.len(), x.len(), "mask_fill mask length");
        let mut out = x.clone();
        for (v, &ok) in out.data_mut().iter_mut().zip(&valid) {
            if !ok {
                *v = fill;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MaskFill(a, valid), rg)
    }

    /// Elementwise minimum across equally shaped inputs. The index of the
    /// first input attaining the minimum is kept; see [`Graph::argmin`].
    pub fn min_stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "min_stack needs at least one input");
        let shape = self.value(parts[0]).shape();
        let mut out = self.value(parts[0]).clone();
        let mut arg = vec![0u32; out.len()];
        for (k, p) in parts.iter().enumerate().skip(1) {
            let t = self.value(*p);
            assert_eq!(t.shape(), shape, "min_stack shape mismatch");
            for ((o, a), &v) in out.data_mut().iter_mut().zip(arg.iter_mut()).zip(t.data()) {
                if v < *o {
                    *o = v;
                    *a = k as u32;
                }
            }
        }
        let rg = self.rg(parts);
        self.push(out, Op::MinStack(parts.to_vec(), arg), rg)
    }

    /// Winning input index per entry of a [`Graph::min_stack`] node.
    pub fn argmin(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::MinStack(_, arg) => Some(arg),
            _ => None,
        }
    }

    /// Spatial mean per channel, shape `[n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let hw = (h * w) as f64;
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalAvgPool(a), rg)
    }

    /// Records an externally defined operation whose output was already
    /// computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g);
            grads[i] = Some(g);
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Gradients { grads, params }
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(b), |x, y| x * y)),
                (*b, g.zip_map(val(a), |x, y| x * y)),
            ],
            Op::Div(a, b) => {
                let ga = g.zip_map(val(b), |x, y| x / y);
                let gb = g
                    .zip_map(out, |x, q| x * q)
                    .zip_map(val(b), |x, y| -x / y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::Shift(a) => vec![(*a, g.clone())],
            Op::Exp(a) => vec![(*a, g.zip_map(out, |x, e| x * e))],
            Op::Abs(a) => vec![(
                *a,
                g.zip_map(val(a), |x, v| {
                    if v > 0.0 {
                        x
                    } else if v < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            )],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |x, s| x * s * (1.0 - s)))],
            Op::Elu(a) => vec![(
                *a,
                g.zip_map(out, |x, y| if y > 0.0 { x } else { x * (y + 1.0) }),
            )],
            Op::Recip(a) => vec![(*a, g.zip_map(out, |x, y| -x * y * y))],
            Op::MulConst(a, k) => vec![(*a, g.zip_map(k, |x, y| x * y))],
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = val(x);
                let ws = val(w);
                let geo = ConvGeom::new(xs.shape(), ws.shape(), *stride, *pad);
                let (gx, gw, gb) = conv_backward(xs, ws, g, &geo);
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    res.push((*b, gb));
                }
                res
            }
            Op::Upsample(a, f) => {
                let [n, c, h, w] = val(a).shape();
                let (oh, ow) = (h * f, w * f);
                let mut ga = Tensor::zeros([n, c, h, w]);
                let gd = ga.data_mut();
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gd[p * h * w + (y / f) * w + xx / f] += g.data()[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Concat(parts) => {
                let n = g.n();
                let mut res: Vec<(Var, Tensor)> = parts
                    .iter()
                    .map(|p| (*p, Tensor::zeros(val(p).shape())))
                    .collect();
                let mut offset = 0;
                for i in 0..n {
                    for (_, t) in res.iter_mut() {
                        let len = t.sample_len();
                        t.data_mut()[i * len..(i + 1) * len]
                            .copy_from_slice(&g.data()[offset..offset + len]);
                        offset += len;
                    }
                }
                res
            }
            Op::AvgPool(a, k) => {
                let [n, c, h, w] = val(a).shape();
                let r = (*k / 2) as isize;
                let norm = 1.0 / (k * k) as f64;
                let mut ga = Tensor::zeros([n, c, h, w]);
                let gd = ga.data_mut();
                for p in 0..n * c {
                    let base = p * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g.data()[base + y * w + xx] * norm;
                            for dy in -r..=r {
                                let yy = reflect(y as isize + dy, h);
                                for dx in -r..=r {
                                    gd[base + yy * w + reflect(xx as isize + dx, w)] += gv;
                                }
                            }
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::MeanChannels(a) => {
                let [n, c, h, w] = val(a).shape();
                let hw = h * w;
                let mut ga = Tensor::zeros([n, c, h, w]);
                for i in 0..n {
                    let src = &g.data()[i * hw..(i + 1) * hw];
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        for (d, s) in ga.data_mut()[off..off + hw].iter_mut().zip(src) {
                            *d = s / c as f64;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::SampleMean(a) => {
                let x = val(a);
                let len = x.sample_len();
                let mut ga = Tensor::zeros(x.shape());
                for (i, chunk) in ga.data_mut().chunks_mut(len).enumerate() {
                    let v = g.data()[i] / len as f64;
                    chunk.fill(v);
                }
                vec![(*a, ga)]
            }
            Op::DivBySample(a, s) => {
                let x = val(a);
                let st = val(s);
                let len = x.sample_len();
                let mut ga = g.clone();
                let mut gs = Tensor::zeros(st.shape());
                for i in 0..x.n() {
                    let d = st.data()[i];
                    let mut acc = 0.0;
                    for j in i * len..(i + 1) * len {
                        acc += g.data()[j] * x.data()[j];
                        ga.data_mut()[j] /= d;
                    }
                    gs.data_mut()[i] = -acc / (d * d);
                }
                vec![(*a, ga), (*s, gs)]
            }
            Op::DiffX(a) => {
                let [n, c, h, w] = val(a).shape();
                let ow = w.saturating_sub(1);
                let mut ga = Tensor::zeros([n, c, h, w]);
                if ow > 0 {
                    for (row, gr) in ga.data_mut().chunks_mut(w).zip(g.data().chunks(ow)) {
                        for i in 0..ow {
                            row[i + 1] += gr[i];
                            row[i] -= gr[i];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::DiffY(a) => {
                let [n, c, h, w] = val(a).shape();
                let oh = h.saturating_sub(1);
                let mut ga = Tensor::zeros([n, c, h, w]);
                let gd = ga.data_mut();
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..w {
                            let gv = g.data()[(p * oh + y) * w + xx];
                            gd[(p * h + y + 1) * w + xx] += gv;
                            gd[(p * h + y) * w + xx] -= gv;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Mean(a) => {
                let x = val(a);
                let v = if x.is_empty() { 0.0 } else { g.item() / x.len() as f64 };
                vec![(*a, Tensor::full(x.shape(), v))]
            }
            Op::MaskedMean(a, mask, count) => {
                let x = val(a);
                let mut ga = Tensor::zeros(x.shape());
                if *count > 0 {
                    let v = g.item() / *count as f64;
                    for (d, &m) in ga.data_mut().iter_mut().zip(mask) {
                        if m {
                            *d = v;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::MaskFill(a, valid) => {
                let mut ga = g.clone();
                for (d, &ok) in ga.data_mut().iter_mut().zip(valid) {
                    if !ok {
                        *d = 0.0;
                    }
                }
                vec![(*a, ga)]
            }
            Op::MinStack(parts, arg) => {
                let mut res: Vec<(Var, Tensor)> = parts
                    .iter()
                    .map(|p| (*p, Tensor::zeros(val(p).shape())))
                    .collect();
                for (j, (&k, &o)) in arg.iter().zip(out.data()).enumerate() {
                    if o.is_finite() {
                        res[k as usize].1.data_mut()[j] = g.data()[j];
                    }
                }
                res
            }
            Op::GlobalAvgPool(a) => {
                let x = val(a);
                let hw = x.h() * x.w();
                let mut ga = Tensor::zeros(x.shape());
                for (chunk, gv) in ga.data_mut().chunks_mut(hw).zip(g.data()) {
                    chunk.fill(gv / hw as f64);
                }
                vec![(*a, ga)]
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(val).collect();
                op.backward(g, &vals, out)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gv, v)| gv.map(|t| (*v, t)))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Self {
        assert_eq!(x[1], w[1], "conv input channels {} vs weight {}", x[1], w[1]);
        assert_eq!(w[2], w[3], "conv kernel must be square");
        let k = w[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k, "conv input too small");
        Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            k,
            stride,
            pad,
            oh: (x[2] + 2 * pad - k) / stride + 1,
            ow: (x[3] + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.ci {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c`, with explicit strides so
/// transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe regions inside the given slices;
    // callers pass buffers sized m*k, k*n and m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: &ConvGeom) -> Tensor {
    let mut out = Tensor::zeros([g.n, g.co, g.oh, g.ow]);
    let (rows, ncol) = (g.rows(), g.cols());
    let in_len = x.sample_len();
    let out_len = g.co * ncol;
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(i, dst)| {
            let mut cols = vec![0.0; rows * ncol];
            im2col(&x.data()[i * in_len..(i + 1) * in_len], g, &mut cols);
            if let Some(b) = bias {
                for (co, chunk) in dst.chunks_mut(ncol).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                g.co,
                rows,
                ncol,
                w.data(),
                (rows as isize, 1),
                &cols,
                (ncol as isize, 1),
                beta,
                dst,
            );
        });
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, gout: &Tensor, g: &ConvGeom) -> (Tensor, Tensor, Tensor) {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_len = x.sample_len();
    let out_len = g.co * ncol;
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|i| {
            let go = &gout.data()[i * out_len..(i + 1) * out_len];
            let mut cols = vec![0.0; rows * ncol];
            im2col(&x.data()[i * in_len..(i + 1) * in_len], g, &mut cols);
            // dW = dOut (co×ncol) * cols^T (ncol×rows)
            let mut gw = vec![0.0; g.co * rows];
            gemm(
                g.co,
                ncol,
                rows,
                go,
                (ncol as isize, 1),
                &cols,
                (1, ncol as isize),
                0.0,
                &mut gw,
            );
            // dcols = W^T (rows×co) * dOut (co×ncol)
            gemm(
                rows,
                g.co,
                ncol,
                w.data(),
                (1, rows as isize),
                go,
                (ncol as isize, 1),
                0.0,
                &mut cols,
            );
            let mut gx = vec![0.0; in_len];
            col2im(&cols, g, &mut gx);
            let gb = go.chunks(ncol).map(|c| c.iter().sum()).collect();
            (gx, gw, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(g.n * in_len);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([1, g.co, 1, 1]);
    for (sx, sw, sb) in per_sample {
        gx.extend_from_slice(&sx);
        for (a, b) in gw.data_mut().iter_mut().zip(&sw) {
            *a += b;
        }
        for (a, b) in gb.data_mut().iter_mut().zip(&sb) {
            *a += b;
        }
    }
    (Tensor::from_vec(x.shape(), gx), gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(f(x) * probe)) / dx.
    fn check(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = f(&mut g, xv);
        let probe = random(g.value(y).shape(), &mut rng);
        let pv = g.constant(probe.clone());
        let prod = g.mul(y, pv);
        let loss = g.mean(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).unwrap().clone();

        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(t);
            let y = f(&mut g, xv);
            let pv = g.constant(probe.clone());
            let prod = g.mul(y, pv);
            let loss = g.mean(prod);
            g.value(loss).item()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(xp) - eval(xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - num).abs() <= 1e-5 * a.abs().max(num.abs()) + 1e-9,
                "entry {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random([3, 2, 3, 3], &mut rng);
        let b = random([1, 3, 1, 1], &mut rng);
        let x = random([2, 2, 5, 6], &mut rng);
        for stride in [1, 2] {
            let (w1, b1) = (w.clone(), b.clone());
            check(x.clone(), move |g, xv| {
                let wv = g.constant(w1.clone());
                let bv = g.constant(b1.clone());
                g.conv2d(xv, wv, Some(bv), stride, 1)
            });
            let x1 = x.clone();
            check(w.clone(), move |g, wv| {
                let xv = g.constant(x1.clone());
                g.conv2d(xv, wv, None, stride, 1)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 2, 4, 4], &mut rng);
        let w = random([1, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 1, 1);
        let out = g.value(y);
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                s += w.at(0, c, ky, kx) * x.at(0, c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                assert!((out.at(0, 0, oy, ox) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([2, 3, 4, 5], &mut rng);
        check(x.clone(), |g, v| g.sigmoid(v));
        check(x.clone(), |g, v| g.elu(v));
        check(x.clone(), |g, v| g.exp(v));
        check(x.clone(), |g, v| g.abs(v));
        check(x.map(|v| v + 3.0), |g, v| g.recip(v));
        check(x.clone(), |g, v| {
            let s = g.sigmoid(v);
            let d = g.shift(s, 0.5);
            g.div(v, d)
        });
        check(x.clone(), |g, v| g.mul(v, v));
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 3, 4, 5], &mut rng);
        check(x.clone(), |g, v| g.avg_pool(v, 3));
        check(x.clone(), |g, v| g.upsample(v, 2));
        check(x.clone(), |g, v| g.mean_channels(v));
        check(x.clone(), |g, v| g.diff_x(v));
        check(x.clone(), |g, v| g.diff_y(v));
        check(x.clone(), |g, v| g.global_avg_pool(v));
        check(x.clone(), |g, v| {
            let e = g.exp(v);
            g.concat_channels(&[v, e])
        });
        check(x.map(|v| v + 2.0), |g, v| {
            let m = g.sample_mean(v);
            g.div_by_sample(v, m)
        });
        check(x.clone(), |g, v| {
            let e = g.exp(v);
            g.min_stack(&[v, e])
        });
    }

    #[test]
    fn min_stack_skips_infinite_pixels() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]));
        let fa = g.mask_fill_inf(a, vec![true, false]);
        let b = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]));
        let fb = g.mask_fill_inf(b, vec![false, false]);
        let m = g.min_stack(&[fa, fb]);
        assert_eq!(g.value(m).data()[0], 1.0);
        assert!(g.value(m).data()[1].is_infinite());
        let mask: Vec<bool> = g.value(m).data().iter().map(|v| v.is_finite()).collect();
        let loss = g.masked_mean(m, mask);
        assert_eq!(g.value(loss).item(), 1.0);
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let d = g.detach(a);
        let p = g.mul(a, d);
        let grads = g.backward(p);
        assert_eq!(grads.get(a).unwrap().item(), 2.0);
    }
}
