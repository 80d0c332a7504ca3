use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter gradients produced by [`Tape::backward`], keyed by parameter id.
pub type Gradients<F> = BTreeMap<usize, Tensor<F>>;

enum Op<F> {
    Constant,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<F>,
        rstds: Vec<F>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannel {
        x: Var,
        e: Var,
    },
    Concat(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxLast(Var),
    Scale(Var, F),
    LinComb(Vec<(Var, F)>),
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        weight_sum: F,
    },
    Mse {
        pred: Var,
        target: Tensor<F>,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a computation for one forward pass and replays it backwards.
///
/// Parameters enter through [`Tape::param`] and are shared (not copied) with
/// the owning store; constants never receive gradients.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<usize, Var>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(t: &Tensor<impl Float>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a [B, C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn shape3(t: &Tensor<impl Float>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a [G, M, N] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

/// Row/column strides of an operand stored as `rows x cols`, optionally viewed transposed.
fn view_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    let _ = rows;
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a trainable parameter. Repeated registration of the same id
    /// returns the same handle so gradients accumulate in one place.
    pub fn param(&mut self, id: usize, value: &Arc<Tensor<F>>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (batch, c_in, h, wd) = shape4(self.value(x));
        let (c_out, wc, k, k2) = shape4(self.value(w));
        assert_eq!(wc, c_in, "conv weight expects {wc} input channels, got {c_in}");
        assert_eq!(k, k2, "only square kernels are supported");
        let g = ConvGeom::new(c_in, h, wd, k, stride, pad);
        let (rows, px) = (g.col_rows(), g.out_pixels());
        let mut out = Tensor::zeros(&[batch, c_out, g.h_out, g.w_out]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * px] };
            let in_stride = c_in * h * wd;
            for bi in 0..batch {
                let xb = &xv[bi * in_stride..(bi + 1) * in_stride];
                let src: &[F] = if g.is_pointwise() {
                    xb
                } else {
                    kernels::im2col(xb, &g, &mut col);
                    &col
                };
                F::gemm(
                    c_out,
                    rows,
                    px,
                    F::one(),
                    wv,
                    (rows as isize, 1),
                    src,
                    (px as isize, 1),
                    F::zero(),
                    &mut od[bi * c_out * px..(bi + 1) * c_out * px],
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (chunk, &bias) in od.chunks_exact_mut(px).zip(bv.iter().cycle()) {
                    for v in chunk {
                        *v += bias;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shape mismatch {xs:?} x {ws:?}");
        let (batch, n_in, n_out) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[batch, n_out]);
        F::gemm(
            batch,
            n_in,
            n_out,
            F::one(),
            self.value(x).data(),
            (n_in as isize, 1),
            self.value(w).data(),
            (1, n_in as isize),
            F::zero(),
            out.data_mut(),
        );
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(n_out) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (batch, c, h, w) = shape4(self.value(x));
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let mut out = Tensor::zeros(&[batch, c, h, w]);
        let (means, rstds) = kernels::group_norm_forward(
            self.value(x).data(),
            batch,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            F::from_f64_lossy(1e-5),
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a per-(batch, channel) vector `[B, C]` to every pixel of `[B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (batch, c, h, w) = shape4(self.value(x));
        assert_eq!(self.value(e).shape(), &[batch, c], "channel bias shape mismatch");
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        for (plane, &bias) in out.data_mut().chunks_exact_mut(h * w).zip(ev) {
            for v in plane {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(e);
        self.push(out, Op::AddChannel { x, e }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (batch, ca, h, w) = shape4(self.value(a));
        let (bb, cb, hb, wb) = shape4(self.value(b));
        assert!(batch == bb && h == hb && w == wb, "concat spatial mismatch");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(batch * (sa + sb));
        for i in 0..batch {
            data.extend_from_slice(&self.value(a).data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&self.value(b).data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::from_vec(&[batch, ca + cb, h, w], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat(a, b), rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (batch, c, h, w) = shape4(self.value(x));
        let mut out = Tensor::zeros(&[batch, c, 2 * h, 2 * w]);
        let xv = self.value(x).data();
        for (plane_out, plane_in) in out.data_mut().chunks_exact_mut(4 * h * w).zip(xv.chunks_exact(h * w)) {
            for y in 0..2 * h {
                let src = &plane_in[(y / 2) * w..(y / 2 + 1) * w];
                let dst = &mut plane_out[y * 2 * w..(y + 1) * 2 * w];
                for (xx, d) in dst.iter_mut().enumerate() {
                    *d = src[xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Batched matrix product over a leading group axis. With `ta`/`tb` the
    /// corresponding operand is stored transposed (`[G, K, M]` / `[G, N, K]`).
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ga, a0, a1) = shape3(self.value(a));
        let (gb, b0, b1) = shape3(self.value(b));
        assert_eq!(ga, gb, "bmm group mismatch");
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        let mut out = Tensor::zeros(&[ga, m, n]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for g in 0..ga {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                &av[g * a0 * a1..(g + 1) * a0 * a1],
                view_strides(a0, a1, ta),
                &bv[g * b0 * b1..(g + 1) * b0 * b1],
                view_strides(b0, b1, tb),
                F::zero(),
                &mut out.data_mut()[g * m * n..(g + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm { a, b, ta, tb }, rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let n = *self.value(x).shape().last().expect("softmax on rank-0 tensor");
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::softmax_rows(self.value(x).data(), n, out.data_mut());
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `sum_i c_i * v_i` over equally shaped values.
    pub fn lincomb(&mut self, terms: &[(Var, F)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, c) in terms {
            assert_eq!(self.value(v).shape(), out.shape(), "lincomb shape mismatch");
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::LinComb(terms.to_vec()), rg)
    }

    /// Class-weighted cross-entropy over `[B, K, H, W]` logits, normalized by the
    /// sum of weights applied to each pixel's target class.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let (batch, k, h, w) = shape4(self.value(logits));
        let plane = h * w;
        if targets.len() != batch * plane {
            return Err(Error::Shape(format!(
                "{} target labels for logits of shape {:?}",
                targets.len(),
                self.value(logits).shape()
            )));
        }
        if weights.len() != k {
            return Err(Error::Shape(format!("{} class weights for {k} classes", weights.len())));
        }
        if let Some((index, &class)) = targets.iter().enumerate().find(|(_, &c)| c >= k) {
            return Err(Error::Label {
                index,
                class,
                num_classes: k,
            });
        }
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        let mut weight_sum = 0.0f64;
        for b in 0..batch {
            let base = b * k * plane;
            for p in 0..plane {
                let y = targets[b * plane + p];
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    max = max.max(lv[base + c * plane + p].as_f64());
                }
                let lse = max
                    + (0..k)
                        .map(|c| (lv[base + c * plane + p].as_f64() - max).exp())
                        .sum::<f64>()
                        .ln();
                let wy = weights[y].as_f64();
                total += wy * (lse - lv[base + y * plane + p].as_f64());
                weight_sum += wy;
            }
        }
        let value = F::from_f64_lossy(total / weight_sum);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                weight_sum: F::from_f64_lossy(weight_sum),
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let n = target.numel() as f64;
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(F::from_f64_lossy(sum / n)),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, seeding its gradient with `seed`.
    pub fn backward(&self, loss: Var, seed: F) -> Gradients<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), seed));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, t: Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.get_mut(id) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.insert(*id, g);
                    }
                },
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, b.is_some(), *stride, *pad, &g);
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (batch, n_in) = (xs[0], xs[1]);
                    let n_out = self.value(*w).shape()[0];
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(&[batch, n_in]);
                        F::gemm(
                            batch,
                            n_out,
                            n_in,
                            F::one(),
                            g.data(),
                            (n_out as isize, 1),
                            self.value(*w).data(),
                            (n_in as isize, 1),
                            F::zero(),
                            dx.data_mut(),
                        );
                        acc(*x, dx, &mut grads);
                    }
                    let mut dw = Tensor::zeros(&[n_out, n_in]);
                    F::gemm(
                        n_out,
                        batch,
                        n_in,
                        F::one(),
                        g.data(),
                        (1, n_out as isize),
                        self.value(*x).data(),
                        (n_in as isize, 1),
                        F::zero(),
                        dw.data_mut(),
                    );
                    acc(*w, dw, &mut grads);
                    let mut db = Tensor::zeros(&[n_out]);
                    for row in g.data().chunks_exact(n_out) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, db, &mut grads);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    means,
                    rstds,
                } => {
                    let (batch, c, h, w) = shape4(self.value(*x));
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let mut dx = self.rg(*x).then(|| Tensor::zeros(&[batch, c, h, w]));
                    kernels::group_norm_backward(
                        self.value(*x).data(),
                        g.data(),
                        batch,
                        c,
                        h * w,
                        *groups,
                        self.value(*gamma).data(),
                        means,
                        rstds,
                        dx.as_mut().map(|t| t.data_mut()),
                        dgamma.data_mut(),
                        dbeta.data_mut(),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*gamma, dgamma, &mut grads);
                    acc(*beta, dbeta, &mut grads);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = kernels::sigmoid(v);
                        *d *= s * (F::one() + v * (F::one() - s));
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddChannel { x, e } => {
                    let (batch, c, h, w) = shape4(self.value(*x));
                    let mut de = Tensor::zeros(&[batch, c]);
                    for (d, plane) in de.data_mut().iter_mut().zip(g.data().chunks_exact(h * w)) {
                        *d = plane.iter().copied().sum();
                    }
                    acc(*e, de, &mut grads);
                    acc(*x, g, &mut grads);
                }
                Op::Concat(a, b) => {
                    let (batch, ca, h, w) = shape4(self.value(*a));
                    let cb = self.value(*b).shape()[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(batch * sa);
                    let mut dbv = Vec::with_capacity(batch * sb);
                    for chunk in g.data().chunks_exact(sa + sb) {
                        da.extend_from_slice(&chunk[..sa]);
                        dbv.extend_from_slice(&chunk[sa..]);
                    }
                    acc(*a, Tensor::from_vec(&[batch, ca, h, w], da), &mut grads);
                    acc(*b, Tensor::from_vec(&[batch, cb, h, w], dbv), &mut grads);
                }
                Op::Upsample2x(x) => {
                    let (batch, c, h, w) = shape4(self.value(*x));
                    let mut dx = Tensor::zeros(&[batch, c, h, w]);
                    for (pin, pout) in dx.data_mut().chunks_exact_mut(h * w).zip(g.data().chunks_exact(4 * h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                pin[(y / 2) * w + xx / 2] += pout[y * 2 * w + xx];
                            }
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, g.reshape(&shape), &mut grads);
                }
                Op::Bmm { a, b, ta, tb } => {
                    let (ga, a0, a1) = shape3(self.value(*a));
                    let (_, b0, b1) = shape3(self.value(*b));
                    let (m, k) = if *ta { (a1, a0) } else { (a0, a1) };
                    let n = if *tb { b0 } else { b1 };
                    let sa = view_strides(a0, a1, *ta);
                    let sb = view_strides(b0, b1, *tb);
                    let (av, bv, gv) = (self.value(*a).data(), self.value(*b).data(), g.data());
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(&[ga, a0, a1]);
                        for gi in 0..ga {
                            let bs = &bv[gi * b0 * b1..(gi + 1) * b0 * b1];
                            let gs = &gv[gi * m * n..(gi + 1) * m * n];
                            let dst = &mut da.data_mut()[gi * a0 * a1..(gi + 1) * a0 * a1];
                            if *ta {
                                // stored [K, M] = B' dC^T
                                F::gemm(k, n, m, F::one(), bs, sb, gs, (1, n as isize), F::zero(), dst);
                            } else {
                                // [M, K] = dC B'^T
                                F::gemm(m, n, k, F::one(), gs, (n as isize, 1), bs, (sb.1, sb.0), F::zero(), dst);
                            }
                        }
                        acc(*a, da, &mut grads);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(&[ga, b0, b1]);
                        for gi in 0..ga {
                            let as_ = &av[gi * a0 * a1..(gi + 1) * a0 * a1];
                            let gs = &gv[gi * m * n..(gi + 1) * m * n];
                            let dst = &mut db.data_mut()[gi * b0 * b1..(gi + 1) * b0 * b1];
                            if *tb {
                                // stored [N, K] = dC^T A'
                                F::gemm(n, m, k, F::one(), gs, (1, n as isize), as_, sa, F::zero(), dst);
                            } else {
                                // [K, N] = A'^T dC
                                F::gemm(k, m, n, F::one(), as_, (sa.1, sa.0), gs, (n as isize, 1), F::zero(), dst);
                            }
                        }
                        acc(*b, db, &mut grads);
                    }
                }
                Op::SoftmaxLast(x) => {
                    let y = &self.nodes[i].value;
                    let n = *y.shape().last().unwrap();
                    let mut dx = g;
                    for (dr, yr) in dx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                        let dot: F = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum();
                        for (d, &v) in dr.iter_mut().zip(yr) {
                            *d = v * (*d - dot);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Scale(x, s) => {
                    let mut dx = g;
                    dx.scale_assign(*s);
                    acc(*x, dx, &mut grads);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        let mut d = g.clone();
                        d.scale_assign(c);
                        acc(v, d, &mut grads);
                    }
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    weights,
                    weight_sum,
                } => {
                    let (batch, k, h, w) = shape4(self.value(*logits));
                    let plane = h * w;
                    let lv = self.value(*logits).data();
                    let upstream = g.item() / *weight_sum;
                    let mut dl = Tensor::zeros(&[batch, k, h, w]);
                    let dd = dl.data_mut();
                    let mut probs = vec![F::zero(); k];
                    for b in 0..batch {
                        let base = b * k * plane;
                        for p in 0..plane {
                            let y = targets[b * plane + p];
                            let mut max = F::neg_infinity();
                            for c in 0..k {
                                max = max.max(lv[base + c * plane + p]);
                            }
                            let mut sum = F::zero();
                            for (c, pr) in probs.iter_mut().enumerate() {
                                *pr = (lv[base + c * plane + p] - max).exp();
                                sum += *pr;
                            }
                            let coef = upstream * weights[y];
                            for (c, &pr) in probs.iter().enumerate() {
                                let onehot = if c == y { F::one() } else { F::zero() };
                                dd[base + c * plane + p] = coef * (pr / sum - onehot);
                            }
                        }
                    }
                    acc(*logits, dl, &mut grads);
                }
                Op::Mse { pred, target } => {
                    let n = F::from_usize(target.numel()).unwrap();
                    let coef = F::from_f64_lossy(2.0) * g.item() / n;
                    let mut dp = self.value(*pred).clone();
                    for (d, &t) in dp.data_mut().iter_mut().zip(target.data()) {
                        *d = coef * (*d - t);
                    }
                    acc(*pred, dp, &mut grads);
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        has_bias: bool,
        stride: usize,
        pad: usize,
        g: &Tensor<F>,
    ) -> (Option<Tensor<F>>, Tensor<F>, Option<Tensor<F>>) {
        let (batch, c_in, h, wd) = shape4(self.value(x));
        let (c_out, _, k, _) = shape4(self.value(w));
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad);
        let (rows, px) = (geom.col_rows(), geom.out_pixels());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gv = g.data();
        let in_stride = c_in * h * wd;
        let need_dx = self.rg(x);

        let mut dw = Tensor::zeros(&[c_out, c_in, k, k]);
        let mut dx = need_dx.then(|| Tensor::zeros(&[batch, c_in, h, wd]));
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * px] };
        let mut dcol = if geom.is_pointwise() || !need_dx {
            Vec::new()
        } else {
            vec![F::zero(); rows * px]
        };
        for bi in 0..batch {
            let xb = &xv[bi * in_stride..(bi + 1) * in_stride];
            let gb = &gv[bi * c_out * px..(bi + 1) * c_out * px];
            let src: &[F] = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, &geom, &mut col);
                &col
            };
            F::gemm(
                c_out,
                px,
                rows,
                F::one(),
                gb,
                (px as isize, 1),
                src,
                (1, px as isize),
                F::one(),
                dw.data_mut(),
            );
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
                if geom.is_pointwise() {
                    F::gemm(rows, c_out, px, F::one(), wv, (1, rows as isize), gb, (px as isize, 1), F::zero(), dxb);
                } else {
                    F::gemm(
                        rows,
                        c_out,
                        px,
                        F::one(),
                        wv,
                        (1, rows as isize),
                        gb,
                        (px as isize, 1),
                        F::zero(),
                        &mut dcol,
                    );
                    kernels::col2im_add(&dcol, &geom, dxb);
                }
            }
        }
        let db = has_bias.then(|| {
            let mut db = Tensor::zeros(&[c_out]);
            for (j, plane) in gv.chunks_exact(px).enumerate() {
                db.data_mut()[j % c_out] += plane.iter().copied().sum::<F>();
            }
            db
        });
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input) for a graph built by `f`.
    fn check_input_grad(input: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let holder = Arc::new(input.clone());
        let x = tape.param(0, &holder);
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss, 1.0);
        let analytic = grads.get(&0).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let eval = |t: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.param(0, &Arc::new(t));
            let l = f(&mut tape, x);
            tape.value(l).item()
        };
        let eps = 1e-6;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn ramp(shape: &[usize], phase: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + phase) * 0.731).sin()).collect())
    }

    fn squared_sum(tape: &mut Tape<f64>, v: Var) -> Var {
        let target = Tensor::zeros(tape.value(v).shape());
        tape.mse(v, &target).unwrap()
    }

    #[test]
    fn conv2d_input_and_weight_gradients() {
        let w = ramp(&[3, 2, 3, 3], 0.3);
        check_input_grad(ramp(&[2, 2, 5, 4], 0.0), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, None, 2, 1);
            squared_sum(t, y)
        });
        let x = ramp(&[2, 2, 4, 4], 1.0);
        check_input_grad(w.clone(), |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, wv, None, 1, 1);
            squared_sum(t, y)
        });
    }

    #[test]
    fn group_norm_gradient() {
        let gamma = ramp(&[4], 2.0);
        check_input_grad(ramp(&[2, 4, 3, 3], 0.5), |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(Tensor::zeros(&[4]));
            let y = t.group_norm(x, g, b, 2);
            let y = t.silu(y);
            let w = t.constant(ramp(&[2, 4, 3, 3], 9.0));
            let y = t.add(y, w);
            squared_sum(t, y)
        });
    }

    #[test]
    fn attention_primitives_gradient() {
        check_input_grad(ramp(&[2, 3, 5], 0.1), |t, x| {
            let s = t.bmm(x, x, true, false);
            let s = t.scale(s, 0.5);
            let p = t.softmax_last(s);
            let o = t.bmm(x, p, false, true);
            squared_sum(t, o)
        });
        let b = ramp(&[2, 4, 3], 4.0);
        check_input_grad(ramp(&[2, 4, 5], 0.2), |t, a| {
            let bv = t.constant(b.clone());
            let o = t.bmm(a, bv, true, false);
            squared_sum(t, o)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check_input_grad(ramp(&[1, 2, 2, 3], 0.0), |t, x| {
            let u = t.upsample2x(x);
            let c = t.concat_channels(u, u);
            let r = t.reshape(c, &[1, 4, 4, 6]);
            let e = t.constant(ramp(&[1, 4], 3.0));
            let a = t.add_channel(r, e);
            let l = squared_sum(t, a);
            t.lincomb(&[(l, 0.3), (l, 0.4)])
        });
    }

    #[test]
    fn weighted_cross_entropy_gradient() {
        let targets = vec![0, 1, 2, 1, 0, 2, 2, 1];
        check_input_grad(ramp(&[2, 3, 2, 2], 0.7), |t, x| {
            t.weighted_cross_entropy(x, &targets, &[1.0, 3.0, 0.5]).unwrap()
        });
    }

    #[test]
    fn linear_gradient() {
        let w = ramp(&[3, 4], 1.5);
        check_input_grad(ramp(&[2, 4], 0.0), |t, x| {
            let wv = t.constant(w.clone());
            let b = t.constant(ramp(&[3], 2.0));
            let y = t.linear(x, wv, b);
            squared_sum(t, y)
        });
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let err = t.weighted_cross_entropy(x, &[0, 5], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Label { index: 1, class: 5, .. }));
    }
}
