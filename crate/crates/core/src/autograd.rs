//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass. Calling
//! [`Graph::backward`] on a scalar node populates gradients for every node that
//! transitively depends on a leaf created with `requires_grad = true`. Leaves
//! created without gradient tracking behave as constants, which is how frozen
//! networks are expressed: their parameters enter as constants while gradients
//! still flow through their activations to upstream inputs.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        // geometry of the equivalent forward convolution from output back to input
        geom: ConvGeom,
        in_channels: usize,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    Column {
        input: Var,
        column: usize,
    },
    Loss {
        inputs: Vec<(Var, Vec<T>)>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros shaped like the node when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution with a square kernel and zero padding.
    /// `input` is `[N, C, H, W]`, `weight` is `[O, C, K, K]`, `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCKK");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (n, c, h, w, k) = (xs[0], xs[1], xs[2], xs[3], ws[2]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let o = ws[0];
        let cols = im2col(self.value(input).data(), &geom);
        let ckk = c * k * k;
        let nl = n * oh * ow;
        let mut tmp = vec![T::zero(); o * nl];
        T::gemm(
            o,
            ckk,
            nl,
            T::one(),
            self.value(weight).data(),
            ckk as isize,
            1,
            &cols,
            nl as isize,
            1,
            T::zero(),
            &mut tmp,
            nl as isize,
            1,
        );
        let l = oh * ow;
        let mut out = vec![T::zero(); n * o * l];
        let bias_vals = bias.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bv = bias_vals.as_ref().map_or(T::zero(), |b| b[oc]);
            for ni in 0..n {
                let src = &tmp[oc * nl + ni * l..oc * nl + (ni + 1) * l];
                let dst = &mut out[(ni * o + oc) * l..(ni * o + oc + 1) * l];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, o, oh, ow], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels: o,
            },
            rg,
        )
    }

    /// Fractionally-strided convolution, the adjoint of [`Graph::conv2d`].
    /// `input` is `[N, Cin, H, W]`, `weight` is `[Cin, Cout, K, K]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        assert_eq!(ws[2], ws[3]);
        let (n, cin, h, w, cout, k) = (xs[0], xs[1], xs[2], xs[3], ws[1], ws[2]);
        let oh = (h - 1) * stride + k + output_pad - 2 * pad;
        let ow = (w - 1) * stride + k + output_pad - 2 * pad;
        let geom = ConvGeom {
            n,
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        debug_assert_eq!((oh + 2 * pad - k) / stride + 1, h);
        let nl = n * h * w;
        let xp = to_channel_major(self.value(input).data(), n, cin, h * w);
        let ckk = cout * k * k;
        let mut cols = vec![T::zero(); ckk * nl];
        // cols = W^T x, with W viewed as [Cin, Cout*K*K]
        T::gemm(
            ckk,
            cin,
            nl,
            T::one(),
            self.value(weight).data(),
            1,
            ckk as isize,
            &xp,
            nl as isize,
            1,
            T::zero(),
            &mut cols,
            nl as isize,
            1,
        );
        let mut out = col2im(&cols, &geom);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let l = oh * ow;
            for ni in 0..n {
                for oc in 0..cout {
                    for v in &mut out[(ni * cout + oc) * l..(ni * cout + oc + 1) * l] {
                        *v += bv[oc];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, cout, oh, ow], out),
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_channels: cin,
            },
            rg,
        )
    }

    /// Per-sample, per-channel normalization over spatial positions (no affine).
    pub fn instance_norm(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4);
        let l = s[2] * s[3];
        let eps = T::lit(1e-5);
        let ln = T::from_usize(l).unwrap();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for (plane, dst) in x.data().chunks_exact(l).zip(out.chunks_exact_mut(l)) {
            let mean = plane.iter().copied().sum::<T>() / ln;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ln;
            let is = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(input);
        self.push(Tensor::new(s, out), Op::InstanceNorm { input, inv_std }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(input);
        self.push(out, Op::LeakyRelu(input, s), rg)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.tanh());
        let rg = self.rg(input);
        self.push(out, Op::Tanh(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sigmoid);
        let rg = self.rg(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `input [N, F]` times `weight [O, F]` transposed, plus `bias [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear: feature mismatch");
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(input).data(),
            f as isize,
            1,
            self.value(weight).data(),
            1,
            f as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, o], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Var {
        let out = self.value(input).clone().reshape(shape);
        let rg = self.rg(input);
        self.push(out, Op::Reshape(input), rg)
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let shape = [t.batch(), t.item_len()];
        self.reshape(input, &shape)
    }

    /// Inverted dropout; `keep` holds 1 for kept units and 0 for dropped ones.
    pub fn dropout(&mut self, input: Var, keep: &[bool], rate: f64) -> Var {
        let x = self.value(input);
        assert_eq!(keep.len(), x.len());
        let scale = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { scale } else { T::zero() })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        let rg = self.rg(input);
        self.push(out, Op::Dropout { input, mask }, rg)
    }

    /// Normalized exponential along the last axis of a `[N, K]` tensor.
    pub fn softmax(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 2);
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.data().chunks_exact(s[1]).zip(out.chunks_exact_mut(s[1])) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(s, out), Op::Softmax(input), rg)
    }

    /// Column `column` of a `[N, K]` tensor as an `[N]` tensor.
    pub fn column(&mut self, input: Var, column: usize) -> Var {
        let x = self.value(input);
        let k = x.shape()[1];
        let data = x.data().iter().skip(column).step_by(k).copied().collect();
        let out = Tensor::new(vec![x.batch()], data);
        let rg = self.rg(input);
        self.push(out, Op::Column { input, column }, rg)
    }

    /// Scalar node whose value and input gradients were computed externally.
    ///
    /// Each entry pairs an input with `d value / d input`, shaped like the input.
    pub fn external_loss(&mut self, value: T, partials: Vec<(Var, Vec<T>)>) -> Var {
        for (v, g) in &partials {
            assert_eq!(self.value(*v).len(), g.len(), "external_loss: gradient shape");
        }
        let rg = partials.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::Loss { inputs: partials }, rg)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, w)| {
                let t = self.value(v);
                assert_eq!(t.len(), 1, "weighted_sum expects scalar nodes");
                t.data()[0] * w
            })
            .sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar node; replaces any earlier gradients.
    pub fn backward(&mut self, target: Var) {
        assert_eq!(self.value(target).len(), 1, "backward target must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(Tensor::full(self.value(target).shape(), T::one()));
        for idx in (0..=target.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels,
            } => {
                let o = *out_channels;
                let l = geom.oh * geom.ow;
                let nl = geom.n * l;
                let ckk = geom.c * geom.k * geom.k;
                let gp = to_channel_major(g.data(), geom.n, o, l);
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let db: Vec<T> = gp.chunks_exact(nl).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(vec![o], db));
                    }
                }
                if self.rg(*weight) {
                    let cols = im2col(self.value(*input).data(), geom);
                    let mut dw = vec![T::zero(); o * ckk];
                    T::gemm(
                        o,
                        nl,
                        ckk,
                        T::one(),
                        &gp,
                        nl as isize,
                        1,
                        &cols,
                        1,
                        nl as isize,
                        T::zero(),
                        &mut dw,
                        ckk as isize,
                        1,
                    );
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::new(shape, dw));
                }
                if self.rg(*input) {
                    let mut dcols = vec![T::zero(); ckk * nl];
                    T::gemm(
                        ckk,
                        o,
                        nl,
                        T::one(),
                        self.value(*weight).data(),
                        1,
                        ckk as isize,
                        &gp,
                        nl as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        nl as isize,
                        1,
                    );
                    let dx = col2im(&dcols, geom);
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::new(shape, dx));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_channels,
            } => {
                let cin = *in_channels;
                let cout = geom.c;
                let nl = geom.n * geom.oh * geom.ow;
                let ckk = cout * geom.k * geom.k;
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let l = geom.h * geom.w;
                        let mut db = vec![T::zero(); cout];
                        for (i, plane) in g.data().chunks_exact(l).enumerate() {
                            db[i % cout] += plane.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![cout], db));
                    }
                }
                let gcols = im2col(g.data(), geom);
                if self.rg(*weight) {
                    let xp = to_channel_major(
                        self.value(*input).data(),
                        geom.n,
                        cin,
                        geom.oh * geom.ow,
                    );
                    let mut dw = vec![T::zero(); cin * ckk];
                    T::gemm(
                        cin,
                        nl,
                        ckk,
                        T::one(),
                        &xp,
                        nl as isize,
                        1,
                        &gcols,
                        1,
                        nl as isize,
                        T::zero(),
                        &mut dw,
                        ckk as isize,
                        1,
                    );
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::new(shape, dw));
                }
                if self.rg(*input) {
                    let mut dxp = vec![T::zero(); cin * nl];
                    T::gemm(
                        cin,
                        ckk,
                        nl,
                        T::one(),
                        self.value(*weight).data(),
                        ckk as isize,
                        1,
                        &gcols,
                        nl as isize,
                        1,
                        T::zero(),
                        &mut dxp,
                        nl as isize,
                        1,
                    );
                    let dx = from_channel_major(&dxp, geom.n, cin, geom.oh * geom.ow);
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::new(shape, dx));
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let y = &node.value;
                let s = y.shape();
                let l = s[2] * s[3];
                let ln = T::from_usize(l).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (p, ((yp, gp), dp)) in y
                    .data()
                    .chunks_exact(l)
                    .zip(g.data().chunks_exact(l))
                    .zip(dx.chunks_exact_mut(l))
                    .enumerate()
                {
                    let mg = gp.iter().copied().sum::<T>() / ln;
                    let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / ln;
                    for ((d, &gv), &yv) in dp.iter_mut().zip(gp).zip(yp) {
                        *d = inv_std[p] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(s.to_vec(), dx));
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let dx = zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *input, dx);
            }
            Op::LeakyRelu(input, slope) => {
                let x = self.value(*input);
                let s = *slope;
                let dx = zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *input, dx);
            }
            Op::Tanh(input) => {
                let dx = zip_map(g, &node.value, |gv, yv| gv * (T::one() - yv * yv));
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid(input) => {
                let dx = zip_map(g, &node.value, |gv, yv| gv * yv * (T::one() - yv));
                self.accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (n, f) = (xs[0], xs[1]);
                let o = self.value(*weight).shape()[0];
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in g.data().chunks_exact(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![o], db));
                    }
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(
                        o,
                        n,
                        f,
                        T::one(),
                        g.data(),
                        1,
                        o as isize,
                        self.value(*input).data(),
                        f as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        f as isize,
                        1,
                    );
                    self.accumulate(grads, *weight, Tensor::new(vec![o, f], dw));
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(
                        n,
                        o,
                        f,
                        T::one(),
                        g.data(),
                        o as isize,
                        1,
                        self.value(*weight).data(),
                        f as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        f as isize,
                        1,
                    );
                    self.accumulate(grads, *input, Tensor::new(vec![n, f], dx));
                }
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, g.clone().reshape(&shape));
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *input, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Softmax(input) => {
                let p = &node.value;
                let k = p.shape()[1];
                let mut dx = vec![T::zero(); p.len()];
                for ((pr, gr), dr) in p
                    .data()
                    .chunks_exact(k)
                    .zip(g.data().chunks_exact(k))
                    .zip(dx.chunks_exact_mut(k))
                {
                    let dot = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
                        *d = pv * (gv - dot);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(p.shape().to_vec(), dx));
            }
            Op::Column { input, column } => {
                let s = self.value(*input).shape().to_vec();
                let mut dx = vec![T::zero(); s[0] * s[1]];
                for (i, &gv) in g.data().iter().enumerate() {
                    dx[i * s[1] + column] = gv;
                }
                self.accumulate(grads, *input, Tensor::new(s, dx));
            }
            Op::Loss { inputs } => {
                let up = g.data()[0];
                for (v, partial) in inputs {
                    let shape = self.value(*v).shape().to_vec();
                    let data = partial.iter().map(|&p| p * up).collect();
                    self.accumulate(grads, *v, Tensor::new(shape, data));
                }
            }
            Op::WeightedSum(terms) => {
                let up = g.data()[0];
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(up * w));
                }
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data)
}

/// `[N, C, L]` to `[C, N*L]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * l + ni * l..ci * n * l + (ni + 1) * l]
                .copy_from_slice(&x[(ni * c + ci) * l..(ni * c + ci + 1) * l]);
        }
    }
    out
}

/// `[C, N*L]` to `[N, C, L]`.
fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * l..(ni * c + ci + 1) * l]
                .copy_from_slice(&x[ci * n * l + ni * l..ci * n * l + (ni + 1) * l]);
        }
    }
    out
}

/// Unfolds `[N, C, H, W]` into `[C*K*K, N*OH*OW]` patch columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let l = g.oh * g.ow;
    let nl = g.n * l;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * nl];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * nl..(row + 1) * nl];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = ni * l + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[base + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back, summing overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let l = g.oh * g.ow;
    let nl = g.n * l;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * nl..(row + 1) * nl];
                for ni in 0..g.n {
                    let off = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = ni * l + oy * g.ow;
                        let dst = &mut x[off + iy as usize * g.w..off + (iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
