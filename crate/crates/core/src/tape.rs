//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] owns every buffer produced during one forward pass. Operations
//! execute eagerly, record what they need for their adjoint, and `backward`
//! replays the list once in reverse, accumulating gradients per buffer.
//! Recording order is the only topological order used, so replay is
//! deterministic by construction.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape, UpShape};
use crate::tensor::{Scalar, Tensor};

pub type BufId = usize;

struct Buf<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
}

enum Op<T> {
    Conv2d {
        x: BufId,
        w: BufId,
        b: BufId,
        out: BufId,
        shape: ConvShape,
    },
    MaxPool {
        x: BufId,
        out: BufId,
        arg: Vec<u32>,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Upsample {
        x: BufId,
        w: BufId,
        out: BufId,
        shape: UpShape,
    },
    Relu {
        x: BufId,
        out: BufId,
    },
    Add {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Scale {
        x: BufId,
        factor: T,
        out: BufId,
    },
    Concat {
        parts: Vec<BufId>,
        out: BufId,
    },
    WeightedSum {
        x: BufId,
        weights: Vec<T>,
        out: BufId,
    },
    SoftmaxCe {
        logits: BufId,
        out: BufId,
        labels: Vec<u32>,
        weights: Vec<T>,
        probs: Vec<T>,
        n: usize,
        kc: usize,
        hw: usize,
    },
}

impl<T> Op<T> {
    fn out(&self) -> BufId {
        match self {
            Op::Conv2d { out, .. }
            | Op::MaxPool { out, .. }
            | Op::Upsample { out, .. }
            | Op::Relu { out, .. }
            | Op::Add { out, .. }
            | Op::Scale { out, .. }
            | Op::Concat { out, .. }
            | Op::WeightedSum { out, .. }
            | Op::SoftmaxCe { out, .. } => *out,
        }
    }
}

pub struct Tape<T> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push_buf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> BufId {
        self.bufs.push(Buf {
            data,
            shape,
            requires_grad,
        });
        self.grads.push(None);
        self.bufs.len() - 1
    }

    /// Register a buffer that needs no gradient (inputs, detached values).
    pub fn constant(&mut self, t: &Tensor<T>) -> BufId {
        self.push_buf(t.data().to_vec(), t.shape().to_vec(), false)
    }

    /// Register a trainable buffer; `backward` will accumulate its gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> BufId {
        self.push_buf(t.data().to_vec(), t.shape().to_vec(), true)
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn data(&self, id: BufId) -> &[T] {
        &self.bufs[id].data
    }

    pub fn tensor(&self, id: BufId) -> Tensor<T> {
        Tensor::new(self.bufs[id].shape.clone(), self.bufs[id].data.clone()).unwrap()
    }

    /// Gradient accumulated by `backward` for buffer `id`. `None` when the
    /// buffer was never reached or does not track gradients.
    pub fn grad(&self, id: BufId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    fn check_finite(&self, id: BufId, op: &str) -> Result<()> {
        match self.bufs[id].data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!("{} output at flat index {}", op, i))),
        }
    }

    fn any_grad(&self, ids: &[BufId]) -> bool {
        ids.iter().any(|&id| self.bufs[id].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: BufId,
        w: BufId,
        b: BufId,
        stride: usize,
        pad: usize,
    ) -> Result<BufId> {
        let shape = ConvShape::infer(&self.bufs[x].shape, &self.bufs[w].shape, stride, pad)?;
        if self.bufs[b].shape != [shape.cout] {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {} output channels",
                    self.bufs[b].shape, shape.cout
                ),
            ));
        }
        let out_data = kernels::conv2d_forward(
            &self.bufs[x].data,
            &self.bufs[w].data,
            &self.bufs[b].data,
            &shape,
        );
        let rg = self.any_grad(&[x, w, b]);
        let out = self.push_buf(out_data, vec![shape.n, shape.cout, shape.oh, shape.ow], rg);
        self.check_finite(out, "conv2d")?;
        self.ops.push(Op::Conv2d {
            x,
            w,
            b,
            out,
            shape,
        });
        Ok(out)
    }

    pub fn maxpool2d(&mut self, x: BufId, k: usize, stride: usize) -> Result<BufId> {
        let s = self.bufs[x].shape.clone();
        if s.len() != 4 {
            return Err(Error::dim(
                "maxpool2d",
                format!("want 4-d input, got {:?}", s),
            ));
        }
        let (out_data, arg, oh, ow) =
            kernels::maxpool_forward(&self.bufs[x].data, s[0], s[1], s[2], s[3], k, stride)?;
        let rg = self.bufs[x].requires_grad;
        let out = self.push_buf(out_data, vec![s[0], s[1], oh, ow], rg);
        self.ops.push(Op::MaxPool {
            x,
            out,
            arg,
            h: s[2],
            w: s[3],
            oh,
            ow,
        });
        Ok(out)
    }

    pub fn upsample(&mut self, x: BufId, w: BufId, factor: usize) -> Result<BufId> {
        let shape = UpShape::infer(&self.bufs[x].shape, &self.bufs[w].shape, factor)?;
        let out_data = kernels::upsample_forward(&self.bufs[x].data, &self.bufs[w].data, &shape);
        let rg = self.any_grad(&[x, w]);
        let out = self.push_buf(out_data, vec![shape.n, shape.cout, shape.oh, shape.ow], rg);
        self.check_finite(out, "upsample")?;
        self.ops.push(Op::Upsample { x, w, out, shape });
        Ok(out)
    }

    pub fn relu(&mut self, x: BufId) -> BufId {
        let data: Vec<T> = self.bufs[x]
            .data
            .iter()
            .map(|&v| v.max(T::zero()))
            .collect();
        let shape = self.bufs[x].shape.clone();
        let rg = self.bufs[x].requires_grad;
        let out = self.push_buf(data, shape, rg);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].shape != self.bufs[b].shape {
            return Err(Error::dim(
                "add",
                format!(
                    "shapes {:?} and {:?} differ",
                    self.bufs[a].shape, self.bufs[b].shape
                ),
            ));
        }
        let data: Vec<T> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        let out = self.push_buf(data, shape, rg);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: BufId, factor: T) -> BufId {
        let data: Vec<T> = self.bufs[x].data.iter().map(|&v| v * factor).collect();
        let shape = self.bufs[x].shape.clone();
        let rg = self.bufs[x].requires_grad;
        let out = self.push_buf(data, shape, rg);
        self.ops.push(Op::Scale { x, factor, out });
        out
    }

    /// Concatenate 4-d buffers along the channel axis.
    pub fn concat_channels(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_channels", "no inputs"));
        }
        let first = self.bufs[parts[0]].shape.clone();
        if first.len() != 4 {
            return Err(Error::dim(
                "concat_channels",
                format!("want 4-d inputs, got {:?}", first),
            ));
        }
        let mut c_total = 0;
        for &p in parts {
            let s = &self.bufs[p].shape;
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::dim(
                    "concat_channels",
                    format!("shape {:?} does not stack with {:?}", s, first),
                ));
            }
            c_total += s[1];
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let hw = h * w;
        let mut data = vec![T::zero(); n * c_total * hw];
        for ni in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let c = self.bufs[p].shape[1];
                let src = &self.bufs[p].data[ni * c * hw..(ni + 1) * c * hw];
                data[(ni * c_total + c_off) * hw..(ni * c_total + c_off + c) * hw]
                    .copy_from_slice(src);
                c_off += c;
            }
        }
        let rg = self.any_grad(parts);
        let out = self.push_buf(data, vec![n, c_total, h, w], rg);
        self.ops.push(Op::Concat {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Scalar projection `sum_i weights[i] * x[i]`, folded left to right.
    /// Gives tests and probes a deterministic scalar root over any buffer.
    pub fn weighted_sum(&mut self, x: BufId, weights: &[T]) -> Result<BufId> {
        if weights.len() != self.bufs[x].data.len() {
            return Err(Error::dim(
                "weighted_sum",
                format!(
                    "{} weights for {} elements",
                    weights.len(),
                    self.bufs[x].data.len()
                ),
            ));
        }
        let mut acc = T::zero();
        for (&v, &w) in self.bufs[x].data.iter().zip(weights) {
            acc = acc + v * w;
        }
        let rg = self.bufs[x].requires_grad;
        let out = self.push_buf(vec![acc], vec![1], rg);
        self.ops.push(Op::WeightedSum {
            x,
            weights: weights.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Mean weighted cross entropy between channel logits and integer labels;
    /// returns a scalar buffer of shape `[1]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: BufId,
        labels: &[u32],
        class_weights: &[T],
    ) -> Result<BufId> {
        let s = self.bufs[logits].shape.clone();
        if s.len() != 4 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("want 4-d logits, got {:?}", s),
            ));
        }
        let (n, kc, hw) = (s[0], s[1], s[2] * s[3]);
        if labels.len() != n * hw {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!(
                    "labels len {} does not match {}x{} pixels",
                    labels.len(),
                    n,
                    hw
                ),
            ));
        }
        if class_weights.len() != kc {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} class weights for {} classes", class_weights.len(), kc),
            ));
        }
        if class_weights
            .iter()
            .any(|&w| !w.is_finite() || w <= T::zero())
        {
            return Err(Error::config(
                "class weights must be finite and strictly positive",
            ));
        }
        let (loss, probs) =
            kernels::softmax_ce_forward(&self.bufs[logits].data, labels, class_weights, n, kc, hw)?;
        if !loss.is_finite() {
            return Err(Error::numeric("softmax_cross_entropy loss"));
        }
        let rg = self.bufs[logits].requires_grad;
        let out = self.push_buf(vec![loss], vec![1], rg);
        self.ops.push(Op::SoftmaxCe {
            logits,
            out,
            labels: labels.to_vec(),
            weights: class_weights.to_vec(),
            probs,
            n,
            kc,
            hw,
        });
        Ok(out)
    }

    fn grad_buf(&mut self, id: BufId) -> Vec<T> {
        let len = self.bufs[id].data.len();
        self.grads[id]
            .take()
            .unwrap_or_else(|| vec![T::zero(); len])
    }

    /// Run the adjoint sweep from a scalar loss buffer. Gradients accumulate
    /// into per-buffer slots readable through [`Tape::grad`]. The recorded
    /// operations are consumed; a second call is an error.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.consumed {
            return Err(Error::numeric("backward called twice on one tape"));
        }
        if self.bufs[loss].data.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.bufs[loss].shape),
            ));
        }
        self.consumed = true;
        self.grads[loss] = Some(vec![T::one()]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.into_iter().rev() {
            let out_id = op.out();
            if !self.bufs[out_id].requires_grad {
                continue;
            }
            let d_out = match self.grads[out_id].take() {
                Some(g) => g,
                None => continue,
            };
            match op {
                Op::Conv2d { x, w, b, shape, .. } => {
                    let mut dw = self.grad_buf(w);
                    let mut db = self.grad_buf(b);
                    if self.bufs[x].requires_grad {
                        let mut dx = self.grad_buf(x);
                        kernels::conv2d_backward(
                            &self.bufs[x].data,
                            &self.bufs[w].data,
                            &d_out,
                            &shape,
                            Some(&mut dx),
                            &mut dw,
                            &mut db,
                        );
                        self.grads[x] = Some(dx);
                    } else {
                        kernels::conv2d_backward(
                            &self.bufs[x].data,
                            &self.bufs[w].data,
                            &d_out,
                            &shape,
                            None,
                            &mut dw,
                            &mut db,
                        );
                    }
                    self.grads[w] = Some(dw);
                    self.grads[b] = Some(db);
                }
                Op::MaxPool {
                    x,
                    arg,
                    h,
                    w,
                    oh,
                    ow,
                    ..
                } => {
                    let (n, c) = (self.bufs[x].shape[0], self.bufs[x].shape[1]);
                    let mut dx = self.grad_buf(x);
                    kernels::maxpool_backward(&d_out, &arg, n, c, h, w, oh, ow, &mut dx);
                    self.grads[x] = Some(dx);
                }
                Op::Upsample { x, w, shape, .. } => {
                    let mut dw = self.grad_buf(w);
                    let mut dx = self.grad_buf(x);
                    kernels::upsample_backward(
                        &self.bufs[x].data,
                        &self.bufs[w].data,
                        &d_out,
                        &shape,
                        &mut dx,
                        &mut dw,
                    );
                    if self.bufs[x].requires_grad {
                        self.grads[x] = Some(dx);
                    }
                    self.grads[w] = Some(dw);
                }
                Op::Relu { x, .. } => {
                    let mut dx = self.grad_buf(x);
                    for (i, d) in dx.iter_mut().enumerate() {
                        if self.bufs[x].data[i] > T::zero() {
                            *d = *d + d_out[i];
                        }
                    }
                    self.grads[x] = Some(dx);
                }
                Op::Add { a, b, .. } => {
                    for id in [a, b] {
                        if self.bufs[id].requires_grad {
                            let mut dg = self.grad_buf(id);
                            for (d, &g) in dg.iter_mut().zip(&d_out) {
                                *d = *d + g;
                            }
                            self.grads[id] = Some(dg);
                        }
                    }
                }
                Op::Scale { x, factor, .. } => {
                    if self.bufs[x].requires_grad {
                        let mut dx = self.grad_buf(x);
                        for (d, &g) in dx.iter_mut().zip(&d_out) {
                            *d = *d + g * factor;
                        }
                        self.grads[x] = Some(dx);
                    }
                }
                Op::Concat { parts, out } => {
                    let (n, c_total, hw) = {
                        let s = &self.bufs[out].shape;
                        (s[0], s[1], s[2] * s[3])
                    };
                    let mut c_off = 0;
                    for p in parts {
                        let c = self.bufs[p].shape[1];
                        if self.bufs[p].requires_grad {
                            let mut dp = self.grad_buf(p);
                            for ni in 0..n {
                                let src = &d_out
                                    [(ni * c_total + c_off) * hw..(ni * c_total + c_off + c) * hw];
                                let dst = &mut dp[ni * c * hw..(ni + 1) * c * hw];
                                for (d, &g) in dst.iter_mut().zip(src) {
                                    *d = *d + g;
                                }
                            }
                            self.grads[p] = Some(dp);
                        }
                        c_off += c;
                    }
                }
                Op::WeightedSum { x, weights, .. } => {
                    if self.bufs[x].requires_grad {
                        let mut dx = self.grad_buf(x);
                        for (d, &w) in dx.iter_mut().zip(&weights) {
                            *d = *d + w * d_out[0];
                        }
                        self.grads[x] = Some(dx);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    weights,
                    probs,
                    n,
                    kc,
                    hw,
                    ..
                } => {
                    let mut dl = self.grad_buf(logits);
                    kernels::softmax_ce_backward(
                        &probs, &labels, &weights, n, kc, hw, d_out[0], &mut dl,
                    );
                    self.grads[logits] = Some(dl);
                }
            }
        }
        Ok(())
    }
}
