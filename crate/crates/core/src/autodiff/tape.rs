use super::{Real, Tensor};
use crate::distcore;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPoolRegion {
        x: Var,
        // flat index into x of the selected element, per channel
        argmax: Vec<usize>,
        // max - runner-up per channel (infinite for one-element regions)
        gaps: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norm: T,
        eps: T,
    },
    Softmax(Var),
    CrossEntropySoft {
        logits: Var,
        grad: Vec<T>,
    },
    // Huber and Euclidean store d(loss)/d(input); residual margins are kept for kink checks
    PointLoss {
        x: Var,
        grad: Vec<T>,
        knee_margin: f64,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, T),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of evaluated operations, in topological order by construction.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one image `[C,H,W]` into a `[C*kh*kw, Ho*Wo]` patch matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let q = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &mut cols[r * q..(r + 1) * q];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let q = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &cols[r * q..(r + 1) * q];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last [`Tape::backward`] call, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [K,C,kh,kw]` plus bias `b: [K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, k) = (xs[0], ws[0]);
        let (ho, wo) = match (
            conv_out(xs[2], ws[2], stride, pad),
            conv_out(xs[3], ws[3], stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {ws:?} (stride {stride}, pad {pad}) does not fit input {xs:?}"),
                ))
            }
        };
        let g = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
            stride,
            pad,
        };
        let (rows, q) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * k * q];
        let mut cols = vec![T::zero(); rows * q];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let img_len = g.c * g.h * g.w;
            for s in 0..n {
                g.im2col(&xv[s * img_len..(s + 1) * img_len], &mut cols);
                for kk in 0..k {
                    let dst = &mut out[(s * k + kk) * q..(s * k + kk + 1) * q];
                    dst.iter_mut().for_each(|v| *v = bv[kk]);
                    let wrow = &wv[kk * rows..(kk + 1) * rows];
                    for (r, &wr) in wrow.iter().enumerate() {
                        let src = &cols[r * q..(r + 1) * q];
                        for (d, &c) in dst.iter_mut().zip(src) {
                            *d += wr * c;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, k, ho, wo], out)?;
        Ok(self.push(
            value,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Relu(x))
    }

    /// Affine map `x: [N,D] @ w: [D,M] + b: [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for s in 0..n {
            let mut row = bv.to_vec();
            for (dd, &xi) in xv[s * d..(s + 1) * d].iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                for (o, &wi) in row.iter_mut().zip(&wv[dd * m..(dd + 1) * m]) {
                    *o += xi * wi;
                }
            }
            out.extend(row);
        }
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, &[x, w, b], Op::Linear { x, w, b }))
    }

    /// Per-channel max of `x: [C,H,W]` over rows `r0..r1` and columns `c0..c1`.
    ///
    /// Ties resolve to the first element in row-major order.
    pub fn max_pool_region(
        &mut self,
        x: Var,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("max_pool_region", format!("expected [C,H,W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if !(r0 < r1 && r1 <= h && c0 < c1 && c1 <= w) {
            return Err(Error::shape(
                "max_pool_region",
                format!("region rows {r0}..{r1} cols {c0}..{c1} is empty or outside {xs:?}"),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        let mut gaps = Vec::with_capacity(c);
        for ch in 0..c {
            let mut best = usize::MAX;
            let mut best_v = T::neg_infinity();
            let mut second = f64::NEG_INFINITY;
            for r in r0..r1 {
                for col in c0..c1 {
                    let idx = (ch * h + r) * w + col;
                    let v = xv[idx];
                    if best == usize::MAX || v > best_v {
                        if best != usize::MAX {
                            second = second.max(best_v.as_f64());
                        }
                        best = idx;
                        best_v = v;
                    } else {
                        second = second.max(v.as_f64());
                    }
                }
            }
            out.push(best_v);
            argmax.push(best);
            gaps.push(best_v.as_f64() - second);
        }
        let value = Tensor::from_vec(out);
        Ok(self.push(value, &[x], Op::MaxPoolRegion { x, argmax, gaps }))
    }

    /// `x / max(||x||_2, eps)`, keeping the input shape.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let norm = xv.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm.max(eps);
        let data = xv.data().iter().map(|&v| v / denom).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::L2Normalize { x, norm, eps })
    }

    /// Softmax over all elements of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = softmax_values(xv.data());
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Softmax(x))
    }

    /// `-sum_i target_i * log softmax(logits)_i` as a scalar.
    pub fn cross_entropy_soft(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let lv = self.value(logits).data();
        if lv.len() != target.len() {
            return Err(Error::shape(
                "cross_entropy_soft",
                format!("{} logits vs {} targets", lv.len(), target.len()),
            ));
        }
        let max = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = max + lv.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        let mut loss = T::zero();
        for (&z, &t) in lv.iter().zip(target) {
            if t != T::zero() {
                loss = loss - t * (z - log_z);
            }
        }
        let t_sum: T = target.iter().copied().sum();
        let grad = lv
            .iter()
            .zip(target)
            .map(|(&z, &t)| (z - log_z).exp() * t_sum - t)
            .collect();
        let value = Tensor::from_vec(vec![loss]);
        Ok(self.push(value, &[logits], Op::CrossEntropySoft { logits, grad }))
    }

    /// Summed Huber loss against a fixed target, knee at `delta`.
    pub fn huber(&mut self, x: Var, target: &[f64], delta: f64) -> Result<Var> {
        let xv: Vec<f64> = self.value(x).data().iter().map(|v| v.as_f64()).collect();
        if xv.len() != target.len() {
            return Err(Error::shape(
                "huber",
                format!("{} predictions vs {} targets", xv.len(), target.len()),
            ));
        }
        let (loss, grad) = distcore::huber_terms(&xv, target, delta);
        let knee_margin = xv
            .iter()
            .zip(target)
            .map(|(p, g)| ((p - g).abs() - delta).abs())
            .fold(f64::INFINITY, f64::min);
        Ok(self.push_point_loss(x, loss, grad, knee_margin))
    }

    /// Half squared Euclidean distance to a fixed target.
    pub fn euclidean(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv: Vec<f64> = self.value(x).data().iter().map(|v| v.as_f64()).collect();
        if xv.len() != target.len() {
            return Err(Error::shape(
                "euclidean",
                format!("{} predictions vs {} targets", xv.len(), target.len()),
            ));
        }
        let (loss, grad) = distcore::euclidean_terms(&xv, target);
        Ok(self.push_point_loss(x, loss, grad, f64::INFINITY))
    }

    fn push_point_loss(&mut self, x: Var, loss: f64, grad: Vec<f64>, knee_margin: f64) -> Var {
        let value = Tensor::from_vec(vec![T::of(loss)]);
        let grad = grad.into_iter().map(T::of).collect();
        self.push(
            value,
            &[x],
            Op::PointLoss {
                x,
                grad,
                knee_margin,
            },
        )
    }

    /// Flattened concatenation of all inputs, in order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors"));
        }
        let data: Vec<T> = xs
            .iter()
            .flat_map(|v| self.value(*v).data().iter().copied())
            .collect();
        let value = Tensor::from_vec(data);
        Ok(self.push(value, xs, Op::Concat(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Scale(x, s))
    }

    /// Scalar `sum_i weights_i * x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} values vs {} weights", xv.len(), weights.len()),
            ));
        }
        let s = xv.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let value = Tensor::from_vec(vec![s]);
        Ok(self.push(
            value,
            &[x],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, &vec![T::one(); n]).expect("matching length")
    }

    /// Smallest distance from any recorded non-differentiable point: ReLU inputs from zero,
    /// max-pool winners from their runner-up, Huber residuals from the knee.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let m = match &node.op {
                Op::Relu(x) => self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.as_f64().abs())
                    .fold(f64::INFINITY, f64::min),
                Op::MaxPoolRegion { gaps, .. } => gaps.iter().copied().fold(f64::INFINITY, f64::min),
                Op::PointLoss { knee_margin, .. } => *knee_margin,
                Op::L2Normalize { norm, eps, .. } => (norm.as_f64() - eps.as_f64()).abs(),
                _ => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        margin
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Clears gradients from any previous sweep, seeds `d loss / d loss = 1` and visits every
    /// node once in reverse recording order, summing contributions at fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            let contributions = self.local_backward(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, delta) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(node, *x, *w, *b, *stride, *pad, g),
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let m = self.nodes[w.0].value.shape()[1];
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let mut out = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    for s in 0..n {
                        let gr = &g[s * m..(s + 1) * m];
                        for dd in 0..d {
                            dx[s * d + dd] = wv[dd * m..(dd + 1) * m]
                                .iter()
                                .zip(gr)
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); d * m];
                    for s in 0..n {
                        let gr = &g[s * m..(s + 1) * m];
                        for dd in 0..d {
                            let xi = xv[s * d + dd];
                            if xi == T::zero() {
                                continue;
                            }
                            for (o, &gi) in dw[dd * m..(dd + 1) * m].iter_mut().zip(gr) {
                                *o += xi * gi;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); m];
                    for s in 0..n {
                        for (o, &gi) in db.iter_mut().zip(&g[s * m..(s + 1) * m]) {
                            *o += gi;
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::MaxPoolRegion { x, argmax, .. } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&i, &gi) in argmax.iter().zip(g) {
                    dx[i] += gi;
                }
                vec![(*x, dx)]
            }
            Op::L2Normalize { x, norm, eps } => {
                let y = node.value.data();
                let dx = if *norm > *eps {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    y.iter()
                        .zip(g)
                        .map(|(&yi, &gi)| (gi - yi * dot) / *norm)
                        .collect()
                } else {
                    g.iter().map(|&gi| gi / *eps).collect()
                };
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                let dx = y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect();
                vec![(*x, dx)]
            }
            Op::CrossEntropySoft { logits, grad } | Op::PointLoss { x: logits, grad, .. } => {
                let dx = grad.iter().map(|&d| d * g[0]).collect();
                vec![(*logits, dx)]
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|v| {
                        let n = self.nodes[v.0].value.len();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        (*v, part)
                    })
                    .collect()
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&gi| gi * *s).collect())],
            Op::WeightedSum { x, weights } => {
                vec![(*x, weights.iter().map(|&w| w * g[0]).collect())]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node<T>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        let os = node.value.shape();
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ho: os[2],
            wo: os[3],
            stride,
            pad,
        };
        let (n, k) = (xs[0], ws[0]);
        let (rows, q) = (geom.rows(), geom.cols());
        let img_len = geom.c * geom.h * geom.w;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let (need_x, need_w) = (self.needs(x), self.needs(w));

        let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
        let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
        let mut cols = vec![T::zero(); rows * q];
        let mut dcols = vec![T::zero(); rows * q];
        for s in 0..n {
            let gs = &g[s * k * q..(s + 1) * k * q];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(&xv[s * img_len..(s + 1) * img_len], &mut cols);
                for kk in 0..k {
                    let gk = &gs[kk * q..(kk + 1) * q];
                    for r in 0..rows {
                        let c = &cols[r * q..(r + 1) * q];
                        dw[kk * rows + r] += gk.iter().zip(c).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                for kk in 0..k {
                    let gk = &gs[kk * q..(kk + 1) * q];
                    for r in 0..rows {
                        let wr = wv[kk * rows + r];
                        for (d, &gi) in dcols[r * q..(r + 1) * q].iter_mut().zip(gk) {
                            *d += wr * gi;
                        }
                    }
                }
                geom.col2im(&dcols, &mut dx[s * img_len..(s + 1) * img_len]);
            }
        }
        let mut out = Vec::new();
        if let Some(dx) = dx {
            out.push((x, dx));
        }
        if let Some(dw) = dw {
            out.push((w, dw));
        }
        if self.needs(b) {
            let mut db = vec![T::zero(); k];
            for s in 0..n {
                for (kk, d) in db.iter_mut().enumerate() {
                    *d += g[(s * k + kk) * q..(s * k + kk + 1) * q].iter().copied().sum::<T>();
                }
            }
            out.push((b, db));
        }
        out
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax_values<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}
