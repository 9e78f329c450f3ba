//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Losses
//! are evaluated outside the graph; their gradients with respect to graph
//! outputs are fed back in as seeds to [`Graph::backward`].

use rand::Rng;

use crate::error::{NnError, Result};
use crate::kernels::{bilinear_taps, col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(pad: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad,
            dilation,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of leaf nodes after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (parameters, or inputs under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let [n, in_c, in_h, in_w] = self.value(x).dims4("conv2d")?;
        let [out_c, w_in, kh, kw] = self.value(w).dims4("conv2d weight")?;
        if w_in != in_c || kh != kw {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                expected: vec![out_c, in_c, kh, kh],
                got: self.value(w).shape().to_vec(),
            });
        }
        if self.value(b).shape() != [out_c] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![out_c],
                got: self.value(b).shape().to_vec(),
            });
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            kernel: kh,
            stride: spec.stride,
            pad: spec.pad,
            dilation: spec.dilation,
        };
        let (oh, ow) = geom.out_hw();
        let p = oh * ow;
        let krows = geom.col_rows();
        let mut out = vec![0.0; n * out_c * p];
        let mut cols = vec![0.0; krows * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let img_len = in_c * in_h * in_w;
        for i in 0..n {
            im2col(&xv[i * img_len..(i + 1) * img_len], &geom, &mut cols);
            let dst = &mut out[i * out_c * p..(i + 1) * out_c * p];
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bv[oc]);
            }
            gemm(out_c, krows, p, wv, false, &cols, false, dst, 1.0);
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(vec![n, out_c, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// `x [N, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, fin] = self.value(x).dims2("linear")?;
        let [fout, w_in] = self.value(w).dims2("linear weight")?;
        if w_in != fin || self.value(b).shape() != [fout] {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                expected: vec![fout, fin],
                got: self.value(w).shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            1.0,
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.needs(x);
        self.push(t, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.needs(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("softmax_channels")?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(src[base + ch * hw + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * hw + p] - m).exp();
                    out[base + ch * hw + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= z;
                }
            }
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(t, Op::SoftmaxChannels(x), rg))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let mut t = src.clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::ShapeMismatch {
                op: "concat_channels",
                expected: vec![n, cb, h, w],
                got: self.value(b).shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.needs(a) || self.needs(b);
        let t = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(t, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same(self.value(b), "add")?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Bilinear 2x upsample (half-pixel centers, edge clamped).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample2x")?;
        let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                    let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                    d[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let src = self.value(x).data();
        let out = (0..n * c)
            .map(|i| src[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.needs(x);
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Spatial maximum per channel, `[N,C,H,W]` → `[N,C]`; ties go to the
    /// first position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_max_pool")?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut argmax = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let plane = &src[i * hw..(i + 1) * hw];
            let mut best = 0;
            for (k, v) in plane.iter().enumerate() {
                if *v > plane[best] {
                    best = k;
                }
            }
            argmax.push(i * hw + best);
            out.push(plane[best]);
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Propagate `seeds` (d loss / d output pairs) back to every leaf.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            self.value(*v).check_same(g, "backward seed")?;
            accumulate(&mut grads, *v, g.clone())?;
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gy: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => self.backward_conv(*x, *w, *b, *spec, &gy, grads)?,
            Op::Linear { x, w, b } => {
                let [n, fin] = self.value(*x).dims2("linear")?;
                let fout = self.value(*b).numel();
                if self.needs(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        n,
                        fin,
                        gy.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut gw,
                        0.0,
                    );
                    accumulate(grads, *w, Tensor::new(vec![fout, fin], gw)?)?;
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; fout];
                    for row in gy.data().chunks(fout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![fout], gb)?)?;
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        gy.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut gx,
                        0.0,
                    );
                    accumulate(grads, *x, Tensor::new(vec![n, fin], gx)?)?;
                }
            }
            Op::Relu(x) => {
                let mut g = gy;
                for (gv, xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                accumulate(grads, *x, g)?;
            }
            Op::LeakyRelu(x, slope) => {
                let mut g = gy;
                for (gv, xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                accumulate(grads, *x, g)?;
            }
            Op::Sigmoid(x) => {
                let mut g = gy;
                for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= yv * (1.0 - yv);
                }
                accumulate(grads, *x, g)?;
            }
            Op::SoftmaxChannels(x) => {
                let [n, c, h, w] = node.value.dims4("softmax_channels")?;
                let hw = h * w;
                let y = node.value.data();
                let mut g = gy;
                let gd = g.data_mut();
                for i in 0..n {
                    let base = i * c * hw;
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let k = base + ch * hw + p;
                            dot += y[k] * gd[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * hw + p;
                            gd[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                accumulate(grads, *x, g)?;
            }
            Op::Dropout { x, mask } => {
                let mut g = gy;
                for (gv, m) in g.data_mut().iter_mut().zip(mask) {
                    *gv *= m;
                }
                accumulate(grads, *x, g)?;
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                let cb = self.value(*b).dims4("concat_channels")?[1];
                let hw = h * w;
                let src = gy.data();
                let stride = (ca + cb) * hw;
                if self.needs(*a) {
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    for i in 0..n {
                        ga.extend_from_slice(&src[i * stride..i * stride + ca * hw]);
                    }
                    accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], ga)?)?;
                }
                if self.needs(*b) {
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        gb.extend_from_slice(&src[i * stride + ca * hw..(i + 1) * stride]);
                    }
                    accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], gb)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.clone())?;
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy)?;
                }
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).dims4("upsample2x")?;
                let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![0.0; n * c * h * w];
                let src = gy.data();
                for plane in 0..n * c {
                    let s = &src[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = s[oy * ow + ox];
                            d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            d[y1 * w + x0] += gv * fy * (1.0 - fx);
                            d[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], gx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = self.value(*x).dims4("global_avg_pool")?;
                let hw = h * w;
                let scale = 1.0 / hw as f64;
                let mut gx = vec![0.0; n * c * hw];
                for (i, g) in gy.data().iter().enumerate() {
                    gx[i * hw..(i + 1) * hw].fill(g * scale);
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], gx)?)?;
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (g, &k) in gy.data().iter().zip(argmax) {
                    gx.data_mut()[k] += g;
                }
                accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }

    fn backward_conv(
        &self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let [n, in_c, in_h, in_w] = self.value(x).dims4("conv2d")?;
        let wshape = self.value(w).shape().to_vec();
        let (out_c, k) = (wshape[0], wshape[2]);
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            kernel: k,
            stride: spec.stride,
            pad: spec.pad,
            dilation: spec.dilation,
        };
        let (oh, ow) = geom.out_hw();
        let p = oh * ow;
        let krows = geom.col_rows();
        let img_len = in_c * in_h * in_w;
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let gyd = gy.data();

        if self.needs(b) {
            let mut gb = vec![0.0; out_c];
            for i in 0..n {
                for (oc, acc) in gb.iter_mut().enumerate() {
                    let start = (i * out_c + oc) * p;
                    *acc += gyd[start..start + p].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, Tensor::new(vec![out_c], gb)?)?;
        }
        if !need_x && !need_w {
            return Ok(());
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![0.0; krows * p];
        let mut gw = if need_w {
            vec![0.0; out_c * krows]
        } else {
            Vec::new()
        };
        let mut gx = if need_x {
            vec![0.0; n * img_len]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let gyi = &gyd[i * out_c * p..(i + 1) * out_c * p];
            if need_w {
                im2col(&xv[i * img_len..(i + 1) * img_len], &geom, &mut cols);
                gemm(out_c, p, krows, gyi, false, &cols, true, &mut gw, 1.0);
            }
            if need_x {
                gemm(krows, out_c, p, wv, true, gyi, false, &mut cols, 0.0);
                col2im(&cols, &geom, &mut gx[i * img_len..(i + 1) * img_len]);
            }
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wshape, gw)?)?;
        }
        if need_x {
            accumulate(grads, x, Tensor::new(vec![n, in_c, in_h, in_w], gx)?)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
