use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Sigmoid(usize),
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    ChannelAffine {
        input: usize,
        scale: usize,
        shift: usize,
    },
    ChannelMul {
        input: usize,
        gate: usize,
    },
    GlobalAvgPool(usize),
    Softmax(usize),
    SoftCrossEntropy {
        probs: usize,
        targets: Tensor,
        coeffs: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Every recorded op's inputs precede it, so a
/// single reverse sweep visits nodes in valid order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the var does not require grad or is unreachable from the
    /// output.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// `(N, C, inner)` view of a `[N, C, ...]` tensor.
fn channel_view(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `input [N,C_in,H,W]`, `weight [C_out,C_in,kh,kw]`, `bias [C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {bs:?} does not match {} filters", ws[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (h_out, w_out) = match (
            kernels::conv2d_output_size(xs[2], ws[2], stride, padding),
            kernels::conv2d_output_size(xs[3], ws[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "kernel {}x{} does not fit input {}x{} with padding {padding}",
                        ws[2], ws[3], xs[2], xs[3]
                    ),
                ))
            }
        };
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![geom.n, geom.c_out, h_out, w_out], out)?;
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geom,
            },
            rg,
        ))
    }

    /// `input [N,F]`, `weight [O,F]`, `bias [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?} are incompatible"),
            ));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let xr = &x[i * f..(i + 1) * f];
            for j in 0..o {
                let wr = &w[j * f..(j + 1) * f];
                let mut acc = 0.0;
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[i * o + j] = acc + b[j];
            }
        }
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            Tensor::new(vec![n, o], out)?,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Subgradient at exactly zero is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |a| s * a, Op::Scale(x.0, s))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                name,
                format!("operands {:?} and {:?} differ", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// `out[i] = input[index[i]]` for a 1-D input.
    pub fn gather(&mut self, input: Var, index: Vec<usize>) -> Result<Var> {
        let v = self.value(input);
        if v.shape().len() != 1 || index.iter().any(|&i| i >= v.len()) || index.is_empty() {
            return Err(shape_err(
                "gather",
                format!("index out of range for input {:?}", v.shape()),
            ));
        }
        let data: Vec<f64> = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::from_vec(data)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            value,
            Op::Gather {
                input: input.0,
                index,
            },
            rg,
        ))
    }

    /// `out[n,c,..] = scale[c]·x[n,c,..] + shift[c]`, for `[N,C]` or `[N,C,H,W]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, inner) = channel_view(&xs)
            .ok_or_else(|| shape_err("channel_affine", format!("input {xs:?} has no channel axis")))?;
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(shape_err(
                "channel_affine",
                format!("scale/shift must have shape [{c}]"),
            ));
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let bv = self.value(shift).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    out[j] = sv[ch] * xv[j] + bv[ch];
                }
            }
        }
        let rg = self.rg(&[x.0, scale.0, shift.0]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::ChannelAffine {
                input: x.0,
                scale: scale.0,
                shift: shift.0,
            },
            rg,
        ))
    }

    /// `out[n,c,..] = gate[c]·x[n,c,..]`.
    pub fn channel_mul(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, inner) = channel_view(&xs)
            .ok_or_else(|| shape_err("channel_mul", format!("input {xs:?} has no channel axis")))?;
        if self.value(gate).shape() != [c] {
            return Err(shape_err(
                "channel_mul",
                format!("gate shape {:?} does not match {c} channels", self.value(gate).shape()),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    out[j] = gv[ch] * xv[j];
                }
            }
        }
        let rg = self.rg(&[x.0, gate.0]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::ChannelMul {
                input: x.0,
                gate: gate.0,
            },
            rg,
        ))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err(
                "global_avg_pool",
                format!("expected [N,C,H,W], got {xs:?}"),
            ));
        }
        let (n, c, inner) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|i| xv[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x.0), rg))
    }

    /// Row-wise softmax of `[N,K]` logits, `K >= 2`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] < 2 {
            return Err(shape_err(
                "softmax",
                format!("expected [N,K] with K >= 2, got {xs:?}"),
            ));
        }
        let out = kernels::softmax_rows(self.value(x).data(), xs[1]);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax(x.0), rg))
    }

    /// `Σᵢ coeffsᵢ · (−Σₖ targetsᵢₖ · ln(probsᵢₖ + eps))` as a scalar.
    pub fn soft_cross_entropy(&mut self, probs: Var, targets: Tensor, coeffs: Vec<f64>, eps: f64) -> Result<Var> {
        let ps = self.value(probs).shape().to_vec();
        if ps.len() != 2 || targets.shape() != ps.as_slice() || coeffs.len() != ps[0] {
            return Err(shape_err(
                "soft_cross_entropy",
                format!(
                    "probs {ps:?}, targets {:?}, {} coefficients",
                    targets.shape(),
                    coeffs.len()
                ),
            ));
        }
        let k = ps[1];
        let pv = self.value(probs).data();
        let mut total = 0.0;
        for (i, &c) in coeffs.iter().enumerate() {
            let mut ce = 0.0;
            for j in 0..k {
                let t = targets.data()[i * k + j];
                if t != 0.0 {
                    ce -= t * (pv[i * k + j] + eps).ln();
                }
            }
            total += c * ce;
        }
        let rg = self.nodes[probs.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftCrossEntropy {
                probs: probs.0,
                targets,
                coeffs,
                eps,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output. The tape can be swept only once.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_shape = self.value(output).shape().to_vec();
        if !self.value(output).is_scalar() {
            return Err(Error::NonScalar(out_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shaped like value"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.nodes[*input].requires_grad,
                    self.nodes[*weight].requires_grad,
                    self.nodes[*bias].requires_grad,
                );
                let cg = kernels::conv2d_backward(
                    geom,
                    self.nodes[*input].value.data(),
                    self.nodes[*weight].value.data(),
                    g,
                    need,
                );
                for (target, part) in [(*input, cg.input), (*weight, cg.weight), (*bias, cg.bias)] {
                    if let Some(part) = part {
                        self.accumulate(grads, target, |acc| add_into(acc, &part));
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.nodes[*input].value.shape();
                let (n, f) = (xs[0], xs[1]);
                let o = self.nodes[*weight].value.shape()[0];
                let x = self.nodes[*input].value.data();
                let w = self.nodes[*weight].value.data();
                self.accumulate(grads, *input, |acc| {
                    for i in 0..n {
                        for j in 0..o {
                            let gv = g[i * o + j];
                            for k in 0..f {
                                acc[i * f + k] += gv * w[j * f + k];
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |acc| {
                    for i in 0..n {
                        for j in 0..o {
                            let gv = g[i * o + j];
                            for k in 0..f {
                                acc[j * f + k] += gv * x[i * f + k];
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |acc| {
                    for i in 0..n {
                        for j in 0..o {
                            acc[j] += g[i * o + j];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &y) in acc.iter_mut().zip(g).zip(yv) {
                        *a += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.accumulate(grads, *a, |acc| {
                    for ((s, &gi), &y) in acc.iter_mut().zip(g).zip(bv) {
                        *s += gi * y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((s, &gi), &x) in acc.iter_mut().zip(g).zip(av) {
                        *s += gi * x;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += s * gi;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |acc| {
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                });
            }
            Op::Gather { input, index } => {
                self.accumulate(grads, *input, |acc| {
                    for (&i, &gi) in index.iter().zip(g) {
                        acc[i] += gi;
                    }
                });
            }
            Op::ChannelAffine { input, scale, shift } => {
                let (n, c, inner) = channel_view(node.value.shape()).expect("validated");
                let xv = self.nodes[*input].value.data();
                let sv = self.nodes[*scale].value.data();
                self.accumulate(grads, *input, |acc| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            for j in base..base + inner {
                                acc[j] += sv[ch] * g[j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *scale, |acc| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            let mut s = 0.0;
                            for j in base..base + inner {
                                s += g[j] * xv[j];
                            }
                            acc[ch] += s;
                        }
                    }
                });
                self.accumulate(grads, *shift, |acc| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            acc[ch] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::ChannelMul { input, gate } => {
                let (n, c, inner) = channel_view(node.value.shape()).expect("validated");
                let xv = self.nodes[*input].value.data();
                let gv = self.nodes[*gate].value.data();
                self.accumulate(grads, *input, |acc| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            for j in base..base + inner {
                                acc[j] += gv[ch] * g[j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *gate, |acc| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            let mut s = 0.0;
                            for j in base..base + inner {
                                s += g[j] * xv[j];
                            }
                            acc[ch] += s;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[*x].value.shape();
                let inner = xs[2] * xs[3];
                let inv = 1.0 / inner as f64;
                self.accumulate(grads, *x, |acc| {
                    for (i, &gi) in g.iter().enumerate() {
                        for a in &mut acc[i * inner..(i + 1) * inner] {
                            *a += gi * inv;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let yv = node.value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, gr), y) in acc.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(yv.chunks_exact(k)) {
                        let dot: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..k {
                            a[j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                probs,
                targets,
                coeffs,
                eps,
            } => {
                let k = targets.shape()[1];
                let pv = self.nodes[*probs].value.data();
                self.accumulate(grads, *probs, |acc| {
                    for (i, &c) in coeffs.iter().enumerate() {
                        for j in 0..k {
                            let t = targets.data()[i * k + j];
                            if t != 0.0 {
                                acc[i * k + j] -= g[0] * c * t / (pv[i * k + j] + eps);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(acc: &mut [f64], part: &[f64]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
        assert_eq!(g.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn conv_scales_by_unit_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 5, 5], 1.7));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn linear_worked_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = tape.constant(t(&[1], &[5.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[16.0]);

        let xi = tape.constant(t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let yi = tape.linear(xi, id, zb).unwrap();
        assert_eq!(tape.value(yi).data(), tape.value(xi).data());
    }

    #[test]
    fn relu_values_and_kink() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[-1.0, 0.0, 2.0, -0.5]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn add_zero_is_identity_and_shapes_must_match() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 3.5]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn softmax_symmetry_and_rejects_single_class() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let p = tape.softmax(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        let one = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        assert!(tape.softmax(one).is_err());
    }

    #[test]
    fn global_pool_of_constant_plane() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 5], 0.37));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 3]);
        for v in tape.value(p).data() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalar(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn fan_out_accumulates_path_gradients() {
        // f(x) = relu(x)·x + 3x, duplicated-subgraph version uses two leaves.
        let xv = t(&[3], &[0.7, -0.4, 1.3]);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), true);
        let r = tape.relu(x);
        let m = tape.mul(r, x).unwrap();
        let s3 = tape.scale(x, 3.0);
        let y = tape.add(m, s3).unwrap();
        let out = tape.sum(y);
        let g = tape.backward(out).unwrap();

        let mut unrolled = Tape::new();
        let x1 = unrolled.leaf(xv.clone(), true);
        let x2 = unrolled.leaf(xv.clone(), true);
        let x3 = unrolled.leaf(xv, true);
        let r = unrolled.relu(x1);
        let m = unrolled.mul(r, x2).unwrap();
        let s3 = unrolled.scale(x3, 3.0);
        let y = unrolled.add(m, s3).unwrap();
        let out = unrolled.sum(y);
        let gu = unrolled.backward(out).unwrap();
        for i in 0..3 {
            let total = gu.get(x1).unwrap().data()[i] + gu.get(x2).unwrap().data()[i] + gu.get(x3).unwrap().data()[i];
            assert!((g.get(x).unwrap().data()[i] - total).abs() < 1e-15);
        }
    }
}
