//! A small reverse-mode gradient engine over dense `f32` tensors.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Nodes are
//! appended in evaluation order, so replaying them backwards is a valid
//! topological order and gradient accumulation is deterministic. Reductions
//! accumulate in `f64`.
//!
//! A tape is meant to live for one forward/backward pass and be dropped
//! afterwards. Independent tapes can run on different threads.

use crate::color::ANGLE_CLAMP;
use crate::contrastive;
use crate::error::{Error, Result};

/// Dense row-major array with an explicit shape. A shape of `[]` is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        // im2col buffer, one row of output positions per tap (`C·9` rows)
        cols: Vec<f32>,
    },
    Relu(Var),
    Affine {
        weight: Var,
        bias: Var,
        input: Var,
    },
    MeanPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    L2Normalize {
        input: Var,
        norm: f64,
    },
    Dot(Var, Var),
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    ArccosLoss {
        pred: Var,
        target: Var,
        // d(loss)/d(cosine) at the clamped cosine
        slope: f64,
    },
    InfoNce {
        anchors: Vec<Var>,
        positives: Vec<Var>,
        grad_anchors: Vec<Vec<f64>>,
        grad_positives: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]; `None` for nodes that are not
/// tracked or not reached.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    /// A leaf. Tracked leaves (parameters, differentiable inputs) receive gradients.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Result<Var> {
        self.push(value, Op::Leaf, tracked, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value.data
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// 3×3 convolution with zero padding 1.
    /// `input: [C, H, W]`, `weight: [O, C, 3, 3]`, `bias: [O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape(&[0, 0, 0], self.shape(input)));
        };
        let &[o, wc, 3, 3] = self.shape(weight) else {
            return Err(Error::shape(&[0, c, 3, 3], self.shape(weight)));
        };
        if wc != c {
            return Err(Error::shape(&[o, c, 3, 3], self.shape(weight)));
        }
        if self.shape(bias) != [o] {
            return Err(Error::shape(&[o], self.shape(bias)));
        }
        let (oh, ow) = (out_size(h, stride), out_size(w, stride));
        let taps = c * 9;
        let positions = oh * ow;

        let cols = im2col(self.data(input), c, h, w, stride);
        let wt = self.data(weight);
        let b = self.data(bias);
        let mut out = vec![0.0f32; o * positions];
        for (oc, row) in out.chunks_exact_mut(positions).enumerate() {
            row.fill(b[oc]);
            for (k, col) in wt[oc * taps..(oc + 1) * taps].iter().zip(cols.chunks_exact(positions)) {
                axpy(*k, col, row);
            }
        }
        let tracked = self.any_tracked(&[input, weight, bias]);
        self.push(
            Tensor {
                shape: vec![o, oh, ow],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                cols,
            },
            tracked,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|v| v.max(0.0)).collect(),
        };
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Relu(x), tracked, "relu")
    }

    /// `weight · input + bias` with `weight: [O, I]`, `input: [I]`, `bias: [O]`.
    pub fn affine(&mut self, weight: Var, bias: Var, input: Var) -> Result<Var> {
        let &[o, i] = self.shape(weight) else {
            return Err(Error::shape(&[0, 0], self.shape(weight)));
        };
        if self.shape(input) != [i] {
            return Err(Error::shape(&[i], self.shape(input)));
        }
        if self.shape(bias) != [o] {
            return Err(Error::shape(&[o], self.shape(bias)));
        }
        let (w, b, x) = (self.data(weight), self.data(bias), self.data(input));
        let data = (0..o)
            .map(|r| (b[r] as f64 + dot64(&w[r * i..(r + 1) * i], x)) as f32)
            .collect();
        let tracked = self.any_tracked(&[weight, bias, input]);
        self.push(
            Tensor {
                shape: vec![o],
                data,
            },
            Op::Affine {
                weight,
                bias,
                input,
            },
            tracked,
            "affine",
        )
    }

    /// Mean over the spatial axes of a `[C, H, W]` tensor, giving `[C]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(Error::shape(&[0, 0, 0], self.shape(x)));
        };
        let n = h * w;
        let data = self
            .data(x)
            .chunks_exact(n)
            .map(|plane| (plane.iter().map(|v| *v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        let tracked = self.any_tracked(&[x]);
        self.push(Tensor { shape: vec![c], data }, Op::MeanPool(x), tracked, "global_mean_pool")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Add(a, b), tracked, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), tracked, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|x| x * factor).collect(),
        };
        let tracked = self.any_tracked(&[a]);
        self.push(value, Op::Scale(a, factor), tracked, "scale")
    }

    /// `x / ||x||₂` for a vector. Fails with [`Error::ZeroVector`] on a zero input.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let &[_] = self.shape(x) else {
            return Err(Error::shape(&[0], self.shape(x)));
        };
        let data = self.data(x);
        let norm = data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::ZeroVector);
        }
        let value = Tensor::vector(data.iter().map(|v| (*v as f64 / norm) as f32).collect());
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::L2Normalize { input: x, norm }, tracked, "l2_normalize")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = dot64(self.data(a), self.data(b)) as f32;
        let tracked = self.any_tracked(&[a, b]);
        self.push(Tensor::scalar(v), Op::Dot(a, b), tracked, "dot")
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        assert!(lo <= hi);
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Clamp { input: x, lo, hi }, tracked, "clamp")
    }

    /// Angle in degrees between two unit 3-vectors.
    ///
    /// The cosine is clamped to `[-1 + 1e-9, 1 - 1e-9]` so the derivative
    /// stays finite; exactly parallel inputs evaluate to 0 (180 if antiparallel).
    pub fn arccos_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target)?;
        if self.shape(pred) != [3] {
            return Err(Error::shape(&[3], self.shape(pred)));
        }
        let p: Vec<f64> = self.data(pred).iter().map(|v| *v as f64).collect();
        let t: Vec<f64> = self.data(target).iter().map(|v| *v as f64).collect();
        let cos = p[0] * t[0] + p[1] * t[1] + p[2] * t[2];
        let cross = [
            p[1] * t[2] - p[2] * t[1],
            p[2] * t[0] - p[0] * t[2],
            p[0] * t[1] - p[1] * t[0],
        ];
        let clamped = cos.clamp(-1.0 + ANGLE_CLAMP, 1.0 - ANGLE_CLAMP);
        let value = if cross == [0.0; 3] {
            if cos >= 0.0 {
                0.0
            } else {
                180.0
            }
        } else {
            clamped.acos().to_degrees()
        };
        let slope = -(180.0 / std::f64::consts::PI) / (1.0 - clamped * clamped).sqrt();
        let tracked = self.any_tracked(&[pred, target]);
        self.push(
            Tensor::scalar(value as f32),
            Op::ArccosLoss {
                pred,
                target,
                slope,
            },
            tracked,
            "arccos_loss",
        )
    }

    /// InfoNCE over clean (`anchors`) and augmented (`positives`) embeddings.
    /// See [`contrastive::info_nce`].
    pub fn info_nce(&mut self, anchors: &[Var], positives: &[Var], cfg: &contrastive::ContrastiveConfig) -> Result<Var> {
        if anchors.len() != positives.len() {
            return Err(Error::shape(&[anchors.len()], &[positives.len()]));
        }
        let z: Vec<&[f32]> = anchors.iter().map(|v| self.data(*v)).collect();
        let zs: Vec<&[f32]> = positives.iter().map(|v| self.data(*v)).collect();
        let out = contrastive::info_nce_with_grad(&z, &zs, cfg)?;
        let mut all = anchors.to_vec();
        all.extend_from_slice(positives);
        let tracked = self.any_tracked(&all);
        self.push(
            Tensor::scalar(out.loss as f32),
            Op::InfoNce {
                anchors: anchors.to_vec(),
                positives: positives.to_vec(),
                grad_anchors: out.grad_anchors,
                grad_positives: out.grad_positives,
            },
            tracked,
            "info_nce",
        )
    }

    /// Gradients of a scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_seeded(&[(loss, &[1.0])])
    }

    /// Backward pass from arbitrary upstream gradients (`seed` per output).
    pub fn backward_seeded(&self, seeds: &[(Var, &[f32])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for &(v, seed) in seeds {
            if !self.nodes[v.0].tracked {
                return Err(Error::UnreachableLoss);
            }
            if seed.len() != self.value(v).numel() {
                return Err(Error::shape(self.shape(v), &[seed.len()]));
            }
            accumulate(&mut grads, v, seed.to_vec());
            start = start.max(v.0 + 1);
        }

        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // only tracked nodes carry meaningful gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                cols,
            } => {
                let (input, weight, bias, stride) = (*input, *weight, *bias, *stride);
                let &[c, h, w] = self.shape(input) else { unreachable!() };
                let &[o, oh, ow] = node.value.shape.as_slice() else { unreachable!() };
                let taps = c * 9;
                let positions = oh * ow;
                let wt = self.data(weight);
                let want_w = tracked(weight);
                let want_x = tracked(input);

                if want_w {
                    let mut dw = vec![0.0f32; o * taps];
                    for (oc, go) in g.chunks_exact(positions).enumerate() {
                        for (d, col) in dw[oc * taps..(oc + 1) * taps].iter_mut().zip(cols.chunks_exact(positions)) {
                            *d = dot64(go, col) as f32;
                        }
                    }
                    accumulate(grads, weight, dw);
                }
                if tracked(bias) {
                    let db = g
                        .chunks_exact(positions)
                        .map(|plane| plane.iter().map(|v| *v as f64).sum::<f64>() as f32)
                        .collect();
                    accumulate(grads, bias, db);
                }
                if want_x {
                    let mut dcols = vec![0.0f32; taps * positions];
                    for (t, dcol) in dcols.chunks_exact_mut(positions).enumerate() {
                        for (oc, go) in g.chunks_exact(positions).enumerate() {
                            axpy(wt[oc * taps + t], go, dcol);
                        }
                    }
                    accumulate(grads, input, col2im(&dcols, c, h, w, stride));
                }
            }
            Op::Relu(x) => {
                if tracked(*x) {
                    let d = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Affine {
                weight,
                bias,
                input,
            } => {
                let &[o, i] = self.shape(*weight) else { unreachable!() };
                let (w, x) = (self.data(*weight), self.data(*input));
                if tracked(*weight) {
                    let mut dw = vec![0.0f32; o * i];
                    for r in 0..o {
                        for c in 0..i {
                            dw[r * i + c] = (g[r] as f64 * x[c] as f64) as f32;
                        }
                    }
                    accumulate(grads, *weight, dw);
                }
                if tracked(*bias) {
                    accumulate(grads, *bias, g.to_vec());
                }
                if tracked(*input) {
                    let mut dx = vec![0.0f64; i];
                    for r in 0..o {
                        let gr = g[r] as f64;
                        for (d, wv) in dx.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                            *d += gr * *wv as f64;
                        }
                    }
                    accumulate(grads, *input, dx.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::MeanPool(x) => {
                if tracked(*x) {
                    let &[_, h, w] = self.shape(*x) else { unreachable!() };
                    let n = h * w;
                    let d = g
                        .iter()
                        .flat_map(|gc| std::iter::repeat((*gc as f64 / n as f64) as f32).take(n))
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, d);
                }
                if tracked(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, f) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.iter().map(|g| g * f).collect());
                }
            }
            Op::L2Normalize { input, norm } => {
                if tracked(*input) {
                    let y = &node.value.data;
                    let yg = dot64(y, g);
                    let d = g
                        .iter()
                        .zip(y)
                        .map(|(g, y)| ((*g as f64 - *y as f64 * yg) / norm) as f32)
                        .collect();
                    accumulate(grads, *input, d);
                }
            }
            Op::Dot(a, b) => {
                let g0 = g[0];
                if tracked(*a) {
                    accumulate(grads, *a, self.data(*b).iter().map(|y| g0 * y).collect());
                }
                if tracked(*b) {
                    accumulate(grads, *b, self.data(*a).iter().map(|x| g0 * x).collect());
                }
            }
            Op::Clamp { input, lo, hi } => {
                if tracked(*input) {
                    let d = g
                        .iter()
                        .zip(self.data(*input))
                        .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *input, d);
                }
            }
            Op::ArccosLoss {
                pred,
                target,
                slope,
            } => {
                let k = g[0] as f64 * slope;
                if tracked(*pred) {
                    let d = self.data(*target).iter().map(|t| (k * *t as f64) as f32).collect();
                    accumulate(grads, *pred, d);
                }
                if tracked(*target) {
                    let d = self.data(*pred).iter().map(|p| (k * *p as f64) as f32).collect();
                    accumulate(grads, *target, d);
                }
            }
            Op::InfoNce {
                anchors,
                positives,
                grad_anchors,
                grad_positives,
            } => {
                let g0 = g[0] as f64;
                for (vars, gs) in [(anchors, grad_anchors), (positives, grad_positives)] {
                    for (v, gv) in vars.iter().zip(gs) {
                        if tracked(*v) {
                            accumulate(grads, *v, gv.iter().map(|x| (g0 * x) as f32).collect());
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

// Output positions `lo..hi` along one axis whose tap `k` lands inside `0..n`.
fn valid_range(n: usize, out: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    // o·stride + k − 1 ≤ n − 1
    let hi = (n + 1 - k).div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

/// `[C, H, W]` to `[C·9, OH·OW]` with zero padding 1.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let positions = oh * ow;
    let mut cols = vec![0.0f32; c * 9 * positions];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let (y0, y1) = valid_range(h, oh, stride, ky);
            for kx in 0..3 {
                let (x0, x1) = valid_range(w, ow, stride, kx);
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * positions..][..positions];
                for oy in y0..y1 {
                    let src = &plane[(oy * stride + ky - 1) * w..][..w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        dst[ox] = src[ox * stride + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let positions = oh * ow;
    let mut x = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let (y0, y1) = valid_range(h, oh, stride, ky);
            for kx in 0..3 {
                let (x0, x1) = valid_range(w, ow, stride, kx);
                let row = &cols[(ci * 9 + ky * 3 + kx) * positions..][..positions];
                for oy in y0..y1 {
                    let dst = &mut plane[(oy * stride + ky - 1) * w..][..w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        dst[ox * stride + kx - 1] += src[ox];
                    }
                }
            }
        }
    }
    x
}

/// `y += a·x`.
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with `f64` accumulation.
pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] as f64 * y[0] as f64;
        acc[1] += x[1] as f64 * y[1] as f64;
        acc[2] += x[2] as f64 * y[2] as f64;
        acc[3] += x[3] as f64 * y[3] as f64;
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| *x as f64 * *y as f64).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let loss = tape.dot(v, v).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn rejects_bad_losses() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = tape.relu(v).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::NonScalarLoss(_))));
        let cc = tape.dot(c, c).unwrap();
        assert!(matches!(tape.backward(cc), Err(Error::UnreachableLoss)));
    }

    #[test]
    fn non_finite_trips() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![3e38, 3e38]), true).unwrap();
        assert!(matches!(tape.add(v, v), Err(Error::NonFinite("add"))));
        assert!(matches!(
            tape.leaf(Tensor::vector(vec![f32::NAN]), false),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = dot(2v, v) -> grad 4v
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, -3.0]), true).unwrap();
        let s = tape.scale(v, 2.0).unwrap();
        let loss = tape.dot(s, v).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap(), &[4.0, -12.0]);
        assert!(g.get(s).is_some());
    }

    #[test]
    fn arccos_loss_at_parallel_is_finite() {
        let mut tape = Tape::new();
        let e = [0.6f32, 0.8, 0.0];
        let p = tape.leaf(Tensor::vector(e.to_vec()), true).unwrap();
        let t = tape.constant(Tensor::vector(e.to_vec())).unwrap();
        let loss = tape.arccos_loss(p, t).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.backward(loss).unwrap();
        let norm = g.get(p).unwrap().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!(norm.is_finite());
        assert!(norm <= (180.0 / std::f64::consts::PI) / (2e-9f64).sqrt() * (1.0 + 1e-6));
    }

    #[test]
    fn arccos_loss_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        let y = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap();
        let z = tape.constant(Tensor::vector(vec![0.6, 0.8, 0.0])).unwrap();
        let a = tape.arccos_loss(x, y).unwrap();
        let b = tape.arccos_loss(x, z).unwrap();
        assert!((tape.value(a).item() - 90.0).abs() < 1e-4);
        assert!((tape.value(b).item() - 53.1301).abs() < 1e-3);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::vector(vec![0.0])).unwrap();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]), true).unwrap();
        let y = tape.affine(w, b, x).unwrap();
        let loss = tape.dot(y, y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none() && g.get(b).is_none());
        assert_eq!(g.get(x).unwrap(), &[10.0, 10.0]);
    }
}
