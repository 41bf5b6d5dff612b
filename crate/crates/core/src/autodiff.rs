//! A small reverse-mode tape over `height × width × channels` arrays.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its operands. The op set is exactly what the
//! unrolled encoder and the MS-SSIM pyramid need.

use crate::tensor::{correlate_adjoint, correlate_forward, correlate_kernel_grad, flip_bank_data, PaddingMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { height: 1, width: 1, channels: 1 };

    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `kernel` holds `s × s × cin × cout` correlation taps.
    Correlate {
        input: Var,
        kernel: Var,
        size: usize,
        cout: usize,
        mode: PaddingMode,
    },
    /// 180-degree rotation of every filter in a bank.
    FlipBank {
        input: Var,
        size: usize,
        cin: usize,
        cout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Mean(Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    /// Per-channel threshold broadcast over pixels.
    SoftThreshold {
        input: Var,
        theta: Var,
    },
    /// Separable "valid" filtering with a normalized 1-D window.
    ValidBlur {
        input: Var,
        window: Vec<f64>,
    },
    AvgPool2(Var),
}

struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every leaf that asked for them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
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

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: Shape, requires_grad: bool) -> Var {
        self.push(value, shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        self.leaf(value, shape, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn correlate(&mut self, input: Var, kernel: Var, size: usize, mode: PaddingMode) -> Var {
        let sh = self.shape(input);
        let klen = self.shape(kernel).len();
        let cout = klen / (size * size * sh.channels);
        assert_eq!(cout * size * size * sh.channels, klen, "kernel size does not match input channels");
        let value = correlate_forward(self.value(input), sh.height, sh.width, sh.channels, self.value(kernel), size, cout, mode);
        let rg = self.rg(input) || self.rg(kernel);
        self.push(value, Shape::new(sh.height, sh.width, cout), Op::Correlate { input, kernel, size, cout, mode }, rg)
    }

    pub fn flip_bank(&mut self, input: Var, size: usize, cin: usize, cout: usize) -> Var {
        let value = flip_bank_data(self.value(input), size, cin, cout);
        let shape = self.shape(input);
        let rg = self.rg(input);
        self.push(value, shape, Op::FlipBank { input, size, cin, cout }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise operands differ in shape");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, sa, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let sh = self.shape(a);
        let rg = self.rg(a);
        self.push(value, sh, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn pow(&mut self, a: Var, e: f64) -> Var {
        self.unary(a, |x| x.powf(e), Op::Pow(a, e))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![m], Shape::SCALAR, Op::Mean(a), rg)
    }

    pub fn soft_threshold(&mut self, input: Var, theta: Var) -> Var {
        let sh = self.shape(input);
        assert_eq!(self.shape(theta).len(), sh.channels, "one threshold per channel");
        let th = self.value(theta);
        let mut value = self.value(input).to_vec();
        crate::solvers::shrink_in_place(&mut value, th);
        let rg = self.rg(input) || self.rg(theta);
        self.push(value, sh, Op::SoftThreshold { input, theta }, rg)
    }

    /// Separable filtering with `window ⊗ window`, keeping only positions
    /// where the window fits entirely inside the input.
    pub fn valid_blur(&mut self, input: Var, window: &[f64]) -> Var {
        let sh = self.shape(input);
        let n = window.len();
        assert!(sh.height >= n && sh.width >= n, "input smaller than blur window");
        let out_shape = Shape::new(sh.height - n + 1, sh.width - n + 1, sh.channels);
        let value = blur_forward(self.value(input), sh, window);
        let rg = self.rg(input);
        self.push(value, out_shape, Op::ValidBlur { input, window: window.to_vec() }, rg)
    }

    /// 2×2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let sh = self.shape(input);
        let out = Shape::new(sh.height / 2, sh.width / 2, sh.channels);
        let src = self.value(input);
        let c = sh.channels;
        let mut value = vec![0.0; out.len()];
        for y in 0..out.height {
            for x in 0..out.width {
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| src[(yy * sh.width + xx) * c + ch];
                    value[(y * out.width + x) * c + ch] =
                        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                }
            }
        }
        let rg = self.rg(input);
        self.push(value, out, Op::AvgPool2(input), rg)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), Shape::SCALAR, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Correlate { input, kernel, size, cout, mode } => {
                let sh = self.shape(*input);
                if self.rg(*input) {
                    let gi = correlate_adjoint(g, sh.height, sh.width, *cout, self.value(*kernel), *size, sh.channels, *mode);
                    acc(*input, gi);
                }
                if self.rg(*kernel) {
                    let gk = correlate_kernel_grad(self.value(*input), g, sh.height, sh.width, sh.channels, *cout, *size, *mode);
                    acc(*kernel, gk);
                }
            }
            Op::FlipBank { input, size, cin, cout } => acc(*input, flip_bank_data(g, *size, *cin, *cout)),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.iter().zip(vb).map(|(x, y)| x / y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(va).zip(vb).map(|((x, p), q)| -x * p / (q * q)).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::Offset(a) => acc(*a, g.to_vec()),
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(x, v)| {
                            if *v > 0.0 {
                                *x
                            } else if *v < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Mean(a) => {
                let n = self.shape(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Pow(a, e) => {
                let va = self.value(*a);
                acc(*a, g.iter().zip(va).map(|(x, v)| x * e * v.powf(e - 1.0)).collect());
            }
            Op::ClampMin(a, lo) => {
                let va = self.value(*a);
                acc(*a, g.iter().zip(va).map(|(x, v)| if v > lo { *x } else { 0.0 }).collect());
            }
            Op::SoftThreshold { input, theta } => {
                let pre = self.value(*input);
                let th = self.value(*theta);
                let c = th.len();
                let live = |k: usize| pre[k].abs() > th[k % c];
                if self.rg(*input) {
                    acc(*input, g.iter().enumerate().map(|(k, x)| if live(k) { *x } else { 0.0 }).collect());
                }
                if self.rg(*theta) {
                    let mut gt = vec![0.0; c];
                    for (k, x) in g.iter().enumerate() {
                        if live(k) {
                            gt[k % c] -= x * pre[k].signum();
                        }
                    }
                    acc(*theta, gt);
                }
            }
            Op::ValidBlur { input, window } => {
                let sh = self.shape(*input);
                acc(*input, blur_backward(g, sh, window));
            }
            Op::AvgPool2(input) => {
                let sh = self.shape(*input);
                let out = node.shape;
                let c = sh.channels;
                let mut gi = vec![0.0; sh.len()];
                for y in 0..out.height {
                    for x in 0..out.width {
                        for ch in 0..c {
                            let q = 0.25 * g[(y * out.width + x) * c + ch];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gi[((2 * y + dy) * sh.width + 2 * x + dx) * c + ch] += q;
                            }
                        }
                    }
                }
                acc(*input, gi);
            }
        }
    }
}

fn blur_forward(src: &[f64], sh: Shape, window: &[f64]) -> Vec<f64> {
    let n = window.len();
    let c = sh.channels;
    let ow = sh.width - n + 1;
    let oh = sh.height - n + 1;
    let mut rows = vec![0.0; sh.height * ow * c];
    for y in 0..sh.height {
        for x in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, wt) in window.iter().enumerate() {
                    s += wt * src[(y * sh.width + x + t) * c + ch];
                }
                rows[(y * ow + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for (t, wt) in window.iter().enumerate() {
            let src_row = &rows[(y + t) * ow * c..(y + t + 1) * ow * c];
            let dst = &mut out[y * ow * c..(y + 1) * ow * c];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += wt * s;
            }
        }
    }
    out
}

fn blur_backward(g: &[f64], sh: Shape, window: &[f64]) -> Vec<f64> {
    let n = window.len();
    let c = sh.channels;
    let ow = sh.width - n + 1;
    let oh = sh.height - n + 1;
    let mut g_rows = vec![0.0; sh.height * ow * c];
    for y in 0..oh {
        for (t, wt) in window.iter().enumerate() {
            let src = &g[y * ow * c..(y + 1) * ow * c];
            let dst = &mut g_rows[(y + t) * ow * c..(y + t + 1) * ow * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    let mut gi = vec![0.0; sh.len()];
    for y in 0..sh.height {
        for x in 0..ow {
            for ch in 0..c {
                let q = g_rows[(y * ow + x) * c + ch];
                for (t, wt) in window.iter().enumerate() {
                    gi[(y * sh.width + x + t) * c + ch] += wt * q;
                }
            }
        }
    }
    gi
}
