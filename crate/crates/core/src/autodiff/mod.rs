//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass in execution
//! order, which is a valid topological order. [`Graph::backward`] walks the tape once
//! in reverse and leaves gradients on every leaf that requires them, including model
//! parameters bound with [`Graph::param`].
//!
//! Operators cover exactly what the simulator needs: convolution, pooling, bilinear
//! resizing, affine maps, activations, softmax, the graph-attention pair logits,
//! channel-wise scaling, power normalisation, and the task losses.

mod gradcheck;
pub(crate) mod kernels;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};

pub use gradcheck::{grad_check, grad_check_params};
pub use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use kernels::{ConvDims, Tap};

/// Label value skipped by [`Graph::cross_entropy`].
pub const IGNORE_LABEL: usize = usize::MAX;

/// Floor applied to vector norms in [`Graph::cosine_loss`].
pub const NORM_EPS: f64 = 1e-8;

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when enabled on the current thread, every leaf gradient written by
/// `backward` is scaled by 1.05. Used to prove the verification suite catches a broken
/// backward pass.
pub fn set_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

/// Outcome of [`Graph::power_normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerScale {
    pub factor: f64,
    /// Input was all zeros and passed through unchanged.
    pub degenerate: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    GlobalAvgPool {
        x: Var,
    },
    Resize {
        x: Var,
        ys: Vec<Tap>,
        xs: Vec<Tap>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddConst {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Stack {
        parts: Vec<Var>,
    },
    Row {
        x: Var,
        index: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    PairLogits {
        h: Var,
        a: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    PowerNormalize {
        x: Var,
        factor: f64,
        sumsq: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        count: usize,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Cosine {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
    stage: Option<&'static str>,
    flops: BTreeMap<&'static str, u64>,
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    fn push(&mut self, op_name: &'static str, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        let needs_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn count(&mut self, multiplies: u64) {
        if let Some(stage) = self.stage {
            *self.flops.entry(stage).or_insert(0) += multiplies;
        }
    }

    /// Attributes subsequent multiply counts to `stage` (or stops counting on `None`).
    pub fn set_flop_stage(&mut self, stage: Option<&'static str>) {
        self.stage = stage;
    }

    /// Multiplies performed by contraction kernels, per stage label. Resizes count
    /// their full per-pixel blend (six products and three sums).
    pub fn flop_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.flops
    }

    /// Leaf node. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        ensure_finite("leaf", t.data())?;
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Binds a stored parameter as a gradient-tracking leaf; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.requires_grad = true;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass, for leaves that require one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------------
    // forward operators
    // ------------------------------------------------------------------

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        let &[cout, wcin, k, k2] = ws.as_slice() else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if k != k2 || k == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {ws:?}")));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wcin} input channels, input has {cin}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        let (oh, ow) = match (geom.out_extent(h, k), geom.out_extent(wd, k)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("non-positive output extent for {h}x{wd} input, k={k}, {geom:?}"),
                ))
            }
        };
        let dims = ConvDims {
            cin,
            h,
            w: wd,
            cout,
            k,
            oh,
            ow,
            geom,
        };
        let out = kernels::conv2d_forward(&dims, self.data(x), self.data(w), b.map(|b| self.data(b)));
        self.count(dims.multiplies());
        self.push("conv2d", &[cout, oh, ow], out, Op::Conv2d { x, w, b, dims })
    }

    /// Per-channel mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let out = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push("global_avg_pool", &[c], out, Op::GlobalAvgPool { x })
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "target extents must be >= 1"));
        }
        let ys = kernels::resize_taps(h, out_h);
        let xs = kernels::resize_taps(w, out_w);
        let out = kernels::resize_forward(self.data(x), (c, h, w), &ys, &xs);
        self.count(9 * (c * out_h * out_w) as u64);
        self.push("bilinear_resize", &[c, out_h, out_w], out, Op::Resize { x, ys, xs })
    }

    /// Affine map on the trailing axis: `y = W x + b` with `W: D_out×D_in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let &[dout, din] = ws.as_slice() else {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {ws:?}")));
        };
        if *xs.last().unwrap() != din {
            return Err(Error::shape(
                "linear",
                format!("input trailing extent {} != {din}", xs.last().unwrap()),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias must be [{dout}]")));
            }
        }
        let rows = self.value(x).len() / din;
        let (xd, wd) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let mut out = Vec::with_capacity(rows * dout);
        for r in 0..rows {
            let xr = &xd[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                out.push(dot + bd.map_or(0.0, |b| b[o]));
            }
        }
        self.count((rows * dout * din) as u64);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push("linear", &shape, out, Op::Linear { x, w, b })
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape("matmul", "operands must be rank 2"));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} != {k2}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.count((m * k * n) as u64);
        self.push("matmul", &[m, n], out, Op::MatMul { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", &shape, out, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("leaky_relu", &shape, out, Op::LeakyRelu { x, slope })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu(slope) => self.leaky_relu(x, slope),
        }
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / total));
        }
        self.push("softmax", &shape, out, Op::Softmax { x })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", &shape, out, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", &shape, out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", &shape, out, Op::Scale { x, c })
    }

    /// Adds a constant offset; the gradient passes through unchanged.
    pub fn add_const(&mut self, x: Var, offset: &Tensor) -> Result<Var> {
        if self.shape(x) != offset.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), offset.shape()),
            ));
        }
        let out = self.data(x).iter().zip(offset.data()).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_const", &shape, out, Op::AddConst { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", &[1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of equally shaped tensors.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::invalid("add_all", "empty operand list"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "empty operand list"))?;
        let inner = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::shape("stack", "operands differ in shape"));
            }
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(&inner);
        self.push("stack", &shape, out, Op::Stack { parts: parts.to_vec() })
    }

    /// Row `index` of a rank-2 tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let &[rows, cols] = self.shape(x) else {
            return Err(Error::shape("row", "operand must be rank 2"));
        };
        if index >= rows {
            return Err(Error::invalid("row", format!("index {index} >= {rows}")));
        }
        let out = self.data(x)[index * cols..(index + 1) * cols].to_vec();
        self.push("row", &[cols], out, Op::Row { x, index })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[r, c] = self.shape(x) else {
            return Err(Error::shape("transpose", "operand must be rank 2"));
        };
        let d = self.data(x);
        let out = (0..c)
            .flat_map(|j| (0..r).map(move |i| d[i * c + j]))
            .collect();
        self.push("transpose", &[c, r], out, Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if Tensor::numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape { x })
    }

    /// Graph-attention logits before the nonlinearity:
    /// `L[i][j] = a[..C]·h_i + a[C..]·h_j` for node features `h: N×C`, i.e. `aᵀ[h_i || h_j]`.
    /// Every pair is evaluated directly (`2C` products per pair).
    pub fn pair_logits(&mut self, h: Var, a: Var) -> Result<Var> {
        let &[n, c] = self.shape(h) else {
            return Err(Error::shape("pair_logits", "node features must be N×C"));
        };
        if self.shape(a) != [2 * c] {
            return Err(Error::shape(
                "pair_logits",
                format!("attention vector must have {} entries", 2 * c),
            ));
        }
        let (hd, ad) = (self.data(h), self.data(a));
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let hi = &hd[i * c..(i + 1) * c];
            for j in 0..n {
                let hj = &hd[j * c..(j + 1) * c];
                let mut s = 0.0;
                for q in 0..c {
                    s += ad[q] * hi[q];
                }
                for q in 0..c {
                    s += ad[c + q] * hj[q];
                }
                out.push(s);
            }
        }
        self.count((n * n * 2 * c) as u64);
        self.push("pair_logits", &[n, n], out, Op::PairLogits { h, a })
    }

    /// Multiplies each channel plane of `x: C×H×W` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(s) != [c] {
            return Err(Error::shape("channel_scale", format!("weights must be [{c}]")));
        }
        let plane = h * w;
        let sd = self.data(s);
        let out = self
            .data(x)
            .chunks(plane)
            .zip(sd)
            .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
            .collect();
        self.count((c * plane) as u64);
        self.push("channel_scale", &[c, h, w], out, Op::ChannelScale { x, s })
    }

    /// Scales `x` so its mean per-element power equals `power`. An all-zero input is
    /// passed through and flagged as degenerate.
    pub fn power_normalize(&mut self, x: Var, power: f64) -> Result<(Var, PowerScale)> {
        if !(power > 0.0) {
            return Err(Error::invalid("power_normalize", "power must be positive"));
        }
        let d = self.data(x);
        let sumsq: f64 = d.iter().map(|v| v * v).sum();
        let degenerate = sumsq == 0.0;
        let factor = if degenerate {
            1.0
        } else {
            (power * d.len() as f64 / sumsq).sqrt()
        };
        let out = d.iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let v = self.push(
            "power_normalize",
            &shape,
            out,
            Op::PowerNormalize { x, factor, sumsq },
        )?;
        Ok((v, PowerScale { factor, degenerate }))
    }

    /// Mean pixel-wise cross entropy of `K×H×W` logits against integer labels;
    /// pixels labelled [`IGNORE_LABEL`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (k, h, w) = self.value(logits).chw()?;
        let plane = h * w;
        if labels.len() != plane {
            return Err(Error::shape("cross_entropy", "label map size mismatch"));
        }
        let d = self.data(logits);
        let mut total = 0.0;
        let mut count = 0;
        for (p, &lab) in labels.iter().enumerate() {
            if lab == IGNORE_LABEL {
                continue;
            }
            if lab >= k {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {lab} out of range for {k} classes"),
                ));
            }
            let max = (0..k).map(|c| d[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (d[c * plane + p] - max).exp()).sum::<f64>().ln();
            total += lse - d[lab * plane + p];
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "every pixel is ignored"));
        }
        self.push(
            "cross_entropy",
            &[1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                count,
            },
        )
    }

    /// Mean absolute error over the elements selected by `mask` (all when `None`).
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.shape(pred), target.shape()),
            ));
        }
        if let Some(m) = mask {
            if m.len() != target.len() {
                return Err(Error::shape("l1_loss", "mask size mismatch"));
            }
        }
        let selected = |i: usize| mask.is_none_or(|m| m[i]);
        let mut total = 0.0;
        let mut count = 0;
        for (i, (p, t)) in self.data(pred).iter().zip(target.data()).enumerate() {
            if selected(i) {
                total += (p - t).abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("l1_loss", "mask selects no elements"));
        }
        self.push(
            "l1_loss",
            &[1],
            vec![total / count as f64],
            Op::L1 {
                pred,
                target: target.data().to_vec(),
                mask: mask.map(|m| m.to_vec()),
                count,
            },
        )
    }

    /// Mean over pixels of `1 - cos(pred, target)` for `3×H×W` vector fields. Norms are
    /// floored at [`NORM_EPS`].
    pub fn cosine_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let (c, h, w) = self.value(pred).chw()?;
        if target.shape() != [c, h, w] {
            return Err(Error::shape("cosine_loss", "target shape mismatch"));
        }
        let plane = h * w;
        let unit_target = unit_field(target.data(), c, plane);
        let d = self.data(pred);
        let mut total = 0.0;
        for p in 0..plane {
            let norm = (0..c).map(|q| d[q * plane + p].powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
            let dot: f64 = (0..c).map(|q| d[q * plane + p] * unit_target[q * plane + p]).sum();
            total += 1.0 - dot / norm;
        }
        self.push(
            "cosine_loss",
            &[1],
            vec![total / plane as f64],
            Op::Cosine {
                pred,
                target: unit_target,
            },
        )
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::PairLogits { h, a } => vec![*h, *a],
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::Stack { parts } => parts.clone(),
            Op::GlobalAvgPool { x }
            | Op::Resize { x, .. }
            | Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::Softmax { x }
            | Op::Scale { x, .. }
            | Op::AddConst { x }
            | Op::Sum { x }
            | Op::Row { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::PowerNormalize { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::L1 { pred, .. } | Op::Cosine { pred, .. } => vec![*pred],
        }
    }

    /// Populates gradients of `loss` (a one-element tensor) on every leaf that
    /// requires them. A graph supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarBackward(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let scale = if BACKWARD_FAULT.with(|f| f.get()) { 1.05 } else { 1.0 };
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let len = node.value.len();
                let mut g = g.unwrap_or_else(|| vec![0.0; len]);
                if scale != 1.0 {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let len = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            }
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    dims,
                    self.data(*x),
                    self.data(*w),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(gx) = gx {
                    acc(*x, &mut |d| add_into(d, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |d| add_into(d, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(*b, &mut |d| add_into(d, &gb));
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, h, w) = self.value(*x).chw()?;
                let plane = h * w;
                acc(*x, &mut |d| {
                    for (chunk, &gv) in d.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv / plane as f64);
                    }
                });
            }
            Op::Resize { x, ys, xs } => {
                let dims = self.value(*x).chw()?;
                let gx = kernels::resize_backward(g, dims, ys, xs);
                acc(*x, &mut |d| add_into(d, &gx));
            }
            Op::Linear { x, w, b } => {
                let &[dout, din] = self.shape(*w) else { unreachable!() };
                let rows = self.value(*x).len() / din;
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        let dr = &mut d[r * din..(r + 1) * din];
                        for (o, &gv) in gr.iter().enumerate() {
                            add_scaled(dr, &wd[o * din..(o + 1) * din], gv);
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for r in 0..rows {
                        let xr = &xd[r * din..(r + 1) * din];
                        for o in 0..dout {
                            add_scaled(&mut d[o * din..(o + 1) * din], xr, g[r * dout + o]);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for gr in g.chunks(dout) {
                            add_into(d, gr);
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let &[m, k] = self.shape(*a) else { unreachable!() };
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            d[i * k + p] += (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            add_scaled(&mut d[p * n..(p + 1) * n], &g[i * n..(i + 1) * n], ad[i * k + p]);
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for ((dv, &xv), &gv) in d.iter_mut().zip(xd).zip(g) {
                        if xv >= 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for ((dv, &xv), &gv) in d.iter_mut().zip(xd).zip(g) {
                        *dv += if xv >= 0.0 { gv } else { gv * slope };
                    }
                });
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                        *dv += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, &gv), &av) in d.iter_mut().zip(g).zip(ad) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |d| add_scaled(d, g, *c)),
            Op::AddConst { x } | Op::Reshape { x } => acc(*x, &mut |d| add_into(d, g)),
            Op::Sum { x } => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Stack { parts } => {
                let inner = self.value(parts[0]).len();
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, &mut |d| add_into(d, &g[i * inner..(i + 1) * inner]));
                }
            }
            Op::Row { x, index } => {
                let cols = g.len();
                acc(*x, &mut |d| add_into(&mut d[index * cols..(index + 1) * cols], g));
            }
            Op::Transpose { x } => {
                let &[r, c] = self.shape(*x) else { unreachable!() };
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::PairLogits { h, a } => {
                let &[n, c] = self.shape(*h) else { unreachable!() };
                let (hd, ad) = (self.data(*h), self.data(*a));
                // row sums and column sums of the incoming N×N gradient
                let rsum: Vec<f64> = (0..n).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                let csum: Vec<f64> = (0..n).map(|j| (0..n).map(|i| g[i * n + j]).sum()).collect();
                acc(*h, &mut |d| {
                    for i in 0..n {
                        for q in 0..c {
                            d[i * c + q] += ad[q] * rsum[i] + ad[c + q] * csum[i];
                        }
                    }
                });
                acc(*a, &mut |d| {
                    for i in 0..n {
                        for q in 0..c {
                            d[q] += rsum[i] * hd[i * c + q];
                            d[c + q] += csum[i] * hd[i * c + q];
                        }
                    }
                });
            }
            Op::ChannelScale { x, s } => {
                let (c, h, w) = self.value(*x).chw()?;
                let plane = h * w;
                let (xd, sd) = (self.data(*x), self.data(*s));
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        add_scaled(
                            &mut d[ch * plane..(ch + 1) * plane],
                            &g[ch * plane..(ch + 1) * plane],
                            sd[ch],
                        );
                    }
                });
                acc(*s, &mut |d| {
                    for ch in 0..c {
                        d[ch] += g[ch * plane..(ch + 1) * plane]
                            .iter()
                            .zip(&xd[ch * plane..(ch + 1) * plane])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::PowerNormalize { x, factor, sumsq } => {
                let xd = self.data(*x);
                let zg: f64 = xd.iter().zip(g).map(|(a, b)| a * b).sum();
                let corr = if *sumsq == 0.0 { 0.0 } else { factor * zg / sumsq };
                acc(*x, &mut |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *dv += factor * gv - corr * xv;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                count,
            } => {
                let (k, h, w) = self.value(*logits).chw()?;
                let plane = h * w;
                let ld = self.data(*logits);
                let coef = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for (p, &lab) in labels.iter().enumerate() {
                        if lab == IGNORE_LABEL {
                            continue;
                        }
                        let max = (0..k).map(|c| ld[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..k).map(|c| (ld[c * plane + p] - max).exp()).sum();
                        for c in 0..k {
                            let prob = (ld[c * plane + p] - max).exp() / z;
                            let onehot = if c == lab { 1.0 } else { 0.0 };
                            d[c * plane + p] += coef * (prob - onehot);
                        }
                    }
                });
            }
            Op::L1 {
                pred,
                target,
                mask,
                count,
            } => {
                let pd = self.data(*pred);
                let coef = g[0] / *count as f64;
                acc(*pred, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            let diff = pd[i] - target[i];
                            if diff != 0.0 {
                                *dv += coef * diff.signum();
                            }
                        }
                    }
                });
            }
            Op::Cosine { pred, target } => {
                let (c, h, w) = self.value(*pred).chw()?;
                let plane = h * w;
                let pd = self.data(*pred);
                let coef = g[0] / plane as f64;
                acc(*pred, &mut |d| {
                    for p in 0..plane {
                        let raw = (0..c).map(|q| pd[q * plane + p].powi(2)).sum::<f64>().sqrt();
                        let dot: f64 = (0..c).map(|q| pd[q * plane + p] * target[q * plane + p]).sum();
                        for q in 0..c {
                            let i = q * plane + p;
                            let dcos = if raw > NORM_EPS {
                                target[i] / raw - dot * pd[i] / raw.powi(3)
                            } else {
                                target[i] / NORM_EPS
                            };
                            d[i] -= coef * dcos;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}

/// Normalises each pixel's `c`-vector of a channel-major field to unit length.
pub(crate) fn unit_field(data: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for p in 0..plane {
        let norm = (0..c).map(|q| data[q * plane + p].powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
        for q in 0..c {
            out[q * plane + p] /= norm;
        }
    }
    out
}

#[cfg(test)]
mod tests;
