use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{self, axis_split, broadcast_map, broadcast_shape, ConvGeom, MatRef};
use super::{DType, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Elu(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
///
/// Ops append nodes in execution order; [`Tape::backward`] walks them in
/// exact reverse order. A tape is single-threaded and meant to be dropped
/// after its backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    dtype: DType,
    check_finite: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_dtype(DType::F64)
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            dtype,
            check_finite: Cell::new(true),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Enables or disables the post-op NaN/Inf scan (on by default).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        if self.check_finite.get() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&self, t: &Tensor) -> Result<Var> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    /// Records a leaf; it collects gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Result<Var> {
        let op = if t.requires_grad() {
            Op::Leaf { param: None }
        } else {
            Op::Constant
        };
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), op, t.requires_grad())
    }

    /// Binds a named parameter. Frozen parameters become constants.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.require(name)?;
        if !t.requires_grad() {
            return self.constant(t);
        }
        self.push(
            "param",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                param: Some(name.to_string()),
            },
            true,
        )
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&self, x: Var) -> Result<Var> {
        let (shape, data) = {
            let n = &self.nodes()[x.0];
            (n.shape.clone(), n.data.clone())
        };
        self.push("detach", shape, data, Op::Constant, false)
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.nodes()[x.0].shape.clone()
    }

    pub fn data(&self, x: Var) -> Vec<f64> {
        self.nodes()[x.0].data.clone()
    }

    /// Borrows the values of `x` for the duration of `f`.
    pub fn with_data<R>(&self, x: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes()[x.0].data)
    }

    pub fn value(&self, x: Var) -> Tensor {
        let n = &self.nodes()[x.0];
        Tensor::new(n.shape.clone(), n.data.clone())
            .expect("node shape is consistent")
            .to_dtype(self.dtype)
    }

    pub fn item(&self, x: Var) -> Result<f64> {
        let n = &self.nodes()[x.0];
        if n.data.len() != 1 {
            return Err(Error::Contract(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| {
                Error::dim(format!("{name}: cannot broadcast {:?} with {:?}", na.shape, nb.shape))
            })?;
            let ma = broadcast_map(&shape, &na.shape);
            let mb = broadcast_map(&shape, &nb.shape);
            let n: usize = shape.iter().product();
            let data = match (&ma, &mb) {
                (None, None) => na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect(),
                _ => (0..n)
                    .map(|k| {
                        let ia = ma.as_ref().map_or(k, |m| m[k]);
                        let ib = mb.as_ref().map_or(k, |m| m[k]);
                        f(na.data[ia], nb.data[ib])
                    })
                    .collect(),
            };
            (shape, data)
        };
        let ng = self.needs(&[a, b]);
        self.push(name, shape, data, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (shape, data) = {
            let n = &self.nodes()[x.0];
            (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect())
        };
        let ng = self.needs(&[x]);
        self.push(name, shape, data, op, ng)
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// `x` for positive inputs, `exp(x) − 1` otherwise.
    pub fn elu(&self, x: Var) -> Result<Var> {
        self.unary("elu", x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the closed range.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- reductions and normalizations ---------------------------------

    fn check_axis(&self, name: &str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim(format!("{name}: axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("softmax", x, axis)?;
        let data = {
            let n = &self.nodes()[x.0];
            softmax_along(&n.data, &shape, axis, false)
        };
        let ng = self.needs(&[x]);
        self.push("softmax", shape, data, Op::Softmax { x, axis }, ng)
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("log_softmax", x, axis)?;
        let data = {
            let n = &self.nodes()[x.0];
            softmax_along(&n.data, &shape, axis, true)
        };
        let ng = self.needs(&[x]);
        self.push("log_softmax", shape, data, Op::LogSoftmax { x, axis }, ng)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("sum", x, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = {
            let n = &self.nodes()[x.0];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    let src = &n.data[(o * len + i) * inner..(o * len + i + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            out
        };
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.needs(&[x]);
        self.push("sum", out_shape, data, Op::Sum { x, axis }, ng)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let s = self.with_data(x, |d| d.iter().sum());
        let ng = self.needs(&[x]);
        self.push("sum_all", Vec::new(), vec![s], Op::SumAll(x), ng)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.with_data(x, <[f64]>::len);
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta` (shape `[d]`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gamma/beta must be [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (out, xhat, rstd) = {
            let nodes = self.nodes();
            let (xs, g, b) = (&nodes[x.0].data, &nodes[gamma.0].data, &nodes[beta.0].data);
            let rows = xs.len() / d.max(1);
            let mut out = vec![0.0; xs.len()];
            let mut xhat = vec![0.0; xs.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * g[c] + b[c];
                }
            }
            (out, xhat, rstd)
        };
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Per-sample group normalization of `[b, c, ...]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::dim(format!("group_norm needs [b, c, ...], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("group_norm: gamma/beta must be [{c}]")));
        }
        let spatial: usize = shape[2..].iter().product();
        let cpg = c / groups;
        let glen = cpg * spatial;
        let (out, xhat, rstd) = {
            let nodes = self.nodes();
            let (xs, g, bt) = (&nodes[x.0].data, &nodes[gamma.0].data, &nodes[beta.0].data);
            let mut out = vec![0.0; xs.len()];
            let mut xhat = vec![0.0; xs.len()];
            let mut rstd = vec![0.0; b * groups];
            for n in 0..b {
                for gi in 0..groups {
                    let start = (n * c + gi * cpg) * spatial;
                    let seg = &xs[start..start + glen];
                    let mean = seg.iter().sum::<f64>() / glen as f64;
                    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                    let rs = 1.0 / (var + eps).sqrt();
                    rstd[n * groups + gi] = rs;
                    for k in 0..glen {
                        let ch = gi * cpg + k / spatial;
                        let h = (seg[k] - mean) * rs;
                        xhat[start + k] = h;
                        out[start + k] = h * g[ch] + bt[ch];
                    }
                }
            }
            (out, xhat, rstd)
        };
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            "group_norm",
            shape,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (old, data) = {
            let n = &self.nodes()[x.0];
            (n.shape.clone(), n.data.clone())
        };
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!("cannot reshape {old:?} into {shape:?}")));
        }
        let ng = self.needs(&[x]);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), ng)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, data) = {
            let n = &self.nodes()[x.0];
            permute_data(&n.data, &shape, perm)
        };
        let ng = self.needs(&[x]);
        self.push("permute", out_shape, data, Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got rank {rank}")));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let base = self.check_axis("concat", *first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rest = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::dim(format!("concat: {s:?} does not fit {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let data = {
            let nodes = self.nodes();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for &v in xs {
                    let n = &nodes[v.0];
                    let chunk = n.shape[axis] * inner;
                    out.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
                }
            }
            out
        };
        let ng = self.needs(xs);
        self.push("concat", out_shape, data, Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&self, x: Var, index: &[usize]) -> Result<Var> {
        let data = {
            let n = &self.nodes()[x.0];
            if let Some(&bad) = index.iter().find(|&&i| i >= n.data.len()) {
                return Err(Error::dim(format!("gather index {bad} out of range for {:?}", n.shape)));
            }
            index.iter().map(|&i| n.data[i]).collect()
        };
        let ng = self.needs(&[x]);
        self.push("gather", vec![index.len()], data, Op::Gather { x, index: index.to_vec() }, ng)
    }

    // ---- products --------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let nodes = self.nodes();
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, 1.0, MatRef::new(&nodes[a.0].data, k), MatRef::new(&nodes[b.0].data, n), 0.0, &mut c);
            c
        };
        let ng = self.needs(&[a, b]);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b), ng)
    }

    /// Batched matrix product `[b,m,k] · [b,k,n] → [b,m,n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!("bmm: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let data = {
            let nodes = self.nodes();
            let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
            let mut c = vec![0.0; bt * m * n];
            for i in 0..bt {
                kernels::gemm(
                    m,
                    k,
                    n,
                    1.0,
                    MatRef::new(&da[i * m * k..(i + 1) * m * k], k),
                    MatRef::new(&db[i * k * n..(i + 1) * k * n], n),
                    0.0,
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            c
        };
        let ng = self.needs(&[a, b]);
        self.push("bmm", vec![bt, m, n], data, Op::Bmm(a, b), ng)
    }

    /// Cross-correlation of `x: [b, c_in, h, w]` with `w: [c_out, c_in, kh, kw]`.
    ///
    /// Output extents are `⌊(h + 2·pad − kh) / stride⌋ + 1`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let geom = conv_geom(&sx, &sw, stride, pad)?;
        let (b, c_out) = (sx[0], sw[0]);
        let data = {
            let nodes = self.nodes();
            let (xs, ws) = (&nodes[x.0].data, &nodes[w.0].data);
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let mut cols = vec![0.0; rows * cols_n];
            let mut out = vec![0.0; b * c_out * cols_n];
            let in_len = geom.c_in * geom.h * geom.w;
            for n in 0..b {
                kernels::im2col(&xs[n * in_len..(n + 1) * in_len], &geom, &mut cols);
                kernels::gemm(
                    c_out,
                    rows,
                    cols_n,
                    1.0,
                    MatRef::new(ws, rows),
                    MatRef::new(&cols, cols_n),
                    0.0,
                    &mut out[n * c_out * cols_n..(n + 1) * c_out * cols_n],
                );
            }
            out
        };
        let ng = self.needs(&[x, w]);
        self.push(
            "conv2d",
            vec![b, c_out, geom.h_out, geom.w_out],
            data,
            Op::Conv2d { x, w, stride, pad },
            ng,
        )
    }

    /// Hash of which side of every relu and clamp breakpoint each input lies
    /// on. Two evaluations with equal signatures ran through the same
    /// piecewise-smooth branch.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let nodes = self.nodes();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (id, node) in nodes.iter().enumerate() {
            let (x, classify): (Var, &dyn Fn(f64) -> u8) = match &node.op {
                Op::Relu(x) => (*x, &|v| (v > 0.0) as u8),
                Op::Clamp { x, lo, hi } => (*x, &move |v| if v < *lo { 0 } else if v > *hi { 2 } else { 1 }),
                _ => continue,
            };
            id.hash(&mut h);
            for &v in &nodes[x.0].data {
                classify(v).hash(&mut h);
            }
        }
        h.finish()
    }

    // ---- reverse pass ----------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients {
            grads: HashMap::new(),
            params: Vec::new(),
        };
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf { param } = &node.op {
                if let Some(name) = param {
                    out.params.push((name.clone(), id));
                }
                out.grads.insert(id, (node.shape.clone(), g));
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

/// Gradients of one backward pass, held for every reached leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<usize, (Vec<usize>, Vec<f64>)>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the leaf was unreachable
    /// or does not require gradients.
    pub fn get(&self, leaf: Var) -> Option<Tensor> {
        self.grads
            .get(&leaf.0)
            .map(|(s, g)| Tensor::new(s.clone(), g.clone()).expect("gradient shape"))
    }

    /// Every reached leaf with its gradient, in tape order.
    pub fn leaves(&self) -> Vec<(Var, Tensor)> {
        let mut ids: Vec<usize> = self.grads.keys().copied().collect();
        ids.sort_unstable();
        ids.into_iter()
            .map(|id| (Var(id), self.get(Var(id)).expect("listed leaf")))
            .collect()
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, id) in &self.params {
            if let (Some(t), Some((_, g))) = (store.get_mut(name), self.grads.get(id)) {
                t.accumulate_grad(g);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Adds `g` (output-shaped) into the gradient of `v`, summing over broadcast axes.
fn add_broadcast(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, out_shape: &[usize], g: impl Fn(usize) -> f64) {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return;
    }
    let map = broadcast_map(out_shape, &n.shape);
    let total: usize = out_shape.iter().product();
    add_into(grads, v, n.data.len(), |acc| match map {
        None => acc.iter_mut().enumerate().for_each(|(k, a)| *a += g(k)),
        Some(m) => (0..total).for_each(|k| acc[m[k]] += g(k)),
    });
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let shape = &node.shape;
    let out = &node.data;
    let pass = |grads: &mut [Option<Vec<f64>>], x: Var, f: &dyn Fn(usize) -> f64| {
        if nodes[x.0].needs_grad {
            add_into(grads, x, nodes[x.0].data.len(), |acc| acc.iter_mut().enumerate().for_each(|(k, a)| *a += f(k)));
        }
    };
    match &node.op {
        Op::Leaf { .. } | Op::Constant => {}
        Op::Add(a, b) => {
            add_broadcast(grads, nodes, *a, shape, |k| g[k]);
            add_broadcast(grads, nodes, *b, shape, |k| g[k]);
        }
        Op::Sub(a, b) => {
            add_broadcast(grads, nodes, *a, shape, |k| g[k]);
            add_broadcast(grads, nodes, *b, shape, |k| -g[k]);
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let ma = broadcast_map(shape, &na.shape);
            let mb = broadcast_map(shape, &nb.shape);
            let av = |k: usize| na.data[ma.as_ref().map_or(k, |m| m[k])];
            let bv = |k: usize| nb.data[mb.as_ref().map_or(k, |m| m[k])];
            if matches!(node.op, Op::Mul(..)) {
                add_broadcast(grads, nodes, *a, shape, |k| g[k] * bv(k));
                add_broadcast(grads, nodes, *b, shape, |k| g[k] * av(k));
            } else {
                add_broadcast(grads, nodes, *a, shape, |k| g[k] / bv(k));
                add_broadcast(grads, nodes, *b, shape, |k| -g[k] * av(k) / (bv(k) * bv(k)));
            }
        }
        Op::Scale(x, s) => pass(grads, *x, &|k| g[k] * s),
        Op::AddScalar(x) | Op::Reshape(x) => pass(grads, *x, &|k| g[k]),
        Op::Exp(x) => pass(grads, *x, &|k| g[k] * out[k]),
        Op::Log(x) => {
            let xs = &nodes[x.0].data;
            pass(grads, *x, &|k| g[k] / xs[k]);
        }
        Op::Elu(x) => {
            let xs = &nodes[x.0].data;
            pass(grads, *x, &|k| if xs[k] > 0.0 { g[k] } else { g[k] * (out[k] + 1.0) });
        }
        Op::Relu(x) => {
            let xs = &nodes[x.0].data;
            pass(grads, *x, &|k| if xs[k] > 0.0 { g[k] } else { 0.0 });
        }
        Op::Clamp { x, lo, hi } => {
            let xs = &nodes[x.0].data;
            pass(grads, *x, &|k| if xs[k] >= *lo && xs[k] <= *hi { g[k] } else { 0.0 });
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(shape, *axis);
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + r;
                    let dot: f64 = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = out[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            pass(grads, *x, &|k| dx[k]);
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = axis_split(shape, *axis);
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + r;
                    let gs: f64 = (0..len).map(|i| g[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = g[idx(i)] - out[idx(i)].exp() * gs;
                    }
                }
            }
            pass(grads, *x, &|k| dx[k]);
        }
        Op::Sum { x, axis } => {
            let xs = &nodes[x.0];
            let (_, len, inner) = axis_split(&xs.shape, *axis);
            pass(grads, *x, &|k| {
                let o = k / (len * inner);
                let r = k % inner;
                g[o * inner + r]
            });
        }
        Op::SumAll(x) => {
            let len = nodes[x.0].data.len();
            if nodes[x.0].needs_grad {
                add_into(grads, *x, len, |acc| acc.iter_mut().for_each(|a| *a += g[0]));
            }
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, back) = permute_data(g, shape, &inv);
            pass(grads, *x, &|k| back[k]);
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            let row = shape[*axis] * inner;
            for &v in xs {
                let n = &nodes[v.0];
                let chunk = n.shape[*axis] * inner;
                if n.needs_grad {
                    add_into(grads, v, n.data.len(), |acc| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            acc[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        }
                    });
                }
                offset += chunk;
            }
        }
        Op::Gather { x, index } => {
            let len = nodes[x.0].data.len();
            if nodes[x.0].needs_grad {
                add_into(grads, *x, len, |acc| {
                    for (k, &i) in index.iter().enumerate() {
                        acc[i] += g[k];
                    }
                });
            }
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            if na.needs_grad {
                add_into(grads, *a, m * k, |acc| {
                    kernels::gemm(m, n, k, 1.0, MatRef::new(g, n), MatRef::t(&nb.data, n), 1.0, acc)
                });
            }
            if nb.needs_grad {
                add_into(grads, *b, k * n, |acc| {
                    kernels::gemm(k, m, n, 1.0, MatRef::t(&na.data, k), MatRef::new(g, n), 1.0, acc)
                });
            }
        }
        Op::Bmm(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (bt, m, k, n) = (na.shape[0], na.shape[1], na.shape[2], nb.shape[2]);
            for i in 0..bt {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &na.data[i * m * k..(i + 1) * m * k];
                let bi = &nb.data[i * k * n..(i + 1) * k * n];
                if na.needs_grad {
                    add_into(grads, *a, bt * m * k, |acc| {
                        kernels::gemm(m, n, k, 1.0, MatRef::new(gi, n), MatRef::t(bi, n), 1.0, &mut acc[i * m * k..(i + 1) * m * k])
                    });
                }
                if nb.needs_grad {
                    add_into(grads, *b, bt * k * n, |acc| {
                        kernels::gemm(k, m, n, 1.0, MatRef::t(ai, k), MatRef::new(gi, n), 1.0, &mut acc[i * k * n..(i + 1) * k * n])
                    });
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let geom = conv_geom(&nx.shape, &nw.shape, *stride, *pad).expect("validated in forward");
            let (b, c_out) = (nx.shape[0], nw.shape[0]);
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let in_len = geom.c_in * geom.h * geom.w;
            let mut cols = vec![0.0; rows * cols_n];
            for n in 0..b {
                let gn = &g[n * c_out * cols_n..(n + 1) * c_out * cols_n];
                if nw.needs_grad {
                    kernels::im2col(&nx.data[n * in_len..(n + 1) * in_len], &geom, &mut cols);
                    add_into(grads, *w, nw.data.len(), |acc| {
                        kernels::gemm(c_out, cols_n, rows, 1.0, MatRef::new(gn, cols_n), MatRef::t(&cols, cols_n), 1.0, acc)
                    });
                }
                if nx.needs_grad {
                    kernels::gemm(rows, c_out, cols_n, 1.0, MatRef::t(&nw.data, rows), MatRef::new(gn, cols_n), 0.0, &mut cols);
                    add_into(grads, *x, nx.data.len(), |acc| {
                        kernels::col2im(&cols, &geom, &mut acc[n * in_len..(n + 1) * in_len])
                    });
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *shape.last().expect("rank ≥ 1");
            let rows = g.len() / d.max(1);
            let gm = &nodes[gamma.0].data;
            if nodes[gamma.0].needs_grad {
                add_into(grads, *gamma, d, |acc| {
                    for k in 0..g.len() {
                        acc[k % d] += g[k] * xhat[k];
                    }
                });
            }
            if nodes[beta.0].needs_grad {
                add_into(grads, *beta, d, |acc| {
                    for k in 0..g.len() {
                        acc[k % d] += g[k];
                    }
                });
            }
            if nodes[x.0].needs_grad {
                add_into(grads, *x, g.len(), |acc| {
                    for r in 0..rows {
                        norm_backward(&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d], rstd[r], |c| gm[c], &mut acc[r * d..(r + 1) * d]);
                    }
                });
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            rstd,
        } => {
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let cpg = c / groups;
            let glen = cpg * spatial;
            let gm = &nodes[gamma.0].data;
            if nodes[gamma.0].needs_grad {
                add_into(grads, *gamma, c, |acc| {
                    for k in 0..g.len() {
                        acc[(k / spatial) % c] += g[k] * xhat[k];
                    }
                });
            }
            if nodes[beta.0].needs_grad {
                add_into(grads, *beta, c, |acc| {
                    for k in 0..g.len() {
                        acc[(k / spatial) % c] += g[k];
                    }
                });
            }
            if nodes[x.0].needs_grad {
                add_into(grads, *x, g.len(), |acc| {
                    for n in 0..b {
                        for gi in 0..*groups {
                            let start = (n * c + gi * cpg) * spatial;
                            let r = start..start + glen;
                            norm_backward(&g[r.clone()], &xhat[r.clone()], rstd[n * groups + gi], |k| gm[gi * cpg + k / spatial], &mut acc[r]);
                        }
                    }
                });
            }
        }
    }
}

/// Input gradient of `y = gamma·x̂ + beta`, `x̂ = (x − mean)·rstd`, over one
/// normalization segment.
fn norm_backward(g: &[f64], xhat: &[f64], rstd: f64, gamma: impl Fn(usize) -> f64, acc: &mut [f64]) {
    let n = g.len() as f64;
    let dxhat: Vec<f64> = g.iter().enumerate().map(|(k, gv)| gv * gamma(k)).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    for k in 0..g.len() {
        acc[k] += rstd * (dxhat[k] - mean_d - xhat[k] * mean_dx);
    }
}

fn softmax_along(data: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + r;
            let max = (0..len).map(|i| data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|i| (data[idx(i)] - max).exp()).sum();
            let lz = z.ln();
            for i in 0..len {
                let shifted = data[idx(i)] - max;
                out[idx(i)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(data[cur]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn conv_geom(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if sx.len() != 4 || sw.len() != 4 {
        return Err(Error::dim(format!("conv2d needs [b,c,h,w] and [o,c,kh,kw], got {sx:?} and {sw:?}")));
    }
    if sx[1] != sw[1] {
        return Err(Error::dim(format!("conv2d: input has {} channels, kernel expects {}", sx[1], sw[1])));
    }
    let (kh, kw) = (sw[2], sw[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!("conv2d: kernel {kh}x{kw} must have odd extents")));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::dim(format!("conv2d: stride {stride} not in {{1, 2}}")));
    }
    let (h, w) = (sx[2], sx[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::dim(format!(
            "conv2d: input {h}x{w} with pad {pad} is smaller than kernel {kh}x{kw}"
        )));
    }
    Ok(ConvGeom {
        c_in: sx[1],
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}
