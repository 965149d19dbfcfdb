use std::cell::RefCell;

use crate::conv;
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Result, Tensor, TensorError, Var};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf { var: Var },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddScalar { a: NodeId },
    Scale { a: NodeId, c: f32 },
    Exp { a: NodeId },
    Log { a: NodeId },
    Relu { a: NodeId },
    Sqrt { a: NodeId },
    Neg { a: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    NormalizeRows { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    MeanSpatial { a: NodeId },
    AddRowBias { a: NodeId, b: NodeId },
    AddChanBias { a: NodeId, b: NodeId },
    AddSpatialBias { a: NodeId, b: NodeId },
    Conv3x3 { x: NodeId, w: NodeId },
    AvgPool2 { x: NodeId, f: usize },
    UpsampleNearest { x: NodeId, f: usize },
    ConcatChannels { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SelectRows { a: NodeId, idx: Vec<usize> },
    ScatterRows { a: NodeId, idx: Vec<usize> },
    RepeatRowsEach { a: NodeId, times: usize },
    ExtractDiag { a: NodeId },
    DropDiag { a: NodeId },
    Col { a: NodeId, c: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    AvgGroupRows { a: NodeId, group: usize },
    BroadcastSpatial { a: NodeId },
    Reshape { a: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf { .. } => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddScalar { .. } => "add_scalar",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Relu { .. } => "relu",
            Op::Sqrt { .. } => "sqrt",
            Op::Neg { .. } => "neg",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::MeanSpatial { .. } => "mean_spatial",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::AddChanBias { .. } => "add_chan_bias",
            Op::AddSpatialBias { .. } => "add_spatial_bias",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::RepeatRowsEach { .. } => "repeat_rows_each",
            Op::ExtractDiag { .. } => "extract_diag",
            Op::DropDiag { .. } => "drop_diag",
            Op::Col { .. } => "col",
            Op::GatherRows { .. } => "gather_rows",
            Op::AvgGroupRows { .. } => "avg_group_rows",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    tag: Option<&'static str>,
}

/// Eagerly recorded compute graph.
///
/// Creation order is a topological order, so one reverse sweep over the node
/// vector visits every node exactly once with its output gradient complete.
/// The tape is meant to live for a single forward/backward pass and be
/// dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            tag: None,
        });
        NodeId(nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].needs_grad
    }

    /// Attaches a diagnostic name used by non-finite reporting.
    pub fn set_tag(&self, id: NodeId, tag: &'static str) {
        self.nodes.borrow_mut()[id.0].tag = Some(tag);
    }

    /// Copies the value out of the tape.
    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn scalar(&self, id: NodeId) -> Result<f32> {
        let nodes = self.nodes.borrow();
        let v = &nodes[id.0].value;
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.data()[0])
    }

    /// First node (in creation order) holding a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<(usize, String)> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if !n.value.is_all_finite() {
                let label = n.tag.map(|t| t.to_string()).unwrap_or_else(|| n.op.name().to_string());
                return Some((i, format!("{label} (shape {:?})", n.value.shape())));
            }
        }
        None
    }

    // ---- value injection --------------------------------------------------

    pub fn constant(&self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    /// Records the current value of a parameter; gradients reach the `Var`.
    pub fn leaf(&self, var: &Var) -> NodeId {
        let value = var.value();
        let plain = Tensor::new(value.shape().to_vec(), value.data().to_vec())
            .expect("var tensors are internally consistent");
        drop(value);
        self.push(plain, Op::Leaf { var: var.clone() }, true)
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        let (na, nb) = (nodes[a.0].value.numel(), nodes[b.0].value.numel());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn ew(&self, a: NodeId, b: NodeId, shape: Vec<usize>, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let nodes = self.nodes.borrow();
        let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        match (da.len(), db.len()) {
            (1, _) => out.extend(db.iter().map(|y| f(da[0], *y))),
            (_, 1) => out.extend(da.iter().map(|x| f(*x, db[0]))),
            _ => out.extend(da.iter().zip(db).map(|(x, y)| f(*x, *y))),
        }
        Tensor::new(shape, out).expect("shape checked")
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("add", a, b)?;
        let v = self.ew(a, b, shape, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("sub", a, b)?;
        let v = self.ew(a, b, shape, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub { a, b }, ng))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("mul", a, b)?;
        let v = self.ew(a, b, shape, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("div", a, b)?;
        let v = self.ew(a, b, shape, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Div { a, b }, ng))
    }

    pub fn add_scalar(&self, a: NodeId, c: f32) -> NodeId {
        let nodes = self.nodes.borrow();
        let v = Tensor::new(
            nodes[a.0].value.shape().to_vec(),
            nodes[a.0].value.data().iter().map(|x| x + c).collect(),
        )
        .expect("same shape");
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(v, Op::AddScalar { a }, ng)
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&self, a: NodeId, c: f32) -> NodeId {
        let nodes = self.nodes.borrow();
        let v = Tensor::new(
            nodes[a.0].value.shape().to_vec(),
            nodes[a.0].value.data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(v, Op::Scale { a, c }, ng)
    }

    fn unary(&self, a: NodeId, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let nodes = self.nodes.borrow();
        let v = Tensor::new(
            nodes[a.0].value.shape().to_vec(),
            nodes[a.0].value.data().iter().map(|x| f(*x)).collect(),
        )
        .expect("same shape");
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(v, op, ng)
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp { a }, f32::exp)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self, a: NodeId) -> Result<NodeId> {
        {
            let nodes = self.nodes.borrow();
            if let Some(bad) = nodes[a.0].value.data().iter().find(|x| **x <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
        }
        Ok(self.unary(a, Op::Log { a }, f32::ln))
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn sqrt(&self, a: NodeId) -> Result<NodeId> {
        {
            let nodes = self.nodes.borrow();
            if let Some(bad) = nodes[a.0].value.data().iter().find(|x| **x < 0.0) {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    msg: format!("negative input {bad}"),
                });
            }
        }
        Ok(self.unary(a, Op::Sqrt { a }, f32::sqrt))
    }

    pub fn neg(&self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg { a }, |x| -x)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm_nn(m, k, n, 1.0, nodes[a.0].value.data(), nodes[b.0].value.data(), 0.0, &mut out);
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, ng))
    }

    pub fn transpose(&self, a: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape();
        if sa.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank 2".into(),
                actual: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let src = nodes[a.0].value.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { a }, ng))
    }

    fn rank2(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape();
        match sa.len() {
            1 => Ok((1, sa[0])),
            2 => Ok((sa[0], sa[1])),
            _ => Err(TensorError::BadShape {
                op,
                expected: "rank 1 or 2".into(),
                actual: sa.to_vec(),
            }),
        }
    }

    /// Row-wise softmax with max subtraction; rank-1 input is one row.
    pub fn softmax_rows(&self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("softmax_rows", a)?;
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                z += e as f64;
            }
            let inv = (1.0 / z) as f32;
            out[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o *= inv);
        }
        let shape = nodes[a.0].value.shape().to_vec();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { a }, ng))
    }

    pub fn log_softmax_rows(&self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("log_softmax_rows", a)?;
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for v in row {
                z += ((v - m) as f64).exp();
            }
            let lse = m as f64 + z.ln();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (*v as f64 - lse) as f32;
            }
        }
        let shape = nodes[a.0].value.shape().to_vec();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmaxRows { a }, ng))
    }

    /// Projects each row onto the unit sphere. Errors on a zero row.
    pub fn normalize_rows(&self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("normalize_rows", a)?;
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = (row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()).sqrt();
            if norm == 0.0 {
                return Err(TensorError::Degenerate {
                    op: "normalize_rows",
                    msg: format!("row {r} has zero norm"),
                });
            }
            let inv = (1.0 / norm) as f32;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let shape = nodes[a.0].value.shape().to_vec();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { a }, ng))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let nodes = self.nodes.borrow();
        let s: f64 = nodes[a.0].value.data().iter().map(|x| *x as f64).sum();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(Tensor::scalar(s as f32), Op::SumAll { a }, ng)
    }

    pub fn mean_all(&self, a: NodeId) -> NodeId {
        let nodes = self.nodes.borrow();
        let n = nodes[a.0].value.numel() as f64;
        let s: f64 = nodes[a.0].value.data().iter().map(|x| *x as f64).sum();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        self.push(Tensor::scalar((s / n) as f32), Op::MeanAll { a }, ng)
    }

    /// `[N, C, H, W] -> [N, C]`, mean over the spatial plane.
    pub fn mean_spatial(&self, a: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape().to_vec();
        if sa.len() != 4 {
            return Err(TensorError::BadShape {
                op: "mean_spatial",
                expected: "rank 4 [n,c,h,w]".into(),
                actual: sa,
            });
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let hw = h * w;
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; n * c];
        for p in 0..n * c {
            let s: f64 = x[p * hw..(p + 1) * hw].iter().map(|v| *v as f64).sum();
            out[p] = (s / hw as f64) as f32;
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::MeanSpatial { a }, ng))
    }

    // ---- bias broadcasts ----------------------------------------------------

    /// `[N, K] + [K]` (bias added to every row).
    pub fn add_row_bias(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape().to_vec();
        let sb = nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k) = (sa[0], sa[1]);
        let x = nodes[a.0].value.data();
        let bias = nodes[b.0].value.data();
        let mut out = vec![0.0f32; n * k];
        for r in 0..n {
            for j in 0..k {
                out[r * k + j] = x[r * k + j] + bias[j];
            }
        }
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::AddRowBias { a, b }, ng))
    }

    /// `[N, C, H, W] + [C]`.
    pub fn add_chan_bias(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape().to_vec();
        let sb = nodes[b.0].value.shape().to_vec();
        if sa.len() != 4 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_chan_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let hw = h * w;
        let x = nodes[a.0].value.data();
        let bias = nodes[b.0].value.data();
        let mut out = vec![0.0f32; n * c * hw];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let bv = bias[ch];
                for i in 0..hw {
                    out[base + i] = x[base + i] + bv;
                }
            }
        }
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(sa, out)?, Op::AddChanBias { a, b }, ng))
    }

    /// `[N, C, H, W] + [N, C]` (per-sample channel offsets).
    pub fn add_spatial_bias(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape().to_vec();
        let sb = nodes[b.0].value.shape().to_vec();
        if sa.len() != 4 || sb.len() != 2 || sb[0] != sa[0] || sb[1] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_spatial_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let hw = h * w;
        let x = nodes[a.0].value.data();
        let bias = nodes[b.0].value.data();
        let mut out = vec![0.0f32; n * c * hw];
        for p in 0..n * c {
            let bv = bias[p];
            let base = p * hw;
            for i in 0..hw {
                out[base + i] = x[base + i] + bv;
            }
        }
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(sa, out)?, Op::AddSpatialBias { a, b }, ng))
    }

    // ---- spatial ops ----------------------------------------------------------

    /// Same-padding 3x3 convolution: x `[N, Cin, H, W]`, w `[Cout, Cin, 3, 3]`.
    pub fn conv3x3(&self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sx = nodes[x.0].value.shape().to_vec();
        let sw = nodes[w.0].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3x3",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let mut out = vec![0.0f32; n * cout * h * wd];
        conv::conv3x3_forward(
            nodes[x.0].value.data(),
            nodes[w.0].value.data(),
            n, cin, cout, h, wd,
            &mut out,
        );
        let ng = nodes[x.0].needs_grad || nodes[w.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, cout, h, wd], out)?, Op::Conv3x3 { x, w }, ng))
    }

    pub fn avg_pool2(&self, x: NodeId, f: usize) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sx = nodes[x.0].value.shape().to_vec();
        if sx.len() != 4 || f == 0 || sx[2] % f != 0 || sx[3] % f != 0 {
            return Err(TensorError::BadShape {
                op: "avg_pool2",
                expected: format!("rank 4 with spatial dims divisible by {f}"),
                actual: sx,
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = vec![0.0f32; n * c * (h / f) * (w / f)];
        conv::avg_pool2_forward(nodes[x.0].value.data(), n * c, h, w, f, &mut out);
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![n, c, h / f, w / f], out)?,
            Op::AvgPool2 { x, f },
            ng,
        ))
    }

    pub fn upsample_nearest(&self, x: NodeId, f: usize) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sx = nodes[x.0].value.shape().to_vec();
        if sx.len() != 4 || f == 0 {
            return Err(TensorError::BadShape {
                op: "upsample_nearest",
                expected: "rank 4".into(),
                actual: sx,
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = vec![0.0f32; n * c * h * f * w * f];
        conv::upsample_nearest_forward(nodes[x.0].value.data(), n * c, h, w, f, &mut out);
        let ng = nodes[x.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![n, c, h * f, w * f], out)?,
            Op::UpsampleNearest { x, f },
            ng,
        ))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[NodeId]) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        assert!(!parts.is_empty());
        let s0 = nodes[parts[0].0].value.shape().to_vec();
        if s0.len() != 4 {
            return Err(TensorError::BadShape {
                op: "concat_channels",
                expected: "rank 4".into(),
                actual: s0,
            });
        }
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let mut ctot = 0usize;
        for p in parts {
            let s = nodes[p.0].value.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            ctot += s[1];
        }
        let hw = h * w;
        let mut out = vec![0.0f32; n * ctot * hw];
        for s in 0..n {
            let mut coff = 0usize;
            for p in parts {
                let c = nodes[p.0].value.shape()[1];
                let src = &nodes[p.0].value.data()[s * c * hw..(s + 1) * c * hw];
                out[(s * ctot + coff) * hw..(s * ctot + coff + c) * hw].copy_from_slice(src);
                coff += c;
            }
        }
        let ng = parts.iter().any(|p| nodes[p.0].needs_grad);
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![n, ctot, h, w], out)?,
            Op::ConcatChannels { parts: parts.to_vec() },
            ng,
        ))
    }

    /// Concatenates `[N, Ki]` matrices column-wise.
    pub fn concat_cols(&self, parts: &[NodeId]) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        assert!(!parts.is_empty());
        let s0 = nodes[parts[0].0].value.shape().to_vec();
        if s0.len() != 2 {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                expected: "rank 2".into(),
                actual: s0,
            });
        }
        let n = s0[0];
        let mut ktot = 0usize;
        for p in parts {
            let s = nodes[p.0].value.shape();
            if s.len() != 2 || s[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            ktot += s[1];
        }
        let mut out = vec![0.0f32; n * ktot];
        for r in 0..n {
            let mut koff = 0usize;
            for p in parts {
                let k = nodes[p.0].value.shape()[1];
                let src = &nodes[p.0].value.data()[r * k..(r + 1) * k];
                out[r * ktot + koff..r * ktot + koff + k].copy_from_slice(src);
                koff += k;
            }
        }
        let ng = parts.iter().any(|p| nodes[p.0].needs_grad);
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![n, ktot], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            ng,
        ))
    }

    // ---- row selection / rearrangement -----------------------------------------

    /// Gathers rows of a rank-2 (or rank-4, row = sample) tensor.
    pub fn select_rows(&self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape().to_vec();
        if sa.is_empty() {
            return Err(TensorError::BadShape {
                op: "select_rows",
                expected: "rank >= 1".into(),
                actual: sa,
            });
        }
        let n = sa[0];
        let stride: usize = sa[1..].iter().product();
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(TensorError::Domain {
                op: "select_rows",
                msg: format!("row index {bad} out of range 0..{n}"),
            });
        }
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; idx.len() * stride];
        for (r, i) in idx.iter().enumerate() {
            out[r * stride..(r + 1) * stride].copy_from_slice(&x[i * stride..(i + 1) * stride]);
        }
        let mut shape = sa.clone();
        shape[0] = idx.len();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SelectRows { a, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Spreads rows into a larger zero tensor: row `r` of the input lands at
    /// row `idx[r]` of an output with `rows` rows.
    pub fn scatter_rows(&self, a: NodeId, idx: &[usize], rows: usize) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape().to_vec();
        if sa.is_empty() || sa[0] != idx.len() {
            return Err(TensorError::BadShape {
                op: "scatter_rows",
                expected: format!("leading dim {}", idx.len()),
                actual: sa,
            });
        }
        let stride: usize = sa[1..].iter().product();
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(TensorError::Domain {
                op: "scatter_rows",
                msg: format!("target row {bad} out of range 0..{rows}"),
            });
        }
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; rows * stride];
        for (r, i) in idx.iter().enumerate() {
            out[i * stride..(i + 1) * stride].copy_from_slice(&x[r * stride..(r + 1) * stride]);
        }
        let mut shape = sa.clone();
        shape[0] = rows;
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScatterRows { a, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows_each(&self, a: NodeId, times: usize) -> Result<NodeId> {
        let (n, k) = self.rank2("repeat_rows_each", a)?;
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; n * times * k];
        for r in 0..n {
            for t in 0..times {
                out[(r * times + t) * k..(r * times + t + 1) * k]
                    .copy_from_slice(&x[r * k..(r + 1) * k]);
            }
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![n * times, k], out)?,
            Op::RepeatRowsEach { a, times },
            ng,
        ))
    }

    /// `[N, N] -> [N, 1]`, the main diagonal.
    pub fn extract_diag(&self, a: NodeId) -> Result<NodeId> {
        let (n, k) = self.rank2("extract_diag", a)?;
        if n != k {
            return Err(TensorError::BadShape {
                op: "extract_diag",
                expected: "square matrix".into(),
                actual: vec![n, k],
            });
        }
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let out: Vec<f32> = (0..n).map(|i| x[i * n + i]).collect();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::ExtractDiag { a }, ng))
    }

    /// `[N, N] -> [N, N-1]`, every row with its diagonal element removed.
    pub fn drop_diag(&self, a: NodeId) -> Result<NodeId> {
        let (n, k) = self.rank2("drop_diag", a)?;
        if n != k || n < 2 {
            return Err(TensorError::BadShape {
                op: "drop_diag",
                expected: "square matrix with n >= 2".into(),
                actual: vec![n, k],
            });
        }
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let mut out = vec![0.0f32; n * (n - 1)];
        for i in 0..n {
            let mut c = 0usize;
            for j in 0..n {
                if j != i {
                    out[i * (n - 1) + c] = x[i * n + j];
                    c += 1;
                }
            }
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, n - 1], out)?, Op::DropDiag { a }, ng))
    }

    /// Single column `c` of a rank-2 tensor, shape `[N, 1]`.
    pub fn col(&self, a: NodeId, c: usize) -> Result<NodeId> {
        let (n, k) = self.rank2("col", a)?;
        if c >= k {
            return Err(TensorError::Domain {
                op: "col",
                msg: format!("column {c} out of range 0..{k}"),
            });
        }
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let out: Vec<f32> = (0..n).map(|r| x[r * k + c]).collect();
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::Col { a, c }, ng))
    }

    /// Embedding lookup: rows `ids` of `table` (`[V, E]`).
    pub fn gather_rows(&self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, e) = self.rank2("gather_rows", table)?;
        if let Some(bad) = ids.iter().find(|i| **i >= v) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                msg: format!("id {bad} out of vocabulary 0..{v}"),
            });
        }
        let nodes = self.nodes.borrow();
        let x = nodes[table.0].value.data();
        let mut out = vec![0.0f32; ids.len() * e];
        for (r, i) in ids.iter().enumerate() {
            out[r * e..(r + 1) * e].copy_from_slice(&x[i * e..(i + 1) * e]);
        }
        let ng = nodes[table.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], out)?,
            Op::GatherRows { table, ids: ids.to_vec() },
            ng,
        ))
    }

    /// Means every `group` consecutive rows: `[N*group, E] -> [N, E]`.
    pub fn avg_group_rows(&self, a: NodeId, group: usize) -> Result<NodeId> {
        let (n, e) = self.rank2("avg_group_rows", a)?;
        if group == 0 || n % group != 0 {
            return Err(TensorError::Domain {
                op: "avg_group_rows",
                msg: format!("group {group} does not divide {n} rows"),
            });
        }
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let groups = n / group;
        let mut out = vec![0.0f32; groups * e];
        let inv = 1.0 / group as f32;
        for gidx in 0..groups {
            for r in 0..group {
                let src = &x[(gidx * group + r) * e..(gidx * group + r + 1) * e];
                for (o, v) in out[gidx * e..(gidx + 1) * e].iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![groups, e], out)?,
            Op::AvgGroupRows { a, group },
            ng,
        ))
    }

    /// `[N, D] -> [N, D, H, W]`, each feature value filling its plane.
    pub fn broadcast_spatial(&self, a: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (n, d) = self.rank2("broadcast_spatial", a)?;
        let nodes = self.nodes.borrow();
        let x = nodes[a.0].value.data();
        let hw = h * w;
        let mut out = vec![0.0f32; n * d * hw];
        for p in 0..n * d {
            out[p * hw..(p + 1) * hw].iter_mut().for_each(|o| *o = x[p]);
        }
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(
            Tensor::new(vec![n, d, h, w], out)?,
            Op::BroadcastSpatial { a },
            ng,
        ))
    }

    /// Reinterprets the value under a new shape (same element count).
    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let nodes = self.nodes.borrow();
        let v = nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let ng = nodes[a.0].needs_grad;
        drop(nodes);
        Ok(self.push(v, Op::Reshape { a }, ng))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss; leaf gradients accumulate into their
    /// `Var` buffers. Returns an error when the loss is not a scalar.
    pub fn backward(&self, loss: NodeId) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backward_op(&nodes, &mut grads, node, &g);
        }
        Ok(())
    }
}

fn wants(nodes: &[Node], id: NodeId) -> bool {
    nodes[id.0].needs_grad
}

fn accum(grads: &mut [Option<Vec<f32>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f32])) {
    if !wants(nodes, id) {
        return;
    }
    let buf = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
    f(buf);
}

#[allow(clippy::too_many_lines)]
fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f32>>], node: &Node, g: &[f32]) {
    match &node.op {
        Op::Constant => {}
        Op::Leaf { var } => var.accumulate_grad(g),
        Op::Add { a, b } => {
            binary_bcast_backward(nodes, grads, *a, *b, g, |_, _| 1.0, |_, _| 1.0, node);
        }
        Op::Sub { a, b } => {
            binary_bcast_backward(nodes, grads, *a, *b, g, |_, _| 1.0, |_, _| -1.0, node);
        }
        Op::Mul { a, b } => {
            binary_bcast_backward(nodes, grads, *a, *b, g, |_, y| y, |x, _| x, node);
        }
        Op::Div { a, b } => {
            binary_bcast_backward(nodes, grads, *a, *b, g, |_, y| 1.0 / y, |x, y| -x / (y * y), node);
        }
        Op::AddScalar { a } => accum(grads, nodes, *a, |buf| {
            for (o, gi) in buf.iter_mut().zip(g) {
                *o += gi;
            }
        }),
        Op::Scale { a, c } => accum(grads, nodes, *a, |buf| {
            for (o, gi) in buf.iter_mut().zip(g) {
                *o += gi * c;
            }
        }),
        Op::Exp { a } => {
            let y = node.value.data();
            accum(grads, nodes, *a, |buf| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            });
        }
        Op::Log { a } => {
            let x = nodes[a.0].value.data();
            accum(grads, nodes, *a, |buf| {
                for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                    *o += gi / xi;
                }
            });
        }
        Op::Relu { a } => {
            let x = nodes[a.0].value.data();
            accum(grads, nodes, *a, |buf| {
                for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            });
        }
        Op::Sqrt { a } => {
            let y = node.value.data();
            accum(grads, nodes, *a, |buf| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * 0.5 / yi;
                }
            });
        }
        Op::Neg { a } => accum(grads, nodes, *a, |buf| {
            for (o, gi) in buf.iter_mut().zip(g) {
                *o -= gi;
            }
        }),
        Op::Matmul { a, b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            accum(grads, nodes, *a, |buf| {
                gemm_nt(m, n, k, 1.0, g, bv, 1.0, buf);
            });
            accum(grads, nodes, *b, |buf| {
                gemm_tn(k, m, n, 1.0, av, g, 1.0, buf);
            });
        }
        Op::Transpose { a } => {
            let sa = nodes[a.0].value.shape();
            let (m, n) = (sa[0], sa[1]);
            accum(grads, nodes, *a, |buf| {
                for i in 0..n {
                    for j in 0..m {
                        buf[j * n + i] += g[i * m + j];
                    }
                }
            });
        }
        Op::SoftmaxRows { a } => {
            let y = node.value.data();
            let shape = node.value.shape();
            let cols = *shape.last().unwrap();
            let rows = y.len() / cols;
            accum(grads, nodes, *a, |buf| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| (*yi as f64) * (*gi as f64)).sum();
                    for ((o, yi), gi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *o += yi * (gi - dot as f32);
                    }
                }
            });
        }
        Op::LogSoftmaxRows { a } => {
            let y = node.value.data();
            let shape = node.value.shape();
            let cols = *shape.last().unwrap();
            let rows = y.len() / cols;
            accum(grads, nodes, *a, |buf| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().map(|v| *v as f64).sum();
                    for ((o, yi), gi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *o += gi - (yi.exp() * gsum as f32);
                    }
                }
            });
        }
        Op::NormalizeRows { a } => {
            let x = nodes[a.0].value.data();
            let y = node.value.data();
            let shape = node.value.shape();
            let cols = *shape.last().unwrap();
            let rows = y.len() / cols;
            accum(grads, nodes, *a, |buf| {
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let norm = (xr.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()).sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| (*yi as f64) * (*gi as f64)).sum();
                    for ((o, yi), gi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *o += ((*gi as f64 - dot * (*yi as f64)) / norm) as f32;
                    }
                }
            });
        }
        Op::SumAll { a } => {
            let gv = g[0];
            accum(grads, nodes, *a, |buf| {
                buf.iter_mut().for_each(|o| *o += gv);
            });
        }
        Op::MeanAll { a } => {
            let gv = g[0] / nodes[a.0].value.numel() as f32;
            accum(grads, nodes, *a, |buf| {
                buf.iter_mut().for_each(|o| *o += gv);
            });
        }
        Op::MeanSpatial { a } => {
            let sa = nodes[a.0].value.shape();
            let hw = sa[2] * sa[3];
            let inv = 1.0 / hw as f32;
            accum(grads, nodes, *a, |buf| {
                for (p, gi) in g.iter().enumerate() {
                    let gv = gi * inv;
                    buf[p * hw..(p + 1) * hw].iter_mut().for_each(|o| *o += gv);
                }
            });
        }
        Op::AddRowBias { a, b } => {
            accum(grads, nodes, *a, |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
            let k = nodes[b.0].value.numel();
            accum(grads, nodes, *b, |buf| {
                for (i, gi) in g.iter().enumerate() {
                    buf[i % k] += gi;
                }
            });
        }
        Op::AddChanBias { a, b } => {
            accum(grads, nodes, *a, |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
            let sa = nodes[a.0].value.shape();
            let (n, c, hw) = (sa[0], sa[1], sa[2] * sa[3]);
            accum(grads, nodes, *b, |buf| {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let mut acc = 0.0f64;
                        for gi in &g[base..base + hw] {
                            acc += *gi as f64;
                        }
                        buf[ch] += acc as f32;
                    }
                }
            });
        }
        Op::AddSpatialBias { a, b } => {
            accum(grads, nodes, *a, |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
            let sa = nodes[a.0].value.shape();
            let hw = sa[2] * sa[3];
            accum(grads, nodes, *b, |buf| {
                for (p, o) in buf.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for gi in &g[p * hw..(p + 1) * hw] {
                        acc += *gi as f64;
                    }
                    *o += acc as f32;
                }
            });
        }
        Op::Conv3x3 { x, w } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let cout = sw[0];
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            let want_x = wants(nodes, *x);
            let want_w = wants(nodes, *w);
            if want_x && want_w {
                // Split borrows: take both grad buffers out, then put back.
                let mut dx = grads[x.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[x.0].value.numel()]);
                let mut dw = grads[w.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[w.0].value.numel()]);
                conv::conv3x3_backward(xv, wv, g, n, cin, cout, h, wd, Some(&mut dx), Some(&mut dw));
                grads[x.0] = Some(dx);
                grads[w.0] = Some(dw);
            } else if want_x {
                accum(grads, nodes, *x, |buf| {
                    conv::conv3x3_backward(xv, wv, g, n, cin, cout, h, wd, Some(buf), None);
                });
            } else if want_w {
                accum(grads, nodes, *w, |buf| {
                    conv::conv3x3_backward(xv, wv, g, n, cin, cout, h, wd, None, Some(buf));
                });
            }
        }
        Op::AvgPool2 { x, f } => {
            let sx = nodes[x.0].value.shape();
            let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            accum(grads, nodes, *x, |buf| {
                conv::avg_pool2_backward(g, n * c, h, w, *f, buf);
            });
        }
        Op::UpsampleNearest { x, f } => {
            let sx = nodes[x.0].value.shape();
            let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            accum(grads, nodes, *x, |buf| {
                conv::upsample_nearest_backward(g, n * c, h, w, *f, buf);
            });
        }
        Op::ConcatChannels { parts } => {
            let shape = node.value.shape();
            let (n, ctot, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut coff = 0usize;
            for p in parts {
                let c = nodes[p.0].value.shape()[1];
                accum(grads, nodes, *p, |buf| {
                    for s in 0..n {
                        let src = &g[(s * ctot + coff) * hw..(s * ctot + coff + c) * hw];
                        for (o, gi) in buf[s * c * hw..(s + 1) * c * hw].iter_mut().zip(src) {
                            *o += gi;
                        }
                    }
                });
                coff += c;
            }
        }
        Op::ConcatCols { parts } => {
            let shape = node.value.shape();
            let (n, ktot) = (shape[0], shape[1]);
            let mut koff = 0usize;
            for p in parts {
                let k = nodes[p.0].value.shape()[1];
                accum(grads, nodes, *p, |buf| {
                    for r in 0..n {
                        let src = &g[r * ktot + koff..r * ktot + koff + k];
                        for (o, gi) in buf[r * k..(r + 1) * k].iter_mut().zip(src) {
                            *o += gi;
                        }
                    }
                });
                koff += k;
            }
        }
        Op::SelectRows { a, idx } => {
            let stride: usize = nodes[a.0].value.shape()[1..].iter().product();
            accum(grads, nodes, *a, |buf| {
                for (r, i) in idx.iter().enumerate() {
                    for (o, gi) in buf[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&g[r * stride..(r + 1) * stride])
                    {
                        *o += gi;
                    }
                }
            });
        }
        Op::ScatterRows { a, idx } => {
            let stride: usize = nodes[a.0].value.shape()[1..].iter().product();
            accum(grads, nodes, *a, |buf| {
                for (r, i) in idx.iter().enumerate() {
                    for (o, gi) in buf[r * stride..(r + 1) * stride]
                        .iter_mut()
                        .zip(&g[i * stride..(i + 1) * stride])
                    {
                        *o += gi;
                    }
                }
            });
        }
        Op::RepeatRowsEach { a, times } => {
            let sa = nodes[a.0].value.shape();
            let k = if sa.len() == 1 { sa[0] } else { sa[1] };
            let n = nodes[a.0].value.numel() / k;
            accum(grads, nodes, *a, |buf| {
                for r in 0..n {
                    for t in 0..*times {
                        let src = &g[(r * times + t) * k..(r * times + t + 1) * k];
                        for (o, gi) in buf[r * k..(r + 1) * k].iter_mut().zip(src) {
                            *o += gi;
                        }
                    }
                }
            });
        }
        Op::ExtractDiag { a } => {
            let n = nodes[a.0].value.shape()[0];
            accum(grads, nodes, *a, |buf| {
                for i in 0..n {
                    buf[i * n + i] += g[i];
                }
            });
        }
        Op::DropDiag { a } => {
            let n = nodes[a.0].value.shape()[0];
            accum(grads, nodes, *a, |buf| {
                for i in 0..n {
                    let mut c = 0usize;
                    for j in 0..n {
                        if j != i {
                            buf[i * n + j] += g[i * (n - 1) + c];
                            c += 1;
                        }
                    }
                }
            });
        }
        Op::Col { a, c } => {
            let sa = nodes[a.0].value.shape();
            let k = if sa.len() == 1 { sa[0] } else { sa[1] };
            let n = nodes[a.0].value.numel() / k;
            accum(grads, nodes, *a, |buf| {
                for r in 0..n {
                    buf[r * k + c] += g[r];
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let e = nodes[table.0].value.shape()[1];
            accum(grads, nodes, *table, |buf| {
                for (r, i) in ids.iter().enumerate() {
                    for (o, gi) in buf[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                        *o += gi;
                    }
                }
            });
        }
        Op::AvgGroupRows { a, group } => {
            let sa = nodes[a.0].value.shape();
            let (n, e) = (sa[0], sa[1]);
            let inv = 1.0 / *group as f32;
            accum(grads, nodes, *a, |buf| {
                for r in 0..n {
                    let src = &g[(r / group) * e..(r / group + 1) * e];
                    for (o, gi) in buf[r * e..(r + 1) * e].iter_mut().zip(src) {
                        *o += gi * inv;
                    }
                }
            });
        }
        Op::BroadcastSpatial { a } => {
            let shape = node.value.shape();
            let hw = shape[2] * shape[3];
            accum(grads, nodes, *a, |buf| {
                for (p, o) in buf.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for gi in &g[p * hw..(p + 1) * hw] {
                        acc += *gi as f64;
                    }
                    *o += acc as f32;
                }
            });
        }
        Op::Reshape { a } => accum(grads, nodes, *a, |buf| {
            for (o, gi) in buf.iter_mut().zip(g) {
                *o += gi;
            }
        }),
    }
}

/// Shared backward for the four broadcasting binary ops. `fa`/`fb` give the
/// local partial w.r.t. each operand at a value pair.
fn binary_bcast_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    a: NodeId,
    b: NodeId,
    g: &[f32],
    fa: impl Fn(f32, f32) -> f32,
    fb: impl Fn(f32, f32) -> f32,
    _node: &Node,
) {
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    let (na, nb) = (av.len(), bv.len());
    accum(grads, nodes, a, |buf| {
        if na == 1 && nb != 1 {
            let mut acc = 0.0f64;
            for (i, gi) in g.iter().enumerate() {
                acc += (*gi * fa(av[0], bv[i])) as f64;
            }
            buf[0] += acc as f32;
        } else {
            for (i, gi) in g.iter().enumerate() {
                let y = if nb == 1 { bv[0] } else { bv[i] };
                buf[i] += gi * fa(av[i], y);
            }
        }
    });
    accum(grads, nodes, b, |buf| {
        if nb == 1 && na != 1 {
            let mut acc = 0.0f64;
            for (i, gi) in g.iter().enumerate() {
                acc += (*gi * fb(av[i], bv[0])) as f64;
            }
            buf[0] += acc as f32;
        } else {
            for (i, gi) in g.iter().enumerate() {
                let x = if na == 1 { av[0] } else { av[i] };
                buf[i] += gi * fb(x, bv[i]);
            }
        }
    });
}
