use std::sync::Arc;

use super::kernels as k;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Boolean visibility pattern for attention rows: `allow[r*cols + c]` says
/// whether query row `r` may attend to key column `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        AttnMask { rows, cols, allow }
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    MatmulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// x[m×n] + v[n], broadcast over rows.
    AddRow(NodeId, NodeId),
    /// x[m×n] ∘ v[n], broadcast over rows.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    // the shift is kept for graph dumps; backward passes gradients through
    AddConst(NodeId, #[allow(dead_code)] f64),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Swish(NodeId),
    Relu(NodeId),
    Ln(NodeId),
    PowConst(NodeId, f64),
    Clamp(NodeId, f64, f64),
    MaskedSoftmaxRows(NodeId, Arc<AttnMask>),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    ChannelNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    DepthwiseConv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    AvgPool2d(NodeId, (usize, usize)),
    AvgPoolRows(NodeId, usize),
    UpsampleRows(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    MaxOverRows(NodeId),
}

impl Op {
    fn inputs(&self, buf: &mut Vec<NodeId>) {
        buf.clear();
        match self {
            Op::Leaf => {}
            Op::Matmul(a, b)
            | Op::MatmulTransB(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => buf.extend([*a, *b]),
            Op::Scale(x, _)
            | Op::AddConst(x, _)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Swish(x)
            | Op::Relu(x)
            | Op::Ln(x)
            | Op::PowConst(x, _)
            | Op::Clamp(x, _, _)
            | Op::MaskedSoftmaxRows(x, _)
            | Op::AvgPool2d(x, _)
            | Op::AvgPoolRows(x, _)
            | Op::UpsampleRows(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SliceCols(x, _, _)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::MaxOverRows(x) => buf.push(*x),
            Op::LayerNormRows { x, gamma, beta, .. } | Op::ChannelNorm { x, gamma, beta, .. } => {
                buf.extend([*x, *gamma, *beta])
            }
            Op::Conv2d { x, w, b, .. } | Op::DepthwiseConv1d { x, w, b } => buf.extend([*x, *w, *b]),
            Op::ConcatCols(xs) => buf.extend(xs.iter().copied()),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of one scalar node with respect to graph leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_leaves: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds each parameter leaf's gradient into the set's `grad` buffers.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for &(node, pid) in &self.param_leaves {
            if let Some(g) = &self.grads[node.0] {
                params.grad_mut(pid).add_assign(g);
            }
        }
    }
}

/// Define-by-run computation graph. Node values are computed at insertion;
/// [`Graph::backward`] replays the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(NodeId, ParamId)>,
    quantize: bool,
}

impl Graph {
    /// Production-mode graph: every node output rounded to `f32` precision.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            quantize: true,
        }
    }

    /// Oracle-mode graph: full `f64` values at node outputs. Used by the
    /// finite-difference side of gradient checking.
    pub fn new_unquantized() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            quantize: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, mut value: Tensor, needs_grad: bool) -> NodeId {
        if self.quantize {
            value.quantize();
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf backed by a parameter; its gradient is routed back to the set
    /// through [`Gradients::accumulate_into`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let node = self.push(Op::Leaf, params.value(id).clone(), true);
        self.param_leaves.push((node, id));
        node
    }

    fn err(op: &'static str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch { op, detail }
    }

    fn want_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Self::err(op, format!("expected rank-2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.want_rank2("matmul", a)?;
        let (kb, n) = self.want_rank2("matmul", b)?;
        if ka != kb {
            return Err(Self::err("matmul", format!("[{m}x{ka}] · [{kb}x{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        k::matmul(
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), out, needs))
    }

    /// a[m×k] · b[n×k]ᵀ without materializing the transpose.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.want_rank2("matmul_tb", a)?;
        let (n, kb) = self.want_rank2("matmul_tb", b)?;
        if ka != kb {
            return Err(Self::err("matmul_tb", format!("[{m}x{ka}] · [{n}x{kb}]T")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        k::matmul_trans_b(
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatmulTransB(a, b), out, needs))
    }

    fn elementwise_pair(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::err(
                opname,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let vals: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_values_raw(self.shape(a).to_vec().as_slice(), vals);
        let needs = self.needs(&[a, b]);
        Ok(self.push(op, out, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        opname: &'static str,
        x: NodeId,
        v: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericsError> {
        let (m, n) = self.want_rank2(opname, x)?;
        let vs = self.shape(v);
        if vs != [n] {
            return Err(Self::err(opname, format!("[{m}x{n}] with vector {vs:?}")));
        }
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut vals = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                vals.push(f(xv[r * n + c], vv[c]));
            }
        }
        let out = Tensor::from_values_raw(&[m, n], vals);
        let needs = self.needs(&[x, v]);
        Ok(self.push(op, out, needs))
    }

    /// x[m×n] + v[n] on every row.
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        self.row_broadcast("add_row", x, v, |a, b| a + b, Op::AddRow(x, v))
    }

    /// x[m×n] ∘ v[n] on every row (column c scaled by v[c]).
    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        self.row_broadcast("mul_row", x, v, |a, b| a * b, Op::MulRow(x, v))
    }

    fn elementwise(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let vals: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_values_raw(self.shape(x).to_vec().as_slice(), vals);
        let needs = self.needs(&[x]);
        self.push(op, out, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.elementwise(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.elementwise(x, |v| v + c, Op::AddConst(x, c))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, k::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, k::gelu, Op::Gelu(x))
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, k::swish, Op::Swish(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Natural log; caller keeps inputs strictly positive (clamp first).
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, f64::ln, Op::Ln(x))
    }

    /// x^p with the 0^0 = 1 convention, so p = 0 degrades a focal factor to
    /// a plain one.
    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        self.elementwise(x, |v| v.powf(p), Op::PowConst(x, p))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.elementwise(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn masked_softmax(&mut self, x: NodeId, mask: Arc<AttnMask>) -> Result<NodeId, NumericsError> {
        let (m, n) = self.want_rank2("masked_softmax", x)?;
        if mask.rows != m || mask.cols != n {
            return Err(Self::err(
                "masked_softmax",
                format!("scores [{m}x{n}] vs mask [{}x{}]", mask.rows, mask.cols),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        k::masked_softmax_rows(self.value(x).data(), &mask.allow, m, n, out.data_mut());
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MaskedSoftmaxRows(x, mask), out, needs))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let (m, n) = self.want_rank2("layer_norm", x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Self::err(
                "layer_norm",
                format!(
                    "x [{m}x{n}], gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        k::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            m,
            n,
            eps,
            out.data_mut(),
        );
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNormRows { x, gamma, beta, eps }, out, needs))
    }

    /// Normalizes a [C×F×T] feature map across C at each position.
    pub fn channel_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Self::err("channel_norm", format!("expected rank-3, got {s:?}")));
        }
        let c = s[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Self::err(
                "channel_norm",
                format!("{c} channels, gamma {:?}", self.shape(gamma)),
            ));
        }
        let spatial = s[1] * s[2];
        let mut out = Tensor::zeros(&s);
        k::channel_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            spatial,
            eps,
            out.data_mut(),
        );
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(Op::ChannelNorm { x, gamma, beta, eps }, out, needs))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Self::err(
                "conv2d",
                format!("x {xs:?} (want [Cin,F,T]), w {ws:?} (want [Cout,Cin,KF,KT])"),
            ));
        }
        if ws[1] != xs[0] {
            return Err(Self::err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[0], ws[1]),
            ));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Self::err("conv2d", format!("bias {:?}", self.shape(b))));
        }
        let dims = k::Conv2dDims {
            cin: xs[0],
            fh: xs[1],
            ft: xs[2],
            cout: ws[0],
            kf: ws[2],
            kt: ws[3],
            stride,
            pad,
        };
        if dims.fh + 2 * pad.0 < dims.kf || dims.ft + 2 * pad.1 < dims.kt {
            return Err(Self::err("conv2d", format!("kernel {ws:?} larger than padded input")));
        }
        let mut out = Tensor::zeros(&[dims.cout, dims.out_f(), dims.out_t()]);
        k::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
            out.data_mut(),
        );
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out, needs))
    }

    /// Per-channel temporal convolution of [T×D] with kernel [K×D], odd K,
    /// same padding.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (t, d) = self.want_rank2("depthwise_conv1d", x)?;
        let (kk, dw) = self.want_rank2("depthwise_conv1d", w)?;
        if dw != d || kk % 2 == 0 {
            return Err(Self::err(
                "depthwise_conv1d",
                format!("x [{t}x{d}], w [{kk}x{dw}] (K must be odd, D match)"),
            ));
        }
        if self.shape(b) != [d] {
            return Err(Self::err("depthwise_conv1d", format!("bias {:?}", self.shape(b))));
        }
        let mut out = Tensor::zeros(&[t, d]);
        k::depthwise_conv1d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            t,
            d,
            kk,
            out.data_mut(),
        );
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Op::DepthwiseConv1d { x, w, b }, out, needs))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, pool: (usize, usize)) -> Result<NodeId, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pool.0 == 0 || pool.1 == 0 || s[1] % pool.0 != 0 || s[2] % pool.1 != 0 {
            return Err(Self::err(
                "avg_pool2d",
                format!("shape {s:?} not divisible by pool {pool:?}"),
            ));
        }
        let (c, of, ot) = (s[0], s[1] / pool.0, s[2] / pool.1);
        let xv = self.value(x).data();
        let norm = 1.0 / (pool.0 * pool.1) as f64;
        let mut vals = vec![0.0; c * of * ot];
        for ch in 0..c {
            for fo in 0..of {
                for to in 0..ot {
                    let mut acc = 0.0;
                    for pf in 0..pool.0 {
                        for pt in 0..pool.1 {
                            acc += xv[(ch * s[1] + fo * pool.0 + pf) * s[2] + to * pool.1 + pt];
                        }
                    }
                    vals[(ch * of + fo) * ot + to] = acc * norm;
                }
            }
        }
        let out = Tensor::from_values_raw(&[c, of, ot], vals);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::AvgPool2d(x, pool), out, needs))
    }

    /// Non-overlapping mean over row blocks: [T×D] → [T/p×D].
    pub fn avg_pool_rows(&mut self, x: NodeId, pool: usize) -> Result<NodeId, NumericsError> {
        let (t, d) = self.want_rank2("avg_pool_rows", x)?;
        if pool == 0 || t % pool != 0 {
            return Err(Self::err("avg_pool_rows", format!("{t} rows, pool {pool}")));
        }
        let ot = t / pool;
        let xv = self.value(x).data();
        let norm = 1.0 / pool as f64;
        let mut vals = vec![0.0; ot * d];
        for ro in 0..ot {
            let orow = &mut vals[ro * d..(ro + 1) * d];
            for p in 0..pool {
                let xrow = &xv[(ro * pool + p) * d..(ro * pool + p + 1) * d];
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o += v * norm;
                }
            }
        }
        let out = Tensor::from_values_raw(&[ot, d], vals);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::AvgPoolRows(x, pool), out, needs))
    }

    /// Endpoint-aligned linear upsampling of rows: [T×D] → [T·factor×D].
    pub fn upsample_rows(&mut self, x: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        let (t, d) = self.want_rank2("upsample_rows", x)?;
        if factor == 0 {
            return Err(Self::err("upsample_rows", "factor 0".into()));
        }
        let mut out = Tensor::zeros(&[t * factor, d]);
        k::upsample_rows(self.value(x).data(), t, d, factor, out.data_mut());
        let needs = self.needs(&[x]);
        Ok(self.push(Op::UpsampleRows(x, factor), out, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.want_rank2("transpose", x)?;
        let xv = self.value(x).data();
        let mut vals = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                vals[c * m + r] = xv[r * n + c];
            }
        }
        let out = Tensor::from_values_raw(&[n, m], vals);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Transpose(x), out, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let want: usize = shape.iter().product();
        if want != self.value(x).len() {
            return Err(Self::err(
                "reshape",
                format!("{:?} → {:?}", self.shape(x), shape),
            ));
        }
        let out = Tensor::from_values_raw(shape, self.value(x).data().to_vec());
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), out, needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.want_rank2("slice_cols", x)?;
        if from >= to || to > n {
            return Err(Self::err("slice_cols", format!("[{from}, {to}) of {n} cols")));
        }
        let w = to - from;
        let xv = self.value(x).data();
        let mut vals = Vec::with_capacity(m * w);
        for r in 0..m {
            vals.extend_from_slice(&xv[r * n + from..r * n + to]);
        }
        let out = Tensor::from_values_raw(&[m, w], vals);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::SliceCols(x, from, to), out, needs))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, NumericsError> {
        if xs.is_empty() {
            return Err(Self::err("concat_cols", "no inputs".into()));
        }
        let (m, _) = self.want_rank2("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mi, ni) = self.want_rank2("concat_cols", x)?;
            if mi != m {
                return Err(Self::err("concat_cols", format!("row counts {m} vs {mi}")));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut vals = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                let xv = self.value(x).data();
                vals.extend_from_slice(&xv[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_values_raw(&[m, total], vals);
        let needs = self.needs(xs);
        Ok(self.push(Op::ConcatCols(xs.to_vec()), out, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Op::SumAll(x), Tensor::from_values_raw(&[1], vec![s]), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n;
        let needs = self.needs(&[x]);
        self.push(Op::MeanAll(x), Tensor::from_values_raw(&[1], vec![s]), needs)
    }

    /// Column-wise max of [m×n] → [n]. Gradient routes to the first
    /// maximizing row of each column.
    pub fn max_over_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.want_rank2("max_over_rows", x)?;
        let xv = self.value(x).data();
        let mut vals = vec![f64::NEG_INFINITY; n];
        for r in 0..m {
            for c in 0..n {
                if xv[r * n + c] > vals[c] {
                    vals[c] = xv[r * n + c];
                }
            }
        }
        let out = Tensor::from_values_raw(&[n], vals);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MaxOverRows(x), out, needs))
    }

    /// Reverse-mode sweep from a scalar node. Returns gradients for every
    /// leaf with `requires_grad` plus all parameter leaves.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", lt.shape()),
            });
        }
        if !lt.all_finite() {
            return Err(NumericsError::NonFinite {
                context: "loss value".into(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_values_raw(&[1], vec![1.0]));

        let mut inputs = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.quantize {
                g.quantize();
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            node.op.inputs(&mut inputs);
            // allocate input grad buffers on demand
            for &i in &inputs {
                if self.nodes[i.0].needs_grad && grads[i.0].is_none() {
                    grads[i.0] = Some(Tensor::zeros(self.nodes[i.0].value.shape()));
                }
            }
            self.backprop_op(idx, &g, &mut grads);
        }

        Ok(Gradients {
            grads,
            param_leaves: self.param_leaves.clone(),
        })
    }

    fn backprop_op(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();

        // helper: mutable input grad if that input participates
        macro_rules! gbuf {
            ($id:expr) => {
                if self.nodes[$id.0].needs_grad {
                    grads[$id.0].as_mut().map(|t| t.data_mut())
                } else {
                    None
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, kk) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(da) = gbuf!(a) {
                    k::matmul_trans_b_accum(gd, bv, m, n, kk, da);
                }
                if let Some(db) = gbuf!(b) {
                    k::matmul_trans_a_accum(av, gd, m, kk, n, db);
                }
            }
            Op::MatmulTransB(a, b) => {
                let (m, kk) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[0];
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(da) = gbuf!(a) {
                    // da += g[m×n] · b[n×k]
                    k::matmul_accum(gd, bv, m, n, kk, da);
                }
                if let Some(db) = gbuf!(b) {
                    // db += gᵀ[n×m] · a[m×k]
                    k::matmul_trans_a_accum(gd, av, m, n, kk, db);
                }
            }
            Op::Add(a, b) => {
                for (id, sign) in [(a, 1.0), (b, 1.0)] {
                    if let Some(d) = gbuf!(id) {
                        for (o, &gv) in d.iter_mut().zip(gd) {
                            *o += sign * gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(a, 1.0), (b, -1.0)] {
                    if let Some(d) = gbuf!(id) {
                        for (o, &gv) in d.iter_mut().zip(gd) {
                            *o += sign * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(da) = gbuf!(a) {
                    for i in 0..gd.len() {
                        da[i] += gd[i] * bv[i];
                    }
                }
                if let Some(db) = gbuf!(b) {
                    for i in 0..gd.len() {
                        db[i] += gd[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, v) => {
                let n = self.nodes[v.0].value.len();
                if let Some(dx) = gbuf!(x) {
                    for (o, &gv) in dx.iter_mut().zip(gd) {
                        *o += gv;
                    }
                }
                if let Some(dv) = gbuf!(v) {
                    for (i, &gv) in gd.iter().enumerate() {
                        dv[i % n] += gv;
                    }
                }
            }
            Op::MulRow(x, v) => {
                let n = self.nodes[v.0].value.len();
                let (xv, vv) = (self.nodes[x.0].value.data(), self.nodes[v.0].value.data());
                if let Some(dx) = gbuf!(x) {
                    for (i, &gv) in gd.iter().enumerate() {
                        dx[i] += gv * vv[i % n];
                    }
                }
                if let Some(dv) = gbuf!(v) {
                    for (i, &gv) in gd.iter().enumerate() {
                        dv[i % n] += gv * xv[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = gbuf!(x) {
                    for (o, &gv) in dx.iter_mut().zip(gd) {
                        *o += c * gv;
                    }
                }
            }
            Op::AddConst(x, _) => {
                if let Some(dx) = gbuf!(x) {
                    for (o, &gv) in dx.iter_mut().zip(gd) {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] * k::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Swish(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] * k::swish_grad(xv[i]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        if xv[i] > 0.0 {
                            dx[i] += gd[i];
                        }
                    }
                }
            }
            Op::Ln(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        dx[i] += gd[i] / xv[i];
                    }
                }
            }
            Op::PowConst(x, p) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        // one-sided 0 at the origin when the true slope blows up
                        let slope = if xv[i] == 0.0 && *p < 1.0 {
                            0.0
                        } else {
                            p * xv[i].powf(p - 1.0)
                        };
                        dx[i] += gd[i] * slope;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(dx) = gbuf!(x) {
                    for i in 0..gd.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            dx[i] += gd[i];
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows(x, mask) => {
                if let Some(dx) = gbuf!(x) {
                    k::masked_softmax_rows_backward(node.value.data(), gd, mask.rows, mask.cols, dx);
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let s = self.nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                // the kernel writes all three grads; non-participating
                // inputs get throwaway buffers
                let need_x = self.nodes[x.0].needs_grad;
                let need_g = self.nodes[gamma.0].needs_grad;
                let need_b = self.nodes[beta.0].needs_grad;
                let mut dx = if need_x {
                    grads[x.0].take().unwrap()
                } else {
                    Tensor::zeros(&[m, n])
                };
                let mut dg = if need_g {
                    grads[gamma.0].take().unwrap()
                } else {
                    Tensor::zeros(&[n])
                };
                let mut db = if need_b {
                    grads[beta.0].take().unwrap()
                } else {
                    Tensor::zeros(&[n])
                };
                k::layer_norm_rows_backward(
                    xv,
                    gv,
                    gd,
                    m,
                    n,
                    *eps,
                    dx.data_mut(),
                    dg.data_mut(),
                    db.data_mut(),
                );
                if need_x {
                    grads[x.0] = Some(dx);
                }
                if need_g {
                    grads[gamma.0] = Some(dg);
                }
                if need_b {
                    grads[beta.0] = Some(db);
                }
            }
            Op::ChannelNorm { x, gamma, beta, eps } => {
                let s = self.nodes[x.0].value.shape();
                let (c, spatial) = (s[0], s[1] * s[2]);
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_g = self.nodes[gamma.0].needs_grad;
                let need_b = self.nodes[beta.0].needs_grad;
                let mut dx = if need_x {
                    grads[x.0].take().unwrap()
                } else {
                    Tensor::zeros(&[c, s[1], s[2]])
                };
                let mut dg = if need_g {
                    grads[gamma.0].take().unwrap()
                } else {
                    Tensor::zeros(&[c])
                };
                let mut db = if need_b {
                    grads[beta.0].take().unwrap()
                } else {
                    Tensor::zeros(&[c])
                };
                k::channel_norm_backward(
                    xv,
                    gv,
                    gd,
                    c,
                    spatial,
                    *eps,
                    dx.data_mut(),
                    dg.data_mut(),
                    db.data_mut(),
                );
                if need_x {
                    grads[x.0] = Some(dx);
                }
                if need_g {
                    grads[gamma.0] = Some(dg);
                }
                if need_b {
                    grads[beta.0] = Some(db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let dims = k::Conv2dDims {
                    cin: xs[0],
                    fh: xs[1],
                    ft: xs[2],
                    cout: ws[0],
                    kf: ws[2],
                    kt: ws[3],
                    stride: *stride,
                    pad: *pad,
                };
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut dx = if need_x {
                    grads[x.0].take().unwrap()
                } else {
                    Tensor::zeros(xs)
                };
                let mut dw = if need_w {
                    grads[w.0].take().unwrap()
                } else {
                    Tensor::zeros(ws)
                };
                let mut db = if need_b {
                    grads[b.0].take().unwrap()
                } else {
                    Tensor::zeros(&[dims.cout])
                };
                k::conv2d_backward(xv, wv, gd, &dims, dx.data_mut(), dw.data_mut(), db.data_mut());
                if need_x {
                    grads[x.0] = Some(dx);
                }
                if need_w {
                    grads[w.0] = Some(dw);
                }
                if need_b {
                    grads[b.0] = Some(db);
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (t, d) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let kk = self.nodes[w.0].value.shape()[0];
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut dx = if need_x {
                    grads[x.0].take().unwrap()
                } else {
                    Tensor::zeros(&[t, d])
                };
                let mut dw = if need_w {
                    grads[w.0].take().unwrap()
                } else {
                    Tensor::zeros(&[kk, d])
                };
                let mut db = if need_b {
                    grads[b.0].take().unwrap()
                } else {
                    Tensor::zeros(&[d])
                };
                k::depthwise_conv1d_backward(
                    xv,
                    wv,
                    gd,
                    t,
                    d,
                    kk,
                    dx.data_mut(),
                    dw.data_mut(),
                    db.data_mut(),
                );
                if need_x {
                    grads[x.0] = Some(dx);
                }
                if need_w {
                    grads[w.0] = Some(dw);
                }
                if need_b {
                    grads[b.0] = Some(db);
                }
            }
            Op::AvgPool2d(x, pool) => {
                let xs = self.nodes[x.0].value.shape();
                let (c, fh, ft) = (xs[0], xs[1], xs[2]);
                let (of, ot) = (fh / pool.0, ft / pool.1);
                let norm = 1.0 / (pool.0 * pool.1) as f64;
                if let Some(dx) = gbuf!(x) {
                    for ch in 0..c {
                        for fo in 0..of {
                            for to in 0..ot {
                                let gv = gd[(ch * of + fo) * ot + to] * norm;
                                for pf in 0..pool.0 {
                                    for pt in 0..pool.1 {
                                        dx[(ch * fh + fo * pool.0 + pf) * ft + to * pool.1 + pt] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPoolRows(x, pool) => {
                let d = self.nodes[x.0].value.shape()[1];
                let ot = self.nodes[x.0].value.shape()[0] / pool;
                let norm = 1.0 / *pool as f64;
                if let Some(dx) = gbuf!(x) {
                    for ro in 0..ot {
                        let grow = &gd[ro * d..(ro + 1) * d];
                        for p in 0..*pool {
                            let drow = &mut dx[(ro * pool + p) * d..(ro * pool + p + 1) * d];
                            for (o, &gv) in drow.iter_mut().zip(grow) {
                                *o += gv * norm;
                            }
                        }
                    }
                }
            }
            Op::UpsampleRows(x, factor) => {
                let s = self.nodes[x.0].value.shape();
                let (t, d) = (s[0], s[1]);
                if let Some(dx) = gbuf!(x) {
                    k::upsample_rows_backward(gd, t, d, *factor, dx);
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                if let Some(dx) = gbuf!(x) {
                    // g is [n×m]
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += gd[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = gbuf!(x) {
                    for (o, &gv) in dx.iter_mut().zip(gd) {
                        *o += gv;
                    }
                }
            }
            Op::SliceCols(x, from, _to) => {
                let n = self.nodes[x.0].value.shape()[1];
                let w = node.value.shape()[1];
                let m = node.value.shape()[0];
                if let Some(dx) = gbuf!(x) {
                    for r in 0..m {
                        for c in 0..w {
                            dx[r * n + from + c] += gd[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &xi in xs {
                    let w = self.nodes[xi.0].value.shape()[1];
                    if self.nodes[xi.0].needs_grad {
                        if let Some(dx) = grads[xi.0].as_mut() {
                            let dxd = dx.data_mut();
                            for r in 0..m {
                                for c in 0..w {
                                    dxd[r * w + c] += gd[r * total + offset + c];
                                }
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = gbuf!(x) {
                    for o in dx.iter_mut() {
                        *o += gd[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                if let Some(dx) = gbuf!(x) {
                    let gv = gd[0] / n;
                    for o in dx.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::MaxOverRows(x) => {
                let s = self.nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let xv = self.nodes[x.0].value.data();
                let yv = node.value.data();
                if let Some(dx) = gbuf!(x) {
                    for c in 0..n {
                        for r in 0..m {
                            if xv[r * n + c] == yv[c] {
                                dx[r * n + c] += gd[c];
                                break;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
