use super::kernels::{self, col2im, gemm, im2col, ConvGeom, MatRef};
use super::{Result, Tensor, TensorError, LEAKY_SLOPE};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    LeakyRelu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Upsample2x(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations. Nodes are appended in execution order,
/// which is therefore a topological order of the dataflow.
///
/// A graph supports exactly one [`backward`](Graph::backward) call.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` was never a
    /// gradient-requiring leaf.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// True when `small` is a trailing sub-shape of `big` (a scalar always is).
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Receives a node index and a closure that adds into that node's gradient.
type GradSink<'a> = dyn FnMut(usize, &mut dyn FnMut(&mut [f64])) + 'a;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let out = match kind {
            Unary::Tanh => x.map(f64::tanh),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::LeakyRelu => x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => x.map(f64::ln),
            Unary::Square => x.map(|v| v * v),
        };
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Unary(kind, a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(Unary::LeakyRelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Elementwise binary op. Operands must have equal shapes, or one shape
    /// must be a trailing sub-shape of the other (broadcast over leading dims).
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let out_shape = if is_suffix(sa, sb) {
            sa.to_vec()
        } else if is_suffix(sb, sa) {
            sb.to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data: Vec<f64> = if la == n && lb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % la], db[i % lb])).collect()
        };
        let out = Tensor::new(out_shape, data)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * s);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Scale(a.0, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v + s);
        let ng = self.ng(&[a.0]);
        self.push(out, Op::AddScalar(a.0), ng)
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(ta.data(), k),
            MatRef::row_major(tb.data(), n),
            &mut out,
            false,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), ng))
    }

    /// Affine map `x [B x in] * w^T + b` with `w [out x in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [fan_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fan_out],
                    rhs: tb.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            MatRef::row_major(tx.data(), fan_in),
            MatRef::transposed(tw.data(), fan_in),
            &mut out,
            b.is_some(),
        );
        let out = Tensor::new(vec![batch, fan_out], out)?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            ng,
        ))
    }

    /// 2-D cross-correlation of `input [B,C,H,W]` with `kernel [F,C,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let span = size + 2 * padding;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    msg: format!(
                        "extent {size} with kernel {k}, stride {stride}, padding {padding} gives a non-integer output size"
                    ),
                });
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            channels: si[1],
            height: si[2],
            width: si[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad: padding,
            out_h: extent(si[2], sk[2])?,
            out_w: extent(si[3], sk[3])?,
        };
        let (batch, filters) = (si[0], sk[0]);
        if let Some(b) = bias {
            let sb = self.nodes[b.0].value.shape();
            if sb != [filters] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![filters],
                    rhs: sb.to_vec(),
                });
            }
        }
        let plane = geom.col_cols();
        let mut out = vec![0.0; batch * filters * plane];
        if filters <= kernels::DIRECT_MAX_FILTERS {
            kernels::conv_direct(ti.data(), tk.data(), &geom, batch, filters, &mut out);
        } else {
            kernels::conv_im2col(ti.data(), tk.data(), &geom, batch, filters, &mut out);
        }
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for (i, block) in out.chunks_mut(plane).enumerate() {
                let bv = bd[i % filters];
                block.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![input.0, kernel.0];
        deps.extend(bias.map(|b| b.0));
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            ng,
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "upsample2x",
                msg: format!("expected a 4-d tensor, got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * 4 * h * w];
        let src = t.data();
        for p in 0..planes {
            let sp = &src[p * h * w..][..h * w];
            let dp = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..h {
                let (top, bottom) = dp[y * 4 * w..(y + 1) * 4 * w].split_at_mut(2 * w);
                for (pair, &v) in top.chunks_exact_mut(2).zip(&sp[y * w..(y + 1) * w]) {
                    pair[0] = v;
                    pair[1] = v;
                }
                bottom.copy_from_slice(top);
            }
        }
        let out = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(out, Op::Upsample2x(a.0), ng))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {s0:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(out_shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(out, Op::Concat { parts: ids, axis }, ng))
    }

    /// Sub-range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, mid, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(
            out,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.nodes[a.0].value.sum());
        let ng = self.ng(&[a.0]);
        self.push(out, Op::Sum(a.0), ng)
    }

    /// Reverse pass from a single-element `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads, &mut leaf_grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut [Option<Tensor>],
    ) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].needs_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {
                leaf_grads[id] = Some(
                    Tensor::new(node.value.shape().to_vec(), g.to_vec())
                        .expect("gradient buffer matches leaf shape"),
                );
            }
            Op::Unary(kind, a) => {
                let x = nodes[*a].value.data();
                let y = node.value.data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i]
                            * match kind {
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::LeakyRelu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        LEAKY_SLOPE
                                    }
                                }
                                Unary::Exp => y[i],
                                Unary::Log => 1.0 / x[i],
                                Unary::Square => 2.0 * x[i],
                            };
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                let (la, lb) = (va.len(), vb.len());
                acc(*a, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % la] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * vb[i % lb],
                        };
                    }
                });
                acc(*b, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % lb] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va[i % la],
                        };
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, &gi)| *d += s * gi);
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }),
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |buf| {
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g, n),
                        MatRef::transposed(tb.data(), n),
                        buf,
                        true,
                    )
                });
                acc(*b, &mut |buf| {
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(ta.data(), k),
                        MatRef::row_major(g, n),
                        buf,
                        true,
                    )
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
                let (batch, fan_in, fan_out) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                acc(*x, &mut |buf| {
                    gemm(
                        batch,
                        fan_out,
                        fan_in,
                        MatRef::row_major(g, fan_out),
                        MatRef::row_major(tw.data(), fan_in),
                        buf,
                        true,
                    )
                });
                acc(*w, &mut |buf| {
                    gemm(
                        fan_out,
                        batch,
                        fan_in,
                        MatRef::transposed(g, fan_out),
                        MatRef::row_major(tx.data(), fan_in),
                        buf,
                        true,
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for row in g.chunks(fan_out) {
                            buf.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => self.conv_backward(*input, *kernel, *bias, geom, g, &mut acc),
            Op::Upsample2x(a) => {
                let s = nodes[*a].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                acc(*a, &mut |buf| {
                    for p in 0..planes {
                        let gp = &g[p * 4 * h * w..][..4 * h * w];
                        let bp = &mut buf[p * h * w..][..h * w];
                        for y in 0..h {
                            let (top, bottom) = gp[y * 4 * w..(y + 1) * 4 * w].split_at(2 * w);
                            let row = &mut bp[y * w..(y + 1) * w];
                            for (x, d) in row.iter_mut().enumerate() {
                                *d += top[2 * x] + top[2 * x + 1] + bottom[2 * x] + bottom[2 * x + 1];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let mid = nodes[p].value.shape()[*axis];
                    acc(p, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..mid * inner];
                            let dst = &mut buf[o * mid * inner..][..mid * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                    offset += mid;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mid = nodes[*input].value.shape()[*axis];
                acc(*input, &mut |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * mid + start) * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: &ConvGeom,
        g: &[f64],
        acc: &mut GradSink<'_>,
    ) {
        let (ti, tk) = (&self.nodes[input].value, &self.nodes[kernel].value);
        let (batch, filters) = (ti.shape()[0], tk.shape()[0]);
        let plane = geom.col_cols();
        let rows = geom.col_rows();
        let in_item = geom.channels * geom.height * geom.width;

        if let Some(b) = bias {
            acc(b, &mut |buf| {
                for (i, block) in g.chunks(plane).enumerate() {
                    buf[i % filters] += block.iter().sum::<f64>();
                }
            });
        }

        let want_input = self.nodes[input].needs_grad;
        let want_kernel = self.nodes[kernel].needs_grad;
        if !want_input && !want_kernel {
            return;
        }
        if filters <= kernels::DIRECT_MAX_FILTERS {
            let mut gkernel = vec![0.0; if want_kernel { tk.len() } else { 0 }];
            let mut ginput = vec![0.0; if want_input { ti.len() } else { 0 }];
            kernels::conv_direct_backward(
                ti.data(),
                tk.data(),
                g,
                geom,
                batch,
                filters,
                want_input.then_some(&mut ginput[..]),
                want_kernel.then_some(&mut gkernel[..]),
            );
            if want_kernel {
                acc(kernel, &mut |buf| buf.iter_mut().zip(&gkernel).for_each(|(d, &s)| *d += s));
            }
            if want_input {
                acc(input, &mut |buf| buf.iter_mut().zip(&ginput).for_each(|(d, &s)| *d += s));
            }
            return;
        }
        let chunk = kernels::conv_chunk(geom, batch);
        let mut cols = vec![0.0; rows * chunk * plane];
        let mut gout = vec![0.0; filters * chunk * plane];
        let mut gkernel = vec![0.0; tk.len()];
        let mut ginput = if want_input { vec![0.0; ti.len()] } else { Vec::new() };
        let mut b0 = 0;
        while b0 < batch {
            let items = chunk.min(batch - b0);
            let ncols = items * plane;
            for it in 0..items {
                for f in 0..filters {
                    gout[f * ncols + it * plane..][..plane]
                        .copy_from_slice(&g[((b0 + it) * filters + f) * plane..][..plane]);
                }
            }
            if want_kernel {
                im2col(&ti.data()[b0 * in_item..], geom, items, &mut cols);
                gemm(
                    filters,
                    ncols,
                    rows,
                    MatRef::row_major(&gout, ncols),
                    MatRef::transposed(&cols, ncols),
                    &mut gkernel,
                    true,
                );
            }
            if want_input {
                gemm(
                    rows,
                    filters,
                    ncols,
                    MatRef::transposed(tk.data(), rows),
                    MatRef::row_major(&gout, ncols),
                    &mut cols,
                    false,
                );
                col2im(&cols, geom, items, &mut ginput[b0 * in_item..]);
            }
            b0 += items;
        }
        if want_kernel {
            acc(kernel, &mut |buf| {
                buf.iter_mut().zip(&gkernel).for_each(|(d, &s)| *d += s)
            });
        }
        if want_input {
            acc(input, &mut |buf| {
                buf.iter_mut().zip(&ginput).for_each(|(d, &s)| *d += s)
            });
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
