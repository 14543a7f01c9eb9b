//! Reverse-mode differentiation tape.
//!
//! Ops are recorded in construction order, so node ids are already a
//! topological order and the backward sweep visits each node exactly once.
//! Every call to [`Tape::backward`] opens an independent gradient channel
//! for its root; calling it twice for the same root is an error rather
//! than a silent accumulation.

use std::cell::RefCell;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{CoreError, Result};

use super::fft::dft2_pair;
use super::{ComplexTensor, NodeId, TapeRef, Tensor, EPS_NUM};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// How a binary elementwise op pairs its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pair {
    Same,
    /// Left operand is a one-element scalar broadcast over the right.
    LeftScalar,
    /// Right operand is a one-element scalar broadcast over the left.
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId, pair: Pair },
    Sub { a: NodeId, b: NodeId, pair: Pair },
    Mul { a: NodeId, b: NodeId, pair: Pair, av: Arc<Vec<f64>>, bv: Arc<Vec<f64>> },
    Div { a: NodeId, b: NodeId, pair: Pair, av: Arc<Vec<f64>>, bv: Arc<Vec<f64>> },
    Neg { a: NodeId },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    Exp { a: NodeId, out: Arc<Vec<f64>> },
    LogEps { a: NodeId, av: Arc<Vec<f64>> },
    Sigmoid { a: NodeId, out: Arc<Vec<f64>> },
    Relu { a: NodeId, av: Arc<Vec<f64>> },
    Abs { a: NodeId, av: Arc<Vec<f64>> },
    Powf { a: NodeId, e: f64, av: Arc<Vec<f64>> },
    Reduce { a: NodeId, in_shape: Vec<usize>, axes: Vec<usize>, mean: bool },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        xv: Arc<Vec<f64>>,
        wv: Arc<Vec<f64>>,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        xv: Arc<Vec<f64>>,
        kv: Arc<Vec<f64>>,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        ks: usize,
    },
    /// Packed complex transform over `[2C, H, W]`: first C planes real,
    /// last C planes imaginary.
    Dft2 { a: NodeId, inverse: bool, channels: usize, h: usize, w: usize },
    Concat0 { a: NodeId, b: NodeId, a_len: usize },
    Slice0 { a: NodeId, in_len: usize, offset: usize },
    Repeat0 { a: NodeId, n: usize, chunk: usize },
    BroadcastTrailing { a: NodeId, lead: usize, trail: usize },
    Transpose2d { a: NodeId, rows: usize, cols: usize },
    Reshape { a: NodeId },
    SoftmaxLast { a: NodeId, out: Arc<Vec<f64>>, cols: usize },
    Upsample2x { a: NodeId, c: usize, h: usize, w: usize },
    AvgPool2x2 { a: NodeId, c: usize, h: usize, w: usize },
    Patchify { a: NodeId, c: usize, h: usize, w: usize, p: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    used_roots: RefCell<HashSet<NodeId>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            used_roots: RefCell::new(HashSet::new()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, shape: shape.clone() });
        Tensor::with_node(
            shape,
            Arc::new(data),
            TapeRef { tape: self.id, node: id },
            requires_grad,
        )
    }

    /// Register a leaf. Parameters use `requires_grad = true`.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op: Op::Leaf, shape: t.shape().to_vec() });
        Tensor::with_node(
            t.shape().to_vec(),
            t.data_arc(),
            TapeRef { tape: self.id, node: id },
            requires_grad,
        )
    }

    /// Node id of an operand, registering constants as leaves on the fly.
    fn input_id(&self, t: &Tensor) -> Result<NodeId> {
        match t.node() {
            Some(r) if r.tape == self.id => Ok(r.node),
            Some(_) => Err(CoreError::TapeMismatch),
            None => {
                let mut nodes = self.nodes.borrow_mut();
                let id = nodes.len();
                nodes.push(Node { op: Op::Leaf, shape: t.shape().to_vec() });
                Ok(id)
            }
        }
    }

    // ---- elementwise -----------------------------------------------------

    fn pair_of(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Pair, Vec<usize>)> {
        if a.shape() == b.shape() {
            Ok((Pair::Same, a.shape().to_vec()))
        } else if a.is_scalar() {
            Ok((Pair::LeftScalar, b.shape().to_vec()))
        } else if b.is_scalar() {
            Ok((Pair::RightScalar, a.shape().to_vec()))
        } else {
            Err(CoreError::shape(
                op,
                format!("{:?} vs {:?} (need equal shapes or a scalar)", a.shape(), b.shape()),
            ))
        }
    }

    fn zip_broadcast(
        pair: Pair,
        a: &[f64],
        b: &[f64],
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        match pair {
            Pair::Same => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Pair::LeftScalar => b.iter().map(|&y| f(a[0], y)).collect(),
            Pair::RightScalar => a.iter().map(|&x| f(x, b[0])).collect(),
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (pair, shape) = Self::pair_of("add", a, b)?;
        let data = Self::zip_broadcast(pair, a.data(), b.data(), |x, y| x + y);
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        Ok(self.push(Op::Add { a: ia, b: ib, pair }, shape, data, a.requires_grad() || b.requires_grad()))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (pair, shape) = Self::pair_of("sub", a, b)?;
        let data = Self::zip_broadcast(pair, a.data(), b.data(), |x, y| x - y);
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        Ok(self.push(Op::Sub { a: ia, b: ib, pair }, shape, data, a.requires_grad() || b.requires_grad()))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (pair, shape) = Self::pair_of("mul", a, b)?;
        let data = Self::zip_broadcast(pair, a.data(), b.data(), |x, y| x * y);
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        Ok(self.push(
            Op::Mul { a: ia, b: ib, pair, av: a.data_arc(), bv: b.data_arc() },
            shape,
            data,
            a.requires_grad() || b.requires_grad(),
        ))
    }

    /// Division with the denominator magnitude clamped to `EPS_NUM`.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (pair, shape) = Self::pair_of("div", a, b)?;
        let data = Self::zip_broadcast(pair, a.data(), b.data(), |x, y| x / clamp_den(y));
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        Ok(self.push(
            Op::Div { a: ia, b: ib, pair, av: a.data_arc(), bv: b.data_arc() },
            shape,
            data,
            a.requires_grad() || b.requires_grad(),
        ))
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| -x).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Neg { a: ia }, a.shape().to_vec(), data, a.requires_grad()))
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x + c).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::AddScalar { a: ia }, a.shape().to_vec(), data, a.requires_grad()))
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x * c).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::MulScalar { a: ia, c }, a.shape().to_vec(), data, a.requires_grad()))
    }

    /// 1 - x.
    pub fn one_minus(&self, a: &Tensor) -> Result<Tensor> {
        let n = self.neg(a)?;
        self.add_scalar(&n, 1.0)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.exp()).collect();
        let ia = self.input_id(a)?;
        let out = Arc::new(data.clone());
        Ok(self.push(Op::Exp { a: ia, out }, a.shape().to_vec(), data, a.requires_grad()))
    }

    /// ln(max(x, EPS_NUM)); derivative is zero below the clamp.
    pub fn log_eps(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.max(EPS_NUM).ln()).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::LogEps { a: ia, av: a.data_arc() }, a.shape().to_vec(), data, a.requires_grad()))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let ia = self.input_id(a)?;
        let out = Arc::new(data.clone());
        Ok(self.push(Op::Sigmoid { a: ia, out }, a.shape().to_vec(), data, a.requires_grad()))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Relu { a: ia, av: a.data_arc() }, a.shape().to_vec(), data, a.requires_grad()))
    }

    pub fn abs_val(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.abs()).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Abs { a: ia, av: a.data_arc() }, a.shape().to_vec(), data, a.requires_grad()))
    }

    /// x^e on x >= 0 (negative operands are clamped to zero).
    pub fn powf(&self, a: &Tensor, e: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.max(0.0).powf(e)).collect();
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Powf { a: ia, e, av: a.data_arc() }, a.shape().to_vec(), data, a.requires_grad()))
    }

    // ---- reductions -------------------------------------------------------

    fn reduce(&self, a: &Tensor, axes: &[usize], mean: bool) -> Result<Tensor> {
        let shape = a.shape();
        if axes.is_empty() {
            return Err(CoreError::InvalidAxes {
                shape: shape.to_vec(),
                detail: "empty reduction set".into(),
            });
        }
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || seen[ax] {
                return Err(CoreError::InvalidAxes {
                    shape: shape.to_vec(),
                    detail: format!("axis {ax} out of range or repeated"),
                });
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, &d)| d)
            .collect();
        let reduced: usize = axes.iter().map(|&ax| shape[ax]).product();
        let mut data = vec![0.0; out_shape.iter().product::<usize>().max(1)];
        let map = reduce_index_map(shape, &seen);
        for (flat, &v) in a.data().iter().enumerate() {
            data[map.out_index(flat)] += v;
        }
        if mean {
            let inv = 1.0 / reduced as f64;
            for v in &mut data {
                *v *= inv;
            }
        }
        let ia = self.input_id(a)?;
        let mut sorted_axes = axes.to_vec();
        sorted_axes.sort_unstable();
        Ok(self.push(
            Op::Reduce { a: ia, in_shape: shape.to_vec(), axes: sorted_axes, mean },
            out_shape,
            data,
            a.requires_grad(),
        ))
    }

    pub fn sum_axes(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(a, axes, false)
    }

    pub fn mean_axes(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().is_empty() {
            // Already a scalar; keep it a recorded identity.
            return self.reshape(a, vec![]);
        }
        let axes: Vec<usize> = (0..a.shape().len()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().is_empty() {
            return self.reshape(a, vec![]);
        }
        let axes: Vec<usize> = (0..a.shape().len()).collect();
        self.reduce(a, &axes, true)
    }

    /// Global average pooling: per-channel spatial mean of `[C, H, W]`.
    pub fn gap(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 3 {
            return Err(CoreError::shape("gap", format!("expected [C,H,W], got {:?}", a.shape())));
        }
        self.mean_axes(a, &[1, 2])
    }

    /// sum(a * b) as a scalar.
    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = self.mul(a, b)?;
        self.sum_all(&p)
    }

    // ---- linear / conv ----------------------------------------------------

    /// Affine map along the trailing dim: `[..., a] x [b, a] -> [..., b]`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if ws.len() != 2 {
            return Err(CoreError::shape("linear", format!("weight must be rank 2, got {ws:?}")));
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        if xs.is_empty() || *xs.last().unwrap() != in_dim {
            return Err(CoreError::shape(
                "linear",
                format!("input {xs:?} trailing dim must equal weight columns {in_dim}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [out_dim] {
                return Err(CoreError::shape(
                    "linear",
                    format!("bias {:?} must be [{out_dim}]", b.shape()),
                ));
            }
        }
        let rows = x.len() / in_dim;
        let xv = x.data();
        let wv = w.data();
        let mut data = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xrow = &xv[r * in_dim..(r + 1) * in_dim];
            let orow = &mut data[r * out_dim..(r + 1) * out_dim];
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot_unrolled(xrow, &wv[j * in_dim..(j + 1) * in_dim]);
            }
        }
        if let Some(b) = bias {
            let bv = b.data();
            for r in 0..rows {
                for j in 0..out_dim {
                    data[r * out_dim + j] += bv[j];
                }
            }
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let ix = self.input_id(x)?;
        let iw = self.input_id(w)?;
        let ib = bias.map(|b| self.input_id(b)).transpose()?;
        let rg = x.requires_grad()
            || w.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.push(
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
                xv: x.data_arc(),
                wv: w.data_arc(),
                rows,
                in_dim,
                out_dim,
            },
            out_shape,
            data,
            rg,
        ))
    }

    /// Same-padded stride-1 convolution: `[Cin,H,W] x [Cout,Cin,k,k] -> [Cout,H,W]`.
    pub fn conv2d(&self, x: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let xs = x.shape();
        let ks = k.shape();
        if xs.len() != 3 {
            return Err(CoreError::shape("conv2d", format!("input must be [C,H,W], got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(CoreError::shape(
                "conv2d",
                format!("kernel must be [Cout,Cin,k,k], got {ks:?}"),
            ));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kcin, ksz) = (ks[0], ks[1], ks[2]);
        if kcin != cin {
            return Err(CoreError::shape(
                "conv2d",
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        if ksz % 2 == 0 {
            return Err(CoreError::shape("conv2d", format!("kernel size {ksz} must be odd")));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(CoreError::shape(
                    "conv2d",
                    format!("bias {:?} must be [{cout}]", b.shape()),
                ));
            }
        }
        let data = conv2d_forward(x.data(), k.data(), bias.map(|b| b.data()), cin, cout, h, w, ksz);
        let ix = self.input_id(x)?;
        let ik = self.input_id(k)?;
        let ib = bias.map(|b| self.input_id(b)).transpose()?;
        let rg = x.requires_grad()
            || k.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d {
                x: ix,
                k: ik,
                b: ib,
                xv: x.data_arc(),
                kv: k.data_arc(),
                cin,
                cout,
                h,
                w,
                ks: ksz,
            },
            vec![cout, h, w],
            data,
            rg,
        ))
    }

    // ---- Fourier ----------------------------------------------------------

    fn dft2_packed(&self, packed: &Tensor, inverse: bool) -> Result<Tensor> {
        let s = packed.shape();
        if s.len() != 3 || s[0] % 2 != 0 {
            return Err(CoreError::shape(
                "dft2",
                format!("expected packed [2C,H,W], got {s:?}"),
            ));
        }
        let (channels, h, w) = (s[0] / 2, s[1], s[2]);
        let data = dft2_packed_apply(packed.data(), channels, h, w, inverse);
        let ia = self.input_id(packed)?;
        Ok(self.push(
            Op::Dft2 { a: ia, inverse, channels, h, w },
            s.to_vec(),
            data,
            packed.requires_grad(),
        ))
    }

    /// Per-channel 2-D DFT of a real `[C,H,W]` tensor (unnormalized).
    pub fn fft2(&self, x: &Tensor) -> Result<ComplexTensor> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(CoreError::shape("fft2", format!("expected [C,H,W], got {s:?}")));
        }
        let c = s[0];
        let zeros = Tensor::zeros(s.to_vec());
        let packed = self.concat0(x, &zeros)?;
        let y = self.dft2_packed(&packed, false)?;
        let re = self.slice0(&y, 0, c)?;
        let im = self.slice0(&y, c, c)?;
        ComplexTensor::new(re, im)
    }

    /// Per-channel inverse 2-D DFT, normalized by 1/(H*W).
    pub fn ifft2(&self, z: &ComplexTensor) -> Result<ComplexTensor> {
        let s = z.shape();
        if s.len() != 3 {
            return Err(CoreError::shape("ifft2", format!("expected [C,H,W], got {s:?}")));
        }
        let c = s[0];
        let packed = self.concat0(&z.re, &z.im)?;
        let y = self.dft2_packed(&packed, true)?;
        let re = self.slice0(&y, 0, c)?;
        let im = self.slice0(&y, c, c)?;
        ComplexTensor::new(re, im)
    }

    // ---- data movement ------------------------------------------------------

    /// Concatenate along axis 0; trailing dims must match.
    pub fn concat0(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.is_empty() || sb.is_empty() || sa[1..] != sb[1..] {
            return Err(CoreError::shape(
                "concat0",
                format!("{sa:?} vs {sb:?} must agree beyond axis 0"),
            ));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let ia = self.input_id(a)?;
        let ib = self.input_id(b)?;
        Ok(self.push(
            Op::Concat0 { a: ia, b: ib, a_len: a.len() },
            shape,
            data,
            a.requires_grad() || b.requires_grad(),
        ))
    }

    /// Slice `[start, start+len)` along axis 0.
    pub fn slice0(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(CoreError::shape(
                "slice0",
                format!("slice {start}..{} of axis-0 size {:?}", start + len, s),
            ));
        }
        let chunk: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let data = a.data()[start * chunk..(start + len) * chunk].to_vec();
        let ia = self.input_id(a)?;
        Ok(self.push(
            Op::Slice0 { a: ia, in_len: a.len(), offset: start * chunk },
            shape,
            data,
            a.requires_grad(),
        ))
    }

    /// Stack `n` copies along a new leading axis: `[s...] -> [n, s...]`.
    pub fn repeat0(&self, a: &Tensor, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(CoreError::shape("repeat0", "n must be >= 1"));
        }
        let chunk = a.len();
        let mut shape = vec![n];
        shape.extend_from_slice(a.shape());
        let mut data = Vec::with_capacity(n * chunk);
        for _ in 0..n {
            data.extend_from_slice(a.data());
        }
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Repeat0 { a: ia, n, chunk }, shape, data, a.requires_grad()))
    }

    /// Broadcast over new trailing axes: `[s...] -> [s..., t...]`.
    pub fn broadcast_trailing(&self, a: &Tensor, trail: &[usize]) -> Result<Tensor> {
        if trail.is_empty() || trail.iter().any(|&d| d == 0) {
            return Err(CoreError::shape("broadcast_trailing", "trailing dims must be nonempty"));
        }
        let t: usize = trail.iter().product();
        let mut shape = a.shape().to_vec();
        shape.extend_from_slice(trail);
        let mut data = Vec::with_capacity(a.len() * t);
        for &v in a.data() {
            data.extend(std::iter::repeat(v).take(t));
        }
        let ia = self.input_id(a)?;
        Ok(self.push(
            Op::BroadcastTrailing { a: ia, lead: a.len(), trail: t },
            shape,
            data,
            a.requires_grad(),
        ))
    }

    pub fn transpose2d(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(CoreError::shape("transpose2d", format!("expected rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let av = a.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = av[r * cols + c];
            }
        }
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Transpose2d { a: ia, rows, cols }, vec![cols, rows], data, a.requires_grad()))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != a.len() {
            return Err(CoreError::shape(
                "reshape",
                format!("{:?} ({} values) cannot view as {:?}", a.shape(), a.len(), shape),
            ));
        }
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Reshape { a: ia }, shape, a.data().to_vec(), a.requires_grad()))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_lastdim(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.is_empty() {
            return Err(CoreError::shape("softmax", "needs at least rank 1"));
        }
        let cols = *s.last().unwrap();
        let av = a.data();
        let mut data = vec![0.0; a.len()];
        for r in 0..a.len() / cols {
            let row = &av[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ia = self.input_id(a)?;
        let out = Arc::new(data.clone());
        Ok(self.push(Op::SoftmaxLast { a: ia, out, cols }, s.to_vec(), data, a.requires_grad()))
    }

    /// Nearest-neighbor 2x upsampling of `[C,H,W]`.
    pub fn upsample2x(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(CoreError::shape("upsample2x", format!("expected [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let av = a.data();
        let mut data = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..oh {
                let irow = &av[ch * h * w + (y / 2) * w..][..w];
                let orow = &mut data[ch * oh * ow + y * ow..][..ow];
                for x in 0..ow {
                    orow[x] = irow[x / 2];
                }
            }
        }
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Upsample2x { a: ia, c, h, w }, vec![c, oh, ow], data, a.requires_grad()))
    }

    /// 2x2 average pooling of `[C,H,W]` with even H and W.
    pub fn avgpool2x2(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(CoreError::shape(
                "avgpool2x2",
                format!("expected [C,2m,2n], got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let av = a.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let r0 = &av[ch * h * w + (2 * y) * w..][..w];
                let r1 = &av[ch * h * w + (2 * y + 1) * w..][..w];
                let orow = &mut data[ch * oh * ow + y * ow..][..ow];
                for x in 0..ow {
                    orow[x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
                }
            }
        }
        let ia = self.input_id(a)?;
        Ok(self.push(Op::AvgPool2x2 { a: ia, c, h, w }, vec![c, oh, ow], data, a.requires_grad()))
    }

    /// Rearrange `[C,H,W]` into non-overlapping p x p patches: `[T, C*p*p]`
    /// with T = (H/p)*(W/p) in row-major grid order.
    pub fn patchify(&self, a: &Tensor, p: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(CoreError::shape(
                "patchify",
                format!("expected [C,H,W] divisible by patch {p}, got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let av = a.data();
        let feat = c * p * p;
        let mut data = vec![0.0; gh * gw * feat];
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            data[t * feat + ch * p * p + py * p + px] =
                                av[ch * h * w + (gy * p + py) * w + (gx * p + px)];
                        }
                    }
                }
            }
        }
        let ia = self.input_id(a)?;
        Ok(self.push(Op::Patchify { a: ia, c, h, w, p }, vec![gh * gw, feat], data, a.requires_grad()))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-topological adjoint accumulation from a scalar root.
    ///
    /// Returns an independent gradient channel; the same root cannot be
    /// differentiated twice on one tape.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        self.backward_stopping(root, &[])
    }

    /// Backward that records adjoints for the `stop` tensors but does not
    /// propagate past them, leaving their ancestor subgraphs untouched.
    pub fn backward_stopping(&self, root: &Tensor, stop: &[&Tensor]) -> Result<Gradients> {
        let root_ref = root.node().ok_or(CoreError::RootNotOnTape)?;
        if root_ref.tape != self.id {
            return Err(CoreError::TapeMismatch);
        }
        if !root.is_scalar() {
            return Err(CoreError::NonScalarRoot { shape: root.shape().to_vec() });
        }
        {
            let mut used = self.used_roots.borrow_mut();
            if !used.insert(root_ref.node) {
                return Err(CoreError::RootAlreadyUsed);
            }
        }
        let mut stop_ids = HashSet::new();
        for t in stop {
            match t.node() {
                Some(r) if r.tape == self.id => {
                    stop_ids.insert(r.node);
                }
                Some(_) => return Err(CoreError::TapeMismatch),
                None => {}
            }
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adj[root_ref.node] = Some(vec![1.0]);
        let mut frozen: Vec<Option<Arc<Vec<f64>>>> = vec![None; nodes.len()];
        for id in (0..=root_ref.node).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !stop_ids.contains(&id) {
                backprop_node(&nodes, id, &g, &mut adj);
            }
            frozen[id] = Some(Arc::new(g));
        }
        Ok(Gradients { tape: self.id, adj: frozen })
    }
}

/// Gradient channel produced by one `backward` call.
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<Arc<Vec<f64>>>>,
}

impl Gradients {
    /// Gradient with respect to a tensor recorded on the originating tape.
    /// Returns `None` for constants and for nodes outside the root's
    /// ancestor graph.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let r = t.node()?;
        if r.tape != self.tape {
            return None;
        }
        let data = self.adj.get(r.node)?.clone()?;
        debug_assert_eq!(data.len(), t.len());
        Some(Tensor::from_parts(t.shape().to_vec(), data))
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Tensor {
        Tensor::from_vec(shape, (*data).clone()).expect("gradient shape")
    }
}

fn clamp_den(y: f64) -> f64 {
    if y >= 0.0 {
        y.max(EPS_NUM)
    } else {
        y.min(-EPS_NUM)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Accumulate `src` into the adjoint slot for `id`.
fn acc(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn node_len(nodes: &[Node], id: NodeId) -> usize {
    nodes[id].shape.iter().product::<usize>().max(1)
}

fn backprop_node(nodes: &[Node], id: NodeId, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add { a, b, pair } => {
            acc(adj, *a, node_len(nodes, *a), |ga| match pair {
                Pair::LeftScalar => ga[0] += g.iter().sum::<f64>(),
                _ => ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
            });
            acc(adj, *b, node_len(nodes, *b), |gb| match pair {
                Pair::RightScalar => gb[0] += g.iter().sum::<f64>(),
                _ => gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
            });
        }
        Op::Sub { a, b, pair } => {
            acc(adj, *a, node_len(nodes, *a), |ga| match pair {
                Pair::LeftScalar => ga[0] += g.iter().sum::<f64>(),
                _ => ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
            });
            acc(adj, *b, node_len(nodes, *b), |gb| match pair {
                Pair::RightScalar => gb[0] -= g.iter().sum::<f64>(),
                _ => gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y),
            });
        }
        Op::Mul { a, b, pair, av, bv } => {
            acc(adj, *a, node_len(nodes, *a), |ga| match pair {
                Pair::Same | Pair::RightScalar => {
                    for (i, x) in ga.iter_mut().enumerate() {
                        let bi = if *pair == Pair::RightScalar { bv[0] } else { bv[i] };
                        *x += g[i] * bi;
                    }
                }
                Pair::LeftScalar => {
                    ga[0] += g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi * bi).sum::<f64>()
                }
            });
            acc(adj, *b, node_len(nodes, *b), |gb| match pair {
                Pair::Same | Pair::LeftScalar => {
                    for (i, x) in gb.iter_mut().enumerate() {
                        let ai = if *pair == Pair::LeftScalar { av[0] } else { av[i] };
                        *x += g[i] * ai;
                    }
                }
                Pair::RightScalar => {
                    gb[0] += g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).sum::<f64>()
                }
            });
        }
        Op::Div { a, b, pair, av, bv } => {
            let den = |i: usize| -> f64 {
                clamp_den(match pair {
                    Pair::RightScalar => bv[0],
                    _ => bv[i],
                })
            };
            let num = |i: usize| -> f64 {
                match pair {
                    Pair::LeftScalar => av[0],
                    _ => av[i],
                }
            };
            let braw = |i: usize| -> f64 {
                match pair {
                    Pair::RightScalar => bv[0],
                    _ => bv[i],
                }
            };
            acc(adj, *a, node_len(nodes, *a), |ga| match pair {
                Pair::LeftScalar => {
                    ga[0] += g.iter().enumerate().map(|(i, &gi)| gi / den(i)).sum::<f64>()
                }
                _ => {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / den(i);
                    }
                }
            });
            acc(adj, *b, node_len(nodes, *b), |gb| {
                let contrib = |i: usize, gi: f64| -> f64 {
                    // Zero derivative once the denominator sits in the clamp.
                    if braw(i).abs() > EPS_NUM {
                        let d = den(i);
                        -gi * num(i) / (d * d)
                    } else {
                        0.0
                    }
                };
                match pair {
                    Pair::RightScalar => {
                        gb[0] += g.iter().enumerate().map(|(i, &gi)| contrib(i, gi)).sum::<f64>()
                    }
                    _ => {
                        for (i, x) in gb.iter_mut().enumerate() {
                            *x += contrib(i, g[i]);
                        }
                    }
                }
            });
        }
        Op::Neg { a } => acc(adj, *a, g.len(), |ga| {
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
        }),
        Op::AddScalar { a } => acc(adj, *a, g.len(), |ga| {
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
        }),
        Op::MulScalar { a, c } => acc(adj, *a, g.len(), |ga| {
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y)
        }),
        Op::Exp { a, out } => acc(adj, *a, g.len(), |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * out[i];
            }
        }),
        Op::LogEps { a, av } => acc(adj, *a, g.len(), |ga| {
            for i in 0..g.len() {
                if av[i] > EPS_NUM {
                    ga[i] += g[i] / av[i];
                }
            }
        }),
        Op::Sigmoid { a, out } => acc(adj, *a, g.len(), |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Relu { a, av } => acc(adj, *a, g.len(), |ga| {
            for i in 0..g.len() {
                if av[i] > 0.0 {
                    ga[i] += g[i];
                }
            }
        }),
        Op::Abs { a, av } => acc(adj, *a, g.len(), |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else if av[i] < 0.0 { -1.0 } else { 0.0 };
            }
        }),
        Op::Powf { a, e, av } => acc(adj, *a, g.len(), |ga| {
            for i in 0..g.len() {
                if av[i] > EPS_NUM {
                    ga[i] += g[i] * e * av[i].powf(e - 1.0);
                }
            }
        }),
        Op::Reduce { a, in_shape, axes, mean } => {
            let mut seen = vec![false; in_shape.len()];
            for &ax in axes {
                seen[ax] = true;
            }
            let map = reduce_index_map(in_shape, &seen);
            let reduced: usize = axes.iter().map(|&ax| in_shape[ax]).product();
            let scale = if *mean { 1.0 / reduced as f64 } else { 1.0 };
            let in_len: usize = in_shape.iter().product::<usize>().max(1);
            acc(adj, *a, in_len, |ga| {
                for (flat, x) in ga.iter_mut().enumerate() {
                    *x += g[map.out_index(flat)] * scale;
                }
            });
        }
        Op::Linear { x, w, b, xv, wv, rows, in_dim, out_dim } => {
            acc(adj, *x, rows * in_dim, |gx| {
                for r in 0..*rows {
                    let grow = &g[r * out_dim..(r + 1) * out_dim];
                    let gxrow = &mut gx[r * in_dim..(r + 1) * in_dim];
                    for (j, &gj) in grow.iter().enumerate() {
                        if gj != 0.0 {
                            let wrow = &wv[j * in_dim..(j + 1) * in_dim];
                            for i in 0..*in_dim {
                                gxrow[i] += gj * wrow[i];
                            }
                        }
                    }
                }
            });
            acc(adj, *w, out_dim * in_dim, |gw| {
                for r in 0..*rows {
                    let grow = &g[r * out_dim..(r + 1) * out_dim];
                    let xrow = &xv[r * in_dim..(r + 1) * in_dim];
                    for (j, &gj) in grow.iter().enumerate() {
                        if gj != 0.0 {
                            let gwrow = &mut gw[j * in_dim..(j + 1) * in_dim];
                            for i in 0..*in_dim {
                                gwrow[i] += gj * xrow[i];
                            }
                        }
                    }
                }
            });
            if let Some(bid) = b {
                acc(adj, *bid, *out_dim, |gb| {
                    for r in 0..*rows {
                        for j in 0..*out_dim {
                            gb[j] += g[r * out_dim + j];
                        }
                    }
                });
            }
        }
        Op::Conv2d { x, k, b, xv, kv, cin, cout, h, w, ks } => {
            acc(adj, *x, cin * h * w, |gx| {
                conv2d_back_input(g, kv, gx, *cin, *cout, *h, *w, *ks);
            });
            acc(adj, *k, cout * cin * ks * ks, |gk| {
                conv2d_back_kernel(g, xv, gk, *cin, *cout, *h, *w, *ks);
            });
            if let Some(bid) = b {
                acc(adj, *bid, *cout, |gb| {
                    let plane = h * w;
                    for co in 0..*cout {
                        gb[co] += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
        }
        Op::Dft2 { a, inverse, channels, h, w } => {
            // The adjoint of the real-linear packed transform is the
            // opposite-sign kernel with the matching scale.
            let gcopy = if *inverse {
                let mut gi = dft2_packed_raw(g, *channels, *h, *w, -1.0);
                let s = 1.0 / (*h * *w) as f64;
                gi.iter_mut().for_each(|v| *v *= s);
                gi
            } else {
                dft2_packed_raw(g, *channels, *h, *w, 1.0)
            };
            acc(adj, *a, gcopy.len(), |ga| {
                ga.iter_mut().zip(&gcopy).for_each(|(x, &y)| *x += y)
            });
        }
        Op::Concat0 { a, b, a_len } => {
            acc(adj, *a, *a_len, |ga| {
                ga.iter_mut().zip(&g[..*a_len]).for_each(|(x, &y)| *x += y)
            });
            acc(adj, *b, g.len() - *a_len, |gb| {
                gb.iter_mut().zip(&g[*a_len..]).for_each(|(x, &y)| *x += y)
            });
        }
        Op::Slice0 { a, in_len, offset } => acc(adj, *a, *in_len, |ga| {
            ga[*offset..*offset + g.len()]
                .iter_mut()
                .zip(g)
                .for_each(|(x, &y)| *x += y)
        }),
        Op::Repeat0 { a, n, chunk } => acc(adj, *a, *chunk, |ga| {
            for r in 0..*n {
                let part = &g[r * chunk..(r + 1) * chunk];
                ga.iter_mut().zip(part).for_each(|(x, &y)| *x += y);
            }
        }),
        Op::BroadcastTrailing { a, lead, trail } => acc(adj, *a, *lead, |ga| {
            for (i, x) in ga.iter_mut().enumerate() {
                *x += g[i * trail..(i + 1) * trail].iter().sum::<f64>();
            }
        }),
        Op::Transpose2d { a, rows, cols } => acc(adj, *a, rows * cols, |ga| {
            // Output is [cols, rows]; route g back.
            for c in 0..*cols {
                for r in 0..*rows {
                    ga[r * cols + c] += g[c * rows + r];
                }
            }
        }),
        Op::Reshape { a } => acc(adj, *a, g.len(), |ga| {
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
        }),
        Op::SoftmaxLast { a, out, cols } => acc(adj, *a, g.len(), |ga| {
            for r in 0..g.len() / cols {
                let y = &out[r * cols..(r + 1) * cols];
                let grow = &g[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                let garow = &mut ga[r * cols..(r + 1) * cols];
                for i in 0..*cols {
                    garow[i] += y[i] * (grow[i] - dot);
                }
            }
        }),
        Op::Upsample2x { a, c, h, w } => acc(adj, *a, c * h * w, |ga| {
            let (oh, ow) = (2 * h, 2 * w);
            for ch in 0..*c {
                for y in 0..oh {
                    let grow = &g[ch * oh * ow + y * ow..][..ow];
                    let garow = &mut ga[ch * h * w + (y / 2) * w..][..*w];
                    for x in 0..ow {
                        garow[x / 2] += grow[x];
                    }
                }
            }
        }),
        Op::AvgPool2x2 { a, c, h, w } => acc(adj, *a, c * h * w, |ga| {
            let (oh, ow) = (h / 2, w / 2);
            for ch in 0..*c {
                for y in 0..oh {
                    let grow = &g[ch * oh * ow + y * ow..][..ow];
                    for x in 0..ow {
                        let q = 0.25 * grow[x];
                        let base = ch * h * w + (2 * y) * w + 2 * x;
                        ga[base] += q;
                        ga[base + 1] += q;
                        ga[base + w] += q;
                        ga[base + w + 1] += q;
                    }
                }
            }
        }),
        Op::Patchify { a, c, h, w, p } => acc(adj, *a, c * h * w, |ga| {
            let (gh, gw) = (h / p, w / p);
            let feat = c * p * p;
            for gy in 0..gh {
                for gx in 0..gw {
                    let t = gy * gw + gx;
                    for ch in 0..*c {
                        for py in 0..*p {
                            for px in 0..*p {
                                ga[ch * h * w + (gy * p + py) * w + (gx * p + px)] +=
                                    g[t * feat + ch * p * p + py * p + px];
                            }
                        }
                    }
                }
            }
        }),
    }
}

// ---- index mapping for reductions ---------------------------------------

struct ReduceMap {
    in_strides: Vec<usize>,
    out_strides: Vec<usize>,
    dims: Vec<usize>,
}

impl ReduceMap {
    fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for i in 0..self.dims.len() {
            let idx = flat / self.in_strides[i];
            flat %= self.in_strides[i];
            out += idx * self.out_strides[i];
        }
        out
    }
}

fn reduce_index_map(shape: &[usize], reduced: &[bool]) -> ReduceMap {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Strides in the output for each kept input dim; reduced dims get 0.
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1usize;
    for i in (0..rank).rev() {
        if !reduced[i] {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    ReduceMap { in_strides, out_strides, dims: shape.to_vec() }
}

// ---- conv kernels ---------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ks: usize,
) -> Vec<f64> {
    let pad = (ks - 1) / 2;
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    if let Some(b) = bias {
        for co in 0..cout {
            out[co * plane..(co + 1) * plane].fill(b[co]);
        }
    }
    for co in 0..cout {
        for ci in 0..cin {
            let kbase = (co * cin + ci) * ks * ks;
            for dy in 0..ks {
                let (y0, y1) = shift_range(h, dy as isize - pad as isize);
                for y in y0..y1 {
                    let iy = (y as isize + dy as isize - pad as isize) as usize;
                    let irow = &x[ci * plane + iy * w..][..w];
                    let orow_at = co * plane + y * w;
                    for dx in 0..ks {
                        let kv = k[kbase + dy * ks + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let shift = dx as isize - pad as isize;
                        let (x0, x1) = shift_range(w, shift);
                        let orow = &mut out[orow_at + x0..orow_at + x1];
                        let ioff = (x0 as isize + shift) as usize;
                        let islice = &irow[ioff..ioff + (x1 - x0)];
                        for (o, &iv) in orow.iter_mut().zip(islice) {
                            *o += kv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_back_input(
    g: &[f64],
    k: &[f64],
    gx: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ks: usize,
) {
    let pad = (ks - 1) / 2;
    let plane = h * w;
    for co in 0..cout {
        for ci in 0..cin {
            let kbase = (co * cin + ci) * ks * ks;
            for dy in 0..ks {
                let (y0, y1) = shift_range(h, dy as isize - pad as isize);
                for y in y0..y1 {
                    let iy = (y as isize + dy as isize - pad as isize) as usize;
                    let grow_at = co * plane + y * w;
                    let gxrow_at = ci * plane + iy * w;
                    for dx in 0..ks {
                        let kv = k[kbase + dy * ks + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let shift = dx as isize - pad as isize;
                        let (x0, x1) = shift_range(w, shift);
                        let ioff = (x0 as isize + shift) as usize;
                        let grow = &g[grow_at + x0..grow_at + x1];
                        let gxrow = &mut gx[gxrow_at + ioff..gxrow_at + ioff + (x1 - x0)];
                        for (gout, gin) in grow.iter().zip(gxrow.iter_mut()) {
                            *gin += kv * gout;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_back_kernel(
    g: &[f64],
    x: &[f64],
    gk: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ks: usize,
) {
    let pad = (ks - 1) / 2;
    let plane = h * w;
    for co in 0..cout {
        for ci in 0..cin {
            let kbase = (co * cin + ci) * ks * ks;
            for dy in 0..ks {
                let (y0, y1) = shift_range(h, dy as isize - pad as isize);
                for dx in 0..ks {
                    let shift = dx as isize - pad as isize;
                    let (x0, x1) = shift_range(w, shift);
                    if x1 <= x0 {
                        continue;
                    }
                    let ioff = (x0 as isize + shift) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy as isize - pad as isize) as usize;
                        let grow = &g[co * plane + y * w + x0..co * plane + y * w + x1];
                        let irow = &x[ci * plane + iy * w + ioff..][..x1 - x0];
                        acc += dot_unrolled(grow, irow);
                    }
                    gk[kbase + dy * ks + dx] += acc;
                }
            }
        }
    }
}

/// Four-way unrolled dot product with a fixed summation order.
#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s2) + (s1 + s3) + tail
}

/// Output index range `[lo, hi)` such that `idx + shift` stays in `[0, n)`.
fn shift_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi_signed = n as isize - shift.max(0);
    let hi = hi_signed.max(0) as usize;
    (lo.min(n), hi.min(n))
}

// ---- packed DFT -----------------------------------------------------------

fn dft2_packed_raw(packed: &[f64], channels: usize, h: usize, w: usize, sign: f64) -> Vec<f64> {
    let plane = h * w;
    let mut out = packed.to_vec();
    for c in 0..channels {
        let (re_half, im_half) = out.split_at_mut(channels * plane);
        let re = &mut re_half[c * plane..(c + 1) * plane];
        let im = &mut im_half[c * plane..(c + 1) * plane];
        dft2_pair(re, im, h, w, sign);
    }
    out
}

fn dft2_packed_apply(packed: &[f64], channels: usize, h: usize, w: usize, inverse: bool) -> Vec<f64> {
    if inverse {
        let mut out = dft2_packed_raw(packed, channels, h, w, 1.0);
        let s = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|v| *v *= s);
        out
    } else {
        dft2_packed_raw(packed, channels, h, w, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = tape.sum_all(&x).unwrap();
        assert_eq!(s.scalar_value().unwrap(), 21.0);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(&x, &x).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_same_root_errors() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0), true);
        let y = tape.mul(&x, &x).unwrap();
        let s = tape.sum_all(&y).unwrap();
        assert!(tape.backward(&s).is_ok());
        assert!(matches!(tape.backward(&s), Err(CoreError::RootAlreadyUsed)));
    }

    #[test]
    fn independent_channels_per_root() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3.0, 5.0]), true);
        let y = tape.mul(&x, &x).unwrap();
        let s1 = tape.sum_all(&y).unwrap();
        let z = tape.mul_scalar(&y, 2.0).unwrap();
        let s2 = tape.sum_all(&z).unwrap();
        let g1 = tape.backward(&s1).unwrap();
        let g2 = tape.backward(&s2).unwrap();
        assert_eq!(g1.wrt(&x).unwrap().data(), &[6.0, 10.0]);
        assert_eq!(g2.wrt(&x).unwrap().data(), &[12.0, 20.0]);
    }

    #[test]
    fn non_scalar_root_errors() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(CoreError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let c = t(&[2], &[10.0, 20.0]);
        let y = tape.mul(&x, &c).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert!(g.wrt(&c).is_none());
        assert_eq!(g.wrt(&x).unwrap().data(), &[10.0, 20.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::new();
        let x = t(&[1, 4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>());
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = tape.conv2d(&x, &k, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_ones_hand_values() {
        let tape = Tape::new();
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let k = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = tape.conv2d(&x, &k, None).unwrap();
        // Zero padding: center sees all 9, corners see 4, edges see 6.
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let tape = Tape::new();
        let x = t(&[2, 3, 3], &[0.7; 18]);
        let k = Tensor::zeros(vec![3, 2, 3, 3]);
        let y = tape.conv2d(&x, &k, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let tape = Tape::new();
        let x = t(&[2, 3, 3], &[0.0; 18]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(tape.conv2d(&x, &k, None).is_err());
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::new();
        // Identity weight, zero bias -> unchanged.
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = tape.linear(&x, &eye, None).unwrap();
        assert_eq!(y.data(), x.data());
        // Weight [[1],[0]] applied to scalar 4 -> (4, 0).
        let x1 = t(&[1, 1], &[4.0]);
        let w = t(&[2, 1], &[1.0, 0.0]);
        let y1 = tape.linear(&x1, &w, None).unwrap();
        assert_eq!(y1.data(), &[4.0, 0.0]);
        // Zero weight -> zero output.
        let z = tape.linear(&x, &Tensor::zeros(vec![3, 2]), None).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fft_dc_and_roundtrip() {
        let tape = Tape::new();
        let x = Tensor::full(vec![1, 4, 4], 1.5);
        let z = tape.fft2(&x).unwrap();
        assert!((z.re.data()[0] - 1.5 * 16.0).abs() < 1e-12);
        assert!(z.re.data()[1..].iter().all(|v| v.abs() < 1e-9));
        assert!(z.im.data().iter().all(|v| v.abs() < 1e-9));

        let back = tape.ifft2(&z).unwrap();
        assert!(back.re.max_abs_diff(&x) < 1e-9);
        assert!(back.im.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn fft_linearity() {
        let tape = Tape::new();
        let a = t(&[1, 3, 5], &(0..15).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let b = t(&[1, 3, 5], &(0..15).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>());
        let sum = tape.add(&a, &b).unwrap();
        let z_sum = tape.fft2(&sum).unwrap();
        let za = tape.fft2(&a).unwrap();
        let zb = tape.fft2(&b).unwrap();
        let re_sum = tape.add(&za.re, &zb.re).unwrap();
        let im_sum = tape.add(&za.im, &zb.im).unwrap();
        assert!(z_sum.re.max_abs_diff(&re_sum) < 1e-12);
        assert!(z_sum.im.max_abs_diff(&im_sum) < 1e-12);
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let x = Tensor::full(vec![3, 2, 2], 2.5);
        let gap = tape.gap(&x).unwrap();
        assert_eq!(gap.shape(), &[3]);
        assert!(gap.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let ones = Tensor::full(vec![2, 2], 1.0);
        assert_eq!(tape.sum_all(&ones).unwrap().scalar_value().unwrap(), 4.0);

        assert!(tape.sum_axes(&ones, &[]).is_err());
        assert!(tape.sum_axes(&ones, &[2]).is_err());
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = t(&[3], &[0.0, -3.0, 3.0]);
        let s = tape.sigmoid(&x).unwrap();
        assert_eq!(s.data()[0], 0.5);
        let r = tape.relu(&x).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 3.0]);
        let p = tape.powf(&t(&[1], &[0.5]), 2.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scalar_broadcast_binary() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let c = tape.leaf(&Tensor::scalar(2.0), true);
        let y = tape.mul(&x, &c).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&c).unwrap().scalar_value().unwrap(), 10.0);
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn movement_ops_roundtrip() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tr = tape.transpose2d(&a).unwrap();
        assert_eq!(tr.shape(), &[3, 2]);
        assert_eq!(tr.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.transpose2d(&tr).unwrap();
        assert_eq!(back.data(), a.data());

        let c = tape.concat0(&a, &a).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
        let s = tape.slice0(&c, 2, 2).unwrap();
        assert_eq!(s.data(), a.data());

        let r = tape.repeat0(&a, 2).unwrap();
        assert_eq!(r.shape(), &[2, 2, 3]);

        let b = tape.broadcast_trailing(&t(&[2], &[1.0, 2.0]), &[2, 2]).unwrap();
        assert_eq!(b.shape(), &[2, 2, 2]);
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn pooling_and_upsampling() {
        let tape = Tape::new();
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.avgpool2x2(&x).unwrap();
        assert_eq!(p.data(), &[2.5]);
        let u = tape.upsample2x(&x).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.data()[0], 1.0);
        assert_eq!(u.data()[3], 2.0);
        assert_eq!(u.data()[15], 4.0);
    }

    #[test]
    fn patchify_layout() {
        let tape = Tape::new();
        // 1 channel 4x4, patch 2 -> 4 tokens of 4 features.
        let x = t(&[1, 4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>());
        let p = tape.patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let y = tape.softmax_lastdim(&x).unwrap();
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_tape_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(&Tensor::scalar(1.0), true);
        assert!(matches!(t2.mul(&x, &x), Err(CoreError::TapeMismatch)));
    }
}
