use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{DiffArray, Real};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

const RMS_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    RmsNorm {
        a: Var,
        gain: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        count: usize,
    },
    MsePairs {
        a: Var,
        target: Vec<F>,
    },
    Sum(Var),
    Rope {
        a: Var,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    TileRows {
        a: Var,
        times: usize,
    },
    FrameMean {
        a: Var,
        frames: usize,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::RmsNorm { a, gain } => vec![*a, *gain],
            Op::Scale { a, .. }
            | Op::Rope { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::TileRows { a, .. }
            | Op::FrameMean { a, .. }
            | Op::MsePairs { a, .. } => vec![*a],
            Op::Gelu(a) | Op::Softmax(a) | Op::CausalSoftmax(a) | Op::Sum(a) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: DiffArray<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every input precedes its consumer.
/// While gradient recording is disabled (see [`Tape::set_grad_enabled`]), new
/// nodes are constants regardless of their inputs.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing ever requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    /// Toggles gradient recording for subsequently created nodes and returns
    /// the previous setting.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DiffArray<F> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    /// True when every recorded input id precedes its consumer.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }

    fn push(&mut self, value: DiffArray<F>, op: Op<F>) -> Var {
        let requires_grad =
            self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (when recording is enabled).
    pub fn param(&mut self, value: DiffArray<F>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DiffArray<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with the right operand transposed: `a[m,k] * b[n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        if transpose_b {
            gemm_nt(m, k, n, ad, bd, &mut out);
        } else {
            gemm_nn(m, k, n, ad, bd, &mut out);
        }
        let value = DiffArray::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                transpose_b,
            },
        ))
    }

    fn broadcast_rule(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if lb == 1 && sb.len() <= 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == lb && la % lb == 0 {
            Ok(Broadcast::Row)
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Elementwise `a (+|-|*) b`; `b` may broadcast as a scalar or a row vector.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_rule(a, b, "elementwise")?;
        let av = self.value(a);
        let bd = self.data(b);
        let cols = bd.len();
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<F> = match bcast {
            Broadcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Row => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % cols]))
                .collect(),
        };
        let value = DiffArray::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * factor).collect();
        let value = DiffArray::new(av.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { a, factor })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| gelu(x)).collect();
        let value = DiffArray::new(av.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu(a))
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        if cols == 0 || av.shape().is_empty() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = DiffArray::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; the remaining entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "causal_softmax")?;
        if r != c {
            return Err(Error::Dimension {
                op: "causal_softmax",
                lhs: vec![r, c],
                rhs: vec![],
            });
        }
        let mut out = vec![F::zero(); r * c];
        let ad = self.data(a);
        for i in 0..r {
            let row = &mut out[i * c..i * c + i + 1];
            row.copy_from_slice(&ad[i * c..i * c + i + 1]);
            softmax_in_place(row);
        }
        let value = DiffArray::new(vec![r, c], out)?;
        Ok(self.push(value, Op::CausalSoftmax(a)))
    }

    /// `x / sqrt(mean(x^2) + 1e-5) * gain` over the last dimension.
    pub fn rmsnorm(&mut self, a: Var, gain: Var) -> Result<Var> {
        let av = self.value(a);
        let gv = self.value(gain);
        let cols = av.cols();
        if gv.shape().len() != 1 || gv.len() != cols {
            return Err(Error::Dimension {
                op: "rmsnorm",
                lhs: av.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let g = gv.data();
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks(cols) {
            let inv = inv_rms(row);
            out.extend(row.iter().zip(g).map(|(&x, &gj)| x * inv * gj));
        }
        let value = DiffArray::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { a, gain }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over the rows where `active` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || active.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len(), active.len()],
            });
        }
        let ld = self.data(logits);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    len: vocab,
                });
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            total += (log_sum_exp(row) - row[t]).as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("cross_entropy over zero active positions"));
        }
        let value = DiffArray::scalar(F::lit(total / count as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                count,
            },
        ))
    }

    /// Mean over all elements of `(a - target)^2`; `target` is a constant.
    pub fn mse_pairs(&mut self, a: Var, target: &[F]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != target.len() {
            return Err(Error::Dimension {
                op: "mse_pairs",
                lhs: av.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        if av.is_empty() {
            return Err(Error::contract("mse_pairs over zero elements"));
        }
        let sum: F = av
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = DiffArray::scalar(sum / F::lit(av.len() as f64));
        Ok(self.push(
            value,
            Op::MsePairs {
                a,
                target: target.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.data(a).iter().copied().sum();
        self.push(DiffArray::scalar(s), Op::Sum(a))
    }

    /// Rotary position embedding of a `[rows, dim]` block: consecutive pairs
    /// `(2i, 2i+1)` of row `r` are rotated by `positions[r] * base^(-2i/dim)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (rows, dim) = self.dims2(a, "rope")?;
        if dim % 2 != 0 || positions.len() != rows {
            return Err(Error::Dimension {
                op: "rope",
                lhs: vec![rows, dim],
                rhs: vec![positions.len()],
            });
        }
        let half = dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / dim as f64);
                let angle = p as f64 * freq;
                cos.push(F::lit(angle.cos()));
                sin.push(F::lit(angle.sin()));
            }
        }
        let ad = self.data(a);
        let mut out = vec![F::zero(); rows * dim];
        for r in 0..rows {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let x0 = ad[r * dim + 2 * i];
                let x1 = ad[r * dim + 2 * i + 1];
                out[r * dim + 2 * i] = x0 * c - x1 * s;
                out[r * dim + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
        let value = DiffArray::new(vec![rows, dim], out)?;
        Ok(self.push(value, Op::Rope { a, cos, sin }))
    }

    /// Columns `start..start+len` of a 2-D array.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::Index {
                what: "columns",
                index: start + len,
                len: cols,
            });
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ad[r * cols + start..r * cols + start + len]);
        }
        let value = DiffArray::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { a, start }))
    }

    /// Side-by-side concatenation of 2-D arrays with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let value = DiffArray::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks 2-D arrays with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let value = DiffArray::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows of a 2-D array picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(a, "gather_rows")?;
        let ad = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(&ad[r * cols..(r + 1) * cols]);
        }
        let value = DiffArray::new(vec![rows.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Repeats a whole 2-D array `times` times along the row axis.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "tile_rows")?;
        let ad = self.data(a);
        let mut out = Vec::with_capacity(times * ad.len());
        for _ in 0..times {
            out.extend_from_slice(ad);
        }
        let value = DiffArray::new(vec![r * times, c], out)?;
        Ok(self.push(value, Op::TileRows { a, times }))
    }

    /// Mean over `frames` consecutive blocks of a `[frames * slots, dim]`
    /// array, giving `[slots, dim]`. Each output element sums its inputs in
    /// ascending value order, so the result does not depend on frame order.
    pub fn frame_mean(&mut self, a: Var, frames: usize) -> Result<Var> {
        let (rows, dim) = self.dims2(a, "frame_mean")?;
        if frames == 0 || rows % frames != 0 {
            return Err(Error::Dimension {
                op: "frame_mean",
                lhs: vec![rows, dim],
                rhs: vec![frames],
            });
        }
        let slots = rows / frames;
        let ad = self.data(a);
        let inv = F::lit(1.0 / frames as f64);
        let mut out = vec![F::zero(); slots * dim];
        let mut column = Vec::with_capacity(frames);
        for j in 0..slots {
            for d in 0..dim {
                column.clear();
                column.extend((0..frames).map(|i| ad[(i * slots + j) * dim + d]));
                column.sort_by(|x, y| x.as_f64().total_cmp(&y.as_f64()));
                let s: F = column.iter().copied().sum();
                out[j * dim + d] = s * inv;
            }
        }
        let value = DiffArray::new(vec![slots, dim], out)?;
        Ok(self.push(value, Op::FrameMean { a, frames }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every node that
    /// requires one are stored and readable through [`Tape::grad`]; previous
    /// gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = len_of(v);
                grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if needs(a) {
                    let ga = acc!(a);
                    if transpose_b {
                        // b is [n,k]
                        gemm_nn(m, n, k, g, bd, ga);
                    } else {
                        gemm_nt(m, n, k, g, bd, ga);
                    }
                }
                if needs(b) {
                    let gb = acc!(b);
                    if transpose_b {
                        // d(b)[n,k] = g^T[n,m] a[m,k]
                        gemm_tn(m, n, k, g, ad, gb);
                    } else {
                        gemm_tn(m, k, n, ad, g, gb);
                    }
                }
            }
            &Op::Binary { kind, a, b, bcast } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let cols = bd.len();
                let bidx = |idx: usize| match bcast {
                    Broadcast::Same => idx,
                    Broadcast::Scalar => 0,
                    Broadcast::Row => idx % cols,
                };
                if needs(a) {
                    let ga = acc!(a);
                    for (idx, gv) in ga.iter_mut().enumerate() {
                        *gv += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[idx],
                            BinaryKind::Mul => g[idx] * bd[bidx(idx)],
                        };
                    }
                }
                if needs(b) {
                    let gb = acc!(b);
                    for idx in 0..g.len() {
                        gb[bidx(idx)] += match kind {
                            BinaryKind::Add => g[idx],
                            BinaryKind::Sub => -g[idx],
                            BinaryKind::Mul => g[idx] * ad[idx],
                        };
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if needs(a) {
                    for (gv, &x) in acc!(a).iter_mut().zip(g) {
                        *gv += x * factor;
                    }
                }
            }
            &Op::Gelu(a) => {
                if needs(a) {
                    let ad = self.data(a);
                    for ((gv, &x), &up) in acc!(a).iter_mut().zip(ad).zip(g) {
                        *gv += up * gelu_grad(x);
                    }
                }
            }
            &Op::Softmax(a) => {
                if needs(a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let ga = acc!(a);
                    for r in 0..y.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        softmax_backward(&y[span.clone()], &g[span.clone()], &mut ga[span]);
                    }
                }
            }
            &Op::CausalSoftmax(a) => {
                if needs(a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let ga = acc!(a);
                    for r in 0..c {
                        let span = r * c..r * c + r + 1;
                        softmax_backward(&y[span.clone()], &g[span.clone()], &mut ga[span]);
                    }
                }
            }
            &Op::RmsNorm { a, gain } => {
                let ad = self.data(a);
                let gd = self.data(gain);
                let cols = gd.len();
                let rows = ad.len() / cols;
                if needs(a) {
                    let ga = acc!(a);
                    for r in 0..rows {
                        let x = &ad[r * cols..(r + 1) * cols];
                        let up = &g[r * cols..(r + 1) * cols];
                        let inv = inv_rms(x);
                        // s = sum_j up_j * gain_j * x_j
                        let s: F = (0..cols).map(|j| up[j] * gd[j] * x[j]).sum();
                        let coef = s * inv * inv * inv / F::lit(cols as f64);
                        for j in 0..cols {
                            ga[r * cols + j] += up[j] * gd[j] * inv - x[j] * coef;
                        }
                    }
                }
                if needs(gain) {
                    let gg = acc!(gain);
                    for r in 0..rows {
                        let x = &ad[r * cols..(r + 1) * cols];
                        let inv = inv_rms(x);
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * x[j] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                count,
            } => {
                let logits = *logits;
                if needs(logits) {
                    let ld = self.data(logits);
                    let vocab = self.value(logits).cols();
                    let scale = g[0] / F::lit(*count as f64);
                    let gl = acc!(logits);
                    for r in 0..targets.len() {
                        if !active[r] {
                            continue;
                        }
                        let row = &ld[r * vocab..(r + 1) * vocab];
                        let lse = log_sum_exp(row);
                        for j in 0..vocab {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == targets[r] { F::one() } else { F::zero() };
                            gl[r * vocab + j] += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::MsePairs { a, target } => {
                let a = *a;
                if needs(a) {
                    let ad = self.data(a);
                    let scale = g[0] * F::lit(2.0 / ad.len() as f64);
                    for ((gv, &x), &y) in acc!(a).iter_mut().zip(ad).zip(target) {
                        *gv += scale * (x - y);
                    }
                }
            }
            &Op::Sum(a) => {
                if needs(a) {
                    for gv in acc!(a).iter_mut() {
                        *gv += g[0];
                    }
                }
            }
            Op::Rope { a, cos, sin } => {
                let a = *a;
                if needs(a) {
                    let dim = node.value.cols();
                    let half = dim / 2;
                    let rows = node.value.rows();
                    let ga = acc!(a);
                    for r in 0..rows {
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let g0 = g[r * dim + 2 * i];
                            let g1 = g[r * dim + 2 * i + 1];
                            ga[r * dim + 2 * i] += g0 * c + g1 * s;
                            ga[r * dim + 2 * i + 1] += g1 * c - g0 * s;
                        }
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                if needs(a) {
                    let cols = self.value(a).cols();
                    let len = node.value.cols();
                    let ga = acc!(a);
                    for (r, up) in g.chunks(len).enumerate() {
                        for (gv, &x) in ga[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(up)
                        {
                            *gv += x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let gp = acc!(p);
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            for (gv, &x) in row.iter_mut().zip(&g[r * total + offset..]) {
                                *gv += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        for (gv, &x) in acc!(p).iter_mut().zip(&g[offset..offset + n]) {
                            *gv += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { a, rows } => {
                let a = *a;
                if needs(a) {
                    let cols = node.value.cols();
                    let ga = acc!(a);
                    for (k, &r) in rows.iter().enumerate() {
                        for (gv, &x) in ga[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                        {
                            *gv += x;
                        }
                    }
                }
            }
            &Op::TileRows { a, times } => {
                if needs(a) {
                    let n = len_of(a);
                    let ga = acc!(a);
                    for t in 0..times {
                        for (gv, &x) in ga.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *gv += x;
                        }
                    }
                }
            }
            &Op::FrameMean { a, frames } => {
                if needs(a) {
                    let n = node.value.len();
                    let inv = F::lit(1.0 / frames as f64);
                    let ga = acc!(a);
                    for t in 0..frames {
                        for (gv, &x) in ga[t * n..(t + 1) * n].iter_mut().zip(g) {
                            *gv += x * inv;
                        }
                    }
                }
            }
        }
    }
}

fn inv_rms<F: Real>(row: &[F]) -> F {
    let ms = dot(row, row) / F::lit(row.len() as f64);
    F::one() / (ms + F::lit(RMS_EPS)).sqrt()
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn softmax_backward<F: Real>(y: &[F], g: &[F], out: &mut [F]) {
    let s = dot(y, g);
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o += yv * (gv - s);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let inner = c * (x + F::lit(0.044715) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let inner = c * (x + F::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0 * 0.044715) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * dinner
}
