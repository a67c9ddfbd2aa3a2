//! Minimal reverse-mode tape over matrices.
//!
//! Each op records its inputs and whatever it needs for the backward pass.
//! Scalar-valued loss heads enter through [`Tape::fused_scalar`], which
//! takes a precomputed value and the local gradient with respect to each
//! parent.

use super::softmax_rows;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    GatherCols {
        table: NodeId,
        index: Vec<usize>,
    },
    ColSlice {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Rotate {
        src: NodeId,
        cos: Tensor,
        sin: Tensor,
    },
    Softmax(NodeId),
    LayerNorm {
        src: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Fused {
        parents: Vec<NodeId>,
        local: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Row `i` of the result is column `index[i]` of `table`.
    pub fn gather_cols(&mut self, table: NodeId, index: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * rows);
        for (pos, &c) in index.iter().enumerate() {
            if c >= cols {
                return Err(Error::Data(format!(
                    "index {c} at position {pos} outside [0, {cols})"
                )));
            }
            data.extend((0..rows).map(|r| t.get(r, c)));
        }
        let v = Tensor::new(vec![index.len(), rows], data)?;
        Ok(self.push(
            v,
            Op::GatherCols {
                table,
                index: index.to_vec(),
            },
        ))
    }

    pub fn col_slice(&mut self, src: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let v = self.value(src).col_slice(start, width)?;
        Ok(self.push(v, Op::ColSlice { src, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Rotates consecutive column pairs of every row: pair `j` of row `i`
    /// becomes `[c x1 + s x2, -s x1 + c x2]` with `c = cos[i][j]`, `s = sin[i][j]`.
    pub fn rotate_pairs(&mut self, src: NodeId, cos: Tensor, sin: Tensor) -> Result<NodeId> {
        let x = self.value(src);
        if cos.shape() != sin.shape()
            || cos.rows() != x.rows()
            || 2 * cos.cols() != x.cols()
        {
            return Err(Error::Dimension(format!(
                "rotation angles {:?} do not fit {:?}",
                cos.shape(),
                x.shape()
            )));
        }
        let v = rotate_rows(x, &cos, &sin, false);
        Ok(self.push(v, Op::Rotate { src, cos, sin }))
    }

    pub fn softmax_rows(&mut self, src: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let v = softmax_rows(self.value(src), mask.as_deref())?;
        Ok(self.push(v, Op::Softmax(src)))
    }

    /// Per-row layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, src: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(src);
        let (m, n) = (x.rows(), x.cols());
        let g = self.value(gain);
        let b = self.value(bias);
        if g.shape() != [1, n] || b.shape() != [1, n] {
            return Err(Error::Dimension(format!(
                "layer_norm gain {:?} / bias {:?} do not fit width {n}",
                g.shape(),
                b.shape()
            )));
        }
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..n {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..n {
                o[j] = g.data()[j] * xh[j] + b.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                src,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, src: NodeId) -> NodeId {
        let v = self.value(src).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(v, Op::Gelu(src))
    }

    /// Records a `1 x 1` node whose value and local gradients were computed
    /// outside the tape. `local[i]` must have the shape of `parents[i]`.
    pub fn fused_scalar(
        &mut self,
        value: f64,
        parents: Vec<NodeId>,
        local: Vec<Tensor>,
    ) -> Result<NodeId> {
        if parents.len() != local.len() {
            return Err(Error::Dimension("fused op parent/gradient count differ".into()));
        }
        for (p, g) in parents.iter().zip(&local) {
            if self.value(*p).shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "fused op gradient {:?} does not match parent {:?}",
                    g.shape(),
                    self.value(*p).shape()
                )));
            }
        }
        Ok(self.push(
            Tensor::row_vector(vec![value]),
            Op::Fused { parents, local },
        ))
    }

    /// Gradients of the scalar node `out` with respect to each node in `wrt`.
    /// Nodes that do not influence `out` get a zero gradient.
    pub fn gradients(&self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if self.value(out).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|id| {
                grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()))
            })
            .collect())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b))?;
                let db = self.value(*a).matmul_tn(g)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let da = g.matmul(self.value(*b))?;
                let db = g.matmul_tn(self.value(*a))?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for r in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *row, Tensor::row_vector(dr))?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::GatherCols { table, index } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.shape());
                let cols = t.cols();
                for (pos, &c) in index.iter().enumerate() {
                    for (r, v) in g.row(pos).iter().enumerate() {
                        dt.data_mut()[r * cols + c] += v;
                    }
                }
                accumulate(grads, *table, dt)?;
            }
            Op::ColSlice { src, start } => {
                let s = self.value(*src);
                let mut ds = Tensor::zeros(s.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    ds.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, ds)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    accumulate(grads, *p, g.col_slice(start, w)?)?;
                    start += w;
                }
            }
            Op::Rotate { src, cos, sin } => {
                accumulate(grads, *src, rotate_rows(g, cos, sin, true))?;
            }
            Op::Softmax(src) => {
                let p = &self.nodes[i].value;
                let mut dx = Tensor::zeros(p.shape());
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (pv, gv)) in dx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                        *d = pv * (gv - inner);
                    }
                }
                accumulate(grads, *src, dx)?;
            }
            Op::LayerNorm {
                src,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (m, n) = (xhat.rows(), xhat.cols());
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut dxh = vec![0.0; n];
                    for j in 0..n {
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                        dxh[j] = gr[j] * gv.data()[j];
                    }
                    let mean_d = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let out = dx.row_mut(r);
                    for j in 0..n {
                        out[j] = inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                accumulate(grads, *src, dx)?;
                accumulate(grads, *gain, Tensor::row_vector(dg))?;
                accumulate(grads, *bias, Tensor::row_vector(db))?;
            }
            Op::Gelu(src) => {
                let x = self.value(*src);
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                    *d *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                }
                accumulate(grads, *src, dx)?;
            }
            Op::Fused { parents, local } => {
                let s = g.data()[0];
                for (p, l) in parents.iter().zip(local) {
                    accumulate(grads, *p, l.scale(s))?;
                }
            }
        }
        Ok(())
    }
}

/// Applies the pairwise rotation to every row; `inverse` applies the transpose.
pub(crate) fn rotate_rows(x: &Tensor, cos: &Tensor, sin: &Tensor, inverse: bool) -> Tensor {
    let mut out = x.clone();
    let half = cos.cols();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let cr = cos.row(r);
        let sr = sin.row(r);
        let o = out.row_mut(r);
        for j in 0..half {
            let (x1, x2) = (xr[2 * j], xr[2 * j + 1]);
            let (c, s) = (cr[j], if inverse { -sr[j] } else { sr[j] });
            o[2 * j] = c * x1 + s * x2;
            o[2 * j + 1] = -s * x1 + c * x2;
        }
    }
    out
}
