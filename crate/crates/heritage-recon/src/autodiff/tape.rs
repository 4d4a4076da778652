//! Reverse-mode autodiff over batched matrix primitives.
//!
//! A `Tape` is an append-only list of nodes. Each node stores its operation,
//! its inputs (by index, always earlier nodes), and its forward value, so the
//! record is topologically sorted by construction. `backward` walks the list
//! once in reverse accumulating vector-Jacobian products. The tape is not
//! mutated by `backward`; running it twice gives identical results.
//!
//! Every value is a row-major `rows x cols` matrix of f64. Scalars are 1x1.

use super::params::{ParamRef, ParamSet};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Non-differentiable data.
    Const,
    /// Differentiable leaf; `Some` if it mirrors a parameter tensor.
    Leaf(Option<ParamRef>),
    /// a[n,k] * b[m,k]^T -> [n,m]
    MatmulTB(NodeId, NodeId),
    /// a[n,m] + row[1,m]
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// a[n,m] * col[n,1] broadcast over columns
    MulCol(NodeId, NodeId),
    /// a[n,m] / col[n,1]
    DivCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// a * s where s is a trainable 1x1 scalar
    ScaleByVar(NodeId, NodeId),
    /// ln(1 + exp(beta x)) / beta
    Softplus(NodeId, f64),
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    /// [n,m] -> [n,1]
    SumRows(NodeId),
    /// [n,m] -> [1,1]
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    /// columns start..end
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    /// y[i,0] = 1, y[i,j] = prod_{k<j} a[i,k]
    CumprodExclRows(NodeId),
    /// y[i,:] = a[idx[i],:]
    GatherRows(NodeId, Vec<usize>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, zeros if no gradient flowed to it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let (r, c) = self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(vec![r, c]),
        }
    }

    pub fn has(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.shape2(id)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let (r, c) = self.shape2(id);
        Tensor::matrix(r, c, self.nodes[id.0].data.clone()).expect("node shape")
    }

    fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!(
                "tape values must be matrices, got shape {s:?}"
            ))),
        }
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        let (r, c) = Self::as_matrix(t)?;
        Ok(self.push(Op::Const, r, c, t.data().to_vec(), false))
    }

    /// Differentiable leaf that is not a parameter (an input).
    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        let (r, c) = Self::as_matrix(t)?;
        Ok(self.push(Op::Leaf(None), r, c, t.data().to_vec(), true))
    }

    /// Differentiable leaf mirroring a parameter. Snapshots the current value.
    pub fn param(&mut self, params: &ParamSet, p: ParamRef) -> Result<NodeId> {
        let t = params.value(p);
        let (r, c) = Self::as_matrix(t)?;
        Ok(self.push(Op::Leaf(Some(p)), r, c, t.data().to_vec(), true))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape2(a);
        let (m, k2) = self.shape2(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_tb: [{n}x{k}] vs [{m}x{k2}]"
            )));
        }
        let mut out = vec![0.0; n * m];
        dgemm_tb(
            n,
            k,
            m,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulTB(a, b), n, m, out, ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape2(a);
        let (rr, rc) = self.shape2(row);
        if rr != 1 || rc != m {
            return Err(Error::Dimension(format!(
                "add_row: [{n}x{m}] + [{rr}x{rc}]"
            )));
        }
        let mut out = self.nodes[a.0].data.clone();
        let r = &self.nodes[row.0].data;
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += r[j];
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), n, m, out, ng))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        build: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (n, m) = self.shape2(a);
        let (n2, m2) = self.shape2(b);
        if (n, m) != (n2, m2) {
            return Err(Error::Dimension(format!(
                "{name}: [{n}x{m}] vs [{n2}x{m2}]"
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(build(a, b), n, m, out, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn col_broadcast(
        &mut self,
        a: NodeId,
        col: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        build: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (n, m) = self.shape2(a);
        let (cn, cm) = self.shape2(col);
        if cn != n || cm != 1 {
            return Err(Error::Dimension(format!(
                "{name}: [{n}x{m}] with column [{cn}x{cm}]"
            )));
        }
        let c = &self.nodes[col.0].data;
        let mut out = Vec::with_capacity(n * m);
        for (i, row) in self.nodes[a.0].data.chunks_exact(m).enumerate() {
            out.extend(row.iter().map(|&x| f(x, c[i])));
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(build(a, col), n, m, out, ng))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        self.col_broadcast(a, col, "mul_col", |x, c| x * c, Op::MulCol)
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        self.col_broadcast(a, col, "div_col", |x, c| x / c, Op::DivCol)
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        build: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let (n, m) = self.shape2(a);
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        self.push(build(a), n, m, out, ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, |a| Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, |a| Op::AddScalar(a, k))
    }

    pub fn scale_by_var(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (sr, sc) = self.shape2(s);
        if (sr, sc) != (1, 1) {
            return Err(Error::Dimension(format!(
                "scale_by_var: scalar must be 1x1, got [{sr}x{sc}]"
            )));
        }
        let sv = self.nodes[s.0].data[0];
        let (n, m) = self.shape2(a);
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| sv * x).collect();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Op::ScaleByVar(a, s), n, m, out, ng))
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        self.unary(a, |x| softplus(x, beta), |a| Op::Softplus(a, beta))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.shape2(a);
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .chunks_exact(m.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let ng = self.needs(a);
        self.push(Op::SumRows(a), n, 1, out, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a), 1, 1, vec![s], ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols with no parts".into()));
        }
        let n = self.shape2(parts[0]).0;
        let mut m = 0;
        for &p in parts {
            let (pn, pm) = self.shape2(p);
            if pn != n {
                return Err(Error::Dimension(format!(
                    "concat_cols: row mismatch {pn} vs {n}"
                )));
            }
            m += pm;
        }
        let mut out = vec![0.0; n * m];
        let mut off = 0;
        for &p in parts {
            let pm = self.shape2(p).1;
            for i in 0..n {
                out[i * m + off..i * m + off + pm]
                    .copy_from_slice(&self.nodes[p.0].data[i * pm..(i + 1) * pm]);
            }
            off += pm;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), n, m, out, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, m) = self.shape2(a);
        if start >= end || end > m {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} of [{n}x{m}]"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            out[i * w..(i + 1) * w]
                .copy_from_slice(&self.nodes[a.0].data[i * m + start..i * m + end]);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start, end), n, w, out, ng))
    }

    /// Reinterpret the row-major buffer with a new shape (same element count).
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (n, m) = self.shape2(a);
        if n * m != rows * cols {
            return Err(Error::Dimension(format!(
                "reshape [{n}x{m}] -> [{rows}x{cols}]"
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), rows, cols, data, ng))
    }

    /// Exclusive cumulative product along each row:
    /// `y[i,0] = 1`, `y[i,j] = prod_{k<j} a[i,k]`.
    pub fn cumprod_excl_rows(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.shape2(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let mut acc = 1.0;
            for j in 0..m {
                out[i * m + j] = acc;
                acc *= self.nodes[a.0].data[i * m + j];
            }
        }
        let ng = self.needs(a);
        self.push(Op::CumprodExclRows(a), n, m, out, ng)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape2(a);
        for &ix in indices {
            if ix >= n {
                return Err(Error::Dimension(format!(
                    "gather_rows: index {ix} out of {n} rows"
                )));
            }
        }
        let mut out = vec![0.0; indices.len() * m];
        for (i, &ix) in indices.iter().enumerate() {
            out[i * m..(i + 1) * m].copy_from_slice(&self.nodes[a.0].data[ix * m..(ix + 1) * m]);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), indices.len(), m, out, ng))
    }

    /// Backward from a scalar (1x1) output with seed gradient 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    /// Backward pass seeded with `output_grad`. The tape is immutable; a
    /// second call yields identical results.
    pub fn backward(&self, output: NodeId, output_grad: &Tensor) -> Result<Gradients> {
        let (r, c) = self.shape2(output);
        let (gr, gc) = Self::as_matrix(output_grad)?;
        if (gr, gc) != (r, c) {
            return Err(Error::Dimension(format!(
                "output_grad shape [{gr}x{gc}] does not match output [{r}x{c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(output_grad.data().to_vec());

        for i in (0..=output.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Collect parameter gradients out of a `Gradients`, keyed by `ParamRef`.
    pub fn param_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(p)) = node.op {
                if let Some(g) = &grads.grads[i] {
                    let t = Tensor::matrix(node.rows, node.cols, g.clone()).expect("leaf shape");
                    match &mut out[p.index()] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        None => out[p.index()] = Some(t),
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (n, m) = (node.rows, node.cols);
        match &node.op {
            Op::Const | Op::Leaf(_) => {}
            Op::MatmulTB(a, b) => {
                // y = A B^T;  dA = G B,  dB = G^T A
                let (an, ak) = self.shape2(*a);
                let (bm, _) = self.shape2(*b);
                if self.needs(*a) {
                    let da = accum(grads, a.0, an * ak);
                    // G[n,m] * B[m,k] -> [n,k]
                    dgemm_acc(
                        n,
                        m,
                        ak,
                        g,
                        m as isize,
                        1,
                        &self.nodes[b.0].data,
                        ak as isize,
                        1,
                        da,
                    );
                }
                if self.needs(*b) {
                    let db = accum(grads, b.0, bm * ak);
                    // G^T[m,n] * A[n,k] -> [m,k]
                    dgemm_acc(
                        m,
                        n,
                        ak,
                        g,
                        1,
                        m as isize,
                        &self.nodes[a.0].data,
                        ak as isize,
                        1,
                        db,
                    );
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(accum(grads, a.0, n * m), g);
                }
                if self.needs(*row) {
                    let dr = accum(grads, row.0, m);
                    for chunk in g.chunks_exact(m) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(accum(grads, a.0, n * m), g);
                }
                if self.needs(*b) {
                    add_into(accum(grads, b.0, n * m), g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(accum(grads, a.0, n * m), g);
                }
                if self.needs(*b) {
                    let db = accum(grads, b.0, n * m);
                    for (d, x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(&self.nodes[b.0].data) {
                        *d += x * y;
                    }
                }
                if self.needs(*b) {
                    let db = accum(grads, b.0, n * m);
                    for ((d, x), y) in db.iter_mut().zip(g).zip(&self.nodes[a.0].data) {
                        *d += x * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = &self.nodes[b.0].data;
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bd) {
                        *d += x / y;
                    }
                }
                if self.needs(*b) {
                    let db = accum(grads, b.0, n * m);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n * m {
                        db[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = &self.nodes[col.0].data;
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] += g[i * m + j] * c[i];
                        }
                    }
                }
                if self.needs(*col) {
                    let dc = accum(grads, col.0, n);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * ad[i * m + j];
                        }
                        dc[i] += s;
                    }
                }
            }
            Op::DivCol(a, col) => {
                let c = &self.nodes[col.0].data;
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] += g[i * m + j] / c[i];
                        }
                    }
                }
                if self.needs(*col) {
                    let dc = accum(grads, col.0, n);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * ad[i * m + j];
                        }
                        dc[i] -= s / (c[i] * c[i]);
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += k * x;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    add_into(accum(grads, a.0, n * m), g);
                }
            }
            Op::ScaleByVar(a, s) => {
                let sv = self.nodes[s.0].data[0];
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += sv * x;
                    }
                }
                if self.needs(*s) {
                    let ds = accum(grads, s.0, 1);
                    let ad = &self.nodes[a.0].data;
                    let mut acc = 0.0;
                    for (x, y) in g.iter().zip(ad) {
                        acc += x * y;
                    }
                    ds[0] += acc;
                }
            }
            Op::Softplus(a, beta) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n * m {
                        da[i] += g[i] * sigmoid(beta * ad[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for i in 0..n * m {
                        let y = node.data[i];
                        da[i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n * m {
                        if ad[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n * m {
                        da[i] += g[i] * sign(ad[i]);
                    }
                }
            }
            Op::Square(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..n * m {
                        da[i] += 2.0 * ad[i] * g[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for i in 0..n * m {
                        let y = node.data[i];
                        if y > 0.0 {
                            da[i] += g[i] * 0.5 / y;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    for i in 0..n * m {
                        da[i] += g[i] * node.data[i];
                    }
                }
            }
            Op::SumRows(a) => {
                if self.needs(*a) {
                    let am = self.shape2(*a).1;
                    let da = accum(grads, a.0, n * am);
                    for i in 0..n {
                        for j in 0..am {
                            da[i * am + j] += g[i];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let (an, am) = self.shape2(*a);
                    let da = accum(grads, a.0, an * am);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pm = self.shape2(p).1;
                    if self.needs(p) {
                        let dp = accum(grads, p.0, n * pm);
                        for i in 0..n {
                            for j in 0..pm {
                                dp[i * pm + j] += g[i * m + off + j];
                            }
                        }
                    }
                    off += pm;
                }
            }
            Op::SliceCols(a, start, _) => {
                if self.needs(*a) {
                    let (an, am) = self.shape2(*a);
                    let da = accum(grads, a.0, an * am);
                    for i in 0..n {
                        for j in 0..m {
                            da[i * am + start + j] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    add_into(accum(grads, a.0, n * m), g);
                }
            }
            Op::CumprodExclRows(a) => {
                if self.needs(*a) {
                    let da = accum(grads, a.0, n * m);
                    let ad = &self.nodes[a.0].data;
                    let y = &node.data;
                    for i in 0..n {
                        // dL/da[k] = sum_{j>k} g[j] * prod_{l<j, l!=k} a[l]
                        //          = (sum_{j>k} g[j] y[j]) / a[k]  when a[k] != 0
                        let row_a = &ad[i * m..(i + 1) * m];
                        let row_y = &y[i * m..(i + 1) * m];
                        let row_g = &g[i * m..(i + 1) * m];
                        let mut suffix = 0.0;
                        let mut suffixes = vec![0.0; m];
                        for j in (0..m).rev() {
                            suffixes[j] = suffix;
                            suffix += row_g[j] * row_y[j];
                        }
                        for k in 0..m {
                            if row_a[k].abs() > 1e-300 {
                                da[i * m + k] += suffixes[k] / row_a[k];
                            } else {
                                // a[k] ~ 0: recompute products skipping k.
                                let mut run = row_y[k]; // prod_{l<k} a[l]
                                let mut acc = 0.0;
                                for j in (k + 1)..m {
                                    if j > k + 1 {
                                        run *= row_a[j - 1];
                                    }
                                    acc += row_g[j] * run;
                                }
                                da[i * m + k] += acc;
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let (an, am) = self.shape2(*a);
                    let da = accum(grads, a.0, an * am);
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..am {
                            da[ix * am + j] += g[i * am + j];
                        }
                    }
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 30.0 {
        x
    } else {
        z.exp().ln_1p() / beta
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// C[n,m] = A[n,k] * B[m,k]^T. Shared by the tape and the no-tape inference
/// paths.
pub(crate) fn dgemm_tb(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(c.len(), n * m);
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// C[n_out, m_out] += A * B with explicit strides for A and B, used by the
/// backward matmuls (beta = 1 accumulate).
#[allow(clippy::too_many_arguments)]
fn dgemm_acc(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), n * m);
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn matmul_tb_forward_and_backward() {
        let mut tape = Tape::new();
        let a = tape.input(&t(1, 2, vec![1.0, 2.0])).unwrap();
        let b = tape.input(&t(1, 2, vec![3.0, 4.0])).unwrap();
        let y = tape.matmul_tb(a, b).unwrap();
        assert_eq!(tape.value(y), &[11.0]);
        let g = tape.backward_scalar(y).unwrap();
        assert_eq!(g.wrt(a).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_layer_closed_form() {
        // y = W x + b with upstream grad g: dW = g x^T, db = g.
        let mut tape = Tape::new();
        let x = tape.constant(&t(1, 3, vec![1.0, -2.0, 0.5])).unwrap();
        let w = tape
            .input(&t(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]))
            .unwrap();
        let b = tape.input(&t(1, 2, vec![0.7, -0.8])).unwrap();
        let wx = tape.matmul_tb(x, w).unwrap();
        let y = tape.add_row(wx, b).unwrap();
        let g = tape
            .backward(y, &t(1, 2, vec![2.0, -1.0]))
            .unwrap();
        // dW = g^T x
        assert_eq!(
            g.wrt(w).data(),
            &[2.0, -4.0, 1.0, -1.0, 2.0, -0.5]
        );
        assert_eq!(g.wrt(b).data(), &[2.0, -1.0]);
    }

    #[test]
    fn chain_with_fanout_accumulates() {
        // out = (a*b) + a  =>  da = b + 1, db = a
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::scalar(3.0)).unwrap();
        let b = tape.input(&Tensor::scalar(5.0)).unwrap();
        let ab = tape.mul(a, b).unwrap();
        let out = tape.add(ab, a).unwrap();
        let g = tape.backward_scalar(out).unwrap();
        assert_eq!(g.wrt(a).data(), &[6.0]);
        assert_eq!(g.wrt(b).data(), &[3.0]);
    }

    #[test]
    fn backward_twice_identical() {
        let mut tape = Tape::new();
        let a = tape.input(&t(2, 2, vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sigmoid(a);
        let q = tape.square(s);
        let loss = tape.sum_all(q);
        let g1 = tape.backward_scalar(loss).unwrap();
        let g2 = tape.backward_scalar(loss).unwrap();
        assert_eq!(g1.wrt(a).data(), g2.wrt(a).data());
    }

    #[test]
    fn output_grad_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.input(&t(2, 2, vec![1.0; 4])).unwrap();
        let y = tape.relu(a);
        let bad = tape.backward(y, &Tensor::scalar(1.0));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn cumprod_exclusive_rows() {
        let mut tape = Tape::new();
        let a = tape.input(&t(1, 4, vec![2.0, 3.0, 4.0, 5.0])).unwrap();
        let y = tape.cumprod_excl_rows(a);
        assert_eq!(tape.value(y), &[1.0, 2.0, 6.0, 24.0]);
        // loss = sum(y) -> da[k] = sum_{j>k} prod_{l<j,l!=k} a[l]
        let loss = tape.sum_all(y);
        let g = tape.backward_scalar(loss).unwrap();
        // da[0] = 1 + 3 + 12 = 16, da[1] = 2 + 8 = 10, da[2] = 6, da[3] = 0
        let got = g.wrt(a);
        let expect = [16.0, 10.0, 6.0, 0.0];
        for (x, e) in got.data().iter().zip(&expect) {
            assert!((x - e).abs() < 1e-12, "{x} vs {e}");
        }
    }

    #[test]
    fn cumprod_backward_with_zero_entry() {
        let vals = vec![2.0, 0.0, 4.0, 5.0];
        let mut tape = Tape::new();
        let a = tape.input(&t(1, 4, vals.clone())).unwrap();
        let y = tape.cumprod_excl_rows(a);
        let loss = tape.sum_all(y);
        let g = tape.backward_scalar(loss).unwrap();
        // finite difference oracle
        let f = |v: &[f64]| -> f64 {
            let mut acc = 1.0;
            let mut s = 0.0;
            for &x in v {
                s += acc;
                acc *= x;
            }
            s
        };
        let h = 1e-6;
        for k in 0..4 {
            let mut vp = vals.clone();
            let mut vm = vals.clone();
            vp[k] += h;
            vm[k] -= h;
            let fd = (f(&vp) - f(&vm)) / (2.0 * h);
            let ad = g.wrt(a).data()[k];
            assert!((fd - ad).abs() < 1e-5, "k={k}: fd {fd} vs ad {ad}");
        }
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape
            .input(&t(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let g = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(g);
        let gr = tape.backward_scalar(loss).unwrap();
        assert_eq!(gr.wrt(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn div_and_col_broadcasts() {
        let mut tape = Tape::new();
        let a = tape.input(&t(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = tape.input(&t(2, 1, vec![2.0, 4.0])).unwrap();
        let y = tape.div_col(a, c).unwrap();
        assert_eq!(tape.value(y), &[0.5, 1.0, 0.75, 1.0]);
        let loss = tape.sum_all(y);
        let g = tape.backward_scalar(loss).unwrap();
        // d/dc_i = -sum_j a_ij / c_i^2
        assert_eq!(g.wrt(c).data(), &[-0.75, -0.4375]);
    }
}
