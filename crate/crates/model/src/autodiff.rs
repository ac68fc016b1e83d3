//! Tape-based reverse-mode differentiation over 2-D `f64` arrays.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::{Gradients, ParamId, ParameterStore};
use crate::ModelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Deliberate backward-rule corruption, used to check that gradient
/// checking notices broken rules.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    NegateGeluBackward,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<f64>, inv_std: Vec<f64> },
    Softmax { x: NodeId },
    Gelu(NodeId),
    Relu(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, coeffs: Vec<f64>, probs: Array2<f64> },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A recorded forward computation. Parameters are copied in on first use
/// and their gradients are returned by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: std::collections::HashMap<ParamId, NodeId>,
    released: bool,
    fault: Fault,
}

// ---- kernels shared with the cache-based inference path ----

pub fn layer_norm_rows(x: &ArrayView2<f64>, gain: &ArrayView2<f64>, bias: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= is;
        inv.push(is);
    }
    let y = &xhat * gain + bias;
    (y, xhat, inv)
}

/// Row softmax. With `causal`, entry (i, j) is masked when `j > i + offset`.
pub fn softmax_rows(x: &ArrayView2<f64>, causal: Option<usize>) -> Array2<f64> {
    let mut out = x.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let limit = causal.map_or(row.len(), |off| (i + off + 1).min(row.len()));
        let m = row.slice(s![..limit]).fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - m).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= total;
    }
    out
}

/// `log softmax(row)[t]` for each row.
pub fn log_softmax_pick(logits: &ArrayView2<f64>, targets: &[usize]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, t)| {
            let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row[*t] - lse
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Fault) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let n = self.push(store.value(id).clone(), Op::Param);
        self.param_nodes.insert(id, n);
        n
    }

    fn check(&self, cond: bool, what: &str) -> Result<(), ModelError> {
        if cond {
            Ok(())
        } else {
            Err(ModelError::Shape(what.to_string()))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let (va, vb) = (self.value(a), self.value(b));
        self.check(va.ncols() == vb.nrows(), &format!("matmul {:?} x {:?}", va.dim(), vb.dim()))?;
        let v = va.dot(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let (va, vb) = (self.value(a), self.value(b));
        self.check(va.ncols() == vb.ncols(), &format!("matmul_nt {:?} x {:?}^T", va.dim(), vb.dim()))?;
        let v = va.dot(&vb.t());
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let (va, vb) = (self.value(a), self.value(b));
        self.check(va.dim() == vb.dim(), &format!("add {:?} + {:?}", va.dim(), vb.dim()))?;
        let v = va + vb;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, ModelError> {
        let (va, vb) = (self.value(a), self.value(row));
        self.check(vb.nrows() == 1 && va.ncols() == vb.ncols(), &format!("add_row {:?} + {:?}", va.dim(), vb.dim()))?;
        let v = va + vb;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, ModelError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        self.check(
            vg.dim() == (1, vx.ncols()) && vb.dim() == (1, vx.ncols()),
            &format!("layer_norm {:?} with {:?}", vx.dim(), vg.dim()),
        )?;
        let (y, xhat, inv_std) = layer_norm_rows(&vx.view(), &vg.view(), &vb.view());
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Row softmax, optionally with a causal mask (`j <= i` kept).
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        let v = softmax_rows(&self.value(x).view(), causal.then_some(0));
        self.push(v, Op::Softmax { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, ModelError> {
        let t = self.value(table);
        if let Some(bad) = ids.iter().find(|i| **i >= t.nrows()) {
            return Err(ModelError::Shape(format!("gather row {bad} of table with {} rows", t.nrows())));
        }
        let v = t.select(Axis(0), ids);
        Ok(self.push(v, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, ModelError> {
        let vx = self.value(x);
        self.check(start + len <= vx.ncols(), &format!("slice cols {start}..{} of {:?}", start + len, vx.dim()))?;
        let v = vx.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, ModelError> {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).map_err(|e| ModelError::Shape(format!("concat: {e}")))?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// `sum_j coeffs[j] * -log softmax(logits_j)[targets[j]]` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], coeffs: &[f64]) -> Result<NodeId, ModelError> {
        let vl = self.value(logits);
        self.check(
            targets.len() == vl.nrows() && coeffs.len() == vl.nrows(),
            &format!("cross entropy: {} targets, {} weights, logits {:?}", targets.len(), coeffs.len(), vl.dim()),
        )?;
        if let Some(bad) = targets.iter().find(|t| **t >= vl.ncols()) {
            return Err(ModelError::Shape(format!("target {bad} outside {} classes", vl.ncols())));
        }
        let probs = softmax_rows(&vl.view(), None);
        let loss: f64 = targets
            .iter()
            .zip(coeffs)
            .enumerate()
            .filter(|(_, (_, c))| **c != 0.0)
            .map(|(j, (t, c))| -c * probs[[j, *t]].ln())
            .sum();
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), coeffs: coeffs.to_vec(), probs },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    fn run_backward(&mut self, loss: NodeId) -> Result<Vec<Option<Array2<f64>>>, ModelError> {
        if self.released {
            return Err(ModelError::GraphReleased);
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(ModelError::Shape(format!("backward from non-scalar {:?}", self.value(loss).dim())));
        }
        self.released = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.dot(&vb.t());
                    let gb = va.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.dot(vb);
                    let gb = g.t().dot(va);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let vg = &self.nodes[gain.0].value;
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * vg;
                    let ncols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        for c in 0..row.len() {
                            row[c] = inv_std[r] / ncols * (ncols * dh[c] - s1 - xh[c] * s2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let mut dx = &g * p;
                    let row_dot = dx.sum_axis(Axis(1));
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let pr = p.row(r);
                        for c in 0..row.len() {
                            row[c] -= pr[c] * row_dot[r];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let sign = if self.fault == Fault::NegateGeluBackward { -1.0 } else { 1.0 };
                    let vx = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(&g).and(vx).map_collect(|gv, xv| sign * gv * gelu_grad(*xv));
                    acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(&g).and(vx).map_collect(|gv, xv| if *xv > 0.0 { *gv } else { 0.0 });
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::zeros(self.nodes[table.0].value.raw_dim());
                    for (r, id) in ids.iter().enumerate() {
                        let mut dst = dt.row_mut(*id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::CrossEntropy { logits, targets, coeffs, probs } => {
                    let up = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (r, mut row) in dl.rows_mut().into_iter().enumerate() {
                        let c = coeffs[r] * up;
                        if c == 0.0 {
                            row.fill(0.0);
                            continue;
                        }
                        row[targets[r]] -= 1.0;
                        row *= c;
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::Sum(x) => {
                    let dim = self.nodes[x.0].value.raw_dim();
                    acc(&mut grads, *x, Array2::from_elem(dim, g[[0, 0]]));
                }
            }
        }
        Ok(grads)
    }

    /// Reverse pass from a scalar node. The tape can be used once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, ModelError> {
        let grads = self.run_backward(loss)?;
        let mut out = Gradients::default();
        for (pid, node) in &self.param_nodes {
            if let Some(Some(g)) = grads.get(node.0) {
                out.by_param.insert(*pid, g.clone());
            }
        }
        Ok(out)
    }

    /// Like [`Graph::backward`], also returning gradients of the given
    /// non-parameter nodes (zeros if they do not reach the loss).
    pub fn backward_with_inputs(&mut self, loss: NodeId, inputs: &[NodeId]) -> Result<(Gradients, Vec<Array2<f64>>), ModelError> {
        let grads = self.run_backward(loss)?;
        let mut out = Gradients::default();
        for (pid, node) in &self.param_nodes {
            if let Some(Some(g)) = grads.get(node.0) {
                out.by_param.insert(*pid, g.clone());
            }
        }
        let ins = inputs
            .iter()
            .map(|i| {
                grads
                    .get(i.0)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| Array2::zeros(self.nodes[i.0].value.raw_dim()))
            })
            .collect();
        Ok((out, ins))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.input(scalar(3.0));
        let y = g.input(scalar(-2.5));
        let p = g.matmul(x, y).unwrap();
        let (_, d) = g.backward_with_inputs(p, &[x, y]).unwrap();
        assert_eq!(d[0][[0, 0]], -2.5);
        assert_eq!(d[1][[0, 0]], 3.0);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(scalar(1.0));
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(ModelError::GraphReleased)));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(&x.view(), Some(0));
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[1, 2]], 0.0);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[2, 1]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_v() {
        let mut g = Graph::new();
        let l = g.input(Array2::zeros((3, 7)));
        let ce = g.cross_entropy(l, &[0, 4, 6], &[1.0, 1.0, 1.0]).unwrap();
        assert!((g.scalar(ce) - 3.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input(Array2::zeros((2, 3)));
        let b = g.input(Array2::zeros((2, 3)));
        assert!(g.matmul(a, b).is_err());
        assert!(g.gather_rows(a, &[5]).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        assert!(g.backward(a).is_err());
    }

    /// Central differences against every op's backward rule.
    #[test]
    fn op_gradients_match_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.5, 2.0], [1.1, 0.4, -0.7, 0.2], [-0.5, 0.9, 1.3, -1.6]];
        let w0 = array![[0.2, -0.4, 0.1], [0.7, 0.3, -0.2], [-0.6, 0.5, 0.8], [0.1, 0.1, -0.3]];
        let f = |x: &Array2<f64>, w: &Array2<f64>, fault: Fault| {
            let mut g = Graph::new();
            g.set_fault(fault);
            let xi = g.input(x.clone());
            let wi = g.input(w.clone());
            let gain = g.input(array![[1.2, 0.8, 1.0, 0.5]]);
            let bias = g.input(array![[0.1, -0.1, 0.0, 0.2]]);
            let n = g.layer_norm(xi, gain, bias).unwrap();
            let h = g.matmul(n, wi).unwrap();
            let a = g.gelu(h);
            let r = g.relu(h);
            let s = g.softmax(a, true);
            let sc = g.matmul_nt(s, r).unwrap();
            let sl = g.slice_cols(sc, 1, 2).unwrap();
            let cat = g.concat_cols(&[sl, a]).unwrap();
            let sc2 = g.scale(cat, 0.7);
            let b = g.input(array![[0.1, 0.2, -0.3, 0.4, 0.0]]);
            let ar = g.add_row(sc2, b).unwrap();
            let tab = g.gather_rows(wi, &[0, 2, 2]).unwrap();
            let logits = g.add(ar, ar).unwrap();
            let ce = g.cross_entropy(logits, &[1, 4, 0], &[1.0, 0.0, 0.5]).unwrap();
            let t = g.sum(tab);
            let tot = g.add(ce, t).unwrap();
            let val = g.scalar(tot);
            let (_, d) = g.backward_with_inputs(tot, &[xi, wi]).unwrap();
            (val, d)
        };
        let (_, d) = f(&x0, &w0, Fault::None);
        let h = 1e-6;
        for (k, base) in [&x0, &w0].into_iter().enumerate() {
            for idx in ndarray::indices(base.dim()) {
                let (mut p, mut m) = (base.clone(), base.clone());
                p[idx] += h;
                m[idx] -= h;
                let (fp, fm) = if k == 0 {
                    (f(&p, &w0, Fault::None).0, f(&m, &w0, Fault::None).0)
                } else {
                    (f(&x0, &p, Fault::None).0, f(&x0, &m, Fault::None).0)
                };
                let num = (fp - fm) / (2.0 * h);
                let an = d[k][idx];
                assert!((num - an).abs() < 1e-6 * (1.0 + num.abs()), "input {k} {idx:?}: fd {num} vs {an}");
            }
        }
        let (_, bad) = f(&x0, &w0, Fault::NegateGeluBackward);
        assert!(bad[1].iter().zip(d[1].iter()).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
