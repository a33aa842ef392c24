//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a DAG of operations during a forward pass; calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates exact
//! gradients for every node that requires them. All model gradients in this
//! crate (attention projections, norms, heads, adapter maps) come from this
//! tape, which keeps the per-layer chain rule in one audited place.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

type GradFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, or zeros of the given shape when the node was
    /// never reached by the backward sweep.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        self.grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, grad_fn: Option<GradFn>) -> NodeId {
        let needs_grad = grad_fn.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { grad_fn } else { None },
            needs_grad,
        });
        id
    }

    /// Trainable leaf: gradients will be collected for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents: vec![], grad_fn: None, needs_grad: true });
        id
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents: vec![], grad_fn: None, needs_grad: false });
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.matmul(&p[1].transpose()), p[0].transpose().matmul(g)]
            })),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(value, vec![a, b], Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _| vec![g.zip(p[1], |x, y| x * y), g.zip(p[0], |x, y| x * y)])),
        )
    }

    /// Matrix plus a 1×C row vector broadcast over rows.
    pub fn add_row(&mut self, m: NodeId, r: NodeId) -> NodeId {
        let (mv, rv) = (self.value(m), self.value(r));
        assert_eq!(rv.rows, 1);
        assert_eq!(mv.cols, rv.cols, "add_row width mismatch");
        let mut value = mv.clone();
        for row in 0..value.rows {
            for c in 0..value.cols {
                *value.at_mut(row, c) += rv.data[c];
            }
        }
        self.push(
            value,
            vec![m, r],
            Some(Box::new(|g, _, _| vec![g.clone(), col_sums(g)])),
        )
    }

    /// Matrix times a 1×C row vector broadcast over rows (elementwise).
    pub fn mul_row(&mut self, m: NodeId, r: NodeId) -> NodeId {
        let (mv, rv) = (self.value(m), self.value(r));
        assert_eq!(rv.rows, 1);
        assert_eq!(mv.cols, rv.cols, "mul_row width mismatch");
        let mut value = mv.clone();
        for row in 0..value.rows {
            for c in 0..value.cols {
                *value.at_mut(row, c) *= rv.data[c];
            }
        }
        self.push(
            value,
            vec![m, r],
            Some(Box::new(|g, p, _| {
                let mut dm = g.clone();
                for row in 0..dm.rows {
                    for c in 0..dm.cols {
                        *dm.at_mut(row, c) *= p[1].data[c];
                    }
                }
                let prod = g.zip(p[0], |x, y| x * y);
                vec![dm, col_sums(&prod)]
            })),
        )
    }

    /// Matrix minus a 1×C row vector broadcast over rows.
    pub fn sub_row(&mut self, m: NodeId, r: NodeId) -> NodeId {
        let neg = self.scale(r, -1.0);
        self.add_row(m, neg)
    }

    /// Matrix times a 1×1 scalar node.
    pub fn mul_scalar(&mut self, m: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).data[0];
        let value = self.value(m).map(|v| v * sv);
        self.push(
            value,
            vec![m, s],
            Some(Box::new(|g, p, _| {
                let s = p[1].data[0];
                let ds: f64 = g.data.iter().zip(&p[0].data).map(|(a, b)| a * b).sum();
                vec![g.map(|v| v * s), Tensor::scalar(ds)]
            })),
        )
    }

    /// Matrix plus a 1×1 scalar node broadcast over all entries.
    pub fn add_scalar(&mut self, m: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).data[0];
        let value = self.value(m).map(|v| v + sv);
        self.push(
            value,
            vec![m, s],
            Some(Box::new(|g, _, _| {
                vec![g.clone(), Tensor::scalar(g.data.iter().sum())]
            })),
        )
    }

    pub fn scale(&mut self, m: NodeId, c: f64) -> NodeId {
        let value = self.value(m).map(|v| v * c);
        self.push(value, vec![m], Some(Box::new(move |g, _, _| vec![g.map(|v| v * c)])))
    }

    pub fn relu(&mut self, m: NodeId) -> NodeId {
        let value = self.value(m).map(|v| v.max(0.0));
        self.push(
            value,
            vec![m],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[0], |gv, x| if x > 0.0 { gv } else { 0.0 })]
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, m: NodeId) -> NodeId {
        let mv = self.value(m);
        let mut value = mv.clone();
        for r in 0..value.rows {
            let row = &mut value.data[r * value.cols..(r + 1) * value.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            value,
            vec![m],
            Some(Box::new(|g, _, out| {
                let mut dm = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let s = &out.data[r * out.cols..(r + 1) * out.cols];
                    let gr = &g.data[r * g.cols..(r + 1) * g.cols];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..out.cols {
                        *dm.at_mut(r, c) = s[c] * (gr[c] - dot);
                    }
                }
                vec![dm]
            })),
        )
    }

    /// Column means over rows: N×C → 1×C.
    pub fn mean_rows(&mut self, m: NodeId) -> NodeId {
        let mv = self.value(m);
        let n = mv.rows as f64;
        let mut value = col_sums(mv);
        for v in value.data.iter_mut() {
            *v /= n;
        }
        self.push(
            value,
            vec![m],
            Some(Box::new(move |g, p, _| {
                let rows = p[0].rows;
                let mut dm = Tensor::zeros(rows, g.cols);
                for r in 0..rows {
                    for c in 0..g.cols {
                        *dm.at_mut(r, c) = g.data[c] / rows as f64;
                    }
                }
                vec![dm]
            })),
        )
    }

    pub fn sum_all(&mut self, m: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(m).data.iter().sum());
        self.push(
            value,
            vec![m],
            Some(Box::new(|g, p, _| {
                vec![Tensor::filled(p[0].rows, p[0].cols, g.data[0])]
            })),
        )
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, m: NodeId) -> NodeId {
        let value = self.value(m).map(|v| 1.0 / v);
        self.push(
            value,
            vec![m],
            Some(Box::new(|g, _, out| vec![g.zip(out, |gv, y| -gv * y * y)])),
        )
    }

    /// Elementwise 1/sqrt(x + eps).
    pub fn rsqrt_eps(&mut self, m: NodeId, eps: f64) -> NodeId {
        let value = self.value(m).map(|v| 1.0 / (v + eps).sqrt());
        self.push(
            value,
            vec![m],
            Some(Box::new(|g, _, out| {
                vec![g.zip(out, |gv, y| gv * (-0.5) * y * y * y)]
            })),
        )
    }

    pub fn transpose(&mut self, m: NodeId) -> NodeId {
        let value = self.value(m).transpose();
        self.push(value, vec![m], Some(Box::new(|g, _, _| vec![g.transpose()])))
    }

    pub fn reshape(&mut self, m: NodeId, rows: usize, cols: usize) -> NodeId {
        let mv = self.value(m);
        let (orig_r, orig_c) = mv.shape();
        let value = mv.reshaped(rows, cols);
        self.push(
            value,
            vec![m],
            Some(Box::new(move |g, _, _| vec![g.reshaped(orig_r, orig_c)])),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..pv.cols {
                    *value.at_mut(r, off + c) = pv.at(r, c);
                }
            }
            off += pv.cols;
        }
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut dg = Tensor::zeros(g.rows, w);
                    for r in 0..g.rows {
                        for c in 0..w {
                            *dg.at_mut(r, c) = g.at(r, off + c);
                        }
                    }
                    out.push(dg);
                    off += w;
                }
                out
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let heights: Vec<usize> = parts.iter().map(|&p| self.value(p).rows).collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&pv.data);
        }
        self.push(
            Tensor::new(total, cols, data),
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(heights.len());
                let mut off = 0;
                for &h in &heights {
                    out.push(Tensor::new(h, g.cols, g.data[off * g.cols..(off + h) * g.cols].to_vec()));
                    off += h;
                }
                out
            })),
        )
    }

    pub fn slice_cols(&mut self, m: NodeId, start: usize, len: usize) -> NodeId {
        let mv = self.value(m);
        assert!(start + len <= mv.cols, "slice_cols out of range");
        let mut value = Tensor::zeros(mv.rows, len);
        for r in 0..mv.rows {
            for c in 0..len {
                *value.at_mut(r, c) = mv.at(r, start + c);
            }
        }
        self.push(
            value,
            vec![m],
            Some(Box::new(move |g, p, _| {
                let mut dm = Tensor::zeros(p[0].rows, p[0].cols);
                for r in 0..g.rows {
                    for c in 0..len {
                        *dm.at_mut(r, start + c) = g.at(r, c);
                    }
                }
                vec![dm]
            })),
        )
    }

    pub fn slice_rows(&mut self, m: NodeId, start: usize, len: usize) -> NodeId {
        let mv = self.value(m);
        assert!(start + len <= mv.rows, "slice_rows out of range");
        let value =
            Tensor::new(len, mv.cols, mv.data[start * mv.cols..(start + len) * mv.cols].to_vec());
        self.push(
            value,
            vec![m],
            Some(Box::new(move |g, p, _| {
                let mut dm = Tensor::zeros(p[0].rows, p[0].cols);
                dm.data[start * g.cols..(start + len) * g.cols].copy_from_slice(&g.data);
                vec![dm]
            })),
        )
    }

    /// Segment a 1×L series into ⌈L/P⌉ patches of width P, right-padding the
    /// final patch with repeats of the last observed value.
    pub fn patchify(&mut self, m: NodeId, patch: usize) -> NodeId {
        let mv = self.value(m);
        assert_eq!(mv.rows, 1, "patchify expects a 1×L row");
        assert!(patch >= 1 && mv.cols >= 1);
        let l = mv.cols;
        let n = l.div_ceil(patch);
        let mut data = Vec::with_capacity(n * patch);
        for i in 0..n * patch {
            data.push(mv.data[i.min(l - 1)]);
        }
        self.push(
            Tensor::new(n, patch, data),
            vec![m],
            Some(Box::new(move |g, _, _| {
                let mut dm = Tensor::zeros(1, l);
                for (i, gv) in g.data.iter().enumerate() {
                    dm.data[i.min(l - 1)] += gv;
                }
                vec![dm]
            })),
        )
    }

    /// Mean squared error between a node and a constant target, as a 1×1 node.
    pub fn mse_against(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t);
        let sq = self.mul(d, d);
        let s = self.sum_all(sq);
        self.scale(s, 1.0 / target.len() as f64)
    }

    /// Sum of squared errors (the ‖·‖² loss used by the ensemblers).
    pub fn sse_against(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    /// Reverse sweep from a 1×1 root node.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if node.grad_fn.is_none() {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = (node.grad_fn.as_ref().unwrap())(&g, &parent_values, &node.value);
            assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

fn col_sums(m: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, m.cols);
    for r in 0..m.rows {
        for c in 0..m.cols {
            out.data[c] += m.at(r, c);
        }
    }
    out
}
