//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes. Building an op records a
//! backward closure; [`Graph::backward`] walks the tape in reverse and returns
//! per-node gradients. Nodes are cheap `Copy` handles tied to the graph's
//! lifetime. One graph per training batch; gradients are exact (no graph-level
//! stochasticity), which the finite-difference checks in `tests/` rely on.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::ops::Range;

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Boolean attention mask: `allow[q * keys + k]` says query `q` may attend to
/// key `k`. Shared by reference between ops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn all_allowed(queries: usize, keys: usize) -> Self {
        AttnMask {
            queries,
            keys,
            allow: vec![true; queries * keys],
        }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allow.push(f(q, k));
            }
        }
        AttnMask {
            queries,
            keys,
            allow,
        }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct NodeData {
    value: Tensor,
    needs_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Autodiff tape.
pub struct Graph {
    nodes: RefCell<Vec<NodeData>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Node<'g> {
    g: &'g Graph,
    id: usize,
    rows: usize,
    cols: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    by_id: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: Node<'_>) -> Option<&Tensor> {
        self.by_id.get(node.id).and_then(|g| g.as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn input(&self, value: Tensor) -> Node<'_> {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf (model parameters, probe points).
    pub fn leaf(&self, value: Tensor) -> Node<'_> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Node<'_> {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(NodeData {
            value,
            needs_grad,
            parents: Vec::new(),
            backward: None,
        });
        Node {
            g: self,
            id,
            rows,
            cols,
        }
    }

    /// Record an op with an explicit backward closure.
    ///
    /// The closure receives (upstream grad, own forward value, parent values,
    /// per-parent needs-grad flags) and returns one gradient per parent
    /// (`None` where not needed).
    pub fn custom<'g>(
        &'g self,
        value: Tensor,
        parents: &[Node<'g>],
        backward: impl Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Node<'g> {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|p| nodes[p.id].needs_grad);
        let id = nodes.len();
        nodes.push(NodeData {
            value,
            needs_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Node {
            g: self,
            id,
            rows,
            cols,
        }
    }

    /// Snapshot of a node's forward value.
    pub fn value(&self, node: Node<'_>) -> Tensor {
        self.nodes.borrow()[node.id].value.clone()
    }

    /// Read access to a node's forward value without cloning.
    pub fn with_value<R>(&self, node: Node<'_>, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[node.id].value)
    }

    /// Backpropagate from a scalar root. Returns gradients for every node that
    /// still holds one afterwards (leaves in particular).
    pub fn backward(&self, root: Node<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue; // leaf: keep its gradient
            };
            let gout = grads[id].take().unwrap();
            let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let contribs = backward(&gout, &node.value, &pvals, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (slot, contrib) in node.parents.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !nodes[*slot].needs_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), nodes[*slot].value.shape());
                match &mut grads[*slot] {
                    Some(acc) => acc.add_assign(&contrib),
                    dst @ None => *dst = Some(contrib),
                }
            }
        }
        Gradients { by_id: grads }
    }
}

impl<'g> Node<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn value(&self) -> Tensor {
        self.g.value(*self)
    }

    /// Forward value re-entered as a constant leaf (gradient flow cut).
    pub fn detach(&self) -> Node<'g> {
        self.g.input(self.value())
    }

    fn same_graph(&self, other: &Node<'g>) {
        assert!(
            core::ptr::eq(self.g, other.g),
            "nodes belong to different graphs"
        );
    }

    pub fn add(self, rhs: Node<'g>) -> Node<'g> {
        self.same_graph(&rhs);
        assert_eq!(self.shape(), rhs.shape(), "add shape");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(rhs, |b| {
                let mut out = a.clone();
                out.add_assign(b);
                out
            })
        });
        self.g.custom(v, &[self, rhs], |g, _, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, rhs: Node<'g>) -> Node<'g> {
        self.same_graph(&rhs);
        assert_eq!(self.shape(), rhs.shape(), "sub shape");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(rhs, |b| {
                let mut out = a.clone();
                for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                    *x -= y;
                }
                out
            })
        });
        self.g.custom(v, &[self, rhs], |g, _, _, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    pub fn mul(self, rhs: Node<'g>) -> Node<'g> {
        self.same_graph(&rhs);
        assert_eq!(self.shape(), rhs.shape(), "mul shape");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(rhs, |b| {
                let mut out = a.clone();
                for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                    *x *= y;
                }
                out
            })
        });
        self.g.custom(v, &[self, rhs], |g, _, pv, needs| {
            let (a, b) = (pv[0], pv[1]);
            let da = needs[0].then(|| {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(b.data()) {
                    *x *= y;
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(a.data()) {
                    *x *= y;
                }
                d
            });
            vec![da, db]
        })
    }

    pub fn div(self, rhs: Node<'g>) -> Node<'g> {
        self.same_graph(&rhs);
        assert_eq!(self.shape(), rhs.shape(), "div shape");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(rhs, |b| {
                let mut out = a.clone();
                for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                    *x /= y;
                }
                out
            })
        });
        self.g.custom(v, &[self, rhs], |g, _, pv, needs| {
            let (a, b) = (pv[0], pv[1]);
            let da = needs[0].then(|| {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(b.data()) {
                    *x /= y;
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = g.clone();
                for ((x, &av), &bv) in d.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *x *= -av / (bv * bv);
                }
                d
            });
            vec![da, db]
        })
    }

    /// Elementwise `self * a + b` with constants.
    pub fn affine(self, a: f64, b: f64) -> Node<'g> {
        let v = self.g.with_value(self, |t| t.map(|x| x * a + b));
        self.g
            .custom(v, &[self], move |g, _, _, _| vec![Some(g.map(|x| x * a))])
    }

    pub fn scale(self, a: f64) -> Node<'g> {
        self.affine(a, 0.0)
    }

    pub fn add_const(self, b: f64) -> Node<'g> {
        self.affine(1.0, b)
    }

    pub fn neg(self) -> Node<'g> {
        self.scale(-1.0)
    }

    /// Broadcast-add a 1×c row vector to every row.
    pub fn add_row(self, row: Node<'g>) -> Node<'g> {
        self.same_graph(&row);
        assert_eq!(row.rows, 1, "add_row expects 1×c");
        assert_eq!(row.cols, self.cols, "add_row width");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(row, |b| {
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (x, y) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                        *x += y;
                    }
                }
                out
            })
        });
        self.g.custom(v, &[self, row], |g, _, _, needs| {
            let da = needs[0].then(|| g.clone());
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, y) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                d
            });
            vec![da, db]
        })
    }

    /// Scale each row i by the scalar in column vector `col` (n×1).
    pub fn mul_col(self, col: Node<'g>) -> Node<'g> {
        self.same_graph(&col);
        assert_eq!(col.cols, 1, "mul_col expects n×1");
        assert_eq!(col.rows, self.rows, "mul_col height");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(col, |b| {
                let mut out = a.clone();
                for r in 0..out.rows() {
                    let s = b.get(r, 0);
                    for x in out.row_mut(r) {
                        *x *= s;
                    }
                }
                out
            })
        });
        self.g.custom(v, &[self, col], |g, _, pv, needs| {
            let (a, b) = (pv[0], pv[1]);
            let da = needs[0].then(|| {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let s = b.get(r, 0);
                    for x in d.row_mut(r) {
                        *x *= s;
                    }
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros(a.rows(), 1);
                for r in 0..a.rows() {
                    let mut acc = 0.0;
                    for (x, y) in g.row(r).iter().zip(a.row(r)) {
                        acc += x * y;
                    }
                    d.set(r, 0, acc);
                }
                d
            });
            vec![da, db]
        })
    }

    pub fn matmul(self, rhs: Node<'g>) -> Node<'g> {
        self.same_graph(&rhs);
        let v = self
            .g
            .with_value(self, |a| self.g.with_value(rhs, |b| matmul_nn(a, b)));
        self.g.custom(v, &[self, rhs], |g, _, pv, needs| {
            let (a, b) = (pv[0], pv[1]);
            let da = needs[0].then(|| matmul_nt(g, b));
            let db = needs[1].then(|| matmul_tn(a, g));
            vec![da, db]
        })
    }

    /// `self · rhsᵀ` where rhs is (m,k); the natural shape for weight matrices
    /// stored (out, in).
    pub fn matmul_nt(self, rhs: Node<'g>) -> Node<'g> {
        self.same_graph(&rhs);
        let v = self
            .g
            .with_value(self, |a| self.g.with_value(rhs, |b| matmul_nt(a, b)));
        self.g.custom(v, &[self, rhs], |g, _, pv, needs| {
            let (a, b) = (pv[0], pv[1]);
            let da = needs[0].then(|| matmul_nn(g, b));
            let db = needs[1].then(|| matmul_tn(g, a));
            vec![da, db]
        })
    }

    pub fn relu(self) -> Node<'g> {
        let v = self.g.with_value(self, |t| t.map(|x| x.max(0.0)));
        self.g.custom(v, &[self], |g, _, pv, _| {
            let mut d = g.clone();
            for (x, &a) in d.data_mut().iter_mut().zip(pv[0].data()) {
                if a <= 0.0 {
                    *x = 0.0;
                }
            }
            vec![Some(d)]
        })
    }

    pub fn abs(self) -> Node<'g> {
        let v = self.g.with_value(self, |t| t.map(f64::abs));
        self.g.custom(v, &[self], |g, _, pv, _| {
            let mut d = g.clone();
            for (x, &a) in d.data_mut().iter_mut().zip(pv[0].data()) {
                if a < 0.0 {
                    *x = -*x;
                } else if a == 0.0 {
                    *x = 0.0;
                }
            }
            vec![Some(d)]
        })
    }

    pub fn exp(self) -> Node<'g> {
        let v = self.g.with_value(self, |t| t.map(libm::exp));
        self.g.custom(v, &[self], |g, own, _, _| {
            let mut d = g.clone();
            for (x, &y) in d.data_mut().iter_mut().zip(own.data()) {
                *x *= y;
            }
            vec![Some(d)]
        })
    }

    pub fn sigmoid(self) -> Node<'g> {
        let v = self
            .g
            .with_value(self, |t| t.map(|x| 1.0 / (1.0 + libm::exp(-x))));
        self.g.custom(v, &[self], |g, own, _, _| {
            let mut d = g.clone();
            for (x, &s) in d.data_mut().iter_mut().zip(own.data()) {
                *x *= s * (1.0 - s);
            }
            vec![Some(d)]
        })
    }

    /// ln(1 + eˣ), numerically stable.
    pub fn softplus(self) -> Node<'g> {
        let v = self
            .g
            .with_value(self, |t| t.map(|x| x.max(0.0) + libm::log1p(libm::exp(-x.abs()))));
        self.g.custom(v, &[self], |g, _, pv, _| {
            let mut d = g.clone();
            for (x, &a) in d.data_mut().iter_mut().zip(pv[0].data()) {
                *x *= 1.0 / (1.0 + libm::exp(-a));
            }
            vec![Some(d)]
        })
    }

    /// Elementwise x^p for non-negative inputs.
    pub fn pow_const(self, p: f64) -> Node<'g> {
        let v = self.g.with_value(self, |t| t.map(|x| libm::pow(x, p)));
        self.g.custom(v, &[self], move |g, _, pv, _| {
            let mut d = g.clone();
            for (x, &a) in d.data_mut().iter_mut().zip(pv[0].data()) {
                *x *= p * libm::pow(a, p - 1.0);
            }
            vec![Some(d)]
        })
    }

    pub fn minimum(self, rhs: Node<'g>) -> Node<'g> {
        self.pick(rhs, true)
    }

    pub fn maximum(self, rhs: Node<'g>) -> Node<'g> {
        self.pick(rhs, false)
    }

    // Elementwise min/max; gradient follows the selected branch (ties: self).
    fn pick(self, rhs: Node<'g>, take_min: bool) -> Node<'g> {
        self.same_graph(&rhs);
        assert_eq!(self.shape(), rhs.shape(), "min/max shape");
        let v = self.g.with_value(self, |a| {
            self.g.with_value(rhs, |b| {
                let mut out = a.clone();
                for (x, &y) in out.data_mut().iter_mut().zip(b.data()) {
                    *x = if take_min { x.min(y) } else { x.max(y) };
                }
                out
            })
        });
        self.g.custom(v, &[self, rhs], move |g, _, pv, needs| {
            let (a, b) = (pv[0], pv[1]);
            let mut da = needs[0].then(|| Tensor::zeros(a.rows(), a.cols()));
            let mut db = needs[1].then(|| Tensor::zeros(a.rows(), a.cols()));
            for i in 0..g.numel() {
                let av = a.data()[i];
                let bv = b.data()[i];
                let self_wins = if take_min { av <= bv } else { av >= bv };
                if self_wins {
                    if let Some(d) = da.as_mut() {
                        d.data_mut()[i] = g.data()[i];
                    }
                } else if let Some(d) = db.as_mut() {
                    d.data_mut()[i] = g.data()[i];
                }
            }
            vec![da, db]
        })
    }

    pub fn sum(self) -> Node<'g> {
        let v = self
            .g
            .with_value(self, |t| Tensor::scalar(t.data().iter().sum()));
        self.g.custom(v, &[self], |g, _, pv, _| {
            let s = g.scalar_value();
            vec![Some(Tensor::filled(pv[0].rows(), pv[0].cols(), s))]
        })
    }

    pub fn mean(self) -> Node<'g> {
        let n = (self.rows * self.cols) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row-wise softmax; `mask` (if any) freezes disallowed entries at exactly 0.
    pub fn row_softmax_masked(self, mask: Option<Rc<AttnMask>>) -> Node<'g> {
        if let Some(m) = &mask {
            assert_eq!((m.queries(), m.keys()), self.shape(), "mask shape");
        }
        let fmask = mask.clone();
        let v = self.g.with_value(self, |t| {
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for r in 0..t.rows() {
                let row = t.row(r);
                let allowed = |c: usize| fmask.as_ref().map_or(true, |m| m.allows(r, c));
                let mut mx = f64::NEG_INFINITY;
                let mut any_allowed = false;
                for (c, &x) in row.iter().enumerate() {
                    if allowed(c) {
                        any_allowed = true;
                        if x > mx {
                            mx = x;
                        }
                    }
                }
                assert!(any_allowed, "softmax row {r} fully masked");
                if !mx.is_finite() {
                    // non-finite logits: emit NaN so the caller's finiteness
                    // checks see the blow-up instead of a bogus distribution
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        if allowed(c) {
                            *o = f64::NAN;
                        }
                    }
                    continue;
                }
                let orow = out.row_mut(r);
                let mut z = 0.0;
                for (c, &x) in row.iter().enumerate() {
                    if allowed(c) {
                        let e = libm::exp(x - mx);
                        orow[c] = e;
                        z += e;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            out
        });
        self.g.custom(v, &[self], move |g, own, _, _| {
            let mut d = Tensor::zeros(own.rows(), own.cols());
            for r in 0..own.rows() {
                let p = own.row(r);
                let gr = g.row(r);
                let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (x, (&pv, &gv)) in d.row_mut(r).iter_mut().zip(p.iter().zip(gr)) {
                    *x = pv * (gv - dot);
                }
            }
            vec![Some(d)]
        })
    }

    pub fn row_softmax(self) -> Node<'g> {
        self.row_softmax_masked(None)
    }

    /// Row-wise log-softmax (stable).
    pub fn log_row_softmax(self) -> Node<'g> {
        let v = self.g.with_value(self, |t| {
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for r in 0..t.rows() {
                let row = t.row(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&x| libm::exp(x - mx)).sum();
                let lz = mx + libm::log(z);
                for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                    *o = x - lz;
                }
            }
            out
        });
        self.g.custom(v, &[self], |g, own, _, _| {
            let mut d = Tensor::zeros(own.rows(), own.cols());
            for r in 0..own.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for (x, (&lp, &gv)) in d
                    .row_mut(r)
                    .iter_mut()
                    .zip(own.row(r).iter().zip(g.row(r)))
                {
                    *x = gv - libm::exp(lp) * gsum;
                }
            }
            vec![Some(d)]
        })
    }

    /// Fused layer norm over each row with learnable gain/bias.
    pub fn layer_norm(self, gamma: Node<'g>, beta: Node<'g>, eps: f64) -> Node<'g> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        assert_eq!(gamma.shape(), (1, self.cols), "layer_norm gamma");
        assert_eq!(beta.shape(), (1, self.cols), "layer_norm beta");
        let v = self.g.with_value(self, |x| {
            self.g.with_value(gamma, |gm| {
                self.g.with_value(beta, |bt| {
                    let mut out = Tensor::zeros(x.rows(), x.cols());
                    let d = x.cols() as f64;
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let mu: f64 = row.iter().sum::<f64>() / d;
                        let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        let inv = 1.0 / libm::sqrt(var + eps);
                        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                            let xhat = (row[c] - mu) * inv;
                            *o = xhat * gm.get(0, c) + bt.get(0, c);
                        }
                    }
                    out
                })
            })
        });
        self.g
            .custom(v, &[self, gamma, beta], move |g, _, pv, needs| {
                let (x, gm) = (pv[0], pv[1]);
                let d = x.cols() as f64;
                let mut dx = needs[0].then(|| Tensor::zeros(x.rows(), x.cols()));
                let mut dgm = needs[1].then(|| Tensor::zeros(1, x.cols()));
                let mut dbt = needs[2].then(|| Tensor::zeros(1, x.cols()));
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mu: f64 = row.iter().sum::<f64>() / d;
                    let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let gr = g.row(r);
                    // dxhat = g * gamma; dx via the standard two-moment correction
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..x.cols() {
                        let xhat = (row[c] - mu) * inv;
                        let dxhat = gr[c] * gm.get(0, c);
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if let Some(t) = dgm.as_mut() {
                            t.data_mut()[c] += gr[c] * xhat;
                        }
                        if let Some(t) = dbt.as_mut() {
                            t.data_mut()[c] += gr[c];
                        }
                    }
                    if let Some(t) = dx.as_mut() {
                        for c in 0..x.cols() {
                            let xhat = (row[c] - mu) * inv;
                            let dxhat = gr[c] * gm.get(0, c);
                            t.row_mut(r)[c] =
                                inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                        }
                    }
                }
                vec![dx, dgm, dbt]
            })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Node<'g> {
        let v = self.g.with_value(self, |t| t.reshaped(rows, cols));
        self.g.custom(v, &[self], |g, _, pv, _| {
            vec![Some(g.reshaped(pv[0].rows(), pv[0].cols()))]
        })
    }

    pub fn slice_cols(self, range: Range<usize>) -> Node<'g> {
        assert!(range.end <= self.cols, "slice_cols range");
        let (lo, hi) = (range.start, range.end);
        let v = self.g.with_value(self, |t| {
            let mut out = Tensor::zeros(t.rows(), hi - lo);
            for r in 0..t.rows() {
                out.row_mut(r).copy_from_slice(&t.row(r)[lo..hi]);
            }
            out
        });
        self.g.custom(v, &[self], move |g, _, pv, _| {
            let mut d = Tensor::zeros(pv[0].rows(), pv[0].cols());
            for r in 0..g.rows() {
                d.row_mut(r)[lo..hi].copy_from_slice(g.row(r));
            }
            vec![Some(d)]
        })
    }

    pub fn slice_rows(self, range: Range<usize>) -> Node<'g> {
        assert!(range.end <= self.rows, "slice_rows range");
        let (lo, hi) = (range.start, range.end);
        let v = self.g.with_value(self, |t| {
            let mut out = Tensor::zeros(hi - lo, t.cols());
            for r in lo..hi {
                out.row_mut(r - lo).copy_from_slice(t.row(r));
            }
            out
        });
        self.g.custom(v, &[self], move |g, _, pv, _| {
            let mut d = Tensor::zeros(pv[0].rows(), pv[0].cols());
            for r in 0..g.rows() {
                d.row_mut(r + lo).copy_from_slice(g.row(r));
            }
            vec![Some(d)]
        })
    }

    /// Select rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(self, idx: &[usize]) -> Node<'g> {
        let idx: Rc<[usize]> = Rc::from(idx);
        let fidx = idx.clone();
        let v = self.g.with_value(self, |t| {
            let mut out = Tensor::zeros(fidx.len(), t.cols());
            for (r, &i) in fidx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(i));
            }
            out
        });
        self.g.custom(v, &[self], move |g, _, pv, _| {
            let mut d = Tensor::zeros(pv[0].rows(), pv[0].cols());
            for (r, &i) in idx.iter().enumerate() {
                for (x, y) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                    *x += y;
                }
            }
            vec![Some(d)]
        })
    }

    /// Select scalar entries (r,c) into a k×1 column; backward scatter-adds.
    pub fn gather_elems(self, coords: &[(usize, usize)]) -> Node<'g> {
        let coords: Rc<[(usize, usize)]> = Rc::from(coords);
        let fcoords = coords.clone();
        let v = self.g.with_value(self, |t| {
            let mut out = Tensor::zeros(fcoords.len(), 1);
            for (k, &(r, c)) in fcoords.iter().enumerate() {
                out.set(k, 0, t.get(r, c));
            }
            out
        });
        self.g.custom(v, &[self], move |g, _, pv, _| {
            let mut d = Tensor::zeros(pv[0].rows(), pv[0].cols());
            for (k, &(r, c)) in coords.iter().enumerate() {
                let cur = d.get(r, c);
                d.set(r, c, cur + g.get(k, 0));
            }
            vec![Some(d)]
        })
    }
}

/// Vertically stack nodes sharing a column count.
pub fn concat_rows<'g>(parts: &[Node<'g>]) -> Node<'g> {
    assert!(!parts.is_empty());
    let g = parts[0].g;
    let cols = parts[0].cols;
    let total: usize = parts.iter().map(|p| p.rows).sum();
    let mut v = Tensor::zeros(total, cols);
    let mut at = 0;
    let mut bounds = Vec::with_capacity(parts.len());
    for p in parts {
        assert_eq!(p.cols, cols, "concat_rows width");
        g.with_value(*p, |t| {
            for r in 0..t.rows() {
                v.row_mut(at + r).copy_from_slice(t.row(r));
            }
        });
        bounds.push((at, p.rows));
        at += p.rows;
    }
    g.custom(v, parts, move |gout, _, pv, needs| {
        bounds
            .iter()
            .enumerate()
            .map(|(i, &(lo, len))| {
                needs[i].then(|| {
                    let mut d = Tensor::zeros(len, pv[i].cols());
                    for r in 0..len {
                        d.row_mut(r).copy_from_slice(gout.row(lo + r));
                    }
                    d
                })
            })
            .collect()
    })
}

/// Horizontally stack nodes sharing a row count.
pub fn concat_cols<'g>(parts: &[Node<'g>]) -> Node<'g> {
    assert!(!parts.is_empty());
    let g = parts[0].g;
    let rows = parts[0].rows;
    let total: usize = parts.iter().map(|p| p.cols).sum();
    let mut v = Tensor::zeros(rows, total);
    let mut at = 0;
    let mut bounds = Vec::with_capacity(parts.len());
    for p in parts {
        assert_eq!(p.rows, rows, "concat_cols height");
        g.with_value(*p, |t| {
            for r in 0..rows {
                v.row_mut(r)[at..at + t.cols()].copy_from_slice(t.row(r));
            }
        });
        bounds.push((at, p.cols));
        at += p.cols;
    }
    g.custom(v, parts, move |gout, _, _, needs| {
        bounds
            .iter()
            .enumerate()
            .map(|(i, &(lo, len))| {
                needs[i].then(|| {
                    let mut d = Tensor::zeros(rows, len);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&gout.row(r)[lo..lo + len]);
                    }
                    d
                })
            })
            .collect()
    })
}

/// Sum a list of same-shape nodes.
pub fn sum_nodes<'g>(parts: &[Node<'g>]) -> Node<'g> {
    assert!(!parts.is_empty());
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = acc.add(*p);
    }
    acc
}
