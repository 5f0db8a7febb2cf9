//! Parameter registry, forward-pass context and the shared network blocks
//! (linear, layer norm, multi-head attention, feed-forward, sinusoidal
//! positional encoding).

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::graph::{concat_cols, AttnMask, Gradients, Graph, Node};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// All learnable tensors of a model, addressed by stable names so checkpoints
/// can be restored (possibly partially) across model variants.
#[derive(Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copy values from `src` for every pair (dst_id, src_id); shapes must match.
    pub fn copy_values(&mut self, src: &ParamSet, pairs: &[(ParamId, ParamId)]) {
        for &(dst, s) in pairs {
            assert_eq!(
                self.values[dst.0].shape(),
                src.values[s.0].shape(),
                "copy_values shape mismatch"
            );
            self.values[dst.0] = src.values[s.0].clone();
        }
    }
}

/// One forward pass: binds parameters into a graph exactly once each, so
/// gradients accumulate across every use site.
pub struct Fwd<'g> {
    g: &'g Graph,
    params: &'g ParamSet,
    track_grads: bool,
    bound: RefCell<BTreeMap<usize, Node<'g>>>,
}

impl<'g> Fwd<'g> {
    pub fn new(g: &'g Graph, params: &'g ParamSet, track_grads: bool) -> Self {
        Fwd {
            g,
            params,
            track_grads,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn params(&self) -> &'g ParamSet {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Node<'g> {
        if let Some(n) = self.bound.borrow().get(&id.index()) {
            return *n;
        }
        let value = self.params.get(id).clone();
        let node = if self.track_grads {
            self.g.leaf(value)
        } else {
            self.g.input(value)
        };
        self.bound.borrow_mut().insert(id.index(), node);
        node
    }

    pub fn input(&self, t: Tensor) -> Node<'g> {
        self.g.input(t)
    }

    /// Collect gradients for every parameter bound during this forward pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| grads.get(node).map(|g| (ParamId(pid), g.clone())))
            .collect()
    }
}

/// Fully connected layer; weight stored (out, in).
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(in_dim as f64);
        let weight = ps.add(
            alloc::format!("{name}.weight"),
            Tensor::rand_uniform(out_dim, in_dim, bound, rng),
        );
        let bias = bias.then(|| {
            ps.add(
                alloc::format!("{name}.bias"),
                Tensor::rand_uniform(1, out_dim, bound, rng),
            )
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn apply<'g>(&self, fwd: &Fwd<'g>, x: Node<'g>) -> Node<'g> {
        assert_eq!(x.cols(), self.in_dim, "linear input width");
        let mut y = x.matmul_nt(fwd.param(self.weight));
        if let Some(b) = self.bias {
            y = y.add_row(fwd.param(b));
        }
        y
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.weight];
        ids.extend(self.bias);
        ids
    }
}

/// Layer normalization with learnable gain and bias.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(alloc::format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: ps.add(alloc::format!("{name}.beta"), Tensor::zeros(1, dim)),
            eps: 1e-5,
        }
    }

    pub fn apply<'g>(&self, fwd: &Fwd<'g>, x: Node<'g>) -> Node<'g> {
        x.layer_norm(fwd.param(self.gamma), fwd.param(self.beta), self.eps)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.gamma, self.beta]
    }
}

/// Two-layer feed-forward block with ReLU.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            lin1: Linear::new(ps, &alloc::format!("{name}.lin1"), dim, hidden, true, rng),
            lin2: Linear::new(ps, &alloc::format!("{name}.lin2"), hidden, dim, true, rng),
        }
    }

    pub fn apply<'g>(&self, fwd: &Fwd<'g>, x: Node<'g>) -> Node<'g> {
        self.lin2.apply(fwd, self.lin1.apply(fwd, x).relu())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lin1.param_ids();
        ids.extend(self.lin2.param_ids());
        ids
    }
}

/// Small MLP head (Linear → ReLU → Linear), used for box refinement.
pub struct Mlp {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            lin1: Linear::new(ps, &alloc::format!("{name}.lin1"), in_dim, hidden, true, rng),
            lin2: Linear::new(ps, &alloc::format!("{name}.lin2"), hidden, out_dim, true, rng),
        }
    }

    pub fn apply<'g>(&self, fwd: &Fwd<'g>, x: Node<'g>) -> Node<'g> {
        self.lin2.apply(fwd, self.lin1.apply(fwd, x).relu())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lin1.param_ids();
        ids.extend(self.lin2.param_ids());
        ids
    }
}

/// Standard multi-head attention. Positional embeddings, when given, are added
/// to queries/keys before projection; values stay content-only.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(ps, &alloc::format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(ps, &alloc::format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(ps, &alloc::format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(ps, &alloc::format!("{name}.wo"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply<'g>(
        &self,
        fwd: &Fwd<'g>,
        query: Node<'g>,
        key: Node<'g>,
        value: Node<'g>,
        q_pos: Option<Node<'g>>,
        k_pos: Option<Node<'g>>,
        mask: Option<Rc<AttnMask>>,
    ) -> Node<'g> {
        let q_in = match q_pos {
            Some(p) => query.add(p),
            None => query,
        };
        let k_in = match k_pos {
            Some(p) => key.add(p),
            None => key,
        };
        let q = self.wq.apply(fwd, q_in);
        let k = self.wk.apply(fwd, k_in);
        let v = self.wv.apply(fwd, value);
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let range = h * dh..(h + 1) * dh;
            let qh = q.slice_cols(range.clone());
            let kh = k.slice_cols(range.clone());
            let vh = v.slice_cols(range);
            let attn = qh
                .matmul_nt(kh)
                .scale(scale)
                .row_softmax_masked(mask.clone());
            head_outs.push(attn.matmul(vh));
        }
        self.wo.apply(fwd, concat_cols(&head_outs))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.wq.param_ids();
        ids.extend(self.wk.param_ids());
        ids.extend(self.wv.param_ids());
        ids.extend(self.wo.param_ids());
        ids
    }
}

/// Interleaved sin/cos features of each value, concatenated per value.
///
/// `dim` splits evenly across `values`; each value's block alternates
/// `sin(2π·v·ω_i), cos(2π·v·ω_i)` over geometrically spaced frequencies.
pub fn sinusoidal_features(values: &[f64], dim: usize, temperature: f64) -> Vec<f64> {
    assert!(!values.is_empty());
    let per = dim / values.len();
    assert_eq!(per * values.len(), dim, "dim must divide across values");
    assert_eq!(per % 2, 0, "per-value block must be even");
    let mut out = Vec::with_capacity(dim);
    for &v in values {
        let x = v * 2.0 * core::f64::consts::PI;
        for i in 0..per / 2 {
            let omega = libm::pow(temperature, -((2 * i) as f64) / per as f64);
            out.push(libm::sin(x * omega));
            out.push(libm::cos(x * omega));
        }
    }
    out
}

/// Temperature used for box and token positional encodings.
pub const PE_TEMPERATURE: f64 = 20.0;

/// Sinusoidal embedding of a box: quarters [cx | cy | w | h].
pub fn positional_encode_box(b: &crate::geometry::BBox, dim: usize) -> Vec<f64> {
    assert_eq!(dim % 8, 0, "box encoding needs dim divisible by 8");
    sinusoidal_features(&[b.cx, b.cy, b.w, b.h], dim, PE_TEMPERATURE)
}

/// Positional-encoding matrix for a slice of boxes.
pub fn positional_encode_boxes(boxes: &[crate::geometry::BBox], dim: usize) -> Tensor {
    let mut t = Tensor::zeros(boxes.len(), dim);
    for (r, b) in boxes.iter().enumerate() {
        t.row_mut(r).copy_from_slice(&positional_encode_box(b, dim));
    }
    t
}
