//! Small neural building blocks over the tape: linear layers, layer norm,
//! multi-head attention and two-layer MLPs. Layers hold parameter *names*;
//! values live in a [`ParamStore`](crate::params::ParamStore) and are bound
//! to a tape per forward pass through a [`ParamBinder`].

use super::{Tape, Var};
use crate::params::ParamStore;
use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_distr::StandardNormal;
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Binds store parameters to tape leaves, one leaf per parameter per tape,
/// so gradients from multiple uses accumulate onto the same node.
pub struct ParamBinder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let v = self.tape.leaf_shared(self.store.value(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// All parameters touched by this tape, for gradient extraction.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.bound.borrow().iter().map(|(n, v)| (n.clone(), *v)).collect()
    }

    /// Collect gradients by parameter name after a backward pass. Parameters
    /// with no gradient path are omitted.
    pub fn grads_by_name(&self, grads: &mut super::Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.bound() {
            if let Some(g) = grads.take(var) {
                out.insert(name, g);
            }
        }
        out
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    /// Register a `[in_dim, out_dim]` weight and `[out_dim]` bias.
    /// `gain` scales the init std `gain / sqrt(in_dim)`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        frozen: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        store.insert(
            format!("{name}.w"),
            normal_matrix(rng, in_dim, out_dim, std).into_dyn(),
            frozen,
        );
        store.insert(
            format!("{name}.b"),
            Array1::<f64>::zeros(out_dim).into_dyn(),
            frozen,
        );
        Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
        }
    }

    pub fn forward(&self, b: &ParamBinder, x: Var) -> Var {
        let t = b.tape();
        let xw = t.matmul(x, b.var(&self.w));
        t.add_bias_row(xw, b.var(&self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: String,
    pub b: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let _ = rng;
        store.insert(format!("{name}.g"), ArrayD::from_elem(ndarray::IxDyn(&[dim]), 1.0), false);
        store.insert(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[dim])), false);
        Self {
            g: format!("{name}.g"),
            b: format!("{name}.b"),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, b: &ParamBinder, x: Var) -> Var {
        b.tape().layer_norm(x, b.var(&self.g), b.var(&self.b), self.eps)
    }
}

/// Two-layer MLP with ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        frozen: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::init(store, &format!("{name}.l1"), in_dim, hidden, 2f64.sqrt(), frozen, rng),
            l2: Linear::init(store, &format!("{name}.l2"), hidden, out_dim, 1.0, frozen, rng),
        }
    }

    pub fn forward(&self, b: &ParamBinder, x: Var) -> Var {
        let t = b.tape();
        let h = t.relu(self.l1.forward(b, x));
        self.l2.forward(b, h)
    }
}

/// Learned multi-head attention. Heads are stored as separate projection
/// matrices; the output projection is applied per head and summed, which is
/// algebraically identical to concat-then-project.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub o_w: Vec<String>,
    pub o_b: String,
    pub d_head: usize,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(n_heads >= 1 && d_model % n_heads == 0, "d_model divisible by heads");
        let d_head = d_model / n_heads;
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut o_w = Vec::new();
        for h in 0..n_heads {
            q.push(Linear::init(store, &format!("{name}.q{h}"), d_model, d_head, 1.0, false, rng));
            k.push(Linear::init(store, &format!("{name}.k{h}"), d_model, d_head, 1.0, false, rng));
            v.push(Linear::init(store, &format!("{name}.v{h}"), d_model, d_head, 1.0, false, rng));
            let w = format!("{name}.o{h}.w");
            store.insert(
                w.clone(),
                normal_matrix(rng, d_head, d_model, 1.0 / (d_head as f64).sqrt()).into_dyn(),
                false,
            );
            o_w.push(w);
        }
        let o_b = format!("{name}.o.b");
        store.insert(o_b.clone(), ArrayD::zeros(ndarray::IxDyn(&[d_model])), false);
        Self { q, k, v, o_w, o_b, d_head }
    }

    /// `q_in [n,d]`, `k_in/v_in [m,d]`, optional additive attention bias
    /// `[n,m]` (0 or -inf entries). Returns the pre-residual output `[n,d]`.
    pub fn forward(
        &self,
        b: &ParamBinder,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        bias: Option<&ArrayD<f64>>,
    ) -> Var {
        let t = b.tape();
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut out: Option<Var> = None;
        for h in 0..self.q.len() {
            let qh = self.q[h].forward(b, q_in);
            let kh = self.k[h].forward(b, k_in);
            let vh = self.v[h].forward(b, v_in);
            let mut scores = t.scale(t.matmul_nt(qh, kh), scale);
            if let Some(m) = bias {
                scores = t.add_const(scores, m);
            }
            let p = t.softmax_rows(scores);
            let oh = t.matmul(p, vh);
            let contrib = t.matmul(oh, b.var(&self.o_w[h]));
            out = Some(match out {
                None => contrib,
                Some(acc) => t.add(acc, contrib),
            });
        }
        t.add_bias_row(out.expect("at least one head"), b.var(&self.o_b))
    }
}

/// Projection-free scaled dot-product self-attention used by the query
/// generator: `softmax(x xᵀ · scale + bias) x`.
pub fn attention_plain(t: &Tape, x: Var, scale: f64, bias: Option<&ArrayD<f64>>) -> Var {
    let mut scores = t.scale(t.matmul_nt(x, x), scale);
    if let Some(m) = bias {
        scores = t.add_const(scores, m);
    }
    let p = t.softmax_rows(scores);
    t.matmul(p, x)
}
