//! Parameter storage, deterministic initialization, optimizer and the small
//! set of network building blocks the pipeline is assembled from.
//!
//! Parameters are owned by a [`ParamStore`] and addressed by stable string
//! names. Initialization is seeded per name (name hash mixed with the master
//! seed), so the values a parameter starts with do not depend on the order in
//! which parameters happen to be created. That property is what makes
//! ablation variants comparable across runs and checkpoints reproducible.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_cols, concat_rows, Tape, Value, Var};

/// FNV-1a hash of a byte string; stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer; used to decorrelate seed material.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a master seed and a context label.
pub fn derive_seed(master: u64, context: &str) -> u64 {
    splitmix64(master ^ fnv1a64(context.as_bytes()))
}

/// Deterministic RNG for a named context.
pub fn context_rng(master: u64, context: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, context))
}

/// One draw from N(0, 1) via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

/// Named parameter matrices with seed-per-name initialization.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Value>,
    index: HashMap<String, usize>,
    master_seed: u64,
}

impl ParamStore {
    pub fn new(master_seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            master_seed,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Create the parameter if absent, otherwise return the existing id.
    /// Initialization depends only on (master seed, name, shape, init kind).
    pub fn get_or_init(&mut self, name: &str, shape: (usize, usize), init: Init) -> usize {
        if let Some(&id) = self.index.get(name) {
            assert_eq!(self.values[id].dim(), shape, "shape clash for {name}");
            return id;
        }
        let mut rng = context_rng(self.master_seed, &format!("param/{name}"));
        let (m, n) = shape;
        let mut value = Value::zeros(shape);
        match init {
            Init::Xavier => {
                let limit = (6.0 / (m + n) as f64).sqrt();
                for i in 0..m {
                    for j in 0..n {
                        value[(i, j)] = rng.random_range(-limit..limit);
                    }
                }
            }
            Init::Zeros => {}
            Init::Ones => value.fill(1.0),
            Init::Normal(std) => {
                for i in 0..m {
                    for j in 0..n {
                        value[(i, j)] = std * standard_normal(&mut rng);
                    }
                }
            }
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Value {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Value {
        &mut self.values[id]
    }

    pub fn set_by_name(&mut self, name: &str, value: Value) {
        let id = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(self.values[id].dim(), value.dim(), "shape clash for {name}");
        self.values[id] = value;
    }

    /// Put the parameter on a tape as a differentiable leaf.
    pub fn var<'t>(&self, tape: &'t Tape, id: usize) -> Var<'t> {
        tape.param(id, self.values[id].clone())
    }

    /// Iterate parameters in name order (stable, for serialization).
    pub fn iter_sorted(&self) -> impl Iterator<Item = (&str, &Value)> {
        let mut ids: Vec<usize> = (0..self.values.len()).collect();
        ids.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        ids.into_iter()
            .map(move |id| (self.names[id].as_str(), &self.values[id]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }
}

/// Adam with per-parameter step counters. A parameter that receives no
/// gradient in a step is left completely untouched, moments included, so
/// disabled model components stay bit-identical to their initialization.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moment1: Vec<Value>,
    moment2: Vec<Value>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moment1: Vec::new(),
            moment2: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn ensure_len(&mut self, store: &ParamStore) {
        while self.moment1.len() < store.len() {
            let shape = store.value(self.moment1.len()).dim();
            self.moment1.push(Value::zeros(shape));
            self.moment2.push(Value::zeros(shape));
            self.steps.push(0);
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<usize, Value>) {
        self.ensure_len(store);
        for (&pid, g) in grads {
            self.steps[pid] += 1;
            let t = self.steps[pid] as f64;
            let m = &mut self.moment1[pid];
            let v = &mut self.moment2[pid];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let bc1 = 1.0 - self.beta1.powf(t);
            let bc2 = 1.0 - self.beta2.powf(t);
            let w = store.value_mut(pid);
            for idx in ndarray::indices(w.dim()) {
                let mhat = m[idx] / bc1;
                let vhat = v[idx] / bc2;
                w[idx] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment state in parameter-name order, for checkpointing.
    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, Value, Value, u64)> {
        let mut out: Vec<(String, Value, Value, u64)> = (0..self.moment1.len())
            .map(|id| {
                (
                    store.name_of(id).to_string(),
                    self.moment1[id].clone(),
                    self.moment2[id].clone(),
                    self.steps[id],
                )
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(&mut self, store: &ParamStore, state: &[(String, Value, Value, u64)]) {
        self.ensure_len(store);
        for (name, m, v, t) in state {
            if let Some(id) = store.id_of(name) {
                self.moment1[id] = m.clone();
                self.moment2[id] = v.clone();
                self.steps[id] = *t;
            }
        }
    }
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.get_or_init(&format!("{name}.w"), (in_dim, out_dim), Init::Xavier);
        let b = store.get_or_init(&format!("{name}.b"), (1, out_dim), Init::Zeros);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn new_no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.get_or_init(&format!("{name}.w"), (in_dim, out_dim), Init::Xavier);
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        assert_eq!(x.shape().1, self.in_dim, "linear input width mismatch");
        let w = store.var(tape, self.w);
        let y = x.matmul(w);
        match self.b {
            Some(b) => y.add_row(store.var(tape, b)),
            None => y,
        }
    }
}

/// Two-layer perceptron with tanh in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let h = self.fc1.forward(store, tape, x).tanh();
        self.fc2.forward(store, tape, h)
    }
}

/// Row standardization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub shift: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.get_or_init(&format!("{name}.gain"), (1, dim), Init::Ones),
            shift: store.get_or_init(&format!("{name}.shift"), (1, dim), Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.layer_norm_rows(self.eps)
            .mul_row(store.var(tape, self.gain))
            .add_row(store.var(tape, self.shift))
    }
}

/// Scaled dot-product attention where rows attend only within consecutive
/// groups of a fixed size. Queries, keys and values all have `G·group` rows.
///
/// `masks`, when given, holds one additive matrix per in-group query position
/// `u`: `masks[u]` is `G × group`, entry `(g, v)` applying to key position `v`
/// of group `g`. Entries at or below [`crate::autodiff::MASK_EXCLUDE`] remove
/// the key entirely.
pub fn group_attention<'t>(
    tape: &'t Tape,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    group: usize,
    masks: Option<&[Value]>,
) -> Var<'t> {
    let (rows, dim) = q.shape();
    assert_eq!(k.shape(), (rows, dim));
    assert_eq!(v.shape(), (rows, dim));
    assert!(group >= 1 && rows % group == 0, "bad attention group size");
    let groups = rows / group;
    if let Some(ms) = masks {
        assert_eq!(ms.len(), group);
        for m in ms {
            assert_eq!(m.dim(), (groups, group));
        }
    }
    let scale = 1.0 / (dim as f64).sqrt();

    // Position u of every group, as a G-row gather.
    let position_index = |u: usize| -> Vec<usize> {
        (0..groups).map(|g| g * group + u).collect()
    };
    let q_at: Vec<Var<'t>> = (0..group).map(|u| q.gather_rows(&position_index(u))).collect();
    let k_at: Vec<Var<'t>> = (0..group).map(|u| k.gather_rows(&position_index(u))).collect();
    let v_at: Vec<Var<'t>> = (0..group).map(|u| v.gather_rows(&position_index(u))).collect();

    let mut per_position: Vec<Var<'t>> = Vec::with_capacity(group);
    for u in 0..group {
        let score_cols: Vec<Var<'t>> = (0..group)
            .map(|vpos| q_at[u].mul(k_at[vpos]).sum_cols().scale(scale))
            .collect();
        let scores = concat_cols(&score_cols);
        let mask = masks.map(|ms| tape.constant(ms[u].clone()));
        let probs = scores.softmax_rows(mask);
        let mut out: Option<Var<'t>> = None;
        for vpos in 0..group {
            let weighted = v_at[vpos].mul_col(probs.slice_cols(vpos, vpos + 1));
            out = Some(match out {
                Some(acc) => acc.add(weighted),
                None => weighted,
            });
        }
        per_position.push(out.unwrap());
    }

    // Reinterleave: stacked layout has position u at rows u·G..(u+1)·G.
    let stacked = concat_rows(&per_position);
    let mut index = Vec::with_capacity(rows);
    for g in 0..groups {
        for u in 0..group {
            index.push(u * groups + g);
        }
    }
    stacked.gather_rows(&index)
}

/// Multi-head attention over fixed-size row groups with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "head count must divide dim");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        group: usize,
        masks: Option<&[Value]>,
    ) -> Var<'t> {
        let q = self.wq.forward(store, tape, x);
        let k = self.wk.forward(store, tape, x);
        let v = self.wv.forward(store, tape, x);
        let head_dim = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            outs.push(group_attention(
                tape,
                q.slice_cols(lo, hi),
                k.slice_cols(lo, hi),
                v.slice_cols(lo, hi),
                group,
                masks,
            ));
        }
        let merged = concat_cols(&outs);
        self.wo.forward(store, tape, merged)
    }
}

/// Post-norm transformer encoder layer: attention and feed-forward sublayers,
/// each with residual connection and layer normalization.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        TransformerLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, 2 * dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        group: usize,
        masks: Option<&[Value]>,
    ) -> Var<'t> {
        let attended = self.attn.forward(store, tape, x, group, masks);
        let x = self.ln1.forward(store, tape, x.add(attended));
        let ff = self.ffn.forward(store, tape, x);
        self.ln2.forward(store, tape, x.add(ff))
    }
}
