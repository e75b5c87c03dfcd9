//! Named parameter store, per-forward bindings, and the layer zoo used by
//! the encoder, prompter, and decoders.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names
//! (`encoder.backbone.block0.attn.wq.weight`, ...). A forward pass binds the
//! current values into graph leaves via [`Binding`]; which names become
//! differentiable leaves is controlled by a [`TrainScope`]. This keeps
//! stage-wise freezing an explicit, auditable name-set operation.

use crate::autodiff::{concat, layer_norm, Gradients, Tensor};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Ordered name -> value map holding every model parameter.
#[derive(Clone)]
pub struct ParamSet {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    /// Register a new parameter; duplicate names are a construction bug.
    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> String {
        let prev = self.entries.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        name.to_string()
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// SHA-256 of the little-endian byte image of one parameter.
    pub fn sha256_hex(&self, name: &str) -> String {
        let v = self.get(name);
        let mut hasher = Sha256::new();
        for &x in v.iter() {
            hasher.update(x.to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Which parameters become differentiable leaves in a binding.
#[derive(Clone, Debug)]
pub enum TrainScope {
    /// Pure inference: everything is a constant.
    Frozen,
    /// Names matching any of these dotted prefixes train.
    Prefixes(Vec<String>),
}

impl TrainScope {
    pub fn prefixes<S: Into<String>>(list: impl IntoIterator<Item = S>) -> Self {
        TrainScope::Prefixes(list.into_iter().map(Into::into).collect())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self {
            TrainScope::Frozen => false,
            TrainScope::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// One forward pass worth of parameter leaves.
pub struct Binding {
    tensors: IndexMap<String, Tensor>,
}

impl Binding {
    pub fn new(params: &ParamSet, scope: &TrainScope) -> Self {
        let mut tensors = IndexMap::with_capacity(params.len());
        for (name, value) in params.iter() {
            let t = if scope.is_trainable(name) {
                Tensor::leaf(value.clone())
            } else {
                Tensor::constant(value.clone())
            };
            tensors.insert(name.to_string(), t);
        }
        Binding { tensors }
    }

    pub fn frozen(params: &ParamSet) -> Self {
        Binding::new(params, &TrainScope::Frozen)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients of trainable leaves, in parameter registration order.
    pub fn trainable_grads(&self, grads: &Gradients) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (name, tensor) in &self.tensors {
            if tensor.requires_grad() {
                if let Some(g) = grads.get(tensor) {
                    out.push((name.clone(), g.clone()));
                }
            }
        }
        out
    }
}

// ---- initializers ----

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

// ---- layers ----

/// `y = x @ W + b` for `x: [T, in]`, `W: [in, out]`.
#[derive(Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.register(
            &format!("{name}.weight"),
            xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, b: &Binding, x: &Tensor) -> Tensor {
        let y = x.matmul(b.get(&self.weight));
        match &self.bias {
            Some(bias) => y.add(b.get(bias)),
            None => y,
        }
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.register(&format!("{name}.gamma"), ones(&[dim])),
            beta: ps.register(&format!("{name}.beta"), zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, b: &Binding, x: &Tensor) -> Tensor {
        layer_norm(x, b.get(&self.gamma), b.get(&self.beta), self.eps)
    }
}

/// Two-layer MLP with GELU.
#[derive(Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, b: &Binding, x: &Tensor) -> Tensor {
        self.fc2.forward(b, &self.fc1.forward(b, x).gelu())
    }
}

/// Attention visibility rule.
#[derive(Clone, Copy, Debug)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query at global position `prefix + i` sees keys `0..=prefix + i`.
    /// `prefix = 0` is ordinary causal masking.
    CausalWithPrefix(usize),
}

/// Key/value tensors of an already-encoded prefix, per block.
pub struct BlockKv {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide evenly into heads");
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), dim, dim, true),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), dim, dim, true),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), dim, dim, true),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), dim, dim, true),
            heads,
            dim,
        }
    }

    fn split_heads(&self, x: &Tensor) -> Tensor {
        let t = x.shape()[0];
        x.reshape(&[t, self.heads, self.dim / self.heads])
            .permute(&[1, 0, 2])
    }

    fn mask_array(&self, mask: AttnMask, tq: usize, tk: usize) -> Option<ArrayD<f64>> {
        match mask {
            AttnMask::Full => None,
            AttnMask::CausalWithPrefix(prefix) => {
                let mut m = ArrayD::<f64>::zeros(IxDyn(&[1, tq, tk]));
                for i in 0..tq {
                    for j in 0..tk {
                        if j > prefix + i {
                            m[[0, i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                Some(m)
            }
        }
    }

    /// Scaled dot-product attention over pre-projected `[T, D]` tensors.
    fn attend(&self, b: &Binding, q: &Tensor, k: &Tensor, v: &Tensor, mask: AttnMask) -> Tensor {
        let (tq, tk) = (q.shape()[0], k.shape()[0]);
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let qh = self.split_heads(&q.scale(scale));
        let kh = self.split_heads(k);
        let vh = self.split_heads(v);
        let mut scores = qh.bmm(&kh.permute(&[0, 2, 1]));
        if let Some(m) = self.mask_array(mask, tq, tk) {
            scores = scores.add(&Tensor::constant(m));
        }
        let attn = scores.softmax(2);
        let out = attn
            .bmm(&vh)
            .permute(&[1, 0, 2])
            .reshape(&[tq, self.dim]);
        self.wo.forward(b, &out)
    }

    /// Self-attention; returns the output and the key/value pair so callers
    /// can extend the sequence later.
    pub fn forward_collect(&self, b: &Binding, x: &Tensor, mask: AttnMask) -> (Tensor, BlockKv) {
        let q = self.wq.forward(b, x);
        let k = self.wk.forward(b, x);
        let v = self.wv.forward(b, x);
        let out = self.attend(b, &q, &k, &v, mask);
        (out, BlockKv { k, v })
    }

    /// Attention of suffix tokens over `prefix kv + suffix kv`.
    pub fn forward_extend(&self, b: &Binding, x: &Tensor, prefix: &BlockKv) -> Tensor {
        let prefix_len = prefix.k.shape()[0];
        let q = self.wq.forward(b, x);
        let k = concat(0, &[prefix.k.clone(), self.wk.forward(b, x)]);
        let v = concat(0, &[prefix.v.clone(), self.wv.forward(b, x)]);
        self.attend(b, &q, &k, &v, AttnMask::CausalWithPrefix(prefix_len))
    }
}

/// Pre-norm transformer block.
#[derive(Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward(&self, b: &Binding, x: &Tensor, mask: AttnMask) -> Tensor {
        self.forward_collect(b, x, mask).0
    }

    pub fn forward_collect(&self, b: &Binding, x: &Tensor, mask: AttnMask) -> (Tensor, BlockKv) {
        let (a, kv) = self.attn.forward_collect(b, &self.ln1.forward(b, x), mask);
        let x = x.add(&a);
        let y = x.add(&self.mlp.forward(b, &self.ln2.forward(b, &x)));
        (y, kv)
    }

    pub fn forward_extend(&self, b: &Binding, x: &Tensor, prefix: &BlockKv) -> Tensor {
        let a = self.attn.forward_extend(b, &self.ln1.forward(b, x), prefix);
        let x = x.add(&a);
        x.add(&self.mlp.forward(b, &self.ln2.forward(b, &x)))
    }
}

/// Stride-1 convolution with `same` padding.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub pad: (usize, usize),
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.register(
            &format!("{name}.weight"),
            xavier_uniform(
                rng,
                &[out_ch, in_ch, k, k],
                in_ch * k * k,
                out_ch * k * k,
            ),
        );
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), zeros(&[out_ch])));
        Conv2d {
            weight,
            bias,
            pad: (k / 2, k / 2),
        }
    }

    pub fn forward(&self, b: &Binding, x: &Tensor) -> Tensor {
        crate::autodiff::conv2d(
            x,
            b.get(&self.weight),
            self.bias.as_ref().map(|n| b.get(n)),
            self.pad,
        )
    }
}

/// Learnable 2x upsampling (transposed convolution, kernel 2 stride 2).
#[derive(Clone)]
pub struct Deconv2x {
    pub weight: String,
    pub bias: Option<String>,
}

impl Deconv2x {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.register(
            &format!("{name}.weight"),
            xavier_uniform(rng, &[in_ch, out_ch, 2, 2], in_ch, out_ch * 4),
        );
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), zeros(&[out_ch])));
        Deconv2x { weight, bias }
    }

    pub fn forward(&self, b: &Binding, x: &Tensor) -> Tensor {
        crate::autodiff::deconv2x(x, b.get(&self.weight), self.bias.as_ref().map(|n| b.get(n)))
    }
}

// ---- optimizer ----

/// Adam with bias correction. State is keyed by parameter name and applied
/// in a deterministic order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, ArrayD<f64>)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let mut value = params.get(name).clone();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            params.set(name, value);
        }
    }
}
