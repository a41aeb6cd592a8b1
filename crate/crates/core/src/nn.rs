//! Differentiable building blocks composed from [`Graph`] ops: parameter
//! storage, initializers, and the layer types the segmentation model is
//! assembled from. Layers hold parameter *names*; values live in a
//! [`ParamStore`] and are re-leafed onto the tape each forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Grads, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-6;

// ── Parameter store ──────────────────────────────────────────────────────

/// Named parameter tensors with matching gradient buffers. Iteration is in
/// insertion order, which keeps optimizer updates and checkpoints
/// deterministic.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::arg(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::arg(format!("unknown parameter: {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter: {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: shape {:?} cannot replace {:?}",
                value.shape(),
                self.values[i].shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.grads[i])
            .ok_or_else(|| Error::arg(format!("unknown parameter: {name}")))
    }

    pub fn add_grad(&mut self, name: &str, delta: &Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter: {name}")))?;
        if self.grads[i].shape() != delta.shape() {
            return Err(Error::dim(format!(
                "gradient for {name}: shape {:?} vs parameter {:?}",
                delta.shape(),
                self.grads[i].shape()
            )));
        }
        self.grads[i].add_assign(delta);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::ZERO);
        }
    }

    /// Zero every parameter whose name starts with `prefix` (test hook for
    /// the zero-weight identities).
    pub fn zero_prefixed(&mut self, prefix: &str) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.fill(T::ZERO);
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn iter_mut_with_grads(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter_mut())
            .zip(self.grads.iter())
            .map(|((n, v), g)| (n, v, g))
    }

    pub fn n_tensors(&self) -> usize {
        self.values.len()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            out.insert(name, value.cast()).unwrap();
        }
        out
    }
}

/// Leaf a parameter onto the tape under its store name.
pub fn param_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
) -> Result<NodeId> {
    Ok(g.named_leaf(store.get(name)?.clone(), name))
}

/// Push every named leaf's gradient from a backward pass into the store.
pub fn accumulate_param_grads<T: Scalar>(
    g: &Graph<T>,
    grads: &Grads<T>,
    store: &mut ParamStore<T>,
) -> Result<()> {
    for (id, name) in g.named_leaves() {
        if let Some(gr) = grads.get(*id) {
            store.add_grad(name, gr)?;
        }
    }
    Ok(())
}

// ── Initializers ─────────────────────────────────────────────────────────

/// One standard-normal draw (Box-Muller on the given stream).
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// i.i.d. N(0, sigma²) truncated to [-2·sigma, 2·sigma] by rejection.
pub fn trunc_normal<T: Scalar>(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = gauss(rng) * sigma;
            if v.abs() <= 2.0 * sigma {
                return T::from_f64(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// He-style N(0, sqrt(2 / fan_in)) init for conv/ReLU paths.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(gauss(rng) * std)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Learnable positional offsets, truncated-normal initialized (sigma 0.02).
pub fn positional_table<T: Scalar>(n_tokens: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    trunc_normal(&[n_tokens, dim], 0.02, rng)
}

// ── Layers ───────────────────────────────────────────────────────────────

/// Dotted name prefix for parameter registration.
#[derive(Clone)]
pub struct Scope(String);

impl Scope {
    pub fn root(name: &str) -> Self {
        Scope(name.to_string())
    }

    pub fn child(&self, name: &str) -> Scope {
        Scope(format!("{}.{}", self.0, name))
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.0, leaf)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// x · W + b over token rows.
pub struct Linear {
    w: String,
    b: String,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = scope.name("w");
        let b = scope.name("b");
        store.insert(&w, trunc_normal(&[in_dim, out_dim], 0.02, rng))?;
        store.insert(&b, Tensor::zeros(&[out_dim]))?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = param_node(g, store, &self.w)?;
        let b = param_node(g, store, &self.b)?;
        let y = g.matmul(x, w)?;
        g.add_bias_rows(y, b)
    }
}

pub struct Conv2d {
    w: String,
    b: String,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = scope.name("w");
        let b = scope.name("b");
        store.insert(&w, he_normal(&[cout, cin, k, k], cin * k * k, rng))?;
        store.insert(&b, Tensor::zeros(&[cout]))?;
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = param_node(g, store, &self.w)?;
        let b = param_node(g, store, &self.b)?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-sample normalization over (C, H, W) with per-channel affine.
pub struct Norm2d {
    gamma: String,
    beta: String,
}

impl Norm2d {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        channels: usize,
    ) -> Result<Self> {
        let gamma = scope.name("gamma");
        let beta = scope.name("beta");
        store.insert(&gamma, Tensor::full(&[channels], T::ONE))?;
        store.insert(&beta, Tensor::zeros(&[channels]))?;
        Ok(Norm2d { gamma, beta })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = param_node(g, store, &self.gamma)?;
        let beta = param_node(g, store, &self.beta)?;
        g.norm2d(x, gamma, beta, NORM_EPS)
    }
}

pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, dim: usize) -> Result<Self> {
        let gamma = scope.name("gamma");
        let beta = scope.name("beta");
        store.insert(&gamma, Tensor::full(&[dim], T::ONE))?;
        store.insert(&beta, Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = param_node(g, store, &self.gamma)?;
        let beta = param_node(g, store, &self.beta)?;
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// Multi-head self-attention: per head h of width d = D / n_heads,
/// softmax(Q_h·K_hᵀ / sqrt(d))·V_h, heads concatenated and output-projected.
pub struct Msa {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    dim: usize,
    n_heads: usize,
}

impl Msa {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::config(format!(
                "embedding dim {dim} not divisible by {n_heads} heads"
            )));
        }
        Ok(Msa {
            wq: Linear::init(store, &scope.child("q"), dim, dim, rng)?,
            wk: Linear::init(store, &scope.child("k"), dim, dim, rng)?,
            wv: Linear::init(store, &scope.child("v"), dim, dim, rng)?,
            wo: Linear::init(store, &scope.child("o"), dim, dim, rng)?,
            dim,
            n_heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        Ok(self.forward_with_attn(g, store, x)?.0)
    }

    /// Forward pass that also returns the per-head attention matrices
    /// (each (N, N), rows softmax-normalized).
    pub fn forward_with_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dim(format!(
                "msa wants (N, {}), got {:?}",
                self.dim, s
            )));
        }
        let d_head = self.dim / self.n_heads;
        let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
        let q = self.wq.forward(g, store, x)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut attns = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scaled)?;
            attns.push(attn);
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let out = self.wo.forward(g, store, cat)?;
        Ok((out, attns))
    }
}

/// Two-layer token MLP: linear(D → 4D) → GELU → linear(4D → D).
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::init(store, &scope.child("fc1"), dim, 4 * dim, rng)?,
            fc2: Linear::init(store, &scope.child("fc2"), 4 * dim, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// One pre-norm transformer module:
/// x ← x + MSA(LN(x)); x ← x + MLP(LN(x)).
pub struct TransformerModule {
    ln1: LayerNorm,
    msa: Msa,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerModule {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerModule {
            ln1: LayerNorm::init(store, &scope.child("ln1"), dim)?,
            msa: Msa::init(store, &scope.child("msa"), dim, n_heads, rng)?,
            ln2: LayerNorm::init(store, &scope.child("ln2"), dim)?,
            mlp: Mlp::init(store, &scope.child("mlp"), dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        Ok(self.forward_with_attn(g, store, x)?.0)
    }

    pub fn forward_with_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let n = self.ln1.forward(g, store, x)?;
        let (a, attns) = self.msa.forward_with_attn(g, store, n)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, n)?;
        Ok((g.add(x, m)?, attns))
    }
}

/// Residual block: y = relu(F(x) + shortcut(x)) with
/// F = conv(stride) → norm → relu → conv3x3(1) → norm. The shortcut is the
/// identity when shape-preserving, otherwise a strided projection conv.
///
/// Output dims must divide exactly, so the strided convs use even kernels
/// (4x4 for the main path, 2x2 for the shortcut); a 3x3 stride-2 conv has
/// no integral output on even inputs.
pub struct ResidualBlock {
    conv1: Conv2d,
    n1: Norm2d,
    conv2: Conv2d,
    n2: Norm2d,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::arg(format!(
                "residual block stride must be 1 or 2, got {stride}"
            )));
        }
        let k1 = if stride == 2 { 4 } else { 3 };
        let conv1 = Conv2d::init(store, &scope.child("conv1"), cin, cout, k1, stride, 1, rng)?;
        let n1 = Norm2d::init(store, &scope.child("n1"), cout)?;
        let conv2 = Conv2d::init(store, &scope.child("conv2"), cout, cout, 3, 1, 1, rng)?;
        let n2 = Norm2d::init(store, &scope.child("n2"), cout)?;
        let shortcut = if stride != 1 || cin != cout {
            let k = if stride == 2 { 2 } else { 1 };
            Some(Conv2d::init(
                store,
                &scope.child("shortcut"),
                cin,
                cout,
                k,
                stride,
                0,
                rng,
            )?)
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            n1,
            conv2,
            n2,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let f = self.conv1.forward(g, store, x)?;
        let f = self.n1.forward(g, store, f)?;
        let f = g.relu(f)?;
        let f = self.conv2.forward(g, store, f)?;
        let f = self.n2.forward(g, store, f)?;
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(g, store, x)?,
            None => x,
        };
        if g.shape(f) != g.shape(sc) {
            return Err(Error::dim(format!(
                "residual branch {:?} vs shortcut {:?}",
                g.shape(f),
                g.shape(sc)
            )));
        }
        let y = g.add(f, sc)?;
        g.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn store_rejects_duplicates_and_tracks_grads() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2, 2])).is_err());
        s.add_grad("a", &Tensor::full(&[2, 2], 1.5)).unwrap();
        assert_eq!(s.grad("a").unwrap().data()[0], 1.5);
        s.zero_grads();
        assert_eq!(s.grad("a").unwrap().data()[0], 0.0);
        assert_eq!(s.param_count(), 4);
    }

    #[test]
    fn trunc_normal_respects_bounds_and_seed() {
        let t1: Tensor<f64> = trunc_normal(&[64, 16], 0.02, &mut rng(3));
        let t2: Tensor<f64> = trunc_normal(&[64, 16], 0.02, &mut rng(3));
        assert_eq!(t1, t2);
        assert!(t1.data().iter().all(|v| v.abs() <= 0.04));
        let t3: Tensor<f64> = trunc_normal(&[64, 16], 0.02, &mut rng(4));
        assert_ne!(t1, t3);
    }

    #[test]
    fn trunc_normal_mean_near_zero() {
        let t: Tensor<f64> = trunc_normal(&[1_000_000], 0.02, &mut rng(5));
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 5e-4, "mean {mean}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::init(&mut store, &Scope::root("ln"), 2).unwrap();
        let mut g = Graph::new();
        // constant token → zeros; [1, 3] → ±1/sqrt(1 + eps)
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 5.0, 1.0, 3.0]).unwrap());
        let y = ln.forward(&mut g, &store, x).unwrap();
        let out = g.value(y).data();
        assert!(out[0].abs() < 1e-9 && out[1].abs() < 1e-9);
        let expect = 1.0 / (1.0f64 + NORM_EPS).sqrt();
        assert!((out[2] + expect).abs() < 1e-12);
        assert!((out[3] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::init(&mut store, &Scope::root("ln"), 8).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(trunc_normal(&[4, 8], 1.0, &mut rng(9)));
        let y = ln.forward(&mut g, &store, x).unwrap();
        for r in 0..4 {
            let row = &g.value(y).data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn msa_single_token_with_identity_projections() {
        let dim = 4;
        let mut store = ParamStore::<f64>::new();
        let msa = Msa::init(&mut store, &Scope::root("msa"), dim, 2, &mut rng(1)).unwrap();
        // V and O projections = identity, biases zero
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        store.set("msa.v.w", eye.clone()).unwrap();
        store.set("msa.o.w", eye).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 4], vec![0.3, -0.8, 1.2, 0.05]).unwrap());
        let (y, attns) = msa.forward_with_attn(&mut g, &store, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for attn in attns {
            assert_eq!(g.value(attn).data(), &[1.0]);
        }
    }

    #[test]
    fn msa_attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let msa = Msa::init(&mut store, &Scope::root("msa"), 8, 4, &mut rng(2)).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(trunc_normal(&[5, 8], 1.0, &mut rng(3)));
        let (_, attns) = msa.forward_with_attn(&mut g, &store, x).unwrap();
        assert_eq!(attns.len(), 4);
        for attn in attns {
            assert_eq!(g.shape(attn), &[5, 5]);
            for r in 0..5 {
                let sum: f64 = g.value(attn).data()[r * 5..(r + 1) * 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // the oracle is explicit loops on purpose
    fn msa_matches_brute_force_attention_oracle() {
        // 3 random tokens, 1 head, f64, against an independent dense
        // recomputation with explicit loops
        let dim = 4;
        let n = 3;
        let mut store = ParamStore::<f64>::new();
        let msa = Msa::init(&mut store, &Scope::root("msa"), dim, 1, &mut rng(31)).unwrap();
        for name in ["msa.q.b", "msa.k.b", "msa.v.b", "msa.o.b"] {
            store
                .set(name, trunc_normal(&[dim], 0.1, &mut rng(32)))
                .unwrap();
        }
        let x = trunc_normal::<f64>(&[n, dim], 0.9, &mut rng(33));
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let y = msa.forward(&mut g, &store, xid).unwrap();

        let mat = |name: &str| store.get(name).unwrap().data().to_vec();
        let lin = |input: &[Vec<f64>], w: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
            input
                .iter()
                .map(|row| {
                    (0..dim)
                        .map(|j| {
                            let mut acc = b[j];
                            for k in 0..dim {
                                acc += row[k] * w[k * dim + j];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| x.data()[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let q = lin(&rows, &mat("msa.q.w"), &mat("msa.q.b"));
        let k = lin(&rows, &mat("msa.k.w"), &mat("msa.k.b"));
        let v = lin(&rows, &mat("msa.v.w"), &mat("msa.v.b"));
        let scale = 1.0 / (dim as f64).sqrt();
        let mut heads = vec![vec![0.0; dim]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dim).map(|d| q[i][d] * k[j][d]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / denom;
                for d in 0..dim {
                    heads[i][d] += a * v[j][d];
                }
            }
        }
        let expect = lin(&heads, &mat("msa.o.w"), &mat("msa.o.b"));
        for i in 0..n {
            for d in 0..dim {
                let got = g.value(y).data()[i * dim + d];
                assert!(
                    (got - expect[i][d]).abs() < 1e-12,
                    "token {i} dim {d}: {got} vs {}",
                    expect[i][d]
                );
            }
        }
    }

    #[test]
    fn msa_rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        assert!(Msa::init(&mut store, &Scope::root("m"), 6, 4, &mut rng(0)).is_err());
    }

    #[test]
    fn mlp_zero_weights_zero_output_and_shape() {
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::init(&mut store, &Scope::root("mlp"), 6, &mut rng(7)).unwrap();
        store.zero_prefixed("mlp");
        let mut g = Graph::new();
        let x = g.leaf(trunc_normal(&[3, 6], 1.0, &mut rng(8)));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transformer_module_zeroed_subblocks_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let block =
            TransformerModule::init(&mut store, &Scope::root("blk"), 8, 2, &mut rng(4)).unwrap();
        store.zero_prefixed("blk.msa");
        store.zero_prefixed("blk.mlp");
        let mut g = Graph::new();
        let x = g.leaf(trunc_normal(&[4, 8], 1.0, &mut rng(5)));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn residual_block_zero_branch_is_activation() {
        let mut store = ParamStore::<f64>::new();
        let block =
            ResidualBlock::init(&mut store, &Scope::root("res"), 3, 3, 1, &mut rng(6)).unwrap();
        store.zero_prefixed("res.conv1");
        store.zero_prefixed("res.conv2");
        store.zero_prefixed("res.n1");
        store.zero_prefixed("res.n2");
        let mut g = Graph::new();
        let x = g.leaf(trunc_normal(&[1, 3, 4, 4], 1.0, &mut rng(7)));
        let y = block.forward(&mut g, &store, x).unwrap();
        let expect = g.value(x).map(|v| v.max(0.0));
        assert_eq!(g.value(y).data(), expect.data());
    }

    #[test]
    fn residual_block_stride_two_halves_spatial_dims() {
        let mut store = ParamStore::<f64>::new();
        let block =
            ResidualBlock::init(&mut store, &Scope::root("res"), 8, 8, 2, &mut rng(8)).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 8, 32, 32]));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 16, 16]);
    }
}
