//! Transformer building blocks shared by the frozen encoders and the
//! adapters' lightweight transformer.

use crate::numerics::{seeded_init, Graph, InitScheme, NumericsError, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;
/// Additive attention bias for masked keys. Finite, so softmax inputs stay finite.
pub const MASK_NEG: f64 = -1e9;

/// Parameter paths and head count of one pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub prefix: String,
    pub heads: usize,
}

impl BlockParams {
    pub fn new(prefix: impl Into<String>, heads: usize) -> Self {
        Self {
            prefix: prefix.into(),
            heads,
        }
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    /// Relative names, shapes and init schemes of a `d`-wide layer with FFN
    /// hidden width `hidden`.
    pub fn specs(d: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>, InitScheme)> {
        vec![
            ("ln1.g", vec![d], InitScheme::Ones),
            ("ln1.b", vec![d], InitScheme::Zeros),
            ("attn.qkv.w", vec![d, 3 * d], InitScheme::ScaledNormal),
            ("attn.q.b", vec![d], InitScheme::Zeros),
            ("attn.v.b", vec![d], InitScheme::Zeros),
            ("attn.out.w", vec![d, d], InitScheme::ScaledNormal),
            ("attn.out.b", vec![d], InitScheme::Zeros),
            ("ln2.g", vec![d], InitScheme::Ones),
            ("ln2.b", vec![d], InitScheme::Zeros),
            ("mlp.fc1.w", vec![d, hidden], InitScheme::ScaledNormal),
            ("mlp.fc1.b", vec![hidden], InitScheme::Zeros),
            ("mlp.fc2.w", vec![hidden, d], InitScheme::ScaledNormal),
            ("mlp.fc2.b", vec![d], InitScheme::Zeros),
        ]
    }

    /// Inserts every tensor of the layer into `store`.
    pub fn init(&self, store: &mut ParamStore, d: usize, hidden: usize, seed: u64, tunable: bool) {
        for (name, shape, scheme) in Self::specs(d, hidden) {
            let path = self.p(name);
            let t = seeded_init(&shape, scheme, seed, &path);
            store.insert(path, t, tunable);
        }
    }

    /// Scalar count of a `d`-wide layer with FFN hidden width `hidden`.
    pub fn count(d: usize, hidden: usize) -> usize {
        2 * d + (d * 3 * d + 2 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    }

    pub fn layer_norm1(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        layer_norm(store, g, &self.p("ln1"), x)
    }

    pub fn layer_norm2(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        layer_norm(store, g, &self.p("ln2"), x)
    }

    /// Multi-head self-attention over axis -2 of `x: [.., T, d]`.
    /// `mask`, when given, is an additive bias broadcast against `[.., T, T]`.
    ///
    /// Keys carry no bias: it would shift every logit of a softmax row by the
    /// same amount and cancel.
    pub fn attention(&self, store: &ParamStore, g: &mut Graph, x: Var, mask: Option<Var>) -> Result<Var, NumericsError> {
        let d = *g.shape(x).last().unwrap();
        let dh = d / self.heads;
        let w = store.bind(g, &self.p("attn.qkv.w"))?;
        let qkv = g.matmul(x, w)?;
        let axis = g.shape(qkv).len() - 1;
        let q_all = g.slice(qkv, axis, 0, d)?;
        let qb = store.bind(g, &self.p("attn.q.b"))?;
        let q_all = g.add(q_all, qb)?;
        let k_all = g.slice(qkv, axis, d, 2 * d)?;
        let v_all = g.slice(qkv, axis, 2 * d, 3 * d)?;
        let vb = store.bind(g, &self.p("attn.v.b"))?;
        let v_all = g.add(v_all, vb)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(q_all, axis, h * dh, (h + 1) * dh)?;
            let k = g.slice(k_all, axis, h * dh, (h + 1) * dh)?;
            let v = g.slice(v_all, axis, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let p = g.softmax(scores)?;
            outs.push(g.matmul(p, v)?);
        }
        let o = g.concat(&outs, axis)?;
        linear(store, g, &self.p("attn.out"), o)
    }

    /// Two-layer GELU MLP.
    pub fn mlp(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let h = linear(store, g, &self.p("mlp.fc1"), x)?;
        let h = g.gelu(h);
        linear(store, g, &self.p("mlp.fc2"), h)
    }

    /// `h = x + MHSA(LN1(x))`.
    pub fn attention_residual(&self, store: &ParamStore, g: &mut Graph, x: Var, mask: Option<Var>) -> Result<Var, NumericsError> {
        let n = self.layer_norm1(store, g, x)?;
        let a = self.attention(store, g, n, mask)?;
        g.add(x, a)
    }

    /// Full pre-norm layer without any branch: `h + FFN(LN2(h))`.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var, mask: Option<Var>) -> Result<Var, NumericsError> {
        let h = self.attention_residual(store, g, x, mask)?;
        let n = self.layer_norm2(store, g, h)?;
        let f = self.mlp(store, g, n)?;
        g.add(h, f)
    }
}

/// `x · W + b` with parameters `{prefix}.w`, `{prefix}.b`.
pub fn linear(store: &ParamStore, g: &mut Graph, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let w = store.bind(g, &format!("{prefix}.w"))?;
    let b = store.bind(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm(store: &ParamStore, g: &mut Graph, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let gamma = store.bind(g, &format!("{prefix}.g"))?;
    let beta = store.bind(g, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}
