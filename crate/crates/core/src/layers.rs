//! Parameterized building blocks shared by both stages. Each layer records
//! its parameter handles at construction and runs on a bound graph.

use rand::Rng;

use crate::numerics::{xavier_uniform, Array, Bound, Graph, NumericsError, ParamId, ParamSet, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Flatten leading axes to `[rows, last]`, apply `f`, restore leading axes.
fn on_rows(g: &mut Graph, x: Var, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() == 2 {
        return f(g, x);
    }
    let last = *shape.last().unwrap();
    let rows = shape.iter().product::<usize>() / last;
    let flat = g.reshape(x, &[rows, last])?;
    let y = f(g, flat)?;
    let out = g.shape(y)[1];
    let mut new_shape = shape;
    *new_shape.last_mut().unwrap() = out;
    g.reshape(y, &new_shape)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = params.add(format!("{name}.w"), xavier_uniform(rng, &[input, output], input, output));
        let bias = params.add(format!("{name}.b"), Array::zeros(&[output]));
        Linear { weight, bias, input, output }
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, b: &Bound, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, bias) = (b.var(self.weight), b.var(self.bias));
        on_rows(g, x, |g, x| {
            let y = g.matmul(x, w)?;
            g.add_bias(y, bias)
        })
    }

    /// Set weight and bias to zero.
    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).data_mut().fill(0.0);
        params.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            first: Linear::new(params, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(params, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, b: &Bound, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.first.forward(b, g, x)?;
        let h = g.gelu(h)?;
        self.second.forward(b, g, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
    pub dropout: f64,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        width: usize,
        heads: usize,
        output: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> std::result::Result<Self, String> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(format!("attention width {width} is not divisible by {heads} heads"));
        }
        let wq = params.add(format!("{name}.wq"), xavier_uniform(rng, &[query_dim, width], query_dim, width));
        let wk = params.add(format!("{name}.wk"), xavier_uniform(rng, &[kv_dim, width], kv_dim, width));
        let wv = params.add(format!("{name}.wv"), xavier_uniform(rng, &[kv_dim, width], kv_dim, width));
        let wo = Linear::new(params, &format!("{name}.wo"), width, output, rng);
        Ok(CrossAttention { wq, wk, wv, wo, heads, width, dropout })
    }

    /// `[B, L, D]` to `[B*heads, L, width/heads]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let dk = self.width / self.heads;
        let x = g.reshape(x, &[s[0], s[1], self.heads, dk])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0] * self.heads, s[1], dk])
    }

    /// Attention probabilities `[B*heads, Lq, Lk]` and the attended values
    /// before the output projection, `[B, Lq, width]`.
    pub fn attend(&self, b: &Bound, g: &mut Graph, query: Var, kv: Var) -> Result<(Var, Var)> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(kv).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(NumericsError::Shape { op: "cross_attention", lhs: qs, rhs: ks });
        }
        let (batch, lq) = (qs[0], qs[1]);
        let (wq, wk, wv) = (b.var(self.wq), b.var(self.wk), b.var(self.wv));
        let q = on_rows(g, query, |g, x| g.matmul(x, wq))?;
        let k = on_rows(g, kv, |g, x| g.matmul(x, wk))?;
        let v = on_rows(g, kv, |g, x| g.matmul(x, wv))?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let dk = (self.width / self.heads) as f64;
        let scores = g.matmul_t(q, false, k, true)?;
        let scores = g.scale(scores, 1.0 / dk.sqrt())?;
        let probs = g.softmax(scores)?;
        let dropped = g.dropout(probs, self.dropout)?;
        let ctx = g.matmul(dropped, v)?;
        let ctx = g.reshape(ctx, &[batch, self.heads, lq, self.width / self.heads])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, lq, self.width])?;
        Ok((probs, ctx))
    }

    /// `query [B, Lq, Dq]`, `kv [B, Lk, Dkv]` to `[B, Lq, output]`.
    pub fn forward(&self, b: &Bound, g: &mut Graph, query: Var, kv: Var) -> Result<Var> {
        let (_, ctx) = self.attend(b, g, query, kv)?;
        self.wo.forward(b, g, ctx)
    }
}
