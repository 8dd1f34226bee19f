use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// Parameter indices of one attention block: multi-head attention from a
/// query stream onto a key/value stream, then a two-layer GELU feed-forward.
/// Post-norm: `y = LN(q + attn)`, `out = LN(y + ffn(y))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_dim: usize,
    pub kv_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Parameter count of one block.
pub fn block_params(q_dim: usize, kv_dim: usize, inner: usize, hidden: usize) -> usize {
    (q_dim + 1) * inner + 2 * (kv_dim + 1) * inner + (inner + 1) * q_dim + 4 * q_dim + (q_dim + 1) * hidden + (hidden + 1) * q_dim
}

pub(crate) fn linear_params(
    p: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut impl Rng,
) -> (usize, usize) {
    let w = p.push(format!("{name}.w"), Tensor::trunc_normal(&[fan_in, fan_out], std, rng));
    let b = p.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut ParamSet,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        heads: usize,
        head_dim: usize,
        hidden: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = heads * head_dim;
        let (wq, bq) = linear_params(p, &format!("{name}.q"), q_dim, inner, std, rng);
        let (wk, bk) = linear_params(p, &format!("{name}.k"), kv_dim, inner, std, rng);
        let (wv, bv) = linear_params(p, &format!("{name}.v"), kv_dim, inner, std, rng);
        let (wo, bo) = linear_params(p, &format!("{name}.o"), inner, q_dim, std, rng);
        let ln1_g = p.push(format!("{name}.ln1.g"), Tensor::full(&[q_dim], 1.0));
        let ln1_b = p.push(format!("{name}.ln1.b"), Tensor::zeros(&[q_dim]));
        let (w1, b1) = linear_params(p, &format!("{name}.ff1"), q_dim, hidden, std, rng);
        let (w2, b2) = linear_params(p, &format!("{name}.ff2"), hidden, q_dim, std, rng);
        let ln2_g = p.push(format!("{name}.ln2.g"), Tensor::full(&[q_dim], 1.0));
        let ln2_b = p.push(format!("{name}.ln2.b"), Tensor::zeros(&[q_dim]));
        AttnBlock {
            q_dim,
            kv_dim,
            heads,
            head_dim,
            hidden,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
        }
    }

    /// Every parameter index owned by the block.
    pub fn indices(&self) -> [usize; 16] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g, self.ln1_b, self.w1,
            self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]
    }

    /// Attention probabilities `[heads, nq, nk]`.
    pub fn attention_weights(&self, g: &mut Graph, v: &[Var], q: Var, kv: Var) -> Result<Var> {
        let (qh, kh) = self.heads_qk(g, v, q, kv)?;
        self.probs(g, qh, kh)
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let x = g.reshape(x, &[rows, self.heads, self.head_dim])?;
        g.permute(x, &[1, 0, 2])
    }

    fn heads_qk(&self, g: &mut Graph, v: &[Var], q: Var, kv: Var) -> Result<(Var, Var)> {
        let qp = linear(g, q, v[self.wq], v[self.bq])?;
        let kp = linear(g, kv, v[self.wk], v[self.bk])?;
        let qh = self.split_heads(g, qp)?;
        let kh = self.split_heads(g, kp)?;
        Ok((qh, kh))
    }

    fn probs(&self, g: &mut Graph, qh: Var, kh: Var) -> Result<Var> {
        let kt = g.transpose(kh)?;
        let scores = g.batch_matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        g.softmax(scores)
    }

    /// `q[nq, q_dim]` attending to `kv[nk, kv_dim]` → `[nq, q_dim]`.
    pub fn forward(&self, g: &mut Graph, v: &[Var], q: Var, kv: Var) -> Result<Var> {
        let nq = g.shape(q)[0];
        let (qh, kh) = self.heads_qk(g, v, q, kv)?;
        let a = self.probs(g, qh, kh)?;
        let vp = linear(g, kv, v[self.wv], v[self.bv])?;
        let vh = self.split_heads(g, vp)?;
        let ctx = g.batch_matmul(a, vh)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[nq, self.heads * self.head_dim])?;
        let attn = linear(g, ctx, v[self.wo], v[self.bo])?;
        let y = g.add(q, attn)?;
        let y = g.layer_norm(y, v[self.ln1_g], v[self.ln1_b])?;
        let h = linear(g, y, v[self.w1], v[self.b1])?;
        let h = g.gelu(h);
        let f = linear(g, h, v[self.w2], v[self.b2])?;
        let out = g.add(y, f)?;
        g.layer_norm(out, v[self.ln2_g], v[self.ln2_b])
    }
}
