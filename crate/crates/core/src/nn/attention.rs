use rand_chacha::ChaCha8Rng;

use super::{Ffn, ForwardCtx, LayerNorm, Linear};
use crate::error::{MoleError, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(MoleError::Config(format!(
                "d_model {d_model} not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng)?,
            heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.q.d_in
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, length: usize) -> Result<Var> {
        Ok(self.forward_with_weights(g, x, length)?.0)
    }

    /// Also returns each head's `[T × T]` attention matrix. Keys at or past
    /// `length` receive weight exactly 0.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        length: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model() {
            return Err(MoleError::dim("mhsa", &shape, &[self.d_model()]));
        }
        let t = shape[0];
        if length == 0 || length > t {
            return Err(MoleError::Contract(format!(
                "attention length {length} outside 1..={t}"
            )));
        }
        let dh = self.d_model() / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let mask = (length < t).then(|| {
            let mut m = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                for j in length..t {
                    m.data_mut()[i * t + j] = f64::NEG_INFINITY;
                }
            }
            g.constant(&m)
        });
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale)?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s)?;
            outs.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((self.out.forward(g, cat)?, weights))
    }

    pub fn num_params(d_model: usize) -> usize {
        4 * Linear::num_params(d_model, d_model)
    }
}

/// Post-norm transformer encoder block:
/// `x1 = LN(x + attn(x))`, `y = LN(x1 + ffn(x1))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ffn: Ffn,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d_model, d_ff, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        length: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let a = self.attn.forward(g, x, length)?;
        let a = ctx.dropout(g, a)?;
        let x1 = g.add(x, a)?;
        let x1 = self.ln1.forward(g, x1)?;
        let f = self.ffn.forward(g, x1)?;
        let f = ctx.dropout(g, f)?;
        let x2 = g.add(x1, f)?;
        self.ln2.forward(g, x2)
    }

    pub fn num_params(d_model: usize, d_ff: usize) -> usize {
        MultiHeadAttention::num_params(d_model) + Ffn::num_params(d_model, d_ff) + 4 * d_model
    }
}
