//! Layer normalisation, feed-forward, self-attention, transformer blocks
//! and the LSTM used by the utterance gate.

mod attention;
mod lstm;

pub use attention::{MultiHeadAttention, TransformerBlock};
pub use lstm::LstmCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoleError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Per-forward state: dropout rate and the RNG drawing masks. Evaluation
/// contexts carry no RNG and never drop.
#[derive(Debug)]
pub struct ForwardCtx {
    pub dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.constant(&Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(vec![d_in, d_out], bound, rng),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(vec![d], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Two-layer position-wise network `W2·relu(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub hidden: Linear,
    pub proj: Linear,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Ffn {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, d_ff, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d_ff, d_model, rng)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.hidden.d_in
    }

    pub fn d_ff(&self) -> usize {
        self.hidden.d_out
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let cols = g.shape(x).last().copied().unwrap_or(0);
        if cols != self.d_model() {
            return Err(MoleError::dim("ffn", g.shape(x), &[self.d_model()]));
        }
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.proj.forward(g, h)
    }

    /// Multiply-adds for evaluating the FFN on `rows` positions.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * 2 * self.d_model() * self.d_ff()) as u64
    }

    pub fn num_params(d_model: usize, d_ff: usize) -> usize {
        d_model * d_ff + d_ff + d_ff * d_model + d_model
    }
}

/// Sinusoidal position table `[t × d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(vec![t, d]);
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            pe.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
