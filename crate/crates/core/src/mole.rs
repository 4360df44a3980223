//! Mixture of language experts: one utterance-level LSTM gate picks a single
//! language-specific expert, and a language-agnostic expert is mixed in with
//! the complement of the gate's confidence.

use rand_chacha::ChaCha8Rng;

use crate::error::{MoleError, Result};
use crate::losses::argmax;
use crate::nn::{Ffn, Linear, LstmCell};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct MoleLayer {
    pub lse: Vec<Ffn>,
    pub lae: Ffn,
    pub gate_lstm: LstmCell,
    pub gate_fc: Linear,
    pub use_lae: bool,
    pub use_calibration: bool,
}

/// Routing decision for one utterance at one layer.
#[derive(Clone, Debug)]
pub struct GatingDecision {
    /// Gate hidden embedding `[H]`.
    pub z_r: Var,
    pub posterior: Var,
    /// Scalar node holding `posterior[selected]`.
    pub gamma: Var,
    pub selected: usize,
    pub posterior_values: Vec<f64>,
    pub gamma_value: f64,
}

/// Combination weights `(selected expert, agnostic expert)` for a gate
/// confidence `gamma`.
pub fn combination_weights(gamma: f64, use_lae: bool, use_calibration: bool) -> (f64, f64) {
    match (use_lae, use_calibration) {
        (false, _) => (gamma, 0.0),
        (true, true) => (gamma, 1.0 - gamma),
        (true, false) => (gamma, 1.0),
    }
}

impl MoleLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        num_experts: usize,
        gate_hidden: usize,
        use_lae: bool,
        use_calibration: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(MoleError::Config(
                "MoLE layer needs at least one expert".into(),
            ));
        }
        let lse = (0..num_experts)
            .map(|i| Ffn::new(store, &format!("{name}.lse{i}"), d_model, d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(MoleLayer {
            lse,
            lae: Ffn::new(store, &format!("{name}.lae"), d_model, d_ff, rng)?,
            gate_lstm: LstmCell::new(
                store,
                &format!("{name}.gate.lstm"),
                d_model,
                gate_hidden,
                rng,
            )?,
            gate_fc: Linear::new(
                store,
                &format!("{name}.gate.fc"),
                gate_hidden,
                num_experts,
                rng,
            )?,
            use_lae,
            use_calibration,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.lse.len()
    }

    pub fn num_params(d_model: usize, d_ff: usize, n: usize, gate_hidden: usize) -> usize {
        (n + 1) * Ffn::num_params(d_model, d_ff)
            + LstmCell::num_params(d_model, gate_hidden)
            + Linear::num_params(gate_hidden, n)
    }

    pub fn gate(&self, g: &mut Graph<'_>, x: Var, length: usize) -> Result<GatingDecision> {
        self.gate_scaled(g, x, length, 1.0)
    }

    /// Gate with logits divided by `temperature`.
    pub fn gate_scaled(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        length: usize,
        temperature: f64,
    ) -> Result<GatingDecision> {
        if !(temperature > 0.0) {
            return Err(MoleError::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let z_r = self.gate_lstm.last_state(g, x, length)?;
        let h = self.gate_lstm.hidden;
        let z_row = g.reshape(z_r, &[1, h])?;
        let logits = self.gate_fc.forward(g, z_row)?;
        let logits = g.reshape(logits, &[self.num_experts()])?;
        let logits = if temperature == 1.0 {
            logits
        } else {
            g.scale(logits, 1.0 / temperature)?
        };
        let posterior = g.softmax(logits)?;
        let posterior_values = g.value(posterior).to_vec();
        let selected = argmax(&posterior_values);
        let gamma = g.index(posterior, selected)?;
        Ok(GatingDecision {
            z_r,
            posterior,
            gamma,
            selected,
            gamma_value: posterior_values[selected],
            posterior_values,
        })
    }

    /// Applies the layer to every frame of `x` with one utterance-level
    /// decision. Exactly one language-specific expert is evaluated.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        length: usize,
    ) -> Result<(Var, GatingDecision)> {
        let d = self.gate(g, x, length)?;
        let y = self.combine(g, x, &d)?;
        Ok((y, d))
    }

    fn combine(&self, g: &mut Graph<'_>, x: Var, d: &GatingDecision) -> Result<Var> {
        let rows = g.shape(x)[0];
        let expert = &self.lse[d.selected];
        let e_sel = expert.forward(g, x)?;
        {
            let c = g.counters_mut();
            c.lse_evals += 1;
            c.expert_rows += rows as u64;
            c.expert_flops += expert.macs(rows);
        }
        let weighted = g.mul_scalar(e_sel, d.gamma)?;
        let mut y = g.add(x, weighted)?;
        if self.use_lae {
            let e_lae = self.lae.forward(g, x)?;
            {
                let c = g.counters_mut();
                c.lae_evals += 1;
                c.expert_flops += self.lae.macs(rows);
            }
            let term = if self.use_calibration {
                let one = g.scalar_const(1.0);
                let w = g.sub(one, d.gamma)?;
                g.mul_scalar(e_lae, w)?
            } else {
                e_lae
            };
            y = g.add(y, term)?;
        }
        Ok(y)
    }
}

/// Regroups per-utterance decisions `decisions[utterance][layer]` into one
/// list of `(z_r, language)` per layer.
pub fn collect_gate_embeddings(
    decisions: &[Vec<GatingDecision>],
    labels: Option<&[usize]>,
) -> Result<Vec<Vec<(Var, usize)>>> {
    let labels =
        labels.ok_or_else(|| MoleError::Contract("gate embeddings need language labels".into()))?;
    if labels.len() != decisions.len() {
        return Err(MoleError::Contract(format!(
            "{} labels for {} utterances",
            labels.len(),
            decisions.len()
        )));
    }
    let layers = decisions.first().map_or(0, Vec::len);
    if decisions.iter().any(|d| d.len() != layers) {
        return Err(MoleError::Contract(
            "utterances disagree on the number of MoLE layers".into(),
        ));
    }
    Ok((0..layers)
        .map(|l| {
            decisions
                .iter()
                .zip(labels)
                .map(|(d, &lab)| (d[l].z_r, lab))
                .collect()
        })
        .collect())
}
