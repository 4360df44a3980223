//! Encoder assembly for the three model kinds and the CTC output head.

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ModelKind};
use crate::corpus::derived_rng;
use crate::error::{MoleError, Result};
use crate::moe::{MoeLayer, MoeOutput, RoutingTrace};
use crate::mole::{GatingDecision, MoleLayer};
use crate::nn::{positional_encoding, ForwardCtx, Linear, TransformerBlock};
use crate::tensor::{ExpertCounters, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub enum ExpertLayer {
    Moe(MoeLayer),
    Mole(MoleLayer),
}

/// Utterance-level routing of one MoLE layer, free of graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteDecision {
    pub selected: usize,
    pub gamma: f64,
    pub posterior: Vec<f64>,
}

impl From<&GatingDecision> for RouteDecision {
    fn from(d: &GatingDecision) -> Self {
        RouteDecision {
            selected: d.selected,
            gamma: d.gamma_value,
            posterior: d.posterior_values.clone(),
        }
    }
}

/// Graph handles produced by one utterance's forward pass.
#[derive(Clone, Debug)]
pub struct UtteranceForward {
    /// `[T × V]` log-posteriors over the output vocabulary.
    pub log_probs: Var,
    /// One decision per MoLE layer, bottom to top.
    pub decisions: Vec<GatingDecision>,
    /// Gate embeddings fed to the language-representation loss, per MoLE layer.
    pub lrl_embeddings: Vec<Var>,
    /// One output per MoE layer.
    pub moe: Vec<MoeOutput>,
}

/// Label-free inference result for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub log_probs: Tensor,
    pub routes: Vec<RouteDecision>,
    /// Frame routing of each MoE layer.
    pub traces: Vec<RoutingTrace>,
    pub counters: ExpertCounters,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    /// Expert layer applied after block `i`, if any.
    experts: Vec<Option<ExpertLayer>>,
    output: Linear,
}

impl Model {
    /// Builds and initialises a model. Feature and vocabulary sizes must be resolved.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.feature_dim == 0 || config.vocab_size < 2 {
            return Err(MoleError::Config(
                "feature_dim and vocab_size must be resolved before building".into(),
            ));
        }
        let mut rng: ChaCha8Rng = derived_rng(config.seed, "init");
        let mut params = ParamStore::new();
        let d = config.d_model;
        let input = Linear::new(&mut params, "input", config.feature_dim, d, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut experts = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            blocks.push(TransformerBlock::new(
                &mut params,
                &format!("block{}", b + 1),
                d,
                config.heads,
                config.d_ff,
                &mut rng,
            )?);
            let layer = if config.expert_positions.contains(&(b + 1)) {
                let name = format!("experts{}", b + 1);
                Some(match config.kind {
                    ModelKind::Tfm => unreachable!("validated: tfm has no expert positions"),
                    ModelKind::Moe => ExpertLayer::Moe(MoeLayer::new(
                        &mut params,
                        &name,
                        d,
                        config.d_ff,
                        config.num_languages,
                        config.gate_hidden,
                        config.k,
                        config.use_lae,
                        &mut rng,
                    )?),
                    ModelKind::Mole => ExpertLayer::Mole(MoleLayer::new(
                        &mut params,
                        &name,
                        d,
                        config.d_ff,
                        config.num_languages,
                        config.gate_hidden,
                        config.use_lae,
                        config.use_calibration,
                        &mut rng,
                    )?),
                })
            } else {
                None
            };
            experts.push(layer);
        }
        let output = Linear::new(&mut params, "output", d, config.vocab_size, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            params,
            input,
            blocks,
            experts,
            output,
        })
    }

    /// Closed-form parameter count for a resolved configuration.
    pub fn expected_num_params(c: &ModelConfig) -> usize {
        let per_block = TransformerBlock::num_params(c.d_model, c.d_ff);
        let experts = c.expert_positions.len()
            * match c.kind {
                ModelKind::Tfm => 0,
                ModelKind::Moe => MoeLayer::num_params(
                    c.d_model,
                    c.d_ff,
                    c.num_languages,
                    c.gate_hidden,
                    c.use_lae,
                ),
                ModelKind::Mole => {
                    MoleLayer::num_params(c.d_model, c.d_ff, c.num_languages, c.gate_hidden)
                }
            };
        Linear::num_params(c.feature_dim, c.d_model)
            + c.num_blocks * per_block
            + experts
            + Linear::num_params(c.d_model, c.vocab_size)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalars belonging to expert layers and their gates.
    pub fn num_expert_params(&self) -> usize {
        self.params.num_scalars_with_prefix("experts")
    }

    pub fn expert_layers(&self) -> impl Iterator<Item = &ExpertLayer> {
        self.experts.iter().flatten()
    }

    pub fn num_mole_layers(&self) -> usize {
        self.expert_layers()
            .filter(|l| matches!(l, ExpertLayer::Mole(_)))
            .count()
    }

    pub fn num_moe_layers(&self) -> usize {
        self.expert_layers()
            .filter(|l| matches!(l, ExpertLayer::Moe(_)))
            .count()
    }

    /// Forward pass over one unpadded `[T × d_feat]` utterance.
    pub fn forward_utterance(
        &self,
        g: &mut Graph<'_>,
        features: &Tensor,
        utterance_id: &str,
        ctx: &mut ForwardCtx,
    ) -> Result<UtteranceForward> {
        if features.shape().len() != 2 || features.cols() != self.config.feature_dim {
            return Err(MoleError::dim(
                "model input",
                features.shape(),
                &[self.config.feature_dim],
            ));
        }
        let t = features.rows();
        if t == 0 {
            return Err(MoleError::Contract(format!(
                "{utterance_id}: empty utterance"
            )));
        }
        let x = g.constant(features);
        let h = self.input.forward(g, x)?;
        let pe = g.constant(&positional_encoding(t, self.config.d_model));
        let mut h = g.add(h, pe)?;
        h = ctx.dropout(g, h)?;
        let mut decisions = Vec::new();
        let mut lrl_embeddings = Vec::new();
        let mut moe = Vec::new();
        for (block, expert) in self.blocks.iter().zip(&self.experts) {
            h = block.forward(g, h, t, ctx)?;
            match expert {
                None => {}
                Some(ExpertLayer::Moe(layer)) => {
                    let out = layer.forward_sparse(g, h, utterance_id)?;
                    h = out.y;
                    moe.push(out);
                }
                Some(ExpertLayer::Mole(layer)) => {
                    let (y, d) = layer.forward(g, h, t)?;
                    let emb = if self.config.lrl_stop_gradient && self.config.use_lrl {
                        let detached = g.constant(&g.tensor(h));
                        layer.gate_lstm.last_state(g, detached, t)?
                    } else {
                        d.z_r
                    };
                    lrl_embeddings.push(emb);
                    decisions.push(d);
                    h = y;
                }
            }
        }
        let logits = self.output.forward(g, h)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(UtteranceForward {
            log_probs,
            decisions,
            lrl_embeddings,
            moe,
        })
    }

    /// Inference without dropout or labels.
    pub fn infer(&self, features: &Tensor) -> Result<Inference> {
        self.infer_named(features, "")
    }

    /// As [`Model::infer`], tagging MoE frame traces with `utterance_id`.
    pub fn infer_named(&self, features: &Tensor, utterance_id: &str) -> Result<Inference> {
        let mut g = Graph::with_params(&self.params);
        let out =
            self.forward_utterance(&mut g, features, utterance_id, &mut ForwardCtx::eval())?;
        Ok(Inference {
            log_probs: g.tensor(out.log_probs),
            routes: out.decisions.iter().map(RouteDecision::from).collect(),
            traces: out.moe.into_iter().map(|m| m.trace).collect(),
            counters: g.counters(),
        })
    }
}
