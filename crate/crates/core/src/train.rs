//! Adam training loop with deterministic batching and divergence guard.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Moments};
use crate::config::{ModelConfig, ModelKind, OptimizerConfig};
use crate::corpus::{derived_rng, sample_batch, Corpus, SequenceBatch};
use crate::error::{MoleError, Result};
use crate::eval::evaluate;
use crate::losses::{lrl_graph, total_loss_graph};
use crate::model::Model;
use crate::moe::balance_loss_graph;
use crate::nn::ForwardCtx;
use crate::tensor::{Gradients, Graph, ParamStore, Var};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub moments: Vec<Moments>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            moments: params
                .iter()
                .map(|(_, p)| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect(),
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`; `scale` multiplies every gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        cfg: &OptimizerConfig,
        lr: f64,
        scale: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (id, mom) in ids.into_iter().zip(&mut self.moments) {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * scale;
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ctc: f64,
    pub lrl: f64,
    pub balance: f64,
    pub grad_norm: f64,
    pub skipped_infeasible: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalLog {
    /// Steps completed when the evaluation ran.
    pub step: usize,
    pub per_language: Vec<f64>,
    pub overall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

impl TrainLog {
    /// Tab-separated text with full-precision floats.
    pub fn to_text(&self) -> String {
        let mut s = String::from("step\tlr\ttotal\tctc\tlrl\tbalance\tgrad_norm\tskipped\n");
        for l in &self.steps {
            let _ = writeln!(
                s,
                "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}",
                l.step, l.lr, l.total, l.ctc, l.lrl, l.balance, l.grad_norm, l.skipped_infeasible
            );
        }
        for e in &self.evals {
            let per: Vec<String> = e.per_language.iter().map(|c| format!("{c:e}")).collect();
            let _ = writeln!(s, "eval\t{}\t{}\t{:e}", e.step, per.join(","), e.overall);
        }
        s
    }

    /// Mean of a step-log field over the last `n` steps.
    pub fn trailing_mean(&self, n: usize, f: impl Fn(&StepLog) -> f64) -> f64 {
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    }
}

/// Training state over one corpus.
pub struct Trainer<'c> {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub log: TrainLog,
    sampler: ChaCha8Rng,
    corpus: &'c Corpus,
}

impl<'c> Trainer<'c> {
    pub fn new(config: &ModelConfig, corpus: &'c Corpus) -> Result<Self> {
        let config = config.resolved(
            corpus.feature_dim(),
            corpus.vocabulary.size(),
            corpus.num_languages(),
        )?;
        let model = Model::new(&config)?;
        Ok(Trainer {
            adam: Adam::new(&model.params),
            model,
            step: 0,
            log: TrainLog::default(),
            sampler: derived_rng(config.seed, "batches"),
            corpus,
        })
    }

    /// Continues from a checkpoint saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, corpus: &'c Corpus) -> Result<Self> {
        check_vocabulary(ckpt, corpus)?;
        let model = ckpt.to_model()?;
        let mut adam = Adam::new(&model.params);
        if !ckpt.moments.is_empty() {
            adam.moments = ckpt.moments.clone();
            adam.t = ckpt.step;
        }
        Ok(Trainer {
            model,
            adam,
            step: ckpt.step as usize,
            log: TrainLog::default(),
            sampler: ckpt.sampler.restore(),
            corpus,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let vocab: String = self.corpus.vocabulary.chars().iter().collect();
        let mut c = Checkpoint::from_model(&self.model, &vocab, &self.sampler);
        c.step = self.step as u64;
        if self.adam.t > 0 {
            c.moments = self.adam.moments.clone();
        }
        c
    }

    /// Builds the objective for `batch` on `g`. Returns the total loss node
    /// and its components.
    fn objective(
        &self,
        g: &mut Graph<'_>,
        batch: &SequenceBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, [f64; 3], usize)> {
        let cfg = &self.model.config;
        let mut ctc_terms = Vec::new();
        let mut skipped = 0;
        let layers = self.model.num_mole_layers();
        let moe_layers = self.model.num_moe_layers();
        let mut embeddings: Vec<Vec<Var>> = vec![Vec::new(); layers];
        let mut labels = Vec::new();
        let mut posteriors: Vec<Vec<Var>> = vec![Vec::new(); moe_layers];
        let mut top1: Vec<Vec<Vec<usize>>> = vec![Vec::new(); moe_layers];
        for i in 0..batch.len() {
            let feats = batch.unpadded(i);
            let out = self
                .model
                .forward_utterance(g, &feats, &batch.ids[i], ctx)?;
            let c = g.ctc(out.log_probs, &batch.targets[i], batch.lengths[i])?;
            if g.scalar(c).is_finite() {
                ctc_terms.push(c);
            } else {
                skipped += 1;
            }
            for (l, e) in out.lrl_embeddings.into_iter().enumerate() {
                embeddings[l].push(e);
            }
            labels.push(batch.languages[i]);
            for (l, m) in out.moe.into_iter().enumerate() {
                top1[l].push(m.trace.frames.iter().map(|f| f.selected[0]).collect());
                posteriors[l].push(m.posterior);
            }
        }
        if ctc_terms.is_empty() {
            return Err(MoleError::Numeric("no feasible CTC target in batch".into()));
        }
        let stacked = g.stack(&ctc_terms)?;
        let ctc = g.mean(stacked)?;
        let mut lrl_terms = Vec::new();
        if cfg.use_lrl {
            for emb in &embeddings {
                lrl_terms.push(lrl_graph(g, emb, &labels)?);
            }
        }
        let mut bal_terms = Vec::new();
        if cfg.kind == ModelKind::Moe {
            for (p, t) in posteriors.iter().zip(&top1) {
                bal_terms.push(balance_loss_graph(g, p, t)?);
            }
        }
        let mean = |g: &Graph<'_>, v: &[Var]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|&x| g.scalar(x)).sum::<f64>() / v.len() as f64
            }
        };
        let parts = [g.scalar(ctc), mean(g, &lrl_terms), mean(g, &bal_terms)];
        let total = total_loss_graph(g, ctc, &lrl_terms, &bal_terms, cfg.loss_weights())?;
        Ok((total, parts, skipped))
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left untouched and the pre-step state is returned in the error.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let cfg = self.model.config.clone();
        let before = self.checkpoint();
        let batch = sample_batch(&self.corpus.train, cfg.train.batch_size, &mut self.sampler)?;
        let mut ctx = ForwardCtx::train(
            cfg.train.dropout,
            derived_rng(cfg.seed, &format!("dropout:{}", self.step)),
        );
        let (grads, total, parts, skipped) = {
            let mut g = Graph::with_params(&self.model.params);
            let (total, parts, skipped) = match self.objective(&mut g, &batch, &mut ctx) {
                Err(MoleError::Numeric(_)) => {
                    return Err(MoleError::Diverged {
                        step: self.step,
                        last_good: Box::new(before),
                    })
                }
                r => r?,
            };
            let value = g.scalar(total);
            if !value.is_finite() {
                return Err(MoleError::Diverged {
                    step: self.step,
                    last_good: Box::new(before),
                });
            }
            g.backward(total)?;
            (
                g.param_grads(self.model.params.len()),
                value,
                parts,
                skipped,
            )
        };
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(MoleError::Diverged {
                step: self.step,
                last_good: Box::new(before),
            });
        }
        let clip = cfg.optimizer.clip_norm;
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        let lr = cfg.optimizer.lr_at(self.step);
        self.adam
            .step(&mut self.model.params, &grads, &cfg.optimizer, lr, scale);
        let log = StepLog {
            step: self.step,
            lr,
            total,
            ctc: parts[0],
            lrl: parts[1],
            balance: parts[2],
            grad_norm: norm,
            skipped_infeasible: skipped,
        };
        self.step += 1;
        self.log.steps.push(log.clone());
        Ok(log)
    }

    pub fn evaluate_dev(&mut self) -> Result<()> {
        if self.corpus.dev.is_empty() {
            return Ok(());
        }
        let r = evaluate(&self.model, &self.corpus.dev, &self.corpus.language_names())?;
        self.log.evals.push(EvalLog {
            step: self.step,
            per_language: r.languages.iter().map(|l| l.cer.value()).collect(),
            overall: r.overall.value(),
        });
        Ok(())
    }

    /// Runs the configured number of steps with periodic dev evaluation.
    pub fn run(&mut self) -> Result<()> {
        let steps = self.model.config.train.steps;
        let every = self.model.config.train.eval_every;
        while self.step < steps {
            self.train_step()?;
            if every > 0 && self.step.is_multiple_of(every) && self.step < steps {
                self.evaluate_dev()?;
            }
        }
        self.evaluate_dev()
    }
}

pub(crate) fn check_vocabulary(ckpt: &Checkpoint, corpus: &Corpus) -> Result<()> {
    let vocab: String = corpus.vocabulary.chars().iter().collect();
    if ckpt.vocabulary != vocab {
        return Err(MoleError::Contract(
            "checkpoint vocabulary differs from the corpus".into(),
        ));
    }
    Ok(())
}

/// Trains from scratch; returns the final checkpoint and the metric log.
pub fn train(config: &ModelConfig, corpus: &Corpus) -> Result<(Checkpoint, TrainLog)> {
    let mut t = Trainer::new(config, corpus)?;
    t.run()?;
    Ok((t.checkpoint(), t.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn tiny_corpus() -> Corpus {
        let mut spec = CorpusSpec {
            train_frames: 400,
            dev_utterances: 2,
            test_utterances: 2,
            ..CorpusSpec::default()
        };
        spec.languages.truncate(2);
        generate_corpus(&spec).unwrap()
    }

    fn tiny_config(kind: ModelKind) -> ModelConfig {
        let c = ModelConfig {
            num_blocks: 2,
            expert_positions: vec![2],
            d_model: 8,
            d_ff: 16,
            gate_hidden: 4,
            num_languages: 2,
            train: crate::config::TrainConfig {
                steps: 3,
                batch_size: 3,
                eval_every: 0,
                dropout: 0.1,
            },
            ..ModelConfig::default()
        };
        match kind {
            ModelKind::Tfm => c.as_tfm(),
            ModelKind::Moe => ModelConfig {
                kind,
                use_lrl: false,
                use_calibration: false,
                ..c
            },
            ModelKind::Mole => c,
        }
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let corpus = tiny_corpus();
        let cfg = ModelConfig {
            train: crate::config::TrainConfig {
                steps: 0,
                ..tiny_config(ModelKind::Mole).train
            },
            ..tiny_config(ModelKind::Mole)
        };
        let (ckpt, log) = train(&cfg, &corpus).unwrap();
        assert!(log.steps.is_empty());
        let fresh = Model::new(&ckpt.config).unwrap();
        for ((n, t), (m, u)) in ckpt.params.iter().zip(fresh.params.iter()) {
            assert_eq!((n.as_str(), t.data()), (m, u.data()));
        }
        assert!(ckpt.moments.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let corpus = tiny_corpus();
        for kind in [ModelKind::Tfm, ModelKind::Moe, ModelKind::Mole] {
            let (a, la) = train(&tiny_config(kind), &corpus).unwrap();
            let (b, lb) = train(&tiny_config(kind), &corpus).unwrap();
            assert_eq!(la.to_text(), lb.to_text());
            assert_eq!(a.to_bytes(), b.to_bytes());
            assert_eq!(la.steps.len(), 3);
        }
    }

    #[test]
    fn ablated_loss_columns_are_zero() {
        let corpus = tiny_corpus();
        let (_, tfm) = train(&tiny_config(ModelKind::Tfm), &corpus).unwrap();
        assert!(tfm.steps.iter().all(|s| s.lrl == 0.0 && s.balance == 0.0));
        let (_, moe) = train(&tiny_config(ModelKind::Moe), &corpus).unwrap();
        assert!(moe.steps.iter().all(|s| s.lrl == 0.0 && s.balance > 0.0));
        let (_, mole) = train(&tiny_config(ModelKind::Mole), &corpus).unwrap();
        assert!(mole.steps.iter().all(|s| s.balance == 0.0));
        let no_lrl = ModelConfig {
            use_lrl: false,
            ..tiny_config(ModelKind::Mole)
        };
        let (_, l) = train(&no_lrl, &corpus).unwrap();
        assert!(l.steps.iter().all(|s| s.lrl == 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = tiny_corpus();
        let cfg = tiny_config(ModelKind::Mole);
        let (full, full_log) = train(&cfg, &corpus).unwrap();

        let mut t = Trainer::new(&cfg, &corpus).unwrap();
        t.train_step().unwrap();
        let mid = Checkpoint::from_bytes(&t.checkpoint().to_bytes(), std::path::Path::new("mem"))
            .unwrap();
        let mut r = Trainer::resume(&mid, &corpus).unwrap();
        r.run().unwrap();
        assert_eq!(r.checkpoint(), full);
        assert_eq!(r.log.steps[..], full_log.steps[1..]);
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let corpus = tiny_corpus();
        let mut t = Trainer::new(&tiny_config(ModelKind::Tfm), &corpus).unwrap();
        t.train_step().unwrap();
        let good = t.checkpoint();
        let id = t.model.params.id("output.w").unwrap();
        t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
        match t.train_step() {
            Err(MoleError::Diverged { step, last_good }) => {
                assert_eq!(step, 1);
                assert_eq!(last_good.step, good.step);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", crate::tensor::Tensor::vector(vec![1.0, -2.0]))
            .unwrap();
        let mut g = Graph::with_params(&store);
        let w = g.param(id);
        let y = g.sum(w).unwrap();
        g.backward(y).unwrap();
        let grads = g.param_grads(store.len());
        let mut adam = Adam::new(&store);
        let cfg = OptimizerConfig::default();
        adam.step(&mut store, &grads, &cfg, 0.1, 1.0);
        let v = store.get(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 2.1).abs() < 1e-6);
    }
}
