//! Finite-difference gradient suite over every trainable component and loss.
//!
//! Each check treats the component's input as one more parameter, so input
//! and weight gradients are verified together. Outputs are reduced to a
//! scalar through a fixed random projection.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoleError, Result};
use crate::losses::lrl_graph;
use crate::moe::{balance_loss_graph, MoeLayer};
use crate::mole::MoleLayer;
use crate::nn::{
    Ffn, ForwardCtx, LayerNorm, Linear, LstmCell, MultiHeadAttention, TransformerBlock,
};
use crate::tensor::gradcheck::{gradcheck_params, GradcheckOptions, GradcheckReport};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Tolerance for single-op layers.
pub const ELEMENTARY_TOL: f64 = 1e-5;
/// Tolerance for composite blocks and losses.
pub const COMPOSITE_TOL: f64 = 1e-4;

pub const MODULES: [&str; 14] = [
    "linear",
    "layernorm",
    "ffn",
    "softmax",
    "attention",
    "transformer_block",
    "lstm",
    "moe_dense",
    "moe_sparse",
    "moe_balance",
    "mole_block",
    "mole_block_no_calibration",
    "ctc",
    "lrl",
];

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub tolerance: f64,
    pub report: GradcheckReport,
    pub elapsed: Duration,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

const D: usize = 6;
const T: usize = 5;
const FF: usize = 8;

fn randomise(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(s, std, rng);
    }
}

fn add_input(store: &mut ParamStore, rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<ParamId> {
    store.add("input", Tensor::randn(shape.to_vec(), 1.0, rng))
}

/// `sum(y ⊙ r)` for a fixed `r` of `y`'s shape.
fn project(g: &mut Graph<'_>, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(rng_seed));
    let rv = g.constant(&r);
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn check(
    store: &ParamStore,
    tol: f64,
    f: impl Fn(&mut Graph<'_>) -> Result<Var>,
) -> Result<GradcheckReport> {
    gradcheck_params(store, f, GradcheckOptions::default().with_tol(tol))
}

fn run(module: &str, seed: u64) -> Result<(f64, GradcheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let e = ELEMENTARY_TOL;
    let c = COMPOSITE_TOL;
    match module {
        "linear" => {
            let l = Linear::new(&mut s, "l", D, 4, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, e, |g| {
                let xv = g.param(x);
                let y = l.forward(g, xv)?;
                project(g, y, 1)
            })?;
            Ok((e, r))
        }
        "layernorm" => {
            let l = LayerNorm::new(&mut s, "ln", D)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, e, |g| {
                let xv = g.param(x);
                let y = l.forward(g, xv)?;
                project(g, y, 2)
            })?;
            Ok((e, r))
        }
        "ffn" => {
            let l = Ffn::new(&mut s, "ffn", D, FF, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, e, |g| {
                let xv = g.param(x);
                let y = l.forward(g, xv)?;
                project(g, y, 3)
            })?;
            Ok((e, r))
        }
        "softmax" => {
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, e, |g| {
                let xv = g.param(x);
                let a = g.softmax(xv)?;
                let b = g.log_softmax(xv)?;
                let pa = project(g, a, 4)?;
                let pb = project(g, b, 5)?;
                g.add(pa, pb)
            })?;
            Ok((e, r))
        }
        "attention" => {
            let l = MultiHeadAttention::new(&mut s, "att", D, 2, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, c, |g| {
                let xv = g.param(x);
                let y = l.forward(g, xv, T)?;
                project(g, y, 6)
            })?;
            Ok((c, r))
        }
        "transformer_block" => {
            let l = TransformerBlock::new(&mut s, "blk", D, 2, FF, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, c, |g| {
                let xv = g.param(x);
                let y = l.forward(g, xv, T, &mut ForwardCtx::eval())?;
                project(g, y, 7)
            })?;
            Ok((c, r))
        }
        "lstm" => {
            let l = LstmCell::new(&mut s, "lstm", D, 4, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, c, |g| {
                let xv = g.param(x);
                let y = l.last_state(g, xv, T)?;
                project(g, y, 8)
            })?;
            Ok((c, r))
        }
        "moe_dense" | "moe_sparse" | "moe_balance" => {
            let l = MoeLayer::new(&mut s, "moe", D, FF, 3, 4, 1, true, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, c, |g| {
                let xv = g.param(x);
                match module {
                    "moe_dense" => {
                        let y = l.forward_dense(g, xv)?;
                        project(g, y, 9)
                    }
                    "moe_sparse" => {
                        let y = l.forward_sparse(g, xv, "u")?.y;
                        project(g, y, 10)
                    }
                    _ => {
                        let out = l.forward_sparse(g, xv, "u")?;
                        let top1: Vec<usize> =
                            out.trace.frames.iter().map(|f| f.selected[0]).collect();
                        balance_loss_graph(g, &[out.posterior], &[top1])
                    }
                }
            })?;
            Ok((c, r))
        }
        "mole_block" | "mole_block_no_calibration" => {
            let cal = module == "mole_block";
            let l = MoleLayer::new(&mut s, "mole", D, FF, 3, 4, true, cal, &mut rng)?;
            randomise(&mut s, &mut rng, 0.5);
            let x = add_input(&mut s, &mut rng, &[T, D])?;
            let r = check(&s, c, |g| {
                let xv = g.param(x);
                let (y, _) = l.forward(g, xv, T)?;
                project(g, y, 11)
            })?;
            Ok((c, r))
        }
        "ctc" => {
            let x = add_input(&mut s, &mut rng, &[T + 1, 4])?;
            let r = check(&s, c, |g| {
                let xv = g.param(x);
                let lp = g.log_softmax(xv)?;
                g.ctc(lp, &[1, 3, 3], T + 1)
            })?;
            Ok((c, r))
        }
        "lrl" => {
            let labels = [0, 1, 0, 2, 1];
            let ids: Vec<ParamId> = (0..labels.len())
                .map(|i| s.add(format!("z{i}"), Tensor::randn(vec![4], 1.0, &mut rng)))
                .collect::<Result<_>>()?;
            let r = check(&s, c, |g| {
                let zs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                lrl_graph(g, &zs, &labels)
            })?;
            Ok((c, r))
        }
        other => Err(MoleError::Config(format!(
            "unknown gradcheck module {other:?}"
        ))),
    }
}

/// Runs every check, or only `module` if given.
pub fn gradient_suite(module: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let selected: Vec<&'static str> = match module {
        None => MODULES.to_vec(),
        Some(m) => match MODULES.iter().find(|&&n| n == m) {
            Some(&n) => vec![n],
            None => {
                return Err(MoleError::Config(format!(
                    "unknown gradcheck module {m:?}; expected one of {}",
                    MODULES.join(", ")
                )))
            }
        },
    };
    let mut out = Vec::with_capacity(selected.len());
    for (i, m) in selected.into_iter().enumerate() {
        let start = Instant::now();
        let (tolerance, report) = run(m, 1000 + i as u64)?;
        out.push(SuiteEntry {
            module: m,
            tolerance,
            report,
            elapsed: start.elapsed(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes() {
        for e in gradient_suite(None).unwrap() {
            assert!(e.passed(), "{}: {:?}", e.module, e.report);
            assert!(e.report.checked > 0);
        }
    }

    #[test]
    fn single_module_and_unknown_name() {
        let r = gradient_suite(Some("ctc")).unwrap();
        assert_eq!(r.len(), 1);
        assert!(matches!(
            gradient_suite(Some("nope")),
            Err(MoleError::Config(_))
        ));
    }
}
