//! Training objectives and evaluation metrics.

mod cer;
pub mod ctc;
mod decode;
pub mod lrl;
mod routing;

pub use cer::{cer, cer_str, edit_distance, Cer};
pub use ctc::{ctc_loss, CtcInput, CtcLoss};
pub(crate) use decode::argmax;
pub use decode::{collapse_path, greedy_ctc_decode};
pub use lrl::{lrl, lrl_graph, LrlBatch};
pub use routing::{
    decisions_to_csv, ArgmaxLanguageId, LanguageRouting, RoutedUtterance, RoutingReport,
    DECISIONS_CSV_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lrl: f64,
    pub balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lrl: 0.1,
            balance: 0.01,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `ctc + λ_LR·mean(lrl) + λ_bal·mean(balance)`; empty term lists add 0.
pub fn total_loss(ctc: f64, lrl_terms: &[f64], balance_terms: &[f64], w: LossWeights) -> f64 {
    ctc + w.lrl * mean(lrl_terms) + w.balance * mean(balance_terms)
}

/// Graph counterpart of [`total_loss`].
pub fn total_loss_graph(
    g: &mut Graph<'_>,
    ctc: Var,
    lrl_terms: &[Var],
    balance_terms: &[Var],
    w: LossWeights,
) -> Result<Var> {
    let mut total = ctc;
    for (terms, weight) in [(lrl_terms, w.lrl), (balance_terms, w.balance)] {
        if terms.is_empty() || weight == 0.0 {
            continue;
        }
        let stacked = g.stack(terms)?;
        let m = g.mean(stacked)?;
        let scaled = g.scale(m, weight)?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}
