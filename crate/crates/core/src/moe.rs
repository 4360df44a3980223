//! Framewise mixture-of-experts baseline: dense and top-k sparse routing,
//! an always-on common expert on the skip path, and the switch-style
//! balancing loss.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::error::{MoleError, Result};
use crate::nn::{Ffn, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub experts: Vec<Ffn>,
    /// Always-evaluated expert outside the gate's control.
    pub common: Option<Ffn>,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub k: usize,
}

/// Routing of a single frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRoute {
    pub utterance_id: String,
    pub frame: usize,
    /// Top-k expert indices, highest posterior first.
    pub selected: Vec<usize>,
    pub posterior: Vec<f64>,
}

/// Result of a sparse MoE forward pass.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub y: Var,
    /// Framewise gate posterior `[T × N]`.
    pub posterior: Var,
    pub trace: RoutingTrace,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub frames: Vec<FrameRoute>,
}

impl RoutingTrace {
    pub fn extend(&mut self, other: RoutingTrace) {
        self.frames.extend(other.frames);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,utterance_id,selected,posterior\n");
        for f in &self.frames {
            let sel: Vec<String> = f.selected.iter().map(usize::to_string).collect();
            let post: Vec<String> = f.posterior.iter().map(|p| format!("{p:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{}",
                f.frame,
                f.utterance_id,
                sel.join(";"),
                post.join(";")
            );
        }
        s
    }
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| {
        p[b].partial_cmp(&p[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

impl MoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        num_experts: usize,
        gate_hidden: usize,
        k: usize,
        with_common: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_experts == 0 || k == 0 || k > num_experts {
            return Err(MoleError::Config(format!(
                "need 1 <= k <= N, got k={k}, N={num_experts}"
            )));
        }
        let experts = (0..num_experts)
            .map(|i| Ffn::new(store, &format!("{name}.expert{i}"), d_model, d_ff, rng))
            .collect::<Result<_>>()?;
        let common = with_common
            .then(|| Ffn::new(store, &format!("{name}.common"), d_model, d_ff, rng))
            .transpose()?;
        Ok(MoeLayer {
            experts,
            common,
            gate_hidden: Linear::new(
                store,
                &format!("{name}.gate.fc1"),
                d_model,
                gate_hidden,
                rng,
            )?,
            gate_out: Linear::new(
                store,
                &format!("{name}.gate.fc2"),
                gate_hidden,
                num_experts,
                rng,
            )?,
            k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_params(
        d_model: usize,
        d_ff: usize,
        n: usize,
        gate_hidden: usize,
        with_common: bool,
    ) -> usize {
        (n + usize::from(with_common)) * Ffn::num_params(d_model, d_ff)
            + Linear::num_params(d_model, gate_hidden)
            + Linear::num_params(gate_hidden, n)
    }

    /// Framewise posterior `[T × N]` from the two-layer gate.
    pub fn posterior(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.gate_hidden.forward(g, x)?;
        let h = g.relu(h)?;
        let logits = self.gate_out.forward(g, h)?;
        g.softmax(logits)
    }

    fn skip(&self, g: &mut Graph<'_>, x: Var, mixture: Var) -> Result<Var> {
        let mut y = g.add(x, mixture)?;
        if let Some(common) = &self.common {
            let rows = g.shape(x)[0];
            let c = common.forward(g, x)?;
            let counters = g.counters_mut();
            counters.common_evals += 1;
            counters.expert_flops += common.macs(rows);
            y = g.add(y, c)?;
        }
        Ok(y)
    }

    /// `y_t = x_t + common(x_t) + Σ_i p_i(x_t)·e_i(x_t)` with every expert
    /// evaluated on every frame.
    pub fn forward_dense(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let p = self.posterior(g, x)?;
        let mut mixture: Option<Var> = None;
        for (i, e) in self.experts.iter().enumerate() {
            let out = e.forward(g, x)?;
            let c = g.counters_mut();
            c.moe_expert_evals += t as u64;
            c.expert_rows += t as u64;
            c.expert_flops += e.macs(t);
            let col = g.slice_cols(p, i, i + 1)?;
            let w = g.reshape(col, &[t])?;
            let term = g.mul_rows(out, w)?;
            mixture = Some(match mixture {
                Some(m) => g.add(m, term)?,
                None => term,
            });
        }
        let mixture = mixture.expect("at least one expert");
        self.skip(g, x, mixture)
    }

    /// Top-k routing per frame: only selected experts run, on the rows
    /// routed to them. Unselected experts get no gradient.
    pub fn forward_sparse(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        utterance_id: &str,
    ) -> Result<MoeOutput> {
        let t = g.shape(x)[0];
        let n = self.num_experts();
        let p = self.posterior(g, x)?;
        let pv = g.value(p).to_vec();
        let mut trace = RoutingTrace::default();
        let mut rows_for: Vec<Vec<usize>> = vec![Vec::new(); n];
        for frame in 0..t {
            let post = &pv[frame * n..(frame + 1) * n];
            let selected = top_k(post, self.k);
            for &e in &selected {
                rows_for[e].push(frame);
            }
            trace.frames.push(FrameRoute {
                utterance_id: utterance_id.to_string(),
                frame,
                selected,
                posterior: post.to_vec(),
            });
        }
        let mut mixture: Option<Var> = None;
        for (i, rows) in rows_for.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let e = &self.experts[i];
            let xs = g.gather_rows(x, rows)?;
            let out = e.forward(g, xs)?;
            let c = g.counters_mut();
            c.moe_expert_evals += rows.len() as u64;
            c.expert_rows += rows.len() as u64;
            c.expert_flops += e.macs(rows.len());
            let pr = g.gather_rows(p, rows)?;
            let col = g.slice_cols(pr, i, i + 1)?;
            let w = g.reshape(col, &[rows.len()])?;
            let term = g.mul_rows(out, w)?;
            let placed = g.scatter_rows(term, rows, t)?;
            mixture = Some(match mixture {
                Some(m) => g.add(m, placed)?,
                None => placed,
            });
        }
        let mixture = mixture.expect("every frame selects k >= 1 experts");
        Ok(MoeOutput {
            y: self.skip(g, x, mixture)?,
            posterior: p,
            trace,
        })
    }
}

/// Switch-style balancing loss `N·Σ f_i·P_i` over top-1 dispatch fractions
/// `f` and mean posteriors `P`.
pub fn balance_loss(trace: &RoutingTrace, n: usize) -> Result<f64> {
    if trace.frames.is_empty() {
        return Err(MoleError::Contract(
            "balance loss over an empty trace".into(),
        ));
    }
    let frames = trace.frames.len() as f64;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for fr in &trace.frames {
        f[fr.selected[0]] += 1.0 / frames;
        for (acc, v) in p.iter_mut().zip(&fr.posterior) {
            *acc += v / frames;
        }
    }
    Ok(n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

/// Differentiable balancing loss over the frames of several `[T_u × N]`
/// posteriors; dispatch fractions are constants taken from `top1`.
pub fn balance_loss_graph(
    g: &mut Graph<'_>,
    posteriors: &[Var],
    top1: &[Vec<usize>],
) -> Result<Var> {
    if posteriors.is_empty() || posteriors.len() != top1.len() {
        return Err(MoleError::Contract(
            "balance loss needs one top-1 list per posterior".into(),
        ));
    }
    let n = g.shape(posteriors[0]).get(1).copied().unwrap_or(0);
    let mut frames = 0;
    for (&p, sel) in posteriors.iter().zip(top1) {
        let s = g.shape(p);
        if s.len() != 2 || s[1] != n || s[0] != sel.len() {
            return Err(MoleError::dim("balance_loss", s, &[sel.len(), n]));
        }
        frames += sel.len();
    }
    if frames == 0 {
        return Err(MoleError::Contract("balance loss over zero frames".into()));
    }
    let mut f = vec![0.0; n];
    for &e in top1.iter().flatten() {
        f[e] += 1.0 / frames as f64;
    }
    let coef_row: Vec<f64> = f.iter().map(|fi| fi * n as f64 / frames as f64).collect();
    let mut total: Option<Var> = None;
    for (&p, sel) in posteriors.iter().zip(top1) {
        let coef = Tensor::new(vec![sel.len(), n], coef_row.repeat(sel.len()))?;
        let c = g.constant(&coef);
        let prod = g.mul(p, c)?;
        let s = g.sum(prod)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("non-empty"))
}
