//! Greedy-decoding evaluation: per-language and overall CER plus routing.

use std::fmt::Write as _;

use crate::corpus::Utterance;
use crate::error::{MoleError, Result};
use crate::losses::{cer, greedy_ctc_decode, Cer, RoutedUtterance, RoutingReport};
use crate::model::{Inference, Model};
use crate::moe::RoutingTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageScore {
    pub language: usize,
    pub name: String,
    pub utterances: usize,
    pub cer: Cer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Languages present in the split, in index order.
    pub languages: Vec<LanguageScore>,
    /// Character-weighted aggregate over every utterance.
    pub overall: Cer,
    /// One report per MoLE layer, bottom to top.
    pub routing: Vec<RoutingReport>,
    /// Per MoLE layer, one entry per utterance.
    pub decisions: Vec<Vec<RoutedUtterance>>,
    pub hypotheses: Vec<(String, Vec<usize>)>,
    /// Frame routing per MoE layer, all utterances concatenated.
    pub traces: Vec<RoutingTrace>,
}

/// Scores hypotheses against the utterances' references.
pub fn score(
    hypotheses: &[Vec<usize>],
    utts: &[Utterance],
    names: &[String],
) -> Result<(Vec<LanguageScore>, Cer)> {
    if utts.is_empty() {
        return Err(MoleError::Contract("cannot evaluate an empty split".into()));
    }
    if hypotheses.len() != utts.len() {
        return Err(MoleError::Contract(format!(
            "{} hypotheses for {} utterances",
            hypotheses.len(),
            utts.len()
        )));
    }
    let mut per: Vec<Option<LanguageScore>> = vec![None; names.len()];
    let mut overall = Cer::default();
    for (h, u) in hypotheses.iter().zip(utts) {
        let c = cer(h, &u.tokens)?;
        overall += c;
        let slot = per.get_mut(u.language).ok_or_else(|| {
            MoleError::Contract(format!("{}: language {} out of range", u.id, u.language))
        })?;
        let entry = slot.get_or_insert_with(|| LanguageScore {
            language: u.language,
            name: names[u.language].clone(),
            utterances: 0,
            cer: Cer::default(),
        });
        entry.utterances += 1;
        entry.cer += c;
    }
    Ok((per.into_iter().flatten().collect(), overall))
}

/// Decodes every utterance with `model`. The model only sees features;
/// labels are used for scoring and the routing report.
pub fn evaluate(model: &Model, utts: &[Utterance], names: &[String]) -> Result<EvalReport> {
    evaluate_with_threads(model, utts, names, 1)
}

/// Runs inference on `threads` workers over contiguous chunks. Results are
/// combined in utterance order, so the report does not depend on `threads`.
pub fn infer_all(model: &Model, utts: &[Utterance], threads: usize) -> Result<Vec<Inference>> {
    let threads = threads.clamp(1, utts.len().max(1));
    if threads == 1 {
        return utts
            .iter()
            .map(|u| model.infer_named(&u.features, &u.id))
            .collect();
    }
    let chunk = utts.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = utts
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|u| model.infer_named(&u.features, &u.id))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("inference worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate_with_threads(
    model: &Model,
    utts: &[Utterance],
    names: &[String],
    threads: usize,
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(MoleError::Contract("cannot evaluate an empty split".into()));
    }
    let layers = model.num_mole_layers();
    let mut decisions: Vec<Vec<RoutedUtterance>> = vec![Vec::new(); layers];
    let mut traces = vec![RoutingTrace::default(); model.num_moe_layers()];
    let mut hyps = Vec::with_capacity(utts.len());
    for (u, inf) in utts.iter().zip(infer_all(model, utts, threads)?) {
        hyps.push(greedy_ctc_decode(&inf.log_probs, u.len()));
        for (t, tr) in traces.iter_mut().zip(inf.traces) {
            t.extend(tr);
        }
        for (l, r) in inf.routes.into_iter().enumerate() {
            decisions[l].push(RoutedUtterance {
                utterance_id: u.id.clone(),
                language: u.language,
                selected: r.selected,
                gamma: r.gamma,
                posterior: r.posterior,
            });
        }
    }
    let (languages, overall) = score(&hyps, utts, names)?;
    let routing = decisions
        .iter()
        .map(|d| RoutingReport::new(d, model.config.num_languages, names.len()))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        languages,
        overall,
        routing,
        decisions,
        hypotheses: utts.iter().map(|u| u.id.clone()).zip(hyps).collect(),
        traces,
    })
}

impl EvalReport {
    pub fn cer_of(&self, language: usize) -> Option<f64> {
        self.languages
            .iter()
            .find(|l| l.language == language)
            .map(|l| l.cer.value())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,utterances,errors,reference_chars,cer\n");
        for l in &self.languages {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6}",
                l.name,
                l.utterances,
                l.cer.errors,
                l.cer.ref_len,
                l.cer.value()
            );
        }
        let n: usize = self.languages.iter().map(|l| l.utterances).sum();
        let _ = writeln!(
            s,
            "OVR,{n},{},{},{:.6}",
            self.overall.errors,
            self.overall.ref_len,
            self.overall.value()
        );
        for (i, r) in self.routing.iter().enumerate() {
            let _ = writeln!(s, "\n# routing, MoLE layer {}", i + 1);
            s.push_str(&r.to_csv());
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>8}", "language", "utts", "CER%");
        for l in &self.languages {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8.2}",
                l.name,
                l.utterances,
                100.0 * l.cer.value()
            );
        }
        let n: usize = self.languages.iter().map(|l| l.utterances).sum();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>8.2}",
            "OVR",
            n,
            100.0 * self.overall.value()
        );
        for (i, r) in self.routing.iter().enumerate() {
            let _ = writeln!(s, "\nrouting, MoLE layer {}", i + 1);
            s.push_str(&r.to_table());
        }
        s
    }
}
