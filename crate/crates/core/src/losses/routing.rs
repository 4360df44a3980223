//! Routing statistics over per-utterance gating decisions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{MoleError, Result};

/// One utterance's routing outcome at a single MoLE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedUtterance {
    pub utterance_id: String,
    pub language: usize,
    pub selected: usize,
    pub gamma: f64,
    pub posterior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageRouting {
    pub language: usize,
    pub count: usize,
    pub majority_expert: usize,
    /// Fraction of the language's utterances sent to its majority expert.
    pub consistency: f64,
    pub mean_gamma: f64,
    pub expert_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub num_experts: usize,
    pub languages: Vec<LanguageRouting>,
    pub utilization: Vec<usize>,
    pub total: usize,
}

impl RoutingReport {
    pub fn new(
        decisions: &[RoutedUtterance],
        num_experts: usize,
        num_languages: usize,
    ) -> Result<Self> {
        if decisions.is_empty() {
            return Err(MoleError::Contract(
                "routing report over no decisions".into(),
            ));
        }
        let mut counts = vec![vec![0usize; num_experts]; num_languages];
        let mut gamma_sum = vec![0.0; num_languages];
        for d in decisions {
            if d.language >= num_languages || d.selected >= num_experts {
                return Err(MoleError::Contract(format!(
                    "decision for {} out of range (language {}, expert {})",
                    d.utterance_id, d.language, d.selected
                )));
            }
            counts[d.language][d.selected] += 1;
            gamma_sum[d.language] += d.gamma;
        }
        let mut utilization = vec![0usize; num_experts];
        let languages = counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| c.iter().sum::<usize>() > 0)
            .map(|(language, expert_counts)| {
                let count: usize = expert_counts.iter().sum();
                for (u, c) in utilization.iter_mut().zip(&expert_counts) {
                    *u += c;
                }
                let majority_expert = (0..num_experts)
                    .max_by_key(|&e| (expert_counts[e], std::cmp::Reverse(e)))
                    .unwrap_or(0);
                LanguageRouting {
                    language,
                    count,
                    majority_expert,
                    consistency: expert_counts[majority_expert] as f64 / count as f64,
                    mean_gamma: gamma_sum[language] / count as f64,
                    expert_counts,
                }
            })
            .collect();
        Ok(RoutingReport {
            num_experts,
            languages,
            utilization,
            total: decisions.len(),
        })
    }

    pub fn min_consistency(&self) -> f64 {
        self.languages
            .iter()
            .map(|l| l.consistency)
            .fold(1.0, f64::min)
    }

    /// Number of distinct majority experts across languages.
    pub fn distinct_majority_experts(&self) -> usize {
        let mut e: Vec<usize> = self.languages.iter().map(|l| l.majority_expert).collect();
        e.sort_unstable();
        e.dedup();
        e.len()
    }

    /// Expert → language, by which language sends the most utterances there.
    pub fn expert_language_map(&self) -> Vec<Option<usize>> {
        (0..self.num_experts)
            .map(|e| {
                self.languages
                    .iter()
                    .filter(|l| l.expert_counts[e] > 0)
                    .max_by_key(|l| (l.expert_counts[e], std::cmp::Reverse(l.language)))
                    .map(|l| l.language)
            })
            .collect()
    }

    /// Language identification accuracy of `decisions` when each selected
    /// expert is read as the language given by `map`.
    pub fn language_id_accuracy(decisions: &[RoutedUtterance], map: &[Option<usize>]) -> f64 {
        if decisions.is_empty() {
            return 0.0;
        }
        let hits = decisions
            .iter()
            .filter(|d| map.get(d.selected).copied().flatten() == Some(d.language))
            .count();
        hits as f64 / decisions.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,count,majority_expert,consistency,mean_gamma");
        for e in 0..self.num_experts {
            let _ = write!(s, ",expert_{e}");
        }
        s.push('\n');
        for l in &self.languages {
            let _ = write!(
                s,
                "{},{},{},{:.6},{:.6}",
                l.language, l.count, l.majority_expert, l.consistency, l.mean_gamma
            );
            for c in &l.expert_counts {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>6} {:>8} {:>12} {:>10}\n",
            "lang", "count", "majority", "consistency", "mean_gamma"
        );
        for l in &self.languages {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>8} {:>12.4} {:>10.4}",
                format!("L{}", l.language),
                l.count,
                l.majority_expert,
                l.consistency,
                l.mean_gamma
            );
        }
        let util: Vec<String> = self.utilization.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "utilization: [{}]  total: {}",
            util.join(", "),
            self.total
        );
        s
    }
}

/// Language identification from gate argmax alone. Each utterance is read
/// as the tuple of experts it selects across layers; a tuple maps to the
/// language that most often produced it when fitted. With one layer this is
/// the expert-to-language majority map.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgmaxLanguageId {
    map: BTreeMap<Vec<usize>, usize>,
}

fn signatures(layers: &[Vec<RoutedUtterance>]) -> Result<Vec<(Vec<usize>, usize)>> {
    let first = layers
        .first()
        .ok_or_else(|| MoleError::Contract("language id needs at least one routed layer".into()))?;
    if layers.iter().any(|l| l.len() != first.len()) {
        return Err(MoleError::Contract(
            "routed layers cover different utterances".into(),
        ));
    }
    Ok((0..first.len())
        .map(|i| {
            (
                layers.iter().map(|l| l[i].selected).collect(),
                first[i].language,
            )
        })
        .collect())
}

impl ArgmaxLanguageId {
    /// `layers[l][i]` is utterance `i` at layer `l`.
    pub fn fit(layers: &[Vec<RoutedUtterance>]) -> Result<Self> {
        let mut counts: BTreeMap<Vec<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
        for (sig, lang) in signatures(layers)? {
            *counts.entry(sig).or_default().entry(lang).or_default() += 1;
        }
        let map = counts
            .into_iter()
            .map(|(sig, by_lang)| {
                let best = by_lang
                    .iter()
                    .max_by_key(|(&l, &c)| (c, std::cmp::Reverse(l)))
                    .map(|(&l, _)| l)
                    .unwrap_or(0);
                (sig, best)
            })
            .collect();
        Ok(ArgmaxLanguageId { map })
    }

    pub fn predict(&self, selected: &[usize]) -> Option<usize> {
        self.map.get(selected).copied()
    }

    /// Fraction of utterances whose predicted language is correct; unseen
    /// tuples count as errors.
    pub fn accuracy(&self, layers: &[Vec<RoutedUtterance>]) -> Result<f64> {
        let sigs = signatures(layers)?;
        if sigs.is_empty() {
            return Err(MoleError::Contract(
                "language id accuracy over no utterances".into(),
            ));
        }
        let hits = sigs
            .iter()
            .filter(|(s, l)| self.predict(s) == Some(*l))
            .count();
        Ok(hits as f64 / sigs.len() as f64)
    }
}

pub const DECISIONS_CSV_HEADER: &str = "layer,utterance_id,language,selected,gamma,posterior\n";

/// Per-utterance CSV rows without header: layer, id, true language,
/// selected expert, gamma, posterior.
pub fn decisions_to_csv(layer: usize, decisions: &[RoutedUtterance]) -> String {
    let mut s = String::new();
    for d in decisions {
        let post: Vec<String> = d.posterior.iter().map(|p| format!("{p:.6}")).collect();
        let _ = writeln!(
            s,
            "{layer},{},{},{},{:.6},{}",
            d.utterance_id,
            d.language,
            d.selected,
            d.gamma,
            post.join(";")
        );
    }
    s
}
