//! The seven-row ablation grid over model kind and the LRL / LaE / calibration flags.

use std::fmt::{self, Write as _};

use crate::config::{ModelConfig, ModelKind};
use crate::corpus::Corpus;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::train::{train, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Tfm,
    Moe,
    MoeLae,
    MoleLrl,
    MoleLae,
    MoleLrlLae,
    MoleFull,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Tfm,
        Variant::Moe,
        Variant::MoeLae,
        Variant::MoleLrl,
        Variant::MoleLae,
        Variant::MoleLrlLae,
        Variant::MoleFull,
    ];

    /// (kind, lrl, lae, calibration)
    pub fn flags(self) -> (ModelKind, bool, bool, bool) {
        match self {
            Variant::Tfm => (ModelKind::Tfm, false, false, false),
            Variant::Moe => (ModelKind::Moe, false, false, false),
            Variant::MoeLae => (ModelKind::Moe, false, true, false),
            Variant::MoleLrl => (ModelKind::Mole, true, false, false),
            Variant::MoleLae => (ModelKind::Mole, false, true, false),
            Variant::MoleLrlLae => (ModelKind::Mole, true, true, false),
            Variant::MoleFull => (ModelKind::Mole, true, true, true),
        }
    }

    /// `base` with kind and flags replaced. Expert positions of a TFM base
    /// fall back to the default placement.
    pub fn config(self, base: &ModelConfig) -> ModelConfig {
        let (kind, lrl, lae, cal) = self.flags();
        if kind == ModelKind::Tfm {
            return base.as_tfm();
        }
        let positions = if base.expert_positions.is_empty() {
            ModelConfig::default().expert_positions
        } else {
            base.expert_positions.clone()
        };
        ModelConfig {
            kind,
            expert_positions: positions,
            use_lrl: lrl,
            use_lae: lae,
            use_calibration: cal,
            ..base.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tfm => "tfm",
            Variant::Moe => "moe",
            Variant::MoeLae => "moe+lae",
            Variant::MoleLrl => "mole+lrl",
            Variant::MoleLae => "mole+lae",
            Variant::MoleLrlLae => "mole+lrl+lae",
            Variant::MoleFull => "mole+lrl+lae+calib",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub num_params: usize,
    pub report: EvalReport,
    pub log: TrainLog,
}

impl AblationRow {
    /// Mean of the last 20 logged values of (ctc, lrl, balance).
    pub fn final_losses(&self) -> [f64; 3] {
        [
            self.log.trailing_mean(20, |s| s.ctc),
            self.log.trailing_mean(20, |s| s.lrl),
            self.log.trailing_mean(20, |s| s.balance),
        ]
    }
}

/// Trains and evaluates one variant on the test split.
pub fn run_variant(variant: Variant, base: &ModelConfig, corpus: &Corpus) -> Result<AblationRow> {
    let cfg = variant.config(base);
    let (ckpt, log) = train(&cfg, corpus)?;
    let model: Model = ckpt.to_model()?;
    let report = evaluate(&model, &corpus.test, &corpus.language_names())?;
    Ok(AblationRow {
        variant,
        seed: cfg.seed,
        num_params: model.num_params(),
        report,
        log,
    })
}

/// Runs `variants` in order with the shared seed and corpus.
pub fn run_variants(
    variants: &[Variant],
    base: &ModelConfig,
    corpus: &Corpus,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| run_variant(v, base, corpus))
        .collect()
}

/// The full seven-row grid.
pub fn ablation_matrix(base: &ModelConfig, corpus: &Corpus) -> Result<Vec<AblationRow>> {
    run_variants(&Variant::ALL, base, corpus)
}

/// One line per row: flags, per-language CER, OVR and final loss components.
pub fn rows_to_csv(rows: &[AblationRow], language_names: &[String]) -> String {
    let mut s = String::from("variant,seed,kind,lrl,lae,calib,params");
    for n in language_names {
        let _ = write!(s, ",cer_{n}");
    }
    s.push_str(",cer_ovr,ctc,lrl_loss,balance_loss\n");
    for r in rows {
        let (kind, lrl, lae, cal) = r.variant.flags();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            kind,
            u8::from(lrl),
            u8::from(lae),
            u8::from(cal),
            r.num_params
        );
        for i in 0..language_names.len() {
            match r.report.cer_of(i) {
                Some(c) => {
                    let _ = write!(s, ",{c:.6}");
                }
                None => s.push(','),
            }
        }
        let [ctc, lrl_l, bal] = r.final_losses();
        let _ = writeln!(
            s,
            ",{:.6},{ctc:.6},{lrl_l:.6},{bal:.6}",
            r.report.overall.value()
        );
    }
    s
}
