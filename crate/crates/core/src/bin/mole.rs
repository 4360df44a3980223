use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mole::ablation::{rows_to_csv, run_variants, Variant};
use mole::checkpoint::Checkpoint;
use mole::config::ModelConfig;
use mole::corpus::{corpus_hash, generate_corpus, Corpus, CorpusSpec, Split};
use mole::diagnostics::gradient_suite;
use mole::eval::evaluate_with_threads;
use mole::losses::{decisions_to_csv, ArgmaxLanguageId, DECISIONS_CSV_HEADER};
use mole::train::Trainer;
use mole::{MoleError, Result};

#[derive(Parser)]
#[command(
    name = "mole",
    version,
    about = "Multilingual CTC recognition with language-routed experts"
)]
struct Cli {
    /// Overrides the seed of corpus specs and model configs.
    #[arg(long, env = "MOLE_SEED", global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation. Training is single-threaded.
    #[arg(long, env = "MOLE_THREADS", global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual corpus.
    GenCorpus {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metric log path; defaults to `<out>.log.tsv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint instead of initialising.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a split and report CER per language.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        report: ReportFormat,
    },
    /// Export routing decisions of every expert layer as CSV.
    RouteInspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the seven ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Additional seeds; each runs the full grid.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MoleError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MoleError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ModelConfig> {
    let mut c = ModelConfig::from_toml(&read(path)?)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn load_model(ckpt: &Path, corpus: &Corpus) -> Result<mole::model::Model> {
    let c = Checkpoint::load(ckpt)?;
    let vocab: String = corpus.vocabulary.chars().iter().collect();
    if c.vocabulary != vocab {
        return Err(MoleError::Contract(
            "checkpoint vocabulary differs from the corpus".into(),
        ));
    }
    c.to_model()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { spec, out } => {
            let mut s = match spec {
                Some(p) => CorpusSpec::from_toml(&read(&p)?)?,
                None => CorpusSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let corpus = generate_corpus(&s)?;
            corpus.save(&out)?;
            println!(
                "wrote {} train / {} dev / {} test utterances to {}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                out.display()
            );
            println!("sha256 {}", corpus_hash(&out)?);
        }
        Command::Train {
            config,
            corpus,
            out,
            log,
            resume,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let corpus = Corpus::load(&corpus)?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(
                    &Checkpoint::load_with_config(
                        &p,
                        &cfg.resolved(
                            corpus.feature_dim(),
                            corpus.vocabulary.size(),
                            corpus.num_languages(),
                        )?,
                    )?,
                    &corpus,
                )?,
                None => Trainer::new(&cfg, &corpus)?,
            };
            println!("{} parameters", trainer.model.num_params());
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.tsv");
                PathBuf::from(p)
            });
            let result = trainer.run();
            write(&log_path, &trainer.log.to_text())?;
            match result {
                Ok(()) => {}
                Err(MoleError::Diverged { step, last_good }) => {
                    last_good.save(&out)?;
                    return Err(MoleError::Numeric(format!(
                        "training diverged at step {step}; last good state written to {}",
                        out.display()
                    )));
                }
                Err(e) => return Err(e),
            }
            trainer.checkpoint().save(&out)?;
            if let Some(e) = trainer.log.evals.last() {
                println!("dev CER {:.4} after {} steps", e.overall, e.step);
            }
            println!("checkpoint {}", out.display());
        }
        Command::Eval {
            ckpt,
            corpus,
            split,
            report,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let model = load_model(&ckpt, &corpus)?;
            let r = evaluate_with_threads(
                &model,
                corpus.split(split),
                &corpus.language_names(),
                cli.threads,
            )?;
            match report {
                ReportFormat::Csv => print!("{}", r.to_csv()),
                ReportFormat::Table => print!("{}", r.to_table()),
            }
        }
        Command::RouteInspect {
            ckpt,
            corpus,
            split,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let model = load_model(&ckpt, &corpus)?;
            let r = evaluate_with_threads(
                &model,
                corpus.split(split),
                &corpus.language_names(),
                cli.threads,
            )?;
            let mut text = String::new();
            if !r.decisions.is_empty() {
                text.push_str(DECISIONS_CSV_HEADER);
                for (i, d) in r.decisions.iter().enumerate() {
                    text.push_str(&decisions_to_csv(i + 1, d));
                }
                for (i, rep) in r.routing.iter().enumerate() {
                    println!("layer {}", i + 1);
                    print!("{}", rep.to_table());
                }
                if split != Split::Train {
                    let fit = evaluate_with_threads(
                        &model,
                        &corpus.train,
                        &corpus.language_names(),
                        cli.threads,
                    )?;
                    let id = ArgmaxLanguageId::fit(&fit.decisions)?;
                    println!(
                        "gate-argmax language id accuracy: {:.4}",
                        id.accuracy(&r.decisions)?
                    );
                }
            } else if !r.traces.is_empty() {
                for (i, t) in r.traces.iter().enumerate() {
                    text.push_str(&format!("# moe layer {}\n", i + 1));
                    text.push_str(&t.to_csv());
                }
            } else {
                return Err(MoleError::Contract(
                    "model has no expert layers to inspect".into(),
                ));
            }
            write(&out, &text)?;
            println!("routing written to {}", out.display());
        }
        Command::Ablate {
            config,
            corpus,
            out,
            seeds,
        } => {
            let base = load_config(&config, cli.seed)?;
            let corpus = Corpus::load(&corpus)?;
            let seeds = if seeds.is_empty() {
                vec![base.seed]
            } else {
                seeds
            };
            let mut rows = Vec::new();
            for s in seeds {
                let cfg = ModelConfig {
                    seed: s,
                    ..base.clone()
                };
                for r in run_variants(&Variant::ALL, &cfg, &corpus)? {
                    println!(
                        "seed {s} {:<20} OVR CER {:.4}",
                        r.variant.name(),
                        r.report.overall.value()
                    );
                    rows.push(r);
                }
            }
            write(&out, &rows_to_csv(&rows, &corpus.language_names()))?;
        }
        Command::Gradcheck { module } => {
            let entries = gradient_suite(module.as_deref())?;
            let mut failed = 0;
            for e in &entries {
                println!(
                    "{:<28} {} max rel err {:.3e} (tol {:.0e}, {} entries, {:.2?})",
                    e.module,
                    if e.passed() { "PASS" } else { "FAIL" },
                    e.report.max_rel_error,
                    e.tolerance,
                    e.report.checked,
                    e.elapsed
                );
                failed += usize::from(!e.passed());
            }
            if failed > 0 {
                return Err(MoleError::Numeric(format!(
                    "{failed} gradient checks failed"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
