use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gansfer_core::acceptance::{self, Outcome};
use gansfer_core::error::Error;
use gansfer_core::experiment::{self as exp, Cell, ClassificationOutcome, ExperimentConfig, OUTPUT_ENV};
use gansfer_core::gansfer::Phase;
use gansfer_core::segmenter::Ratio;

/// Exit status of a run whose configuration is unusable.
const EXIT_CONFIG: u8 = 2;
/// Exit status of a stage that failed; completed stages stay on disk.
const EXIT_STAGE: u8 = 3;
/// Exit status of `check` when a criterion fails.
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "gansfer", version, about = "GAN-based augmentation experiments with labelled plus unlabelled images")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the config and the environment variable.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Restrict stage commands to one fold.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Restrict stage commands to one labelled budget.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom cohort under <output>/data.
    PhantomGen,
    /// Write folds, cell splits and the preprocessed GAN inputs.
    Preprocess,
    /// Train the GANs of each cell up to the given phase.
    TrainGan {
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
    },
    /// Draw raw samples from the phase-2 and phase-3 generators.
    Synth,
    /// Slice assignment, mask repair and quality scoring.
    Postprocess,
    /// Per-source percentile quality filter.
    Filter,
    /// Train segmenters; all configured ratios unless one is given.
    TrainSeg {
        #[arg(long)]
        ratio: Option<String>,
    },
    /// Score segmenters on held-out subjects.
    Evaluate {
        #[arg(long)]
        ratio: Option<String>,
    },
    /// Volume-feature CDR classification from predicted segmentations.
    Classify {
        #[arg(long)]
        ratio: Option<String>,
    },
    /// Tables and plots from whatever results exist.
    Report,
    /// Every stage in order, then the report and the manifest.
    Run,
    /// Run the acceptance checks; exits with status 4 if any fails.
    Check {
        /// Criteria to run; default is the ones that need no long training.
        #[arg(value_delimiter = ',')]
        criteria: Vec<u8>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::BadBudget(_) | Error::NonDyadic { .. } => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli.config.clone().ok_or_else(|| Error::Config(format!("--config is required (output root may come from {OUTPUT_ENV})")))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(out) = &cli.output {
        cfg.output_root = out.clone();
    }
    if let Some(f) = cli.fold {
        if f >= cfg.n_folds {
            return Err(Error::Config(format!("fold {f} out of range for {} folds", cfg.n_folds)));
        }
        cfg.folds = vec![f];
    }
    if let Some(b) = cli.budget {
        if !cfg.budgets.contains(&b) {
            return Err(Error::Config(format!("budget {b} is not in the config")));
        }
        cfg.budgets = vec![b];
    }
    Ok(cfg)
}

fn ratios(cfg: &ExperimentConfig, one: &Option<String>) -> Result<Vec<Ratio>, Error> {
    match one {
        Some(r) => Ok(vec![r.parse()?]),
        None => cfg.ratios(),
    }
}

fn per_cell(cfg: &ExperimentConfig, mut f: impl FnMut(Cell) -> Result<String, Error>) -> Result<(), Error> {
    for cell in exp::cells_of(cfg) {
        let msg = f(cell)?;
        println!("fold {} budget {}: {msg}", cell.fold, cell.budget);
    }
    Ok(())
}

fn run_stage(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    if let Command::PhantomGen = cli.command {
        let made = exp::phantom_gen(&cfg)?;
        println!("{}", if made { "phantom cohort written" } else { "phantom cohort already present or not configured" });
        return Ok(());
    }
    if let Command::Report = cli.command {
        let s = gansfer_core::report::report(&cfg)?;
        println!("{}\n{}", s.table1.display(), s.table2.display());
        for p in &s.plots {
            println!("{}", p.display());
        }
        return Ok(());
    }
    if let Command::Run = cli.command {
        let s = exp::run_experiment(&cfg, &mut |m: &str| println!("{m}"))?;
        println!("tables in {}", s.table1.parent().map_or(String::new(), |p| p.display().to_string()));
        return Ok(());
    }
    exp::phantom_gen(&cfg)?;
    let ds = exp::load_dataset(&cfg)?;
    match &cli.command {
        Command::Preprocess => per_cell(&cfg, |c| Ok(format!("{} slices", exp::preprocess_stage(&cfg, &ds, c)?))),
        Command::TrainGan { phase } => {
            let upto = match phase {
                PhaseArg::One => Phase::P1,
                PhaseArg::Two => Phase::P2,
                PhaseArg::Three | PhaseArg::All => Phase::P3,
            };
            per_cell(&cfg, |c| Ok(format!("{} GAN(s) trained up to {upto:?}", exp::train_gans(&cfg, &ds, c, upto)?.len())))
        }
        Command::Synth => per_cell(&cfg, |c| Ok(format!("{} raw samples", exp::synth_stage(&cfg, c)?))),
        Command::Postprocess => per_cell(&cfg, |c| Ok(format!("{} samples postprocessed", exp::postprocess_stage(&cfg, &ds, c)?))),
        Command::Filter => per_cell(&cfg, |c| Ok(format!("{} samples kept", exp::filter_stage(&cfg, c)?))),
        Command::TrainSeg { ratio } => {
            let rs = ratios(&cfg, ratio)?;
            per_cell(&cfg, |c| {
                let dirs = rs.iter().map(|&r| exp::train_seg_stage(&cfg, &ds, c, r)).collect::<Result<Vec<_>, _>>()?;
                Ok(format!("{} segmenter(s)", dirs.len()))
            })
        }
        Command::Evaluate { ratio } => {
            let rs = ratios(&cfg, ratio)?;
            per_cell(&cfg, |c| {
                let mut parts = Vec::new();
                for &r in &rs {
                    let e = exp::evaluate_stage(&cfg, &ds, c, r)?;
                    let mean = |v: &[gansfer_core::evaluation::DscReport]| v.iter().map(|d| d.overall).sum::<f64>() / v.len().max(1) as f64;
                    parts.push(format!("{} in {:.4} out {:.4}", r.label(), mean(&e.in_domain), mean(&e.out_of_domain)));
                }
                Ok(parts.join(", "))
            })
        }
        Command::Classify { ratio } => {
            let rs = ratios(&cfg, ratio)?;
            per_cell(&cfg, |c| {
                let mut parts = Vec::new();
                for &r in &rs {
                    parts.push(match exp::classify_stage(&cfg, c, r)? {
                        ClassificationOutcome::Done(res) => format!("{} acc {:.1}% auc {:.3}", r.label(), res.accuracy, res.auc),
                        ClassificationOutcome::Skipped(why) => format!("{} skipped ({why})", r.label()),
                    });
                }
                Ok(parts.join(", "))
            })
        }
        Command::PhantomGen | Command::Report | Command::Run | Command::Check { .. } => unreachable!("handled above"),
    }
}

fn check(criteria: &[u8]) -> ExitCode {
    let outcomes: Vec<Outcome> = if criteria.is_empty() {
        acceptance::quick_criteria()
    } else {
        let mut v = Vec::new();
        if criteria.iter().any(|c| (1..=3).contains(c)) {
            match acceptance::freeze_run(0) {
                Ok(run) => {
                    for &c in criteria.iter().filter(|c| (1..=3).contains(*c)) {
                        v.push(match c {
                            1 => acceptance::criterion_1(&run),
                            2 => acceptance::criterion_2(&run),
                            _ => acceptance::criterion_3(&run),
                        });
                    }
                }
                Err(e) => {
                    eprintln!("phase-contract fixture failed: {e}");
                    return ExitCode::from(EXIT_STAGE);
                }
            }
        }
        if criteria.iter().any(|c| *c == 10 || *c == 11) {
            let runs: Result<Vec<_>, _> = [0, 1, 2].iter().map(|&s| acceptance::EndToEndConfig::small(s).and_then(|c| acceptance::end_to_end(&c))).collect();
            match runs {
                Ok(runs) => {
                    if criteria.contains(&10) {
                        v.push(acceptance::criterion_10(&runs.iter().map(|r| r.diversity).collect::<Vec<_>>()));
                    }
                    if criteria.contains(&11) {
                        v.push(acceptance::criterion_11(&runs));
                    }
                }
                Err(e) => {
                    eprintln!("end-to-end fixture failed: {e}");
                    return ExitCode::from(EXIT_STAGE);
                }
            }
        }
        for &c in criteria {
            let f: Option<fn() -> Outcome> = match c {
                4 => Some(acceptance::criterion_4),
                5 => Some(acceptance::criterion_5),
                6 => Some(acceptance::criterion_6),
                7 => Some(acceptance::criterion_7),
                8 => Some(acceptance::criterion_8),
                9 => Some(acceptance::criterion_9),
                12 => Some(acceptance::criterion_12),
                13 => Some(acceptance::criterion_13),
                1..=3 | 10 | 11 => None,
                _ => {
                    eprintln!("unknown criterion {c}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(f) = f {
                v.push(f());
            }
        }
        v.sort_by_key(|o| o.criterion);
        v
    };
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Check { criteria } = &cli.command {
        return check(criteria);
    }
    match run_stage(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
