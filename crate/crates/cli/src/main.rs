//! `despk`: synthetic corpus generation, two-phase disentanglement
//! training, trial scoring with EER, and self-verification suites.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use despk_core::data::{
    generate_synthetic_corpus, load_corpus, make_trials, read_trials, write_corpus, write_trials,
    Corpus,
};
use despk_core::eval::{evaluate, export_embeddings, score_dump_csv};
use despk_core::nets::ModelBundle;
use despk_core::train::{fit, log_csv, Features, LossSet};
use despk_core::verify::{eer_oracle_suite, gradcheck_suite, mi_bench, SuiteReport};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "despk",
    version,
    about = "Disentangled speaker-embedding training and verification at desk scale",
    after_help = RunConfig::help_listing()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus: WAV files plus a manifest.
    Synth {
        /// Number of distinct synthetic speakers (at least 2).
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        /// Utterances per speaker (at least 2).
        #[arg(long, default_value_t = 10)]
        utts: usize,
        /// Length of each utterance in seconds.
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Also write `trials.txt` with this many target and as many
        /// nontarget pairs.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train on a corpus directory containing WAVs and a manifest.tsv.
    #[command(after_help = RunConfig::help_listing())]
    Train {
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory (must contain manifest.tsv).
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Restrict the training criteria, e.g. "ls,lr,lmi,lic" or
        /// "ls,lr,ladv"; overrides the `losses` key.
        #[arg(long)]
        ablation: Option<String>,
        /// Override one configuration key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a trial list with a trained model and report the EER.
    #[command(after_help = RunConfig::help_listing())]
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Corpus directory (must contain manifest.tsv).
        #[arg(long)]
        corpus: PathBuf,
        /// Trial list: `1|0 speaker/utt speaker/utt` per line.
        #[arg(long)]
        trials: PathBuf,
        /// Output directory for the score dump and embedding export.
        #[arg(long)]
        out: PathBuf,
        /// Configuration file; pass the one used for training so framing
        /// matches the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one configuration key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a self-verification suite and report per-case results.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    /// Finite-difference checks of every training criterion.
    Gradcheck,
    /// Critic training on correlated Gaussians vs the analytic MI.
    MiBench,
    /// Brute-force cross-check of the EER threshold sweep.
    EerOracle,
}

enum AppError {
    /// Bad flag values or inconsistent command-line input: exit 1.
    Usage(String),
    /// Anything that fails after the command line was sound: exit 2.
    Runtime(String),
    /// A verification suite ran and reported failures: exit 3.
    VerifyFailed,
}

impl From<despk_core::Error> for AppError {
    fn from(e: despk_core::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::VerifyFailed) => ExitCode::from(3),
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Synth { speakers, utts, seconds, seed, out, trials } => {
            cmd_synth(speakers, utts, seconds, seed, &out, trials)
        }
        Cmd::Train { config, corpus, out, ablation, set } => {
            cmd_train(config.as_deref(), &corpus, &out, ablation.as_deref(), &set)
        }
        Cmd::Eval { model, corpus, trials, out, config, set } => {
            cmd_eval(&model, &corpus, &trials, &out, config.as_deref(), &set)
        }
        Cmd::Verify { suite } => cmd_verify(suite),
    }
}

/// Builds the merged configuration: defaults, then the file, then --set
/// overrides in order, then --ablation.
fn merged_config(
    file: Option<&Path>,
    sets: &[String],
    ablation: Option<&str>,
) -> Result<RunConfig, AppError> {
    let mut rc = RunConfig::default();
    if let Some(path) = file {
        rc.apply_file(path)?;
    }
    for kv in sets {
        rc.apply_set(kv).map_err(|e| AppError::Usage(e.to_string()))?;
    }
    if let Some(spec) = ablation {
        rc.train.losses =
            LossSet::parse(spec).map_err(|e| AppError::Usage(format!("--ablation: {e}")))?;
    }
    Ok(rc)
}

fn load_corpus_dir(dir: &Path, min_seconds: f64) -> Result<Corpus, AppError> {
    let manifest = dir.join("manifest.tsv");
    if !manifest.is_file() {
        return Err(AppError::Runtime(format!("no manifest.tsv under {}", dir.display())));
    }
    let outcome = load_corpus(dir, &manifest, min_seconds)?;
    for line in &outcome.rejected {
        eprintln!("skipped: {line}");
    }
    Ok(outcome.corpus)
}

fn cmd_synth(
    speakers: usize,
    utts: usize,
    seconds: f64,
    seed: u64,
    out: &Path,
    trials: Option<usize>,
) -> Result<(), AppError> {
    if speakers < 2 {
        return Err(AppError::Usage("--speakers must be at least 2 (same/different-speaker pairing needs two)".into()));
    }
    if utts < 2 {
        return Err(AppError::Usage("--utts must be at least 2 (segment pairing needs two per speaker)".into()));
    }
    if !(seconds > 0.0) {
        return Err(AppError::Usage(format!("--seconds must be positive, got {seconds}")));
    }
    if let Some(n) = trials {
        if n == 0 {
            return Err(AppError::Usage("--trials must be at least 1".into()));
        }
    }
    let corpus = generate_synthetic_corpus(speakers, utts, seconds, seed)?;
    std::fs::create_dir_all(out)?;
    let manifest = write_corpus(&corpus, out)?;
    println!(
        "wrote {} utterances from {} speakers under {} (manifest {})",
        corpus.len(),
        corpus.n_speakers(),
        out.display(),
        manifest.display()
    );
    if let Some(n) = trials {
        let set = make_trials(&corpus, n, n, seed)?;
        let path = out.join("trials.txt");
        write_trials(&corpus, &set, &path)?;
        println!("wrote {} trials to {}", set.trials.len(), path.display());
    }
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    corpus_dir: &Path,
    out: &Path,
    ablation: Option<&str>,
    sets: &[String],
) -> Result<(), AppError> {
    let rc = merged_config(config, sets, ablation)?;
    // An utterance must outlast one segment so two distinct offsets exist.
    let min_seconds = rc.train.segment_s + rc.train.frame.window_ms / 1000.0;
    let corpus = load_corpus_dir(corpus_dir, min_seconds)?;
    let sr = corpus.utterance(0).wave.sample_rate;
    let cfg = rc.resolve(corpus.n_speakers(), sr)?;
    cfg.validate(&corpus)?;
    std::fs::create_dir_all(out)?;

    let output = fit(&cfg, &corpus, Some(out))?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log_csv(&output.log))?;
    let last = output.log.last().map(|r| r.report.total).unwrap_or(f64::NAN);
    println!(
        "trained {} + {} epochs ({} steps) on {} speakers; final total loss {last:.6}",
        cfg.phase1_epochs,
        cfg.phase2_epochs,
        output.log.len(),
        corpus.n_speakers(),
    );
    println!("checkpoints and {} written under {}", log_path.display(), out.display());
    Ok(())
}

fn cmd_eval(
    model: &Path,
    corpus_dir: &Path,
    trials_path: &Path,
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
) -> Result<(), AppError> {
    let rc = merged_config(config, sets, None)?;
    let bundle = ModelBundle::load(model)?;
    let frame = rc.train.frame;
    if frame.bins() != bundle.config.bins {
        return Err(AppError::Runtime(format!(
            "framing gives {} bins but the checkpoint expects {}; pass the training config",
            frame.bins(),
            bundle.config.bins
        )));
    }
    let corpus = load_corpus_dir(corpus_dir, 0.0)?;
    let sr = corpus.utterance(0).wave.sample_rate;
    if !trials_path.is_file() {
        return Err(AppError::Runtime(format!("trials file {} not found", trials_path.display())));
    }
    let trials = read_trials(&corpus, trials_path)?;
    let feats = Features::new(frame, bundle.config.mel_bins, sr)?;
    // Segment seconds are recovered from the checkpoint's frame count, so
    // evaluation windows always match the training geometry.
    let window = frame.window_samples(sr);
    let hop = frame.hop_samples(sr);
    let segment_s = ((bundle.config.frames - 1) * hop + window) as f64 / sr as f64;

    let (eer, scored) = evaluate(&bundle, &corpus, &trials, &feats, segment_s)?;
    std::fs::create_dir_all(out)?;
    let scores_path = out.join("scores.csv");
    std::fs::write(&scores_path, score_dump_csv(&corpus, &scored))?;
    let emb_path = out.join("embeddings.csv");
    export_embeddings(&bundle, &corpus, &feats, segment_s, &emb_path)?;
    println!("EER: {:.4} ({:.4}%)", eer.eer, 100.0 * eer.eer);
    println!(
        "threshold {:.6} (FAR {:.4}, FRR {:.4}) over {} trials",
        eer.threshold,
        eer.far,
        eer.frr,
        scored.len()
    );
    println!("scores in {}, embeddings in {}", scores_path.display(), emb_path.display());
    Ok(())
}

fn cmd_verify(suite: Suite) -> Result<(), AppError> {
    let report: SuiteReport = match suite {
        Suite::Gradcheck => gradcheck_suite()?,
        Suite::MiBench => mi_bench()?,
        Suite::EerOracle => eer_oracle_suite()?,
    };
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        Err(AppError::VerifyFailed)
    }
}
