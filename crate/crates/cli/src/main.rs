use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rubric_aqa::acceptance::{run_acceptance, Suite, Thresholds};
use rubric_aqa::data::{self, DataError, GeneratorConfig};
use rubric_aqa::engine::{self, corpus_for, EngineError, Predictor, RunConfig};
use rubric_aqa::{losses, metrics};

#[derive(Parser)]
#[command(name = "raqa", version, about = "Rubric-structured action quality assessment on synthetic clip features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (sample files, rubric.json, manifest.json).
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes final.rack and train_log.csv to the output dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a split and print the metrics report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Write per-sample records here as CSV.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Use this manifest instead of the one recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score one sample file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
    },
    /// Export the 10-bin uncertainty calibration curve as CSV.
    Calibration {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the acceptance suite and write a JSON report.
    Accept {
        #[arg(long, value_enum, default_value_t = SuiteArg::Fast)]
        suite: SuiteArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fast,
    Full,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

fn load_predictor(ckpt: &Path, manifest: Option<PathBuf>) -> Result<Predictor, EngineError> {
    let mut p = Predictor::load(ckpt)?;
    if let Some(m) = manifest {
        p.config.manifest = m;
        p.config.rubric_spec = None;
    }
    Ok(p)
}

fn run(command: Command) -> Result<ExitCode, EngineError> {
    match command {
        Command::GenData { config } => {
            let config_error = |e: &dyn std::fmt::Display| EngineError::Config(format!("{}: {e}", config.display()));
            let text = fs::read_to_string(&config).map_err(|e| config_error(&e))?;
            let cfg = GeneratorConfig::from_json(&text).map_err(|e| match e {
                DataError::Json { .. } => config_error(&e),
                other => other.into(),
            })?;
            let manifest = data::generate_dataset(&cfg)?;
            println!("wrote {} train and {} test samples; manifest {}", cfg.n_train, cfg.n_test, manifest.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let (final_path, logs) = engine::train(&cfg)?;
            if let Some(last) = logs.last() {
                println!(
                    "epoch {} total {:.6} mse {:.6} sparsity {:.4} ranking {:.4}",
                    last.epoch, last.loss.total, last.loss.mse, last.loss.sparsity, last.loss.ranking
                );
            }
            println!("checkpoint {}", final_path.display());
        }
        Command::Eval { ckpt, split, records, manifest } => {
            let p = load_predictor(&ckpt, manifest)?;
            let corpus = corpus_for(&p)?;
            let (report, recs) = p.evaluate(corpus.split(split.name())?)?;
            if let Some(path) = records {
                let file = fs::File::create(&path).map_err(io_error(&path))?;
                engine::write_records_csv(file, &recs)?;
            }
            let json = serde_json::to_string_pretty(&report).map_err(|e| EngineError::Config(e.to_string()))?;
            println!("{json}");
        }
        Command::Predict { ckpt, sample } => {
            let p = Predictor::load(&ckpt)?;
            let s = data::load_sample(&sample)?;
            let prepared = p.prepare(&s)?;
            let out = p.predict(&prepared, p.config.sampling(), p.eval_key(0))?;
            println!("sample {}", s.id());
            println!("score {:.6}", out.score);
            println!("score_raw {:.6}", p.denormalize(out.score));
            match out.uncertainty {
                Some(u) => println!("uncertainty {u:.6}"),
                None => println!("uncertainty none"),
            }
            let centers = losses::attention_centers(&out.attention);
            let peaks = out.attention.peaks();
            for (i, (c, pk)) in centers.iter().zip(&peaks).enumerate() {
                println!("step {i} type {} center {c:.3} peak {pk}", s.step_types[i]);
            }
        }
        Command::Calibration { ckpt, split, out, manifest } => {
            let p = load_predictor(&ckpt, manifest)?;
            let corpus = corpus_for(&p)?;
            let curve = p.calibration(corpus.split(split.name())?)?;
            let file = fs::File::create(&out).map_err(io_error(&out))?;
            let tau = metrics::write_calibration_csv(std::io::BufWriter::new(file), &curve)?;
            println!("kendall_tau {tau:.6}");
        }
        Command::Accept { suite, out } => {
            let suite = match suite {
                SuiteArg::Fast => Suite::Fast,
                SuiteArg::Full => Suite::Full,
            };
            let report = run_acceptance(
                suite,
                &Thresholds::builtin(),
                |r| {
                    println!("{}", r.line());
                    std::io::stdout().flush().ok();
                },
                |m| eprintln!("  {m}"),
            );
            let json = serde_json::to_string_pretty(&report).map_err(|e| EngineError::Config(e.to_string()))?;
            fs::write(&out, json).map_err(io_error(&out))?;
            if !report.all_pass() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
