use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svfeye::calibration::{self, CalibrationRecord};
use svfeye::canonical::{format_scalar, Value};
use svfeye::pipeline::{self, PipelineConfig};
use svfeye::synth::{self, Scenario};
use svfeye::{gate, trace};

#[derive(Parser, Debug)]
#[command(
    name = "svfeye",
    version,
    about = "Confidence-gated crop localization over model traces"
)]
struct Cli {
    /// Pipeline configuration file (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Gate one trace: answer directly or fuse
    Decide {
        #[arg(long)]
        trace: PathBuf,
        /// Overrides the configured threshold
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Localize crops for one trace, bypassing the gate
    Localize {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select a threshold from labeled calibration records (JSON lines)
    Calibrate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Also report rates at these fixed thresholds
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every trace in a directory and write decisions plus report.json
    Pipeline {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        /// Worker threads; 1 runs serially
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate seeded synthetic traces with ground truth
    Synth {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write calibration records derived from the traces
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Check a trace file against the schema and invariants
    Validate {
        #[arg(long)]
        trace: PathBuf,
    },
}

enum Failure {
    /// Bad invocation or unusable input location.
    Usage(String),
    /// The command ran but some sample failed.
    Sample(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn sample(e: impl std::fmt::Display) -> Failure {
    Failure::Sample(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(usage),
        None => Ok(PipelineConfig::default()),
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Decide { trace: path, tau } => {
            require_file(&path)?;
            if let Some(t) = tau {
                config.threshold = t;
            }
            config.validate().map_err(usage)?;
            let t = trace::load_trace(&path).map_err(sample)?;
            let c = gate::confidence_score(&t.answer_token_probs).map_err(sample)?;
            let d = gate::decide(c, config.threshold);
            println!(
                "{} sample_id={} confidence={} threshold={}",
                d.action.as_str(),
                t.sample_id,
                format_scalar(d.confidence),
                format_scalar(d.threshold)
            );
        }
        Command::Localize { trace: path, out } => {
            require_file(&path)?;
            let t = trace::load_trace(&path).map_err(sample)?;
            let (crops, merged) = pipeline::localize_trace(&t, &config).map_err(sample)?;
            let doc = Value::obj()
                .field("format_version", Value::Int(trace::FORMAT_VERSION as i64))
                .field("sample_id", Value::str(&t.sample_id))
                .field("mode", Value::str(t.mode_hint.as_str()))
                .field(
                    "crops",
                    Value::Arr(crops.iter().map(|c| c.to_canonical()).collect()),
                )
                .field(
                    "merged_crop",
                    Value::opt(merged.as_ref(), |c| c.to_canonical()),
                )
                .build();
            emit(&doc.render(), out.as_deref())?;
        }
        Command::Calibrate {
            records,
            lambda,
            sweep,
            out,
        } => {
            require_file(&records)?;
            let recs = calibration::load_records(&records).map_err(usage)?;
            let res = calibration::optimal_threshold(&recs, lambda).map_err(usage)?;
            println!(
                "tau={} utility={} always_fuse={} lambda={}",
                format_scalar(res.chosen_tau),
                format_scalar(res.utility_at_tau),
                res.is_always_fuse(),
                format_scalar(lambda)
            );
            if !sweep.is_empty() {
                println!("tau\ttpr\tfpr\tfuse_fraction");
                for row in calibration::sweep_fixed_thresholds(&recs, &sweep).map_err(usage)? {
                    println!(
                        "{}\t{}\t{}\t{}",
                        format_scalar(row.tau),
                        format_scalar(row.tpr),
                        format_scalar(row.fpr),
                        format_scalar(row.fuse_fraction)
                    );
                }
            }
            if let Some(p) = out {
                emit(&res.to_canonical().render(), Some(&p))?;
            }
        }
        Command::Pipeline {
            traces,
            out,
            tau,
            threads,
        } => {
            if !traces.is_dir() {
                return Err(usage(format!("no such directory: {}", traces.display())));
            }
            if let Some(t) = tau {
                config.threshold = t;
            }
            let threads = threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let output = pipeline::run_batch(&traces, &config, threads).map_err(usage)?;
            pipeline::write_batch(&output, &out).map_err(usage)?;
            let r = &output.report;
            println!(
                "samples={} processed={} errors={} fuse_fraction={}",
                r.n_samples,
                r.n_processed,
                r.errors.len(),
                format_scalar(r.fuse_fraction)
            );
            if !r.errors.is_empty() {
                for e in &r.errors {
                    eprintln!("{}: {}", e.source, e.message);
                }
                return Err(sample(format!("{} sample(s) failed", r.errors.len())));
            }
        }
        Command::Synth {
            scenario,
            n,
            seed,
            out,
            records,
        } => {
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let seed = seed.unwrap_or(config.seed);
            let samples = synth::generate_synthetic(n, scenario, seed);
            synth::write_synthetic(&out, &samples, scenario, seed).map_err(usage)?;
            if let Some(p) = records {
                let recs: Vec<CalibrationRecord<f64>> = samples
                    .iter()
                    .filter_map(|(t, _)| CalibrationRecord::from_trace(t))
                    .collect();
                emit(&calibration::render_records(&recs), Some(&p))?;
            }
            println!("wrote {n} {scenario} trace(s) to {}", out.display());
        }
        Command::Validate { trace: path } => {
            let report = trace::validate_trace(&path).map_err(usage)?;
            print!("{report}");
            if !report.is_valid() {
                return Err(sample(format!("{} violation(s)", report.violations.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Sample(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
