//! `sct`: fit, sample and score scalable composite transformation models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sct::config::ModelConfig;
use sct::estimation::holdout_split;
use sct::geometry::maximin_order;
use sct::io::{
    ingest_csv_path, load_ensemble, load_model, load_noise, save_ensemble, save_model, save_noise, Ensemble,
};
use sct::model::{exceedance_map, global_quantile, reference_noise, Direction, FittedModel, ScoreReport};
use sct::synthetic::skewed_field;
use sct::{Result, SctError};

#[derive(Parser)]
#[command(name = "sct", version, about = "Scalable composite transformations for non-Gaussian spatial fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the maximin permutation and its distance table as CSV.
    Order {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to an ensemble file.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited optimizer trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate new fields from a fitted model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'n', long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reference noise file to consume instead of the seeded stream.
        #[arg(long)]
        common_noise: Option<PathBuf>,
        /// Truncate output values to `lo,hi` (display only).
        #[arg(long, value_parser = parse_range)]
        clamp: Option<(f64, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a reference noise file for common-noise sampling.
    Noise {
        #[arg(short = 'n', long)]
        count: usize,
        #[arg(long)]
        locations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out log score of a fitted model, or of repeated random splits.
    Score(ScoreArgs),
    /// Per-location exceedance probabilities.
    Exceed(ExceedArgs),
    /// Check the invertibility invariants of a fitted model; exits 3 on violation.
    RoundtripCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        z_tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        y_tol: f64,
    },
    /// Convert a lon/lat CSV into an ensemble file.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic skewed ensemble on a planar grid.
    Synth {
        #[arg(long, default_value_t = 16)]
        nx: usize,
        #[arg(long, default_value_t = 16)]
        ny: usize,
        #[arg(short = 'n', long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 3.0)]
        length: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every configuration key with its value and meaning.
    ExplainConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScoreArgs {
    /// Fitted model to score on `--data`.
    #[arg(long, conflicts_with = "splits")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Fit and score on this many random train/test splits of `--data`.
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExceedArgs {
    /// Fitted model to sample from.
    #[arg(long, required_unless_present = "samples")]
    model: Option<PathBuf>,
    /// Existing sample ensemble.
    #[arg(long, conflicts_with = "model")]
    samples: Option<PathBuf>,
    #[arg(long, required_unless_present = "quantile", allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Use the global quantile of `--reference` at this level as threshold.
    #[arg(long, requires = "reference")]
    quantile: Option<f64>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "above")]
    direction: String,
    #[arg(short = 'n', long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo < hi) {
        return Err("need lo < hi".into());
    }
    Ok((lo, hi))
}

fn read_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(ModelConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(fs::write(path, text)?)
}

fn score_csv(reports: &[ScoreReport]) -> String {
    let mut out = String::from("split,replicate,log_density\n");
    for r in reports {
        for (k, v) in r.log_densities.iter().enumerate() {
            let _ = writeln!(out, "{},{k},{v:.17e}", r.split);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Order { data, first, out } => {
            let e = load_ensemble(&data)?;
            let ord = maximin_order(&e.locations, first)?;
            let mut text = String::from("position,index,delta\n");
            for (pos, &i) in ord.order.iter().enumerate() {
                let d = ord.delta(pos).map(|d| format!("{d:.17e}")).unwrap_or_else(|| "inf".into());
                let _ = writeln!(text, "{pos},{i},{d}");
            }
            write_text(&out, &text)
        }
        Command::Fit { config, data, out, trace } => {
            let cfg = read_config(config.as_deref())?;
            let e = load_ensemble(&data)?;
            let (model, report) = FittedModel::fit(&e.data, &e.locations, &cfg)?;
            save_model(&out, &model)?;
            if let Some(t) = trace {
                let text: String = report.trace().iter().map(|r| format!("{r}\n")).collect();
                write_text(&t, &text)?;
            }
            eprintln!(
                "fit: L={} N={} stage1={:.2}s stage2={:.2}s fingerprint={}",
                e.locations.len(),
                e.replicates(),
                model.timings.stage1,
                model.timings.stage2,
                model.fingerprint
            );
            Ok(())
        }
        Command::Sample { model, count, seed, common_noise, clamp, out } => {
            let m = load_model(&model)?;
            let noise = match common_noise {
                Some(p) => load_noise(&p)?,
                None => reference_noise(count, m.len(), seed),
            };
            let mut fields = m.sample_with_noise(&noise)?;
            if let Some((lo, hi)) = clamp {
                fields.apply(|v| *v = v.clamp(lo, hi));
            }
            save_ensemble(&out, &Ensemble::new(m.locations.clone(), fields)?)
        }
        Command::Noise { count, locations, seed, out } => save_noise(&out, &reference_noise(count, locations, seed)),
        Command::Score(args) => score(args),
        Command::Exceed(args) => exceed(args),
        Command::RoundtripCheck { model, data, samples, seed, z_tol, y_tol } => {
            let m = load_model(&model)?;
            let data = data.map(load_ensemble).transpose()?;
            let rep = m.roundtrip_check(data.as_ref().map(|e| &e.data), samples, seed)?;
            println!(
                "fields={} max_z_error={:e} max_y_error={:e} max_decomposition_error={:e} nonfinite_densities={}",
                rep.fields, rep.max_z_error, rep.max_y_error, rep.max_decomposition_error, rep.nonfinite_densities
            );
            if rep.passes(z_tol, y_tol) {
                Ok(())
            } else {
                Err(SctError::Numerical("round-trip invariants violated".into()))
            }
        }
        Command::Ingest { csv, out } => {
            let e = ingest_csv_path(&csv)?;
            eprintln!("ingest: L={} N={}", e.locations.len(), e.replicates());
            save_ensemble(&out, &e)
        }
        Command::Synth { nx, ny, count, length, seed, out } => {
            let f = skewed_field(nx, ny, count, length, seed)?;
            save_ensemble(&out, &Ensemble::new(f.locations, f.data)?)
        }
        Command::ExplainConfig { config } => {
            print!("{}", read_config(config.as_deref())?.explain());
            Ok(())
        }
    }
}

fn score(args: ScoreArgs) -> Result<()> {
    let e = load_ensemble(&args.data)?;
    let reports = if let Some(k) = args.splits {
        let cfg = read_config(args.config.as_deref())?;
        let mut reports = Vec::with_capacity(k);
        for s in 0..k as u64 {
            let (train, test) = holdout_split(e.replicates(), cfg.test_fraction, cfg.seed.wrapping_add(s));
            if test.is_empty() {
                return Err(SctError::Validation(format!(
                    "test_fraction {} leaves no test replicates out of {}",
                    cfg.test_fraction,
                    e.replicates()
                )));
            }
            let (m, _) = FittedModel::fit(&e.select(&train).data, &e.locations, &cfg)?;
            reports.push(m.log_score(&e.select(&test).data, &format!("split{s}"))?);
        }
        reports
    } else {
        let path = args.model.ok_or_else(|| SctError::Validation("score needs --model or --splits".into()))?;
        vec![load_model(&path)?.log_score(&e.data, "holdout")?]
    };
    write_text(&args.out, &score_csv(&reports))?;
    for r in &reports {
        println!("split={} replicates={} mean_nls={:.6} adjustment={:.6} saturated={}", r.split, r.log_densities.len(), r.mean_nls, r.adjustment, r.saturated);
    }
    let mean = reports.iter().map(|r| r.mean_nls).sum::<f64>() / reports.len() as f64;
    println!("mean_nls={mean:.6} splits={}", reports.len());
    Ok(())
}

fn exceed(args: ExceedArgs) -> Result<()> {
    let direction: Direction = args.direction.parse()?;
    let threshold = match (args.threshold, args.quantile, &args.reference) {
        (Some(t), None, _) => t,
        (None, Some(p), Some(r)) => {
            let reference = load_ensemble(r)?;
            global_quantile(reference.data.as_slice(), p)?
        }
        _ => return Err(SctError::Validation("give either --threshold or --quantile with --reference".into())),
    };
    let samples = match (&args.model, &args.samples) {
        (_, Some(p)) => load_ensemble(p)?,
        (Some(p), None) => {
            if args.count < 100 {
                return Err(SctError::Validation(format!("Monte-Carlo exceedance needs at least 100 samples, got {}", args.count)));
            }
            let m = load_model(p)?;
            Ensemble::new(m.locations.clone(), m.sample(args.count, args.seed)?)?
        }
        _ => unreachable!("clap enforces a source"),
    };
    let probs = exceedance_map(&samples.data, threshold, direction);
    let mut text = String::from("index,x,y,probability\n");
    for (i, (c, p)) in samples.locations.coords().iter().zip(&probs).enumerate() {
        let _ = writeln!(text, "{i},{},{},{p}", c[0], c[1]);
    }
    write_text(&args.out, &text)?;
    println!("threshold={threshold} direction={} samples={}", args.direction, samples.replicates());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
