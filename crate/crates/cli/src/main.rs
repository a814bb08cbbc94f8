use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use lpanet::aggregation::AggregatorKind;
use lpanet::checkpoint;
use lpanet::config::RunConfig;
use lpanet::experiment::{gradient_suite, run_bench, BenchSpec};
use lpanet::io::{load_dataset, read_signal};
use lpanet::model::Model;
use lpanet::synth::{gen_synthetic, SynthSpec};
use lpanet::training::{evaluate_model, train, LabeledSample, MetricsReport};
use lpanet::{Error, ErrorClass};

#[derive(Parser)]
#[command(
    name = "lpanet",
    version,
    about = "Train and evaluate local pattern aggregation networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic rare-pattern dataset with its manifest.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        positive_rate: f64,
        #[arg(long, default_value_t = 1500)]
        min_frames: usize,
        #[arg(long, default_value_t = 3000)]
        max_frames: usize,
    },
    /// Train on `[paths] train`, select on `[paths] valid`, save the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a manifest (default: `[paths] test`, then `valid`).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Print comma-separated values with confusion counts.
        #[arg(long)]
        csv: bool,
    },
    /// Print the final probability row of every sample.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "signal")]
        manifest: Option<PathBuf>,
        /// Signal files to score instead of a manifest.
        #[arg(long, num_args = 1..)]
        signal: Vec<PathBuf>,
    },
    /// Finite-difference check of every head with every aggregator.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per aggregator on the same synthetic data.
    AggBench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_valid: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Comma-separated aggregator names; all when omitted.
        #[arg(long, value_delimiter = ',')]
        aggregators: Vec<String>,
        #[arg(long)]
        csv: bool,
    },
}

/// Failure of a subcommand: a library error or a failed verification.
enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Lib(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
    }
}

type CmdResult = Result<(), Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::Config(msg.into()))
}

fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf, Failure> {
    p.clone()
        .ok_or_else(|| config_err(format!("[paths] {key} is required for this command")))
}

fn prepared(cfg: &RunConfig, manifest: &Path) -> Result<Vec<LabeledSample>, Failure> {
    let raw = load_dataset(manifest, cfg.model.network.classes)?;
    Ok(cfg.prep.apply_all(&raw)?)
}

const METRIC_HEADER: &str = "tp,fn,tn,fp,se,sp,acc,f_pos,f_neg,f_avg";

fn metric_fields(m: &MetricsReport) -> Vec<String> {
    let mut v = vec![m.tp.to_string(), m.fn_.to_string(), m.tn.to_string(), m.fp.to_string()];
    v.extend(
        [m.se, m.sp, m.acc, m.f_pos, m.f_neg, m.f_avg]
            .iter()
            .map(|x| format!("{x:.6}")),
    );
    v
}

fn print_table(out: &mut impl Write, label: Option<&str>, rows: &[(String, MetricsReport)]) -> io::Result<()> {
    let cols = ["Se", "Sp", "Acc", "F_pos", "F_neg", "F_avg"];
    let lw = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(label.map(str::len))
        .max()
        .unwrap_or(0);
    if let Some(l) = label {
        write!(out, "{l:<lw$}  ")?;
    }
    writeln!(out, "{}", cols.map(|c| format!("{c:>7}")).join(" "))?;
    for (name, m) in rows {
        if label.is_some() {
            write!(out, "{name:<lw$}  ")?;
        }
        let vals = [m.se, m.sp, m.acc, m.f_pos, m.f_neg, m.f_avg];
        writeln!(out, "{}", vals.map(|v| format!("{v:>7.2}")).join(" "))?;
    }
    Ok(())
}

fn gen_synth(out: &Path, n: usize, seed: u64, positive_rate: f64, min_frames: usize, max_frames: usize) -> CmdResult {
    let spec = SynthSpec {
        positive_rate,
        min_frames,
        max_frames,
        ..SynthSpec::default()
    };
    let rows = gen_synthetic(out, n, seed, &spec)?;
    let pos = rows.iter().filter(|r| r.label == 1).count();
    println!("wrote {} samples ({pos} positive) to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let train_set = prepared(&cfg, &required(&cfg.paths.train, "train")?)?;
    let valid_set = prepared(&cfg, &required(&cfg.paths.valid, "valid")?)?;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Failure::Lib(Error::Contract(
            "training and validation manifests must be non-empty".into(),
        )));
    }
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let frames = train_set[0].signal.frames();
    let crops: usize = cfg
        .model
        .maps
        .iter()
        .map(|m| m.crop.starts(frames).map(|s| s.len()))
        .sum::<lpanet::Result<usize>>()?;

    let mut log: Box<dyn Write> = match &cfg.paths.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?)),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(log, "# crops_per_sample={crops} params={}", model.num_params())?;
    writeln!(log, "epoch\ttrain_loss\t{}", METRIC_HEADER.replace(',', "\t"))?;
    let clock = Instant::now();
    let epochs = cfg.train.epochs;
    let mut write_err = None;
    let outcome = train(model, &train_set, &valid_set, &cfg.train, &mut |r| {
        let line = format!(
            "{}\t{:.6}\t{}",
            r.epoch,
            r.train_loss,
            metric_fields(&r.valid).join("\t")
        );
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {}/{epochs}  loss {:.4}  valid F_avg {:.2}  {:.1}s",
            r.epoch, r.train_loss, r.valid.f_avg, r.seconds
        );
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    writeln!(log, "# best_epoch={}", outcome.best_epoch)?;
    log.flush()?;
    checkpoint::save(&outcome.best, &ckpt)?;
    eprintln!(
        "best epoch {} saved to {} ({:.1}s)",
        outcome.best_epoch,
        ckpt.display(),
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint_path: &Option<PathBuf>) -> Result<Model, Failure> {
    let path = match checkpoint_path {
        Some(p) => p.clone(),
        None => required(&cfg.paths.checkpoint, "checkpoint")?,
    };
    Ok(checkpoint::load_model(&path, &cfg.model)?)
}

fn cmd_eval(config: &Path, ckpt: &Option<PathBuf>, manifest: &Option<PathBuf>, csv: bool) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let model = load_model(&cfg, ckpt)?;
    let manifest = match manifest {
        Some(m) => m.clone(),
        None => cfg
            .paths
            .test
            .clone()
            .or_else(|| cfg.paths.valid.clone())
            .ok_or_else(|| config_err("no manifest: pass --manifest or set [paths] test"))?,
    };
    let data = prepared(&cfg, &manifest)?;
    let report = evaluate_model(&model, &data, cfg.train.positive_class)?;
    let mut out = io::stdout().lock();
    if csv {
        writeln!(out, "{METRIC_HEADER}")?;
        writeln!(out, "{}", metric_fields(&report).join(","))?;
    } else {
        print_table(&mut out, None, &[(String::new(), report)])?;
    }
    Ok(())
}

fn cmd_predict(config: &Path, ckpt: &Option<PathBuf>, manifest: &Option<PathBuf>, signals: &[PathBuf]) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let model = load_model(&cfg, ckpt)?;
    let samples: Vec<(String, lpanet::Signal)> = if signals.is_empty() {
        let m = manifest
            .clone()
            .or_else(|| cfg.paths.test.clone())
            .ok_or_else(|| config_err("nothing to predict: pass --manifest or --signal"))?;
        prepared(&cfg, &m)?.into_iter().map(|s| (s.id, s.signal)).collect()
    } else {
        signals
            .iter()
            .map(|p| {
                let id = p.display().to_string();
                let s = cfg.prep.apply(&id, &read_signal(p)?)?;
                Ok((id, s))
            })
            .collect::<Result<_, Failure>>()?
    };
    let mut out = io::stdout().lock();
    let cols: Vec<String> = (0..model.spec.network.classes).map(|c| format!("p{c}")).collect();
    writeln!(out, "id\t{}", cols.join("\t"))?;
    for (id, signal) in samples {
        let row = model.predict(&signal)?;
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{id}\t{}", vals.join("\t"))?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CmdResult {
    let clock = Instant::now();
    let mut out = io::stdout().lock();
    let results = gradient_suite(seed, &mut |r| {
        let _ = writeln!(
            out,
            "{} {:<40} rel {:.2e}  worst element {:.2e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.report.rel_error,
            r.report.max_rel_error
        );
    })?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} cases, {failed} failed, {:.1}s",
        results.len(),
        clock.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Verification(format!(
            "{failed} gradient cases exceeded tolerance"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_agg_bench(
    seed: u64,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
    epochs: usize,
    batch_size: usize,
    names: &[String],
    csv: bool,
) -> CmdResult {
    let aggregators = if names.is_empty() {
        AggregatorKind::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| AggregatorKind::from_name(n).ok_or_else(|| config_err(format!("unknown aggregator `{n}`"))))
            .collect::<Result<_, _>>()?
    };
    let spec = BenchSpec {
        n_train,
        n_valid,
        n_test,
        epochs,
        batch_size,
        seed,
        aggregators,
        ..BenchSpec::default()
    };
    let rows = run_bench(&spec, &mut |r| {
        eprintln!(
            "{:<14} F_avg {:.2} (best epoch {})",
            r.aggregator.name(),
            r.test.f_avg,
            r.best_epoch
        );
    })?;
    let mut out = io::stdout().lock();
    if csv {
        writeln!(out, "aggregator,{METRIC_HEADER}")?;
        for r in &rows {
            writeln!(out, "{},{}", r.aggregator.name(), metric_fields(&r.test).join(","))?;
        }
    } else {
        let table: Vec<(String, MetricsReport)> =
            rows.iter().map(|r| (r.aggregator.name().to_string(), r.test)).collect();
        print_table(&mut out, Some("aggregator"), &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenSynth {
            out,
            n,
            seed,
            positive_rate,
            min_frames,
            max_frames,
        } => gen_synth(&out, n, seed, positive_rate, min_frames, max_frames),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            csv,
        } => cmd_eval(&config, &checkpoint, &manifest, csv),
        Command::Predict {
            config,
            checkpoint,
            manifest,
            signal,
        } => cmd_predict(&config, &checkpoint, &manifest, &signal),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::AggBench {
            seed,
            n_train,
            n_valid,
            n_test,
            epochs,
            batch_size,
            aggregators,
            csv,
        } => cmd_agg_bench(seed, n_train, n_valid, n_test, epochs, batch_size, &aggregators, csv),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(Error::Io { source, .. })) if source.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
