mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pdadmm::audit::audit;
use pdadmm::checkpoint::write_checkpoint;
use pdadmm::diagnostics::DescentConstants;
use pdadmm::model::{init_state, HyperParams};
use pdadmm::trainer::{benchmark, train, BenchmarkCell, IterationMetrics, TrainConfig, SPEEDUP_CSV_HEADER};
use pdadmm::Error;

use config::{ModeName, RunConfig};

#[derive(Parser)]
#[command(name = "pdadmm", version, about = "Layer-parallel ADMM training for feed-forward ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, a checkpoint, and a summary.
    Train(Overrides),
    /// Time serial against parallel epochs over a layers x width x workers grid.
    Benchmark {
        #[command(flatten)]
        overrides: Overrides,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replay the convergence certificates over a metrics file.
    Certify {
        /// Metrics JSON-lines file written by `train`.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        nu: Option<f64>,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// Worker threads; falls back to PDADMM_THREADS, then the core count.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(ModeName))]
    mode: Option<ModeName>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Leave phase timings out of the metrics so runs compare bytewise.
    #[arg(long)]
    no_timing: bool,
    /// Evaluate certificates every epoch and audit them after training.
    #[arg(long)]
    certify: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.rho {
            cfg.hyper.rho = v;
        }
        if let Some(v) = self.nu {
            cfg.hyper.nu = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = Some(v);
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.metrics {
            cfg.metrics = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if self.no_timing {
            cfg.timing = false;
        }
        if self.certify {
            cfg.certify = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit status: 1 certificate failure, 2 invalid input, 3 numeric abort.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::BacktrackFailed { .. } | Error::WorkerFailure { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(o) => cmd_train(&o),
        Command::Benchmark { overrides, output } => cmd_benchmark(&overrides, output),
        Command::Certify { metrics, config, rho, nu } => cmd_certify(&metrics, config, rho, nu),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_audit(records: &[IterationMetrics], hp: &HyperParams) -> bool {
    let report = audit(records, hp);
    if !report.rho_above_threshold {
        println!(
            "WARN rho = {} is not above the descent threshold {:.6e}",
            hp.rho,
            DescentConstants::new(hp).rho_threshold
        );
    }
    for check in &report.checks {
        println!("{} {}: {}", check.status(), check.name, check.detail);
    }
    report.all_passed()
}

fn cmd_train(o: &Overrides) -> Result<(), Failure> {
    let cfg = o.resolve()?;
    let data = cfg.data.load(Path::new("."))?;
    let spec = cfg.initial_spec(&data)?;
    let mut state = init_state(&spec, &data, &cfg.hyper, cfg.seed)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        mode: cfg.exec_mode()?,
        growth_schedule: cfg.growth_schedule(),
        check_certificates: cfg.certify,
        record_timing: cfg.timing,
        seed: cfg.seed,
    };
    let mut sink = match &cfg.metrics {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(|e| io_failure(path, e))?)),
        None => None,
    };
    let start = Instant::now();
    let history = train(
        &mut state,
        &train_cfg,
        &cfg.hyper,
        sink.as_mut().map(|w| w as &mut dyn Write),
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(path) = &cfg.checkpoint {
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        write_checkpoint(&state, BufWriter::new(file))?;
    }
    let last = history.last().expect("history has the epoch-0 record");
    let summary = json!({
        "epochs": cfg.epochs,
        "hidden_layers": last.hidden_layers,
        "samples": data.num_samples(),
        "F": last.f,
        "lagrangian": last.lagrangian,
        "residual_norm_sq_total": last.residual_norm_sq_total,
        "train_accuracy": last.train_accuracy,
    });
    println!("{summary}");
    log::info!("trained {} epochs in {elapsed:.2} s", cfg.epochs);
    if cfg.certify && !print_audit(&history, &cfg.hyper) {
        return Err(Failure {
            code: 1,
            message: "certificate audit failed".into(),
        });
    }
    Ok(())
}

fn cmd_benchmark(o: &Overrides, output: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = o.resolve()?;
    let b = &cfg.benchmark;
    let data = cfg.data.load(Path::new("."))?;
    if b.samples > data.num_samples() {
        return Err(Error::InvalidConfig(format!(
            "benchmark wants {} samples but the dataset has {}",
            b.samples,
            data.num_samples()
        ))
        .into());
    }
    let data = data.take(b.samples);
    let workers = match o.workers {
        Some(w) => vec![w],
        None => b.workers.clone(),
    };
    if workers.contains(&0) {
        return Err(Error::InvalidConfig("workers must be at least 1".into()).into());
    }
    let mut cells = Vec::new();
    for &width in &b.widths {
        for &hidden_layers in &b.layers {
            for &w in &workers {
                cells.push(BenchmarkCell {
                    hidden_layers,
                    width,
                    workers: w,
                });
            }
        }
    }
    let rows = benchmark(&data, &cells, &cfg.hyper, b.repetitions, cfg.seed)?;
    let mut text = String::from(SPEEDUP_CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    match output.or_else(|| b.output.clone()) {
        Some(path) => std::fs::write(&path, text).map_err(|e| io_failure(&path, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_certify(metrics: &Path, config: Option<PathBuf>, rho: Option<f64>, nu: Option<f64>) -> Result<(), Failure> {
    let mut hp = match &config {
        Some(path) => RunConfig::from_path(path)?.hyper,
        None => HyperParams::default(),
    };
    if let Some(v) = rho {
        hp.rho = v;
    }
    if let Some(v) = nu {
        hp.nu = v;
    }
    hp.validate(pdadmm::model::Activation::Relu)?;
    let file = File::open(metrics).map_err(|e| io_failure(metrics, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_failure(metrics, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IterationMetrics = serde_json::from_str(&line).map_err(|e| Failure {
            code: 2,
            message: format!("{} line {}: malformed record: {e}", metrics.display(), i + 1),
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("{}: no records", metrics.display()),
        });
    }
    if print_audit(&records, &hp) {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "certificate audit failed".into(),
        })
    }
}
