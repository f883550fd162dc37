use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpssgd::accountant::{calibrate_sigma, AccountingRow, PrivacyBudget, DEFAULT_DELTA};
use dpssgd::experiment::{
    cmd_calibrate, cmd_eval, cmd_pretrain, cmd_report, cmd_sweep, cmd_train, AggregateRow, CalibrationReport,
    ExperimentConfig,
};
use dpssgd::Error;

#[derive(Parser)]
#[command(name = "dpssgd", version, about = "Differentially private sparse SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Non-private training on the public data; writes one checkpoint per seed.
    Pretrain(ConfigArgs),
    /// Noise multiplier for a privacy budget.
    Calibrate(CalibrateArgs),
    /// Private fine-tuning with the configured sparsity setting.
    Train(ConfigArgs),
    /// Private fine-tuning over every sweep setting and pruning rate.
    Sweep(ConfigArgs),
    /// Test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate; defaults to the first seed's pretrained model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Recompute the aggregate table from per-run metrics files.
    Report {
        /// Output directory of an earlier train or sweep.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set dp.epochs=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, conflicts_with = "epsilon")]
    sigma: Option<f64>,
    /// Pruning rate.
    #[arg(long)]
    p: Option<f64>,
    /// `freezing` or `selection`.
    #[arg(long)]
    mode: Option<String>,
    /// `random` or `magnitude`.
    #[arg(long)]
    criterion: Option<String>,
    /// Pretrained checkpoint shared by all seeds.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Experiment config; the sampling rate and step count follow from it.
    #[arg(long, short, required_unless_present_all = ["q", "steps"])]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sampling rate, for calibrating without a config.
    #[arg(long, requires = "steps")]
    q: Option<f64>,
    #[arg(long, requires = "q")]
    steps: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

fn parse_set(items: &[String]) -> Result<Vec<(String, String)>, Error> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

macro_rules! json {
    ($v:expr) => {
        serde_json::json!($v).to_string()
    };
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut o = parse_set(&self.set)?;
        if let Some(out) = &self.out {
            o.push(("output_dir".into(), json!(out)));
        }
        if let Some(seeds) = &self.seeds {
            o.push(("seeds".into(), json!(seeds)));
        }
        if let Some(e) = self.epsilon {
            o.push(("dp.epsilon".into(), json!(e)));
            o.push(("dp.sigma".into(), "null".into()));
        }
        if let Some(s) = self.sigma {
            o.push(("dp.sigma".into(), json!(s)));
            o.push(("dp.epsilon".into(), "null".into()));
        }
        if let Some(p) = self.p {
            o.push(("sparsity.p".into(), json!(p)));
        }
        if let Some(m) = &self.mode {
            o.push(("sparsity.mode".into(), json!(m)));
        }
        if let Some(c) = &self.criterion {
            o.push(("sparsity.criterion".into(), json!(c)));
        }
        if let Some(c) = &self.checkpoint {
            o.push(("checkpoint".into(), json!(c)));
        }
        ExperimentConfig::load(&self.config, &o)
    }
}

fn print_aggregate(rows: &[AggregateRow]) {
    println!("setting,p,seeds,mean_test_acc,std_test_acc,eps_spent");
    for r in rows {
        println!(
            "{},{},{},{:.4},{:.4},{:.4}",
            r.setting, r.p, r.seeds, r.mean_test_acc, r.std_test_acc, r.eps_spent
        );
    }
}

fn calibrate(args: &CalibrateArgs) -> Result<CalibrationReport, Error> {
    if let (Some(q), Some(steps)) = (args.q, args.steps) {
        let epsilon = args
            .epsilon
            .ok_or_else(|| Error::Config("--epsilon is required with --q".into()))?;
        let delta = args.delta.unwrap_or(DEFAULT_DELTA);
        let sigma = calibrate_sigma(PrivacyBudget::new(epsilon, delta)?, q, steps)?;
        return Ok(CalibrationReport {
            epsilon,
            delta,
            q,
            steps,
            sigma,
        });
    }
    let path = args.config.as_deref().expect("clap requires a config here");
    let mut o = parse_set(&args.set)?;
    if let Some(e) = args.epsilon {
        o.push(("dp.epsilon".into(), json!(e)));
        o.push(("dp.sigma".into(), "null".into()));
    }
    if let Some(d) = args.delta {
        o.push(("dp.delta".into(), json!(d)));
    }
    cmd_calibrate(&ExperimentConfig::load(path, &o)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(args) => {
            let reports = cmd_pretrain(&args.load()?)?;
            println!("seed,lr,public_examples,public_acc,test_acc,checkpoint");
            for r in reports {
                println!(
                    "{},{},{},{:.4},{:.4},{}",
                    r.seed,
                    r.lr,
                    r.public_examples,
                    r.public_acc,
                    r.test_acc,
                    r.checkpoint.display()
                );
            }
        }
        Command::Calibrate(args) => {
            let r = calibrate(&args)?;
            println!("{}", CalibrationReport::CSV_HEADER);
            println!("{}", r.to_csv());
            let row = AccountingRow::compute(r.q, r.sigma, r.steps, r.delta)?;
            eprintln!("achieved epsilon {} at order {}", row.epsilon, row.order);
        }
        Command::Train(args) => {
            let report = cmd_train(&args.load()?)?;
            print_aggregate(&report.aggregate);
            eprintln!("wrote {}", report.aggregate_file.display());
        }
        Command::Sweep(args) => {
            let report = cmd_sweep(&args.load()?)?;
            print_aggregate(&report.aggregate);
            eprintln!("wrote {}", report.aggregate_file.display());
        }
        Command::Eval { config, model } => {
            let cfg = config.load()?;
            let path = model.unwrap_or_else(|| cfg.checkpoint_for(cfg.seeds[0]));
            let r = cmd_eval(&cfg, &path)?;
            println!("checkpoint,examples,accuracy");
            println!("{},{},{:.4}", r.checkpoint.display(), r.examples, r.accuracy);
        }
        Command::Report { dir } => {
            print_aggregate(&cmd_report(&dir)?);
            eprintln!("wrote {}", Path::new(&dir).join("report.csv").display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Index { .. } => 2,
        Error::Io { .. } | Error::Format(_) | Error::Data(_) => 3,
        Error::Calibration { .. } => 4,
        Error::NonFinite(_) | Error::State(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
