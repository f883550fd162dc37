use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::accountant::{self, PrivacyBudget};
use crate::checkpoint::Checkpoint;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};

use super::metrics::{aggregate, gnuplot_script, read_metrics, write_csv, AggregateRow, MetricsRow};
use super::train::{evaluate, pretrain, train_run, RunInputs, Schedule};
use super::{ExperimentConfig, Setting};

/// Public, private and test data for one seed.
struct SeedData {
    public: Dataset<f64>,
    private: Dataset<f64>,
    test: Dataset<f64>,
}

/// Loads every source once; per-seed splits are cheap.
struct Sources {
    private: Dataset<f64>,
    public: Option<Dataset<f64>>,
    test: Dataset<f64>,
}

impl Sources {
    fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let private = cfg.private.load()?;
        let public = cfg.public.source.as_ref().map(|s| s.load()).transpose()?;
        let test = cfg.test.load()?;
        Ok(Sources { private, public, test })
    }

    fn for_seed(&self, cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
        let (public, private) = match &self.public {
            Some(p) => (data::subset_fraction(p, cfg.public.fraction, seed)?, self.private.clone()),
            None => {
                let (public, private) = data::split_public_private(&self.private, cfg.public.fraction, seed)?;
                data::check_disjoint(&public, &private)?;
                (public, private)
            }
        };
        let classes = private.class_count().max(self.test.class_count());
        Ok(SeedData {
            public,
            private: private.with_class_count(classes)?,
            test: self.test.clone().with_class_count(classes)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub lr: f64,
    pub public_examples: usize,
    pub public_acc: f64,
    pub test_acc: f64,
    pub checkpoint: PathBuf,
}

/// Pretrains one model per seed (only the first seed when the config names
/// a shared checkpoint). A learning rate chosen by the grid for the first
/// seed is reused for the rest. Writes the checkpoints and
/// `<output_dir>/pretrain/report.csv`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainReport>> {
    let sources = Sources::load(cfg)?;
    let seeds = if cfg.checkpoint.is_some() { &cfg.seeds[..1] } else { &cfg.seeds[..] };
    let mut pcfg = cfg.pretrain.clone();
    let mut reports = Vec::new();
    for &seed in seeds {
        let d = sources.for_seed(cfg, seed)?;
        let out = pretrain(&cfg.model, &d.public, &pcfg, seed)?;
        pcfg.lr = Some(out.lr);
        let test_acc = evaluate(&out.model, &d.test);
        let path = cfg.checkpoint_for(seed);
        Checkpoint::new(out.model).save(&path)?;
        info!("pretrained seed {seed}: lr {} public {:.4} test {test_acc:.4}", out.lr, out.public_accuracy);
        reports.push(PretrainReport {
            seed,
            lr: out.lr,
            public_examples: d.public.len(),
            public_acc: out.public_accuracy,
            test_acc,
            checkpoint: path,
        });
    }
    write_csv(&cfg.output_dir.join("pretrain").join("report.csv"), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub epsilon: f64,
    pub delta: f64,
    pub q: f64,
    pub steps: u64,
    pub sigma: f64,
}

impl CalibrationReport {
    pub const CSV_HEADER: &'static str = "epsilon,delta,q,steps,sigma";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.epsilon, self.delta, self.q, self.steps, self.sigma)
    }
}

fn private_examples(cfg: &ExperimentConfig) -> Result<usize> {
    let sources = Sources::load(cfg)?;
    Ok(sources.for_seed(cfg, cfg.seeds[0])?.private.len())
}

/// Noise multiplier for a schedule: the explicit one, or the calibrated
/// value for the target epsilon.
fn resolve_sigma(cfg: &ExperimentConfig, sched: &Schedule) -> Result<CalibrationReport> {
    match (cfg.dp.epsilon, cfg.dp.sigma) {
        (_, Some(sigma)) => {
            let epsilon = if sigma > 0.0 {
                accountant::epsilon_for(sched.q, sigma, sched.steps, cfg.dp.delta)?
            } else {
                f64::INFINITY
            };
            Ok(CalibrationReport {
                epsilon,
                delta: cfg.dp.delta,
                q: sched.q,
                steps: sched.steps,
                sigma,
            })
        }
        (Some(epsilon), None) => {
            let budget = PrivacyBudget::new(epsilon, cfg.dp.delta)?;
            let sigma = accountant::calibrate_sigma(budget, sched.q, sched.steps)?;
            Ok(CalibrationReport {
                epsilon,
                delta: cfg.dp.delta,
                q: sched.q,
                steps: sched.steps,
                sigma,
            })
        }
        (None, None) => Err(Error::config("set exactly one of dp.epsilon and dp.sigma")),
    }
}

/// Calibrates the noise multiplier for the configured budget and schedule.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    let sched = Schedule::new(private_examples(cfg)?, &cfg.dp);
    resolve_sigma(cfg, &sched)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub calibration: CalibrationReport,
    pub run_files: Vec<PathBuf>,
    pub aggregate: Vec<AggregateRow>,
    pub aggregate_file: PathBuf,
}

fn run_path(out: &Path, setting: &Setting, p: f64, seed: u64) -> PathBuf {
    out.join("runs").join(setting.name()).join(format!("p{p}")).join(format!("seed{seed}.csv"))
}

fn load_checkpoint(cfg: &ExperimentConfig, seed: u64) -> Result<Checkpoint> {
    let ck = Checkpoint::load(&cfg.checkpoint_for(seed))?;
    let expected = super::spec_with_classes(&cfg.model, ck.model.class_count());
    if *ck.model.spec() != expected {
        return Err(Error::config(format!(
            "checkpoint model {:?} does not match the configured model",
            ck.model.spec()
        )));
    }
    Ok(ck)
}

fn write_echo(cfg: &ExperimentConfig, calibration: &CalibrationReport) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a> {
        config: &'a ExperimentConfig,
        calibration: &'a CalibrationReport,
    }
    let path = cfg.output_dir.join("config.json");
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let text = serde_json::to_string_pretty(&Echo { config: cfg, calibration }).expect("echo serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs every (setting, p) pair for every seed and writes one metrics file
/// per run. Returns the calibration, run files and the runs themselves.
fn run_grid(
    cfg: &ExperimentConfig,
    grid: &[(Setting, f64)],
) -> Result<(CalibrationReport, Vec<PathBuf>, Vec<Vec<MetricsRow>>)> {
    let sources = Sources::load(cfg)?;
    let mut calibration = None;
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let d = sources.for_seed(cfg, seed)?;
        let sched = Schedule::new(d.private.len(), &cfg.dp);
        if calibration.is_none() {
            let c = resolve_sigma(cfg, &sched)?;
            info!("noise multiplier {} for q {} over {} steps", c.sigma, c.q, c.steps);
            write_echo(cfg, &c)?;
            calibration = Some(c);
        }
        let sigma = calibration.as_ref().map(|c| c.sigma).unwrap();
        let ck = load_checkpoint(cfg, seed)?;
        for &(setting, p) in grid {
            let result = train_run(&RunInputs {
                pretrained: &ck.model,
                private: &d.private,
                test: &d.test,
                dp: &cfg.dp,
                sigma,
                schedule: sched,
                setting,
                p,
                prune_all_params: cfg.sparsity.prune_all_params,
                reinit: cfg.reinit_last_layer,
                seed,
            })?;
            let path = run_path(&cfg.output_dir, &setting, p, seed);
            write_csv(&path, &result.rows)?;
            let final_ck = match result.frozen {
                Some(mask) => Checkpoint::with_mask(result.model, mask),
                None => Checkpoint::new(result.model),
            };
            final_ck.save(&path.with_extension("dpss"))?;
            files.push(path);
            runs.push(result.rows);
        }
    }
    Ok((calibration.expect("seeds are nonempty"), files, runs))
}

/// Private fine-tuning with the configured sparsity setting for every
/// seed; writes per-seed metrics and `<output_dir>/aggregate.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let grid = [(cfg.sparsity.setting(), cfg.sparsity.p)];
    let (calibration, run_files, runs) = run_grid(cfg, &grid)?;
    let aggregate = aggregate(&runs);
    let aggregate_file = cfg.output_dir.join("aggregate.csv");
    write_csv(&aggregate_file, &aggregate)?;
    Ok(TrainReport {
        calibration,
        run_files,
        aggregate,
        aggregate_file,
    })
}

/// Every sweep setting times every `p` in the grid, for every seed;
/// writes `<output_dir>/sweep.csv` and a gnuplot script `sweep.gp`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let grid: Vec<(Setting, f64)> = cfg
        .sweep
        .settings
        .iter()
        .flat_map(|&s| cfg.sweep.p_grid.iter().map(move |&p| (s, p)))
        .collect();
    let (calibration, run_files, runs) = run_grid(cfg, &grid)?;
    let aggregate = aggregate(&runs);
    let aggregate_file = cfg.output_dir.join("sweep.csv");
    write_csv(&aggregate_file, &aggregate)?;
    let gp = cfg.output_dir.join("sweep.gp");
    fs::write(&gp, gnuplot_script("sweep.csv", &aggregate)).map_err(|e| Error::io(&gp, e))?;
    Ok(TrainReport {
        calibration,
        run_files,
        aggregate,
        aggregate_file,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub examples: usize,
    pub accuracy: f64,
}

/// Test accuracy of a checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let test = cfg.test.load()?;
    if ck.model.input_dims() != test.item_dims() {
        return Err(Error::config(format!(
            "checkpoint expects inputs {:?}, test data has {:?}",
            ck.model.input_dims(),
            test.item_dims()
        )));
    }
    if test.class_count() > ck.model.class_count() {
        return Err(Error::config(format!(
            "test data has {} classes, checkpoint {}",
            test.class_count(),
            ck.model.class_count()
        )));
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        examples: test.len(),
        accuracy: evaluate(&ck.model, &test),
    })
}

fn collect_csv(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect_csv(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Recomputes the aggregate table from the per-run metrics files under
/// `<dir>/runs` and writes it to `<dir>/report.csv`.
pub fn cmd_report(dir: &Path) -> Result<Vec<AggregateRow>> {
    let mut files = Vec::new();
    collect_csv(&dir.join("runs"), &mut files)?;
    if files.is_empty() {
        return Err(Error::data(format!("no metrics files under {}", dir.join("runs").display())));
    }
    let runs = files.iter().map(|f| read_metrics(f)).collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&runs);
    write_csv(&dir.join("report.csv"), &rows)?;
    Ok(rows)
}
