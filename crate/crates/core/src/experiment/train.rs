use log::{debug, info};

use crate::accountant::AccountantState;
use crate::data::{self, poisson_sample, Dataset};
use crate::dp::{dp_ssgd_step, DpStepConfig};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec, ParamVec};
use crate::rng::RngStream;
use crate::sparsify::{partition_for_step, FrozenMask, IndexPartition, SparsityMode, SparsityPlan};

use super::metrics::MetricsRow;
use super::{spec_with_classes, streams, DpConfig, PretrainConfig, ReinitPolicy, Setting};

/// Fraction of `data` the model classifies correctly.
pub fn evaluate(model: &Model<f64>, data: &Dataset<f64>) -> f64 {
    let correct = data
        .samples()
        .zip(data.labels())
        .filter(|(x, &y)| model.predict(x) == y)
        .count();
    correct as f64 / data.len() as f64
}

fn shuffled(n: usize, stream: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Plain mini-batch SGD on the mean loss. Returns the last epoch's mean loss.
fn sgd(model: &mut Model<f64>, data: &Dataset<f64>, epochs: usize, batch: usize, lr: f64, seed: u64) -> Result<f64> {
    let mut stream = RngStream::new(seed, streams::SHUFFLE);
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let order = shuffled(data.len(), &mut stream);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (xs, ys) = data.gather(chunk);
            let (loss, grad) = model.mean_gradient(&xs, &ys)?;
            total += loss * chunk.len() as f64;
            let step: Vec<f64> = grad.data().iter().map(|g| lr * g).collect();
            model.apply_update(&ParamVec::from_vec(model.layout().clone(), step)?)?;
        }
        last = total / data.len() as f64;
        debug!("pretrain lr={lr} epoch {} loss {last:.4}", epoch + 1);
    }
    Ok(last)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model<f64>,
    pub lr: f64,
    /// Held-out accuracy of each grid learning rate (empty for a fixed lr).
    pub grid: Vec<(f64, f64)>,
    /// Accuracy on the public training data.
    pub public_accuracy: f64,
}

/// Non-private training on public data from a seeded initialization.
///
/// Without a fixed learning rate each grid value trains on the public
/// data minus a stratified hold-out; the one with the best hold-out
/// accuracy (earliest on ties) then trains on all public data.
pub fn pretrain(spec: &ModelSpec, public: &Dataset<f64>, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    let spec = spec_with_classes(spec, public.class_count());
    let init = Model::build(&spec, public.class_count(), &mut RngStream::new(seed, streams::INIT))?;
    let mut grid = Vec::new();
    let lr = match cfg.lr {
        Some(lr) => lr,
        None => {
            let (fit, holdout) = data::split_public_private(public, 1.0 - cfg.holdout, seed)?;
            for &lr in &cfg.lr_grid {
                let mut m = init.clone();
                let acc = match sgd(&mut m, &fit, cfg.epochs, cfg.batch_size, lr, seed) {
                    Ok(_) => evaluate(&m, &holdout),
                    Err(Error::NonFinite(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                info!("pretrain grid lr={lr}: hold-out accuracy {acc:.4}");
                grid.push((lr, acc));
            }
            grid.iter()
                .fold((f64::NAN, -1.0), |best, &(lr, acc)| if acc > best.1 { (lr, acc) } else { best })
                .0
        }
    };
    let mut model = init;
    sgd(&mut model, public, cfg.epochs, cfg.batch_size, lr, seed)?;
    let public_accuracy = evaluate(&model, public);
    Ok(PretrainOutcome {
        model,
        lr,
        grid,
        public_accuracy,
    })
}

/// Step counts of a private run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub examples: usize,
    pub batch_size: usize,
    /// Poisson sampling rate `batch_size / examples`, capped at 1.
    pub q: f64,
    /// `ceil(examples / batch_size)`.
    pub steps_per_epoch: u64,
    pub steps: u64,
    pub eval_every: u64,
}

impl Schedule {
    pub fn new(examples: usize, dp: &DpConfig) -> Self {
        let b = dp.batch_size.min(examples).max(1);
        let steps_per_epoch = examples.div_ceil(b) as u64;
        Schedule {
            examples,
            batch_size: b,
            q: b as f64 / examples as f64,
            steps_per_epoch,
            steps: steps_per_epoch * dp.epochs as u64,
            eval_every: dp.eval_every.unwrap_or(steps_per_epoch),
        }
    }
}

/// Everything one private fine-tuning run depends on.
#[derive(Debug, Clone)]
pub struct RunInputs<'a> {
    pub pretrained: &'a Model<f64>,
    pub private: &'a Dataset<f64>,
    pub test: &'a Dataset<f64>,
    pub dp: &'a DpConfig,
    pub sigma: f64,
    pub schedule: Schedule,
    pub setting: Setting,
    pub p: f64,
    pub prune_all_params: bool,
    pub reinit: ReinitPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub model: Model<f64>,
    pub frozen: Option<FrozenMask>,
    /// Selected coordinates per step, counting fully selected tensors.
    pub selected_count: usize,
    pub reinitialized: bool,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_acc)
    }
}

fn prepare_model(inputs: &RunInputs) -> Result<(Model<f64>, bool)> {
    let pre = inputs.pretrained;
    if pre.input_dims() != inputs.private.item_dims() {
        return Err(Error::config(format!(
            "checkpoint expects inputs {:?}, private data has {:?}",
            pre.input_dims(),
            inputs.private.item_dims()
        )));
    }
    let classes = inputs.private.class_count();
    let differ = pre.class_count() != classes;
    let reinit = match inputs.reinit {
        ReinitPolicy::Never if differ => {
            return Err(Error::config(format!(
                "checkpoint has {} classes, private data {classes}, and reinit is disabled",
                pre.class_count()
            )))
        }
        ReinitPolicy::Never => false,
        ReinitPolicy::Auto => differ,
        ReinitPolicy::Always => true,
    };
    if reinit {
        let mut stream = RngStream::new(inputs.seed, streams::REINIT);
        Ok((pre.reinit_last_layer(classes, &mut stream)?, true))
    } else {
        Ok((pre.clone(), false))
    }
}

/// Private fine-tuning of a pretrained model under one sparsity setting.
///
/// Emits a metrics row before the first step and after every
/// `eval_every` steps (and the last). In freezing mode the non-selected
/// coordinates are checked at the end to be bitwise unchanged.
pub fn train_run(inputs: &RunInputs) -> Result<RunResult> {
    let (mut model, reinitialized) = prepare_model(inputs)?;
    let sched = inputs.schedule;
    let plan = SparsityPlan {
        mode: inputs.setting.mode,
        criterion: inputs.setting.criterion,
        rate: crate::sparsify::PruningRate::new(inputs.p)?,
        prune_all_params: inputs.prune_all_params,
        seed: inputs.seed,
    };
    let step_cfg = DpStepConfig {
        clip_norm: inputs.dp.clip_norm,
        noise_multiplier: inputs.sigma,
        learning_rate: inputs.dp.learning_rate,
        expected_batch_size: sched.batch_size,
    };
    step_cfg.validate()?;
    let accountant = if inputs.sigma > 0.0 {
        Some(AccountantState::with_default_orders(sched.q, inputs.sigma)?)
    } else {
        None
    };
    let eps_after = |steps: u64| -> Result<f64> {
        match &accountant {
            Some(a) => Ok(a.compose(steps).to_epsilon(inputs.dp.delta)?.epsilon),
            None if steps == 0 => Ok(0.0),
            None => Ok(f64::INFINITY),
        }
    };
    let row = |step: u64, loss: Option<f64>, acc: f64, eps: f64| MetricsRow {
        setting: inputs.setting.name(),
        mode: inputs.setting.mode,
        criterion: inputs.setting.criterion,
        p: inputs.p,
        epsilon_target: inputs.dp.epsilon,
        sigma: inputs.sigma,
        seed: inputs.seed,
        step,
        epoch: step as f64 / sched.steps_per_epoch as f64,
        train_loss: loss,
        test_acc: acc,
        eps_spent: eps,
    };

    let initial = model.params().to_vec();
    let mut frozen = None;
    if inputs.setting.mode == SparsityMode::Freezing {
        frozen = Some(FrozenMask::new(partition_for_step(&plan, 0, &model, None)?));
    }
    let mut sampler = RngStream::new(inputs.seed, streams::SAMPLER);
    let mut noise = RngStream::new(inputs.seed, streams::NOISE);
    let mut rows = vec![row(0, None, evaluate(&model, inputs.test), 0.0)];
    let mut selected_count = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for t in 0..sched.steps {
        let partition: IndexPartition = partition_for_step(&plan, t, &model, frozen.as_ref())?;
        selected_count = partition.selected_count(model.layout());
        let batch = poisson_sample(sched.examples, sched.q, &mut sampler)?;
        let (xs, ys) = inputs.private.gather(&batch.indices);
        let out = dp_ssgd_step(&mut model, &xs, &ys, &step_cfg, &partition, &mut noise)?;
        loss_sum += out.loss * out.batch_size as f64;
        loss_n += out.batch_size;
        let done = t + 1;
        if done % sched.eval_every == 0 || done == sched.steps {
            let loss = if loss_n > 0 { Some(loss_sum / loss_n as f64) } else { None };
            let acc = evaluate(&model, inputs.test);
            let eps = eps_after(done)?;
            info!(
                "{} p={} seed={} step {done}/{}: loss {:.4} acc {acc:.4} eps {eps:.3}",
                inputs.setting.name(),
                inputs.p,
                inputs.seed,
                sched.steps,
                loss.unwrap_or(f64::NAN)
            );
            rows.push(row(done, loss, acc, eps));
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    if let Some(mask) = &frozen {
        let keep = mask.partition().selected_mask(model.layout());
        let moved = initial
            .iter()
            .zip(model.params())
            .zip(&keep)
            .any(|((a, b), &sel)| !sel && a.to_bits() != b.to_bits());
        if moved {
            return Err(Error::State("a frozen coordinate changed during training".into()));
        }
    }
    Ok(RunResult {
        rows,
        model,
        frozen,
        selected_count,
        reinitialized,
    })
}
