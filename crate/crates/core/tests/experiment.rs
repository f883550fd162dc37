use std::fs;
use std::path::{Path, PathBuf};

use dpssgd::accountant::AccountantState;
use dpssgd::checkpoint::Checkpoint;
use dpssgd::data::{poisson_sample, BlobSpec};
use dpssgd::experiment::{
    cmd_calibrate, cmd_eval, cmd_pretrain, cmd_report, cmd_sweep, cmd_train, read_metrics, streams, DataSource,
    ExperimentConfig, ReinitPolicy, Schedule, Setting,
};
use dpssgd::nn::{ModelSpec, ParamVec};
use dpssgd::sparsify::{Criterion, SparsityMode};
use dpssgd::{Error, RngStream};

fn blobs(per_class: usize, stream: u64) -> DataSource {
    DataSource::Blobs(BlobSpec {
        classes: 4,
        item_dims: vec![1, 8, 8],
        per_class,
        spread: 0.2,
        seed: 17,
        sample_stream: stream,
    })
}

fn config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(blobs(100, 1), blobs(50, 2));
    c.model = ModelSpec::tiny_cnn(1, 8, 4);
    c.public.fraction = 0.25;
    c.pretrain.epochs = 5;
    c.pretrain.batch_size = 10;
    c.dp.epsilon = Some(4.0);
    c.dp.batch_size = 30;
    c.dp.epochs = 2;
    c.dp.learning_rate = 0.2;
    c.seeds = vec![0, 1];
    c.output_dir = out.to_path_buf();
    c
}

fn pretrained(out: &Path) -> ExperimentConfig {
    let c = config(out);
    cmd_pretrain(&c).unwrap();
    c
}

#[test]
fn pretraining_learns_the_blob_task() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path());
    let reports = cmd_pretrain(&c).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.public_examples, 100);
        assert!(r.test_acc > 0.9, "seed {} test accuracy {}", r.seed, r.test_acc);
        assert!(c.pretrain.lr_grid.contains(&r.lr));
    }
    let eval = cmd_eval(&c, &reports[0].checkpoint).unwrap();
    assert_eq!(eval.accuracy, reports[0].test_acc);
    assert!(dir.path().join("pretrain/report.csv").exists());
}

#[test]
fn pretraining_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_pretrain(&config(a.path())).unwrap();
    cmd_pretrain(&config(b.path())).unwrap();
    for seed in [0, 1] {
        let name = format!("pretrain/seed{seed}.dpss");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn missing_data_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-images");
    let mut c = config(dir.path());
    c.private = DataSource::Idx {
        images: missing.clone(),
        labels: dir.path().join("no-such-labels"),
    };
    match cmd_pretrain(&c) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("no-such-images")),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn noise_free_unclipped_training_is_plain_sgd() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = pretrained(dir.path());
    c.dp.epsilon = None;
    c.dp.sigma = Some(0.0);
    c.dp.clip_norm = 1e12;
    c.seeds = vec![0];
    let report = cmd_train(&c).unwrap();
    let rows = read_metrics(&report.run_files[0]).unwrap();
    let trained = Checkpoint::load(&report.run_files[0].with_extension("dpss")).unwrap().model;

    // the same batches through ordinary gradient steps
    let private_full = c.private.load().unwrap();
    let (_, private) = dpssgd::data::split_public_private(&private_full, c.public.fraction, 0).unwrap();
    let sched = Schedule::new(private.len(), &c.dp);
    let mut model = Checkpoint::load(&c.checkpoint_for(0)).unwrap().model;
    let mut sampler = RngStream::new(0, streams::SAMPLER);
    let mut losses = Vec::new();
    for _ in 0..sched.steps {
        let batch = poisson_sample(private.len(), sched.q, &mut sampler).unwrap();
        let (xs, ys) = private.gather(&batch.indices);
        let (loss, g) = model.mean_gradient(&xs, &ys).unwrap();
        losses.push((loss, xs.len()));
        let scale = c.dp.learning_rate * xs.len() as f64 / sched.batch_size as f64;
        let step: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
        model.apply_update(&ParamVec::from_vec(model.layout().clone(), step).unwrap()).unwrap();
    }
    for (a, b) in trained.params().iter().zip(model.params()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
    let tail = &losses[(sched.steps - sched.eval_every) as usize..];
    let n: usize = tail.iter().map(|t| t.1).sum();
    let want = tail.iter().map(|(l, k)| l * *k as f64).sum::<f64>() / n as f64;
    let got = rows.last().unwrap().train_loss.unwrap();
    assert!((got - want).abs() <= 1e-10);
}

#[test]
fn freezing_run_keeps_frozen_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = pretrained(dir.path());
    c.sparsity.p = 0.7;
    c.seeds = vec![1];
    let report = cmd_train(&c).unwrap();
    let end = Checkpoint::load(&report.run_files[0].with_extension("dpss")).unwrap();
    let start = Checkpoint::load(&c.checkpoint_for(1)).unwrap().model;
    let mask = end.frozen.expect("freezing runs store their mask");
    let keep = mask.partition().selected_mask(end.model.layout());
    let mut frozen = 0;
    for ((a, b), sel) in start.params().iter().zip(end.model.params()).zip(keep) {
        if !sel {
            assert_eq!(a.to_bits(), b.to_bits());
            frozen += 1;
        }
    }
    assert!(frozen > 0);
}

#[test]
fn aggregate_and_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.seeds = (0..5).collect();
    c.dp.epochs = 1;
    cmd_pretrain(&c).unwrap();
    let report = cmd_train(&c).unwrap();
    assert_eq!(report.aggregate.len(), 1);
    let agg = &report.aggregate[0];
    assert_eq!(agg.seeds, 5);
    let finals: Vec<f64> = report
        .run_files
        .iter()
        .map(|f| read_metrics(f).unwrap().last().unwrap().test_acc)
        .collect();
    assert_eq!(finals.len(), 5);
    let mean = finals.iter().sum::<f64>() / 5.0;
    assert!((agg.mean_test_acc - mean).abs() < 1e-15);
    assert_eq!(cmd_report(dir.path()).unwrap(), report.aggregate);
}

#[test]
fn sweep_cardinality_and_shared_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = pretrained(dir.path());
    c.sweep.p_grid = vec![0.0, 0.5, 0.9];
    c.dp.epochs = 1;
    let report = cmd_sweep(&c).unwrap();
    assert_eq!(report.aggregate.len(), 12);
    assert_eq!(report.run_files.len(), 24);
    let eps = report.aggregate[0].eps_spent;
    assert!(report.aggregate.iter().all(|r| r.eps_spent == eps && r.seeds == 2));
    let settings: Vec<Setting> = Setting::all();
    assert_eq!(report.aggregate[0].setting, settings[0].name());
    assert!(dir.path().join("sweep.gp").exists());
    let gp = fs::read_to_string(dir.path().join("sweep.gp")).unwrap();
    assert!(gp.contains("'sweep.csv'"));
}

#[test]
fn metrics_are_byte_identical_across_reruns() {
    let run = |dir: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut c = pretrained(dir);
        c.sparsity.mode = SparsityMode::Selection;
        c.sparsity.criterion = Criterion::Magnitude;
        c.sparsity.p = 0.5;
        let r = cmd_train(&c).unwrap();
        r.run_files
            .iter()
            .map(|f| (f.strip_prefix(dir).unwrap().to_path_buf(), fs::read(f).unwrap()))
            .collect()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn epsilon_column_matches_the_accountant() {
    let dir = tempfile::tempdir().unwrap();
    let c = pretrained(dir.path());
    let report = cmd_train(&c).unwrap();
    let cal = report.calibration;
    assert_eq!(cal, cmd_calibrate(&c).unwrap());
    let mut prev = 0.0;
    for row in read_metrics(&report.run_files[0]).unwrap() {
        let want = if row.step == 0 {
            0.0
        } else {
            AccountantState::new(cal.q, cal.sigma, (2..=512).collect())
                .unwrap()
                .compose(row.step)
                .to_epsilon(c.dp.delta)
                .unwrap()
                .epsilon
        };
        assert_eq!(row.eps_spent, want);
        assert!(row.eps_spent >= prev);
        prev = row.eps_spent;
    }
    assert!(prev <= 4.0);
}

#[test]
fn mismatched_checkpoint_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = pretrained(dir.path());
    c.model = ModelSpec::mnist_cnn(4);
    assert!(matches!(cmd_train(&c), Err(Error::Config(_))));
}

#[test]
fn reinit_policy_controls_the_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = pretrained(dir.path());
    c.seeds = vec![0];
    c.dp.epochs = 1;
    let first = |r: &dpssgd::experiment::TrainReport| read_metrics(&r.run_files[0]).unwrap()[0].test_acc;
    c.reinit_last_layer = ReinitPolicy::Always;
    let always = first(&cmd_train(&c).unwrap());
    c.reinit_last_layer = ReinitPolicy::Auto;
    let auto = first(&cmd_train(&c).unwrap());
    // same class count: auto keeps the pretrained classifier
    let pre = Checkpoint::load(&c.checkpoint_for(0)).unwrap().model;
    let test = c.test.load().unwrap();
    assert_eq!(auto, dpssgd::experiment::evaluate(&pre, &test));
    assert!(always < auto);
}
