//! The private training step.
//!
//! Each sample's gradient is restricted to the selected indices, clipped to
//! L2 norm `C`, and summed; Gaussian noise of standard deviation `sigma * C`
//! is added only on the selected coordinates, and the sum is scaled by
//! `lr / B` and subtracted from the parameters. Non-selected coordinates
//! receive an update of exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ParamLayout, ParamVec, PerSampleGrads};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::sparsify::IndexPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpStepConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub learning_rate: f64,
    /// Divisor of the noisy sum: the expected, not realized, batch size.
    pub expected_batch_size: usize,
}

impl DpStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "noise multiplier must be nonnegative, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.expected_batch_size == 0 {
            return Err(Error::config("expected batch size must be at least 1"));
        }
        Ok(())
    }
}

/// A parameter update that is exactly zero on every non-selected index.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySparseUpdate<T: Scalar> {
    delta: ParamVec<T>,
}

impl<T: Scalar> NoisySparseUpdate<T> {
    pub fn delta(&self) -> &ParamVec<T> {
        &self.delta
    }

    pub fn into_delta(self) -> ParamVec<T> {
        self.delta
    }
}

/// What one step did, besides changing the model.
#[derive(Debug, Clone)]
pub struct StepOutcome<T: Scalar> {
    pub update: NoisySparseUpdate<T>,
    /// Mean training loss over the realized batch (0 for an empty batch).
    pub loss: T,
    pub batch_size: usize,
}

fn checked_mask(partition: &IndexPartition, layout: &ParamLayout) -> Result<Vec<bool>> {
    partition.validate(layout)?;
    Ok(partition.selected_mask(layout))
}

/// Zeroes non-selected coordinates and rescales the rest so their norm is
/// at most `clip`.
fn clip_row<T: Scalar>(row: &mut [T], mask: &[bool], clip: T) {
    let mut sq = T::zero();
    for (v, &keep) in row.iter_mut().zip(mask) {
        if keep {
            sq += *v * *v;
        } else {
            *v = T::zero();
        }
    }
    let denom = T::one().max(sq.sqrt() / clip);
    for v in row.iter_mut() {
        *v /= denom;
    }
}

fn add_noise<T: Scalar>(sum: &mut [T], mask: &[bool], std: f64, stream: &mut RngStream) {
    for (v, &keep) in sum.iter_mut().zip(mask) {
        if keep {
            *v += T::of(std * stream.normal());
        }
    }
}

/// Clips each sample's gradient over the selected indices (non-prunable
/// tensors count as fully selected). Non-selected coordinates come back 0.
pub fn clip_per_sample<T: Scalar>(
    grads: &PerSampleGrads<T>,
    partition: &IndexPartition,
    clip_norm: f64,
) -> Result<PerSampleGrads<T>> {
    let mask = checked_mask(partition, grads.layout())?;
    let mut out = grads.clone();
    for b in 0..out.batch_size() {
        clip_row(out.sample_mut(b), &mask, T::of(clip_norm));
    }
    Ok(out)
}

/// Sums clipped gradients and adds `N(0, (sigma*C)^2)` on each selected
/// coordinate, drawing noise in global flat-index order.
pub fn privatize_sum<T: Scalar>(
    clipped: &PerSampleGrads<T>,
    partition: &IndexPartition,
    clip_norm: f64,
    noise_multiplier: f64,
    noise: &mut RngStream,
) -> Result<ParamVec<T>> {
    let mask = checked_mask(partition, clipped.layout())?;
    let mut sum = ParamVec::zeros(clipped.layout().clone());
    for row in clipped.samples() {
        for ((s, &g), &keep) in sum.data_mut().iter_mut().zip(row).zip(&mask) {
            if keep {
                *s += g;
            }
        }
    }
    add_noise(sum.data_mut(), &mask, noise_multiplier * clip_norm, noise);
    Ok(sum)
}

/// One private step on the batch `(samples, labels)`, updating `model` in
/// place. An empty batch still adds noise and moves the parameters.
pub fn dp_ssgd_step<T: Scalar>(
    model: &mut Model<T>,
    samples: &[&[T]],
    labels: &[usize],
    cfg: &DpStepConfig,
    partition: &IndexPartition,
    noise: &mut RngStream,
) -> Result<StepOutcome<T>> {
    cfg.validate()?;
    let (loss, mut grads) = model.per_sample_gradients(samples, labels)?;
    let mask = checked_mask(partition, model.layout())?;
    let clip = T::of(cfg.clip_norm);
    let mut sum = ParamVec::zeros(model.layout().clone());
    for b in 0..grads.batch_size() {
        let row = grads.sample_mut(b);
        clip_row(row, &mask, clip);
        for (s, &g) in sum.data_mut().iter_mut().zip(row.iter()) {
            *s += g;
        }
    }
    add_noise(sum.data_mut(), &mask, cfg.noise_multiplier * cfg.clip_norm, noise);
    let scale = T::of(cfg.learning_rate / cfg.expected_batch_size as f64);
    for v in sum.data_mut() {
        *v *= scale;
    }
    model.apply_update(&sum)?;
    Ok(StepOutcome {
        update: NoisySparseUpdate { delta: sum },
        loss,
        batch_size: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::sparsify::{partition_for_step, Criterion, SparsityMode, SparsityPlan};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn tiny() -> Model<f64> {
        Model::build(&ModelSpec::tiny_cnn(1, 4, 2), 2, &mut RngStream::new(3, 0)).unwrap()
    }

    fn batch(n: usize, len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut s = RngStream::new(seed, 9);
        let xs = (0..n).map(|_| (0..len).map(|_| s.uniform()).collect()).collect();
        let ys = (0..n).map(|_| s.below(2)).collect();
        (xs, ys)
    }

    fn plan(p: f64) -> SparsityPlan {
        SparsityPlan::new(SparsityMode::Freezing, Criterion::Random, p, 5).unwrap()
    }

    #[test]
    fn clip_example_uses_selected_norm_only() {
        // a lone fc layer with three weights and one bias
        let spec = ModelSpec { input: vec![3], layers: vec![crate::nn::LayerSpec::fc(1)] };
        let m: Model<f64> = Model::build(&spec, 1, &mut RngStream::new(0, 0)).unwrap();
        let layout = m.layout().clone();
        let w = layout.position("0.weight").unwrap();
        let bias = layout.position("0.bias").unwrap();
        let mut row = vec![0.0; layout.total()];
        row[layout.entries()[w].range()].copy_from_slice(&[3.0, 4.0, 100.0]);
        let grads = PerSampleGrads::from_rows(layout.clone(), vec![row]).unwrap();
        let split = crate::sparsify::Split { selected: vec![0, 1], non_selected: vec![2] };
        let part = IndexPartition::from_parts(&layout, vec![crate::sparsify::TensorPartition { param: w, split }]).unwrap();
        let c = clip_per_sample(&grads, &part, 1.0).unwrap();
        assert_eq!(c.sample_param(0, w), [0.6, 0.8, 0.0]);
        assert_eq!(c.sample_param(0, bias), [0.0]);
    }

    #[test]
    fn small_gradients_pass_through() {
        let m = tiny();
        let (xs, ys) = batch(3, 16, 1);
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (_, g) = m.per_sample_gradients(&xr, &ys).unwrap();
        let part = partition_for_step(&plan(0.5), 0, &m, None).unwrap();
        let mask = part.selected_mask(m.layout());
        let c = clip_per_sample(&g, &part, 1e9).unwrap();
        for b in 0..3 {
            for ((&o, &n), &keep) in g.sample(b).iter().zip(c.sample(b)).zip(&mask) {
                assert_eq!(n, if keep { o } else { 0.0 });
            }
        }
    }

    #[test]
    fn dense_partition_matches_full_clip() {
        let m = tiny();
        let (xs, ys) = batch(4, 16, 2);
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (_, g) = m.per_sample_gradients(&xr, &ys).unwrap();
        let part = partition_for_step(&plan(0.0), 0, &m, None).unwrap();
        let c = clip_per_sample(&g, &part, 0.05).unwrap();
        for b in 0..4 {
            let row = g.sample(b);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (&o, &v) in row.iter().zip(c.sample(b)) {
                let want = o / (n / 0.05).max(1.0);
                assert!((v - want).abs() <= 1e-15 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_noise_is_exact_sum_and_non_selected_stays_zero() {
        let m = tiny();
        let (xs, ys) = batch(5, 16, 3);
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (_, g) = m.per_sample_gradients(&xr, &ys).unwrap();
        let part = partition_for_step(&plan(0.7), 0, &m, None).unwrap();
        let c = clip_per_sample(&g, &part, 0.1).unwrap();
        let s = privatize_sum(&c, &part, 0.1, 0.0, &mut RngStream::new(0, 2)).unwrap();
        for i in 0..m.param_count() {
            let want: f64 = c.samples().map(|r| r[i]).sum();
            assert_eq!(s.data()[i], want);
        }
        let noisy = privatize_sum(&c, &part, 0.1, 3.0, &mut RngStream::new(0, 2)).unwrap();
        for (v, keep) in noisy.data().iter().zip(part.selected_mask(m.layout())) {
            if !keep {
                assert_eq!(v.to_bits(), 0.0f64.to_bits());
            }
        }
    }

    #[test]
    fn noise_std_matches_sigma_times_clip() {
        let spec = ModelSpec { input: vec![999], layers: vec![crate::nn::LayerSpec::fc(1000)] };
        let m: Model<f64> = Model::build(&spec, 1000, &mut RngStream::new(0, 0)).unwrap();
        let zero = PerSampleGrads::from_rows(m.layout().clone(), vec![]).unwrap();
        let s = privatize_sum(&zero, &IndexPartition::dense(), 2.0, 1.0, &mut RngStream::new(4, 2)).unwrap();
        let n = s.data().len() as f64;
        assert!(n >= 1e6);
        let mean = s.data().iter().sum::<f64>() / n;
        let std = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 2.0).abs() <= 0.04, "std {std}");
    }

    #[test]
    fn empty_batch_is_noise_only_step() {
        let mut m = tiny();
        let before = m.params().to_vec();
        let cfg = DpStepConfig { clip_norm: 1.0, noise_multiplier: 1.0, learning_rate: 0.1, expected_batch_size: 4 };
        let part = partition_for_step(&plan(0.5), 0, &m, None).unwrap();
        let out = dp_ssgd_step(&mut m, &[], &[], &cfg, &part, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(out.batch_size, 0);
        assert_eq!(out.loss, 0.0);
        let mask = part.selected_mask(m.layout());
        for ((a, b), keep) in before.iter().zip(m.params()).zip(mask) {
            assert_eq!(a == b, !keep);
        }
    }

    #[test]
    fn plain_sgd_when_noise_free_and_unclipped() {
        let mut m = tiny();
        let mut reference = m.clone();
        let (xs, ys) = batch(4, 16, 6);
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let cfg = DpStepConfig { clip_norm: 1e9, noise_multiplier: 0.0, learning_rate: 0.05, expected_batch_size: 4 };
        dp_ssgd_step(&mut m, &xr, &ys, &cfg, &IndexPartition::dense(), &mut RngStream::new(0, 2)).unwrap();
        let (_, g) = reference.mean_gradient(&xr, &ys).unwrap();
        let step: Vec<f64> = g.data().iter().map(|v| v * 0.05).collect();
        reference.apply_update(&ParamVec::from_vec(reference.layout().clone(), step).unwrap()).unwrap();
        for (a, b) in m.params().iter().zip(reference.params()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut m = tiny();
            let (xs, ys) = batch(6, 16, 7);
            let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
            let cfg = DpStepConfig { clip_norm: 0.5, noise_multiplier: 1.1, learning_rate: 0.1, expected_batch_size: 6 };
            let part = partition_for_step(&plan(0.5), 0, &m, None).unwrap();
            let mut noise = RngStream::new(11, 2);
            for _ in 0..10 {
                dp_ssgd_step(&mut m, &xr, &ys, &cfg, &part, &mut noise).unwrap();
            }
            m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_partition_is_rejected() {
        let m = tiny();
        let other: Model<f64> = Model::build(&ModelSpec::tiny_cnn(1, 6, 2), 2, &mut RngStream::new(0, 0)).unwrap();
        let part = partition_for_step(&plan(0.5), 0, &other, None).unwrap();
        let g = PerSampleGrads::from_rows(m.layout().clone(), vec![vec![0.0; m.param_count()]]).unwrap();
        assert!(matches!(clip_per_sample(&g, &part, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let ok = DpStepConfig { clip_norm: 1.0, noise_multiplier: 0.0, learning_rate: 0.1, expected_batch_size: 1 };
        assert!(ok.validate().is_ok());
        for bad in [
            DpStepConfig { clip_norm: 0.0, ..ok },
            DpStepConfig { noise_multiplier: -1.0, ..ok },
            DpStepConfig { learning_rate: 0.0, ..ok },
            DpStepConfig { expected_batch_size: 0, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clipped_rows_respect_the_bound_and_adjacency(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 42), 1..6),
            p in 0.0f64..0.95,
            c in 0.01f64..10.0,
            seed in any::<u64>(),
        ) {
            let spec = ModelSpec { input: vec![5], layers: vec![crate::nn::LayerSpec::fc(7)] };
            let m: Model<f64> = Model::build(&spec, 7, &mut RngStream::new(0, 0)).unwrap();
            let layout: Arc<ParamLayout> = m.layout().clone();
            let plan = SparsityPlan::new(SparsityMode::Selection, Criterion::Random, p, seed).unwrap();
            let part = partition_for_step(&plan, 0, &m, None).unwrap();
            let g = PerSampleGrads::from_rows(layout, rows.clone()).unwrap();
            let clipped = clip_per_sample(&g, &part, c).unwrap();
            for row in clipped.samples() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(n <= c * (1.0 + 1e-12));
            }
            // removing one sample moves the pre-noise sum by at most C
            let full = privatize_sum(&clipped, &part, c, 0.0, &mut RngStream::new(0, 0)).unwrap();
            let rest = PerSampleGrads::from_rows(
                clipped.layout().clone(),
                clipped.samples().skip(1).map(|r| r.to_vec()).collect(),
            ).unwrap();
            let partial = privatize_sum(&rest, &part, c, 0.0, &mut RngStream::new(0, 0)).unwrap();
            let diff = full.data().iter().zip(partial.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= c * (1.0 + 1e-9));
        }
    }
}
