//! Choosing which parameter indices a DP step may update.
//!
//! For each prunable tensor the flat indices are split into a selected set
//! (clipped, noised, updated) and a non-selected set of exactly
//! `floor(p * len)` indices that the step leaves untouched. The split is
//! per tensor, never global across layers.
//!
//! Selection reads only the current parameters and a random stream, never
//! training data, so it carries no privacy cost of its own.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ParamInfo, ParamLayout};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Stream ids at or above this value are reserved for per-step selection.
pub const SELECTION_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// One split drawn before training and kept for every step.
    Freezing,
    /// A new split at every step.
    Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Non-selected indices drawn uniformly without replacement.
    Random,
    /// Non-selected indices are the smallest `|w|`, ties by ascending index.
    Magnitude,
}

impl SparsityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SparsityMode::Freezing => "freezing",
            SparsityMode::Selection => "selection",
        }
    }
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Random => "random",
            Criterion::Magnitude => "magnitude",
        }
    }
}

/// Fraction of each prunable tensor left out of the update, in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PruningRate(f64);

impl PruningRate {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..1.0).contains(&p) {
            Ok(PruningRate(p))
        } else {
            Err(Error::config(format!("pruning rate {p} outside [0, 1)")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `floor(p * len)`, snapping products within rounding error of an integer.
    pub fn prune_count(self, len: usize) -> usize {
        let x = self.0 * len as f64;
        let r = x.round();
        let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.floor() };
        (k as usize).min(len)
    }
}

impl TryFrom<f64> for PruningRate {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        PruningRate::new(p)
    }
}

impl From<PruningRate> for f64 {
    fn from(p: PruningRate) -> f64 {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub mode: SparsityMode,
    pub criterion: Criterion,
    pub rate: PruningRate,
    /// Also prune biases and normalization parameters. Off by default:
    /// only conv and fc weight matrices are prunable.
    #[serde(default)]
    pub prune_all_params: bool,
    /// Seed of the selection streams; step `t` uses stream
    /// `SELECTION_STREAM_BASE + t`.
    #[serde(default)]
    pub seed: u64,
}

impl SparsityPlan {
    pub fn new(mode: SparsityMode, criterion: Criterion, rate: f64, seed: u64) -> Result<Self> {
        Ok(SparsityPlan {
            mode,
            criterion,
            rate: PruningRate::new(rate)?,
            prune_all_params: false,
            seed,
        })
    }

    /// No pruning: every index is selected at every step.
    pub fn dense() -> Self {
        SparsityPlan {
            mode: SparsityMode::Freezing,
            criterion: Criterion::Random,
            rate: PruningRate(0.0),
            prune_all_params: false,
            seed: 0,
        }
    }

    pub fn is_prunable(&self, info: &ParamInfo) -> bool {
        self.prune_all_params || info.is_weight()
    }

    pub fn step_stream(&self, step: u64) -> RngStream {
        RngStream::new(self.seed, SELECTION_STREAM_BASE + step)
    }
}

/// Selected / non-selected flat indices of one tensor, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Split {
    pub selected: Vec<usize>,
    pub non_selected: Vec<usize>,
}

impl Split {
    fn from_non_selected(len: usize, mut non_selected: Vec<usize>) -> Self {
        non_selected.sort_unstable();
        let mut drop = vec![false; len];
        for &i in &non_selected {
            drop[i] = true;
        }
        let selected = (0..len).filter(|&i| !drop[i]).collect();
        Split {
            selected,
            non_selected,
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len() + self.non_selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits each tensor's indices under `criterion` at pruning rate `rate`.
/// The random criterion consumes `floor(rate * len)` draws per tensor, in
/// tensor order, and never reads the values.
pub fn select_indices<T: Scalar>(
    weights: &[&[T]],
    rate: f64,
    criterion: Criterion,
    stream: &mut RngStream,
) -> Result<Vec<Split>> {
    let rate = PruningRate::new(rate)?;
    Ok(weights
        .iter()
        .map(|w| {
            let n = w.len();
            let k = rate.prune_count(n);
            let dropped = match criterion {
                Criterion::Random => {
                    let mut idx: Vec<usize> = (0..n).collect();
                    for i in 0..k {
                        let j = i + stream.below(n - i);
                        idx.swap(i, j);
                    }
                    idx.truncate(k);
                    idx
                }
                Criterion::Magnitude => {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap().then(a.cmp(&b)));
                    idx.truncate(k);
                    idx
                }
            };
            Split::from_non_selected(n, dropped)
        })
        .collect())
}

/// The split of one parameter tensor of a model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorPartition {
    /// Index into the model's [`ParamLayout`].
    pub param: usize,
    pub split: Split,
}

/// Splits for the prunable tensors of a model. Tensors without an entry
/// are fully selected.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct IndexPartition {
    parts: Vec<TensorPartition>,
}

impl IndexPartition {
    /// Everything selected.
    pub fn dense() -> Self {
        IndexPartition { parts: Vec::new() }
    }

    pub fn from_parts(layout: &ParamLayout, mut parts: Vec<TensorPartition>) -> Result<Self> {
        parts.sort_by_key(|p| p.param);
        let part = IndexPartition { parts };
        part.validate(layout)?;
        Ok(part)
    }

    pub fn parts(&self) -> &[TensorPartition] {
        &self.parts
    }

    pub fn for_param(&self, param: usize) -> Option<&Split> {
        self.parts.iter().find(|p| p.param == param).map(|p| &p.split)
    }

    /// Disjoint, exhaustive, sorted, and within the layout.
    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        let mut last = None;
        for tp in &self.parts {
            let info = layout.get(tp.param).ok_or_else(|| {
                Error::shape(format!("partition refers to parameter {} of {}", tp.param, layout.len()))
            })?;
            if last.is_some_and(|l| l >= tp.param) {
                return Err(Error::shape("partition lists a parameter twice"));
            }
            last = Some(tp.param);
            let s = &tp.split;
            let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
            if s.len() != info.len() || !sorted(&s.selected) || !sorted(&s.non_selected) {
                return Err(Error::shape(format!("partition of {} is not a sorted split", info.name)));
            }
            let mut seen = vec![false; info.len()];
            for &i in s.selected.iter().chain(&s.non_selected) {
                if i >= info.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::shape(format!("partition of {} is not a partition", info.name)));
                }
            }
        }
        Ok(())
    }

    /// Global flat mask, `true` where the index is selected.
    pub fn selected_mask(&self, layout: &ParamLayout) -> Vec<bool> {
        let mut mask = vec![true; layout.total()];
        for tp in &self.parts {
            let off = layout.entries()[tp.param].offset;
            for &i in &tp.split.non_selected {
                mask[off + i] = false;
            }
        }
        mask
    }

    /// `|I_s|` over the whole model, counting fully selected tensors.
    pub fn selected_count(&self, layout: &ParamLayout) -> usize {
        layout.total() - self.non_selected_count()
    }

    pub fn non_selected_count(&self) -> usize {
        self.parts.iter().map(|p| p.split.non_selected.len()).sum()
    }
}

/// The split fixed at step 0 in freezing mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrozenMask(IndexPartition);

impl FrozenMask {
    pub fn new(partition: IndexPartition) -> Self {
        FrozenMask(partition)
    }

    pub fn partition(&self) -> &IndexPartition {
        &self.0
    }
}

/// Splits every prunable tensor of `model` under the plan's criterion.
pub fn select_for_model<T: Scalar>(
    model: &Model<T>,
    plan: &SparsityPlan,
    stream: &mut RngStream,
) -> Result<IndexPartition> {
    let layout = model.layout();
    let prunable: Vec<usize> = (0..layout.len())
        .filter(|&i| plan.is_prunable(&layout.entries()[i]))
        .collect();
    let weights: Vec<&[T]> = prunable.iter().map(|&i| model.param(i)).collect();
    let splits = select_indices(&weights, plan.rate.get(), plan.criterion, stream)?;
    let parts = prunable
        .into_iter()
        .zip(splits)
        .map(|(param, split)| TensorPartition { param, split })
        .collect();
    Ok(IndexPartition { parts })
}

/// The partition in force at `step`.
///
/// Freezing returns the cached mask, computing it only at step 0 when no
/// cache exists. Selection recomputes from the current parameters
/// (magnitude) or from the step's own stream (random).
pub fn partition_for_step<T: Scalar>(
    plan: &SparsityPlan,
    step: u64,
    model: &Model<T>,
    cached: Option<&FrozenMask>,
) -> Result<IndexPartition> {
    match (plan.mode, cached) {
        (SparsityMode::Freezing, Some(mask)) => Ok(mask.partition().clone()),
        (SparsityMode::Freezing, None) if step == 0 => select_for_model(model, plan, &mut plan.step_stream(0)),
        (SparsityMode::Freezing, None) => Err(Error::State(format!(
            "freezing mode at step {step} without a frozen mask"
        ))),
        (SparsityMode::Selection, _) => select_for_model(model, plan, &mut plan.step_stream(step)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelSpec, ParamVec};
    use proptest::prelude::*;

    fn rng() -> RngStream {
        RngStream::new(1, 1)
    }

    #[test]
    fn magnitude_example() {
        let w = [0.1, -0.5, 0.3, 0.05];
        let s = select_indices(&[&w[..]], 0.5, Criterion::Magnitude, &mut rng()).unwrap();
        assert_eq!(s[0].non_selected, [0, 3]);
        assert_eq!(s[0].selected, [1, 2]);
    }

    #[test]
    fn magnitude_ties_break_by_index() {
        let w = [1.0, -1.0, 1.0, 2.0];
        let s = select_indices(&[&w[..]], 0.5, Criterion::Magnitude, &mut rng()).unwrap();
        assert_eq!(s[0].non_selected, [0, 1]);
    }

    #[test]
    fn zero_rate_selects_everything() {
        let w = [3.0, 1.0, 2.0];
        for c in [Criterion::Random, Criterion::Magnitude] {
            let mut r = rng();
            let s = select_indices(&[&w[..]], 0.0, c, &mut r).unwrap();
            assert!(s[0].non_selected.is_empty());
            assert_eq!(s[0].selected, [0, 1, 2]);
            assert_eq!(r.counter(), 0);
        }
    }

    #[test]
    fn rate_outside_unit_interval_is_config_error() {
        let w = [1.0];
        for p in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(matches!(
                select_indices(&[&w[..]], p, Criterion::Random, &mut rng()),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn prune_count_is_floor() {
        let r = |p: f64| PruningRate::new(p).unwrap();
        assert_eq!(r(0.9).prune_count(10), 9);
        assert_eq!(r(0.29).prune_count(100), 29);
        assert_eq!(r(0.5).prune_count(7), 3);
        assert_eq!(r(0.99).prune_count(10), 9);
    }

    #[test]
    fn random_selection_is_uniform() {
        let w = [0.0f64; 10];
        let mut counts = [0usize; 10];
        let trials = 10_000;
        let mut s = RngStream::new(123, 0);
        for _ in 0..trials {
            let sp = select_indices(&[&w[..]], 0.9, Criterion::Random, &mut s).unwrap();
            assert_eq!(sp[0].selected.len(), 1);
            counts[sp[0].selected[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.1).abs() <= 0.01, "{counts:?}");
        }
    }

    fn two_weight_model(w: [f64; 2]) -> Model<f64> {
        let spec = ModelSpec { input: vec![1], layers: vec![LayerSpec::fc(2)] };
        let mut m = Model::build(&spec, 2, &mut RngStream::new(0, 0)).unwrap();
        let i = m.layout().position("0.weight").unwrap();
        m.set_param(i, &w).unwrap();
        m
    }

    #[test]
    fn freezing_returns_cached_mask() {
        let m: Model<f64> = Model::build(&ModelSpec::tiny_cnn(1, 4, 2), 2, &mut RngStream::new(0, 0)).unwrap();
        let plan = SparsityPlan::new(SparsityMode::Freezing, Criterion::Random, 0.5, 9).unwrap();
        let p0 = partition_for_step(&plan, 0, &m, None).unwrap();
        let mask = FrozenMask::new(p0.clone());
        let p500 = partition_for_step(&plan, 500, &m, Some(&mask)).unwrap();
        assert_eq!(p0, p500);
        assert!(matches!(partition_for_step(&plan, 1, &m, None), Err(Error::State(_))));
    }

    #[test]
    fn selection_follows_magnitude_order_changes() {
        let plan = SparsityPlan::new(SparsityMode::Selection, Criterion::Magnitude, 0.5, 0).unwrap();
        let mut m = two_weight_model([0.1, 0.9]);
        let w = m.layout().position("0.weight").unwrap();
        let before = partition_for_step(&plan, 0, &m, None).unwrap();
        assert_eq!(before.for_param(w).unwrap().non_selected, [0]);
        // an update that moves weight 1 below weight 0 in magnitude
        let mut delta = ParamVec::zeros(m.layout().clone());
        delta.data_mut()[m.layout().entries()[w].offset + 1] = 0.85;
        m.apply_update(&delta).unwrap();
        let after = partition_for_step(&plan, 1, &m, None).unwrap();
        assert_eq!(after.for_param(w).unwrap().non_selected, [1]);
    }

    #[test]
    fn random_selection_depends_only_on_seed_and_step() {
        let plan = SparsityPlan::new(SparsityMode::Selection, Criterion::Random, 0.6, 44).unwrap();
        let m: Model<f64> = Model::build(&ModelSpec::tiny_cnn(1, 4, 2), 2, &mut RngStream::new(0, 0)).unwrap();
        let other: Model<f64> = Model::build(&ModelSpec::tiny_cnn(1, 4, 2), 2, &mut RngStream::new(8, 0)).unwrap();
        let a = partition_for_step(&plan, 7, &m, None).unwrap();
        let b = partition_for_step(&plan, 7, &other, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, partition_for_step(&plan, 8, &m, None).unwrap());
    }

    #[test]
    fn biases_exempt_unless_requested() {
        let m: Model<f64> = Model::build(&ModelSpec::tiny_cnn(1, 4, 2), 2, &mut RngStream::new(0, 0)).unwrap();
        let mut plan = SparsityPlan::new(SparsityMode::Freezing, Criterion::Magnitude, 0.5, 0).unwrap();
        let p = partition_for_step(&plan, 0, &m, None).unwrap();
        let pruned: Vec<&str> = p.parts().iter().map(|t| m.layout().entries()[t.param].name.as_str()).collect();
        assert_eq!(pruned, ["0.weight", "5.weight"]);
        plan.prune_all_params = true;
        let p = partition_for_step(&plan, 0, &m, None).unwrap();
        assert_eq!(p.parts().len(), m.layout().len());
    }

    #[test]
    fn validate_rejects_overlap() {
        let m = two_weight_model([1.0, 2.0]);
        let w = m.layout().position("0.weight").unwrap();
        let bad = TensorPartition {
            param: w,
            split: Split { selected: vec![0, 1], non_selected: vec![1] },
        };
        assert!(IndexPartition::from_parts(m.layout(), vec![bad]).is_err());
    }

    proptest! {
        #[test]
        fn partition_law(
            w in prop::collection::vec(-10.0f64..10.0, 1..200),
            p in 0.0f64..0.999,
            magnitude in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let c = if magnitude { Criterion::Magnitude } else { Criterion::Random };
            let s = &select_indices(&[&w[..]], p, c, &mut RngStream::new(seed, 0)).unwrap()[0];
            let k = PruningRate::new(p).unwrap().prune_count(w.len());
            prop_assert_eq!(s.non_selected.len(), k);
            let mut all: Vec<usize> = s.selected.iter().chain(&s.non_selected).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..w.len()).collect::<Vec<_>>());
        }

        #[test]
        fn magnitude_is_scale_invariant(
            w in prop::collection::vec(-10.0f64..10.0, 1..200),
            p in 0.0f64..0.999,
            c in prop::sample::select(vec![0.1, 3.0, 10.0]),
        ) {
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = select_indices(&[&w[..]], p, Criterion::Magnitude, &mut rng()).unwrap();
            let b = select_indices(&[&scaled[..]], p, Criterion::Magnitude, &mut rng()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn random_never_reads_values(
            w in prop::collection::vec(-10.0f64..10.0, 1..100),
            p in 0.0f64..0.999,
        ) {
            let other: Vec<f64> = w.iter().map(|v| v.sin() * 1e3).collect();
            let a = select_indices(&[&w[..]], p, Criterion::Random, &mut rng()).unwrap();
            let b = select_indices(&[&other[..]], p, Criterion::Random, &mut rng()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
