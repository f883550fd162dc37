//! Rényi-DP accounting for Poisson-subsampled Gaussian steps.
//!
//! One step at sampling rate `q` and noise multiplier `sigma` costs, at
//! integer order `alpha`,
//!
//! ```text
//! (1/(alpha-1)) * ln sum_k binom(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2))
//! ```
//!
//! Costs add over steps, and `epsilon = min_alpha [rdp(alpha) + ln(1/delta)/(alpha-1)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const SIGMA_MIN: f64 = 0.3;
pub const SIGMA_MAX: f64 = 100.0;
pub const SIGMA_TOLERANCE: f64 = 1e-3;

/// Integer orders `2..=512`.
pub fn default_orders() -> Vec<u32> {
    (2..=512).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
        }
        check_delta(delta)?;
        Ok(PrivacyBudget { epsilon, delta })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("delta must lie in (0, 1), got {delta}")))
    }
}

fn check_mechanism(q: f64, sigma: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise multiplier must be positive, got {sigma}")));
    }
    Ok(())
}

/// `ln(exp(a) + exp(b))`.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// RDP of one subsampled Gaussian step at integer order `alpha >= 2`.
///
/// The `k = 0, 1` terms of the binomial sum have zero exponent, so the sum
/// is `1 + S` with `S = sum_{k>=2} binom (1-q)^(alpha-k) q^k expm1(k(k-1)/(2 sigma^2))`,
/// a sum of nonnegative terms. `S` is accumulated in log space and the
/// result taken as `ln_1p`, which keeps full relative precision for tiny
/// `q` and does not overflow for small `sigma`.
pub fn rdp_one_step(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 2.0 && alpha.fract() == 0.0 && alpha <= u32::MAX as f64) {
        return Err(Error::config(format!("RDP order must be an integer >= 2, got {alpha}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    check_mechanism(q, sigma)?;
    let a = alpha as u32;
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    Ok(log_terms(q, sigma, a) / (alpha - 1.0))
}

fn log_terms(q: f64, sigma: f64, a: u32) -> f64 {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let af = a as f64;
    // ln binom(a, 1)
    let mut ln_binom = af.ln();
    let mut log_s = f64::NEG_INFINITY;
    for k in 2..=a {
        let kf = k as f64;
        ln_binom += ((af - kf + 1.0) / kf).ln();
        let x = kf * (kf - 1.0) * inv;
        // ln(expm1(x)) without overflow
        let ln_em1 = if x > 30.0 { x + (-(-x).exp()).ln_1p() } else { x.exp_m1().ln() };
        let t = ln_binom + (af - kf) * ln_1mq + kf * ln_q + ln_em1;
        log_s = log_add(log_s, t);
    }
    // ln(1 + exp(log_s))
    if log_s > 30.0 {
        log_s + (-log_s).exp().ln_1p()
    } else {
        log_s.exp().ln_1p()
    }
}

/// Accumulated RDP of `steps` identical subsampled Gaussian steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountantState {
    q: f64,
    sigma: f64,
    steps: u64,
    orders: Vec<u32>,
    per_step: Vec<f64>,
    rdp: Vec<f64>,
}

impl AccountantState {
    pub fn new(q: f64, sigma: f64, orders: Vec<u32>) -> Result<Self> {
        check_mechanism(q, sigma)?;
        if orders.is_empty() {
            return Err(Error::config("empty RDP order grid"));
        }
        let per_step = orders
            .iter()
            .map(|&a| rdp_one_step(q, sigma, a as f64))
            .collect::<Result<Vec<_>>>()?;
        let rdp = vec![0.0; orders.len()];
        Ok(AccountantState {
            q,
            sigma,
            steps: 0,
            orders,
            per_step,
            rdp,
        })
    }

    pub fn with_default_orders(q: f64, sigma: f64) -> Result<Self> {
        Self::new(q, sigma, default_orders())
    }

    pub fn sampling_rate(&self) -> f64 {
        self.q
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.sigma
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    /// State after `additional_steps` more steps. The total is recomputed as
    /// `steps * per_step` so splitting a run never changes the result.
    pub fn compose(&self, additional_steps: u64) -> Self {
        let steps = self.steps + additional_steps;
        let rdp = self.per_step.iter().map(|&r| steps as f64 * r).collect();
        AccountantState {
            steps,
            rdp,
            ..self.clone()
        }
    }

    pub fn to_epsilon(&self, delta: f64) -> Result<EpsilonReport> {
        to_epsilon(self, delta)
    }
}

/// An `(epsilon, delta)` guarantee and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub delta: f64,
    pub order: u32,
}

/// Best conversion over the state's order grid. A state with zero steps
/// has spent nothing and reports `epsilon = 0`.
pub fn to_epsilon(state: &AccountantState, delta: f64) -> Result<EpsilonReport> {
    check_delta(delta)?;
    if state.steps == 0 {
        return Ok(EpsilonReport {
            epsilon: 0.0,
            delta,
            order: state.orders[0],
        });
    }
    let ln_inv_delta = -delta.ln();
    let (epsilon, order) = state
        .orders
        .iter()
        .zip(&state.rdp)
        .map(|(&a, &r)| (r + ln_inv_delta / (a as f64 - 1.0), a))
        .fold((f64::INFINITY, state.orders[0]), |best, cur| if cur.0 < best.0 { cur } else { best });
    Ok(EpsilonReport { epsilon, delta, order })
}

/// Epsilon spent by `steps` steps at `(q, sigma)`.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    Ok(AccountantState::with_default_orders(q, sigma)?
        .compose(steps)
        .to_epsilon(delta)?
        .epsilon)
}

/// Smallest noise multiplier in `[0.3, 100]`, to within `1e-3`, whose
/// `steps`-step epsilon does not exceed the target. The returned value is
/// the upper end of the final bisection bracket, so it always meets the
/// target.
pub fn calibrate_sigma(target: PrivacyBudget, q: f64, steps: u64) -> Result<f64> {
    PrivacyBudget::new(target.epsilon, target.delta)?;
    let eps = |sigma: f64| epsilon_for(q, sigma, steps, target.delta);
    let at_max = eps(SIGMA_MAX)?;
    if at_max > target.epsilon {
        return Err(Error::Calibration {
            message: format!(
                "epsilon {} is not reachable with q = {q}, {steps} steps, delta = {}",
                target.epsilon, target.delta
            ),
            sigma_max: SIGMA_MAX,
            achievable_epsilon: at_max,
        });
    }
    if eps(SIGMA_MIN)? <= target.epsilon {
        return Ok(SIGMA_MIN);
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    while hi - lo > SIGMA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// One accounting query, as printed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub order: u32,
}

impl AccountingRow {
    pub const CSV_HEADER: &'static str = "q,sigma,steps,delta,epsilon,order";

    pub fn compute(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<Self> {
        let r = AccountantState::with_default_orders(q, sigma)?
            .compose(steps)
            .to_epsilon(delta)?;
        Ok(AccountingRow {
            q,
            sigma,
            steps,
            delta,
            epsilon: r.epsilon,
            order: r.order,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.q, self.sigma, self.steps, self.delta, self.epsilon, self.order
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn full_batch_is_gaussian_mechanism() {
        assert_eq!(rdp_one_step(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_one_step(1.0, 2.0, 10.0).unwrap(), 10.0 / 8.0);
        assert_eq!(rdp_one_step(0.0, 1.0, 7.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_fractional_order() {
        assert!(matches!(rdp_one_step(0.1, 1.0, 2.5), Err(Error::Config(_))));
        assert!(matches!(rdp_one_step(0.1, 1.0, 1.0), Err(Error::Config(_))));
    }

    /// Plain linear-space summation of the binomial formula, an independent
    /// route to the same quantity (accurate when the result is not tiny).
    fn direct(q: f64, sigma: f64, a: u32) -> f64 {
        let mut binom = 1.0f64;
        let mut total = 0.0f64;
        for k in 0..=a {
            if k > 0 {
                binom *= (a - k + 1) as f64 / k as f64;
            }
            let kf = k as f64;
            total += binom * (1.0 - q).powi((a - k) as i32) * q.powi(k as i32) * (kf * (kf - 1.0) / (2.0 * sigma * sigma)).exp();
        }
        total.ln() / (a as f64 - 1.0)
    }

    #[test]
    fn agrees_with_direct_summation() {
        for &(q, s, a) in &[(0.01, 1.0, 16), (0.1, 1.0, 5), (0.5, 2.0, 30), (0.05, 0.8, 12)] {
            let got = rdp_one_step(q, s, a as f64).unwrap();
            assert!(rel(got, direct(q, s, a)) < 1e-9, "q={q} s={s} a={a}");
        }
    }

    #[test]
    fn compose_is_additive() {
        let s = AccountantState::with_default_orders(0.01, 1.0).unwrap();
        assert_eq!(s.compose(0), s);
        assert_eq!(s.compose(300).compose(700), s.compose(1000));
        let one = rdp_one_step(0.01, 1.0, 16.0).unwrap();
        let i = s.orders().iter().position(|&a| a == 16).unwrap();
        assert!(rel(s.compose(1000).rdp()[i], 1000.0 * one) < 1e-15);
    }

    #[test]
    fn single_full_batch_step_grid_minimum() {
        let orders: Vec<u32> = (2..=256).collect();
        let s = AccountantState::new(1.0, 1.0, orders).unwrap().compose(1);
        let r = s.to_epsilon(1e-5).unwrap();
        let ln = (1e5f64).ln();
        let (want, arg) = (2..=256u32)
            .map(|a| (a as f64 / 2.0 + ln / (a as f64 - 1.0), a))
            .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b });
        assert_eq!(r.order, arg);
        assert!(rel(r.epsilon, want) < 1e-14);
        // by hand: a = 6 gives 3 + ln(1e5)/5
        assert_eq!(arg, 6);
    }

    #[test]
    fn vanishing_noise_cost_leaves_delta_term() {
        let s = AccountantState::new(0.01, 1e6, vec![2, 10, 100]).unwrap().compose(1);
        let r = s.to_epsilon(1e-5).unwrap();
        assert_eq!(r.order, 100);
        assert!(rel(r.epsilon, (1e5f64).ln() / 99.0) < 1e-6);
    }

    #[test]
    fn epsilon_grows_with_steps() {
        let a = epsilon_for(0.01, 1.0, 1000, 1e-5).unwrap();
        let b = epsilon_for(0.01, 1.0, 2000, 1e-5).unwrap();
        assert!(b > a);
    }

    #[test]
    fn calibration_round_trip() {
        let q = 256.0 / 60000.0;
        let steps = 20 * 235;
        let target = PrivacyBudget::new(2.0, 1e-5).unwrap();
        let sigma = calibrate_sigma(target, q, steps).unwrap();
        assert!(epsilon_for(q, sigma, steps, 1e-5).unwrap() <= 2.0);
        assert!(epsilon_for(q, sigma - 2.0 * SIGMA_TOLERANCE, steps, 1e-5).unwrap() > 2.0);
        let looser = calibrate_sigma(PrivacyBudget::new(5.0, 1e-5).unwrap(), q, steps).unwrap();
        assert!(looser <= sigma);
    }

    #[test]
    fn infeasible_target_names_achievable_epsilon() {
        match calibrate_sigma(PrivacyBudget::new(1e-4, 1e-5).unwrap(), 1.0, 10) {
            Err(Error::Calibration { sigma_max, achievable_epsilon, .. }) => {
                assert_eq!(sigma_max, SIGMA_MAX);
                assert!(achievable_epsilon > 1e-4);
            }
            other => panic!("expected calibration error, got {other:?}"),
        }
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(AccountantState::new(0.1, 1.0, vec![]).is_err());
    }

    #[test]
    fn csv_row() {
        let r = AccountingRow::compute(1.0, 1.0, 1, 1e-5).unwrap();
        assert_eq!(r.order, 6);
        assert!(r.to_csv().starts_with("1,1,1,0.00001,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn epsilon_monotone(
            q in 0.001f64..0.5,
            sigma in 0.5f64..5.0,
            steps in 1u64..5000,
            ld in -9.0f64..-2.0,
        ) {
            let delta = 10f64.powf(ld);
            let base = epsilon_for(q, sigma, steps, delta).unwrap();
            prop_assert!(epsilon_for(q, sigma, steps + 1, delta).unwrap() > base);
            prop_assert!(epsilon_for(q, sigma * 1.1, steps, delta).unwrap() < base);
            prop_assert!(epsilon_for((q * 1.5).min(1.0), sigma, steps, delta).unwrap() >= base);
            prop_assert!(epsilon_for(q, sigma, steps, delta * 2.0).unwrap() <= base);
        }

        #[test]
        fn rdp_nonnegative(q in 0.0f64..=1.0, sigma in 0.3f64..50.0, a in 2u32..512) {
            let r = rdp_one_step(q, sigma, a as f64).unwrap();
            prop_assert!(r >= 0.0 && r.is_finite());
        }
    }
}
