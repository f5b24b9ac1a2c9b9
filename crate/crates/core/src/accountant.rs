//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer order `α` is
//!
//! ```text
//! 1/(α-1) · ln Σ_{k=0..α} C(α,k) (1-q)^(α-k) q^k exp((k²-k) / (2σ²))
//! ```
//!
//! evaluated as a log-sum-exp with log-Γ binomials. Steps compose additively
//! per order and the curve converts to `(ε, δ)` through
//! `ε = min_α rdp(α) + ln(1/δ)/(α-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, DpError, Result};

/// Orders 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

fn check_step(q: f64, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(param_err(format!("sample rate must lie in [0, 1], got {q}")));
    }
    if q > 0.0 && !(sigma > 0.0 && sigma.is_finite()) {
        return Err(param_err(format!("noise multiplier must be > 0 when q > 0, got {sigma}")));
    }
    Ok(())
}

/// RDP of one subsampled Gaussian step at integer order `order >= 2`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, order: u32) -> Result<f64> {
    check_step(q, sigma)?;
    if order < 2 {
        return Err(param_err(format!("RDP order must be >= 2, got {order}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let alpha = order as f64;
    if q == 1.0 {
        // Only the k = α term survives: the plain Gaussian mechanism.
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let two_var = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (0..=order)
        .map(|k| {
            let kf = k as f64;
            ln_binomial(order, k) + (alpha - kf) * ln_1mq + kf * ln_q + (kf * kf - kf) / two_var
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok(((max + sum.ln()) / (alpha - 1.0)).max(0.0))
}

/// One entry of the composition history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
}

/// Accumulated RDP per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub values: Vec<f64>,
}

impl RdpCurve {
    pub fn zeros(orders: &[u32]) -> Self {
        Self { orders: orders.to_vec(), values: vec![0.0; orders.len()] }
    }

    /// Adds `steps` invocations of the `(q, σ)` mechanism.
    pub fn add_steps(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        for (v, &order) in self.values.iter_mut().zip(&self.orders) {
            *v += steps as f64 * rdp_subsampled_gaussian(q, sigma, order)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub best_order: u32,
}

/// Records every mechanism invocation and reports the spent budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpAccountant {
    orders: Vec<u32>,
    history: Vec<StepRecord>,
}

impl Default for RdpAccountant {
    fn default() -> Self {
        Self { orders: default_orders(), history: Vec::new() }
    }
}

impl RdpAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_orders(mut orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|&o| o < 2) {
            return Err(param_err("RDP orders must be a non-empty list of integers >= 2"));
        }
        orders.sort_unstable();
        orders.dedup();
        Ok(Self { orders, history: Vec::new() })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    /// Records `steps` invocations at noise multiplier `sigma` and sample
    /// rate `q`. Consecutive identical records are merged.
    pub fn step(&mut self, sigma: f64, q: f64, steps: u64) -> Result<()> {
        check_step(q, sigma)?;
        match self.history.last_mut() {
            Some(last) if last.sigma == sigma && last.q == q => last.steps += steps,
            _ => self.history.push(StepRecord { sigma, q, steps }),
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.history.iter().map(|r| r.steps).sum()
    }

    pub fn compose(&self) -> Result<RdpCurve> {
        compose(&self.orders, &self.history)
    }

    pub fn get_privacy_spent(&self, delta: f64) -> Result<PrivacyBudget> {
        to_epsilon(&self.compose()?, delta)
    }
}

/// Additive composition over a history: per order, the sum of
/// `steps · rdp(q, σ, α)`.
pub fn compose(orders: &[u32], history: &[StepRecord]) -> Result<RdpCurve> {
    let mut curve = RdpCurve::zeros(orders);
    for rec in history {
        curve.add_steps(rec.q, rec.sigma, rec.steps)?;
    }
    Ok(curve)
}

/// Converts an RDP curve to `(ε, δ)`, minimizing over orders.
pub fn to_epsilon(curve: &RdpCurve, delta: f64) -> Result<PrivacyBudget> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param_err(format!("delta must lie in (0, 1), got {delta}")));
    }
    if curve.orders.is_empty() || curve.orders.len() != curve.values.len() {
        return Err(param_err("RDP curve needs one value per order"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = PrivacyBudget { epsilon: f64::INFINITY, delta, best_order: curve.orders[0] };
    for (&order, &rdp) in curve.orders.iter().zip(&curve.values) {
        if rdp < 0.0 || rdp.is_nan() {
            return Err(param_err(format!("RDP value at order {order} is {rdp}")));
        }
        let eps = rdp + log_inv_delta / (order as f64 - 1.0);
        if eps < best.epsilon {
            best = PrivacyBudget { epsilon: eps, delta, best_order: order };
        }
    }
    Ok(best)
}

/// ε after `steps` identical steps at `(q, σ)`.
pub fn epsilon_for(sigma: f64, q: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<f64> {
    let mut curve = RdpCurve::zeros(orders);
    curve.add_steps(q, sigma, steps)?;
    Ok(to_epsilon(&curve, delta)?.epsilon)
}

/// Bisection settings for [`get_noise_multiplier`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSearch {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub tolerance: f64,
}

impl Default for SigmaSearch {
    fn default() -> Self {
        Self { sigma_min: 0.01, sigma_max: 100.0, tolerance: 1e-3 }
    }
}

/// Smallest noise multiplier on the bisection grid whose ε after `steps`
/// steps stays within `target_epsilon`. The returned σ satisfies
/// `ε(σ) <= target < ε(σ - tolerance)` unless it is the bracket's lower end.
pub fn get_noise_multiplier(target_epsilon: f64, delta: f64, q: f64, steps: u64, orders: &[u32], search: SigmaSearch) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(param_err(format!("target epsilon must be > 0, got {target_epsilon}")));
    }
    if !(search.sigma_min > 0.0 && search.sigma_min < search.sigma_max && search.tolerance > 0.0) {
        return Err(param_err(format!("invalid sigma search bracket {search:?}")));
    }
    let eps = |sigma: f64| epsilon_for(sigma, q, steps, delta, orders);
    let at_max = eps(search.sigma_max)?;
    if at_max > target_epsilon {
        return Err(DpError::Calibration(format!(
            "target epsilon {target_epsilon} unreachable: epsilon at sigma_max = {} is {at_max}",
            search.sigma_max
        )));
    }
    if eps(search.sigma_min)? <= target_epsilon {
        return Ok(search.sigma_min);
    }
    let (mut lo, mut hi) = (search.sigma_min, search.sigma_max);
    // Invariant: eps(lo) > target >= eps(hi). Stopping below the tolerance
    // keeps hi - tolerance strictly under lo.
    while hi - lo > search.tolerance / 2.0 {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
