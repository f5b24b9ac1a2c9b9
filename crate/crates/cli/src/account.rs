//! ε trace of a training run, step by step.

use dpgrad::accountant::{default_orders, to_epsilon, RdpCurve};
use dpgrad::optimizer::NoiseSchedule;

use crate::error::{config_err, Result};
use crate::report::{fmt_f64, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct AccountConfig {
    pub noise_multiplier: f64,
    pub schedule: NoiseSchedule,
    pub sample_rate: f64,
    pub steps: u64,
    pub delta: f64,
    /// Report every `every`-th step, plus the last one.
    pub every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: u64,
    pub sigma: f64,
    pub epsilon: f64,
    pub best_order: u32,
}

/// Steps per epoch used to map a step onto the schedule, `round(1/q)`.
pub fn steps_per_epoch(sample_rate: f64) -> u64 {
    (1.0 / sample_rate).round().max(1.0) as u64
}

pub fn account(cfg: &AccountConfig) -> Result<Vec<TracePoint>> {
    if cfg.every == 0 {
        return Err(config_err("--every must be positive"));
    }
    cfg.schedule.validate()?;
    let per_epoch = steps_per_epoch(cfg.sample_rate);
    let mut curve = RdpCurve::zeros(&default_orders());
    let mut trace = Vec::new();
    for step in 1..=cfg.steps {
        let epoch = ((step - 1) / per_epoch) as usize;
        let sigma = cfg.schedule.sigma_at(cfg.noise_multiplier, epoch);
        curve.add_steps(cfg.sample_rate, sigma, 1)?;
        if step % cfg.every == 0 || step == cfg.steps {
            let budget = to_epsilon(&curve, cfg.delta)?;
            trace.push(TracePoint { step, sigma, epsilon: budget.epsilon, best_order: budget.best_order });
        }
    }
    Ok(trace)
}

pub fn trace_table(trace: &[TracePoint], sample_rate: f64) -> Result<Table> {
    let mut t = Table::new(["step", "sigma", "q", "epsilon", "best_order"]);
    for p in trace {
        t.push(vec![p.step.to_string(), fmt_f64(p.sigma), fmt_f64(sample_rate), fmt_f64(p.epsilon), p.best_order.to_string()])?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpgrad::accountant::RdpAccountant;

    fn cfg(schedule: NoiseSchedule) -> AccountConfig {
        AccountConfig { noise_multiplier: 1.1, schedule, sample_rate: 0.1, steps: 60, delta: 1e-5, every: 1 }
    }

    #[test]
    fn trace_is_nondecreasing_and_matches_library() {
        let trace = account(&cfg(NoiseSchedule::Constant)).unwrap();
        assert_eq!(trace.len(), 60);
        assert!(trace.windows(2).all(|w| w[1].epsilon >= w[0].epsilon));
        let mut acct = RdpAccountant::new();
        for p in &trace {
            acct.step(1.1, 0.1, 1).unwrap();
            let want = acct.get_privacy_spent(1e-5).unwrap();
            assert!((p.epsilon - want.epsilon).abs() <= 1e-12 * want.epsilon);
            assert_eq!(p.best_order, want.best_order);
        }
    }

    #[test]
    fn constant_equals_flat_custom_table() {
        let a = account(&cfg(NoiseSchedule::Constant)).unwrap();
        let b = account(&cfg(NoiseSchedule::Custom { table: vec![1.1; 6] })).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_switches_per_epoch() {
        let trace = account(&cfg(NoiseSchedule::Exponential { gamma: 0.5 })).unwrap();
        assert_eq!(trace[9].sigma, 1.1);
        assert_eq!(trace[10].sigma, 0.55);
        let sparse = account(&AccountConfig { every: 25, ..cfg(NoiseSchedule::Constant) }).unwrap();
        assert_eq!(sparse.iter().map(|p| p.step).collect::<Vec<_>>(), vec![25, 50, 60]);
    }
}
