//! Analytical memory model of per-sample gradient storage.
//!
//! With `b` samples of per-sample data size `C` and `L` parameters, plain
//! training holds `bC + 2L` elements and private training `bC + (1+b)L`.

use serde::Serialize;

use crate::error::{config_err, Result};

/// Width of the "comparable" band around `L/C = b`, as a factor.
pub const REGIME_BAND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `L/C ≪ b`: ratio ≈ `1 + L/C`.
    DataDominated,
    /// `L/C ≈ b`: ratio ≈ `(2 + b) / 3`.
    Comparable,
    /// `L/C ≫ b`: ratio ≈ `(1 + b) / 2`.
    ParameterDominated,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::DataDominated => "L/C<<b",
            Regime::Comparable => "L/C~b",
            Regime::ParameterDominated => "L/C>>b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryEstimate {
    pub batch_size: usize,
    pub num_params: usize,
    pub data_size: usize,
    pub m_non_dp: f64,
    pub m_dp: f64,
    pub ratio: f64,
    pub regime: Regime,
    /// The regime's closed-form approximation of `ratio`.
    pub approx_ratio: f64,
}

/// Classifies `L/C` against `b`: below `b / 10` is data dominated, above
/// `10 b` parameter dominated, in between comparable. `C = 0` counts as
/// parameter dominated.
pub fn classify(batch_size: usize, num_params: usize, data_size: usize) -> Regime {
    if data_size == 0 {
        return Regime::ParameterDominated;
    }
    let rel = num_params as f64 / data_size as f64 / batch_size as f64;
    if rel < 1.0 / REGIME_BAND {
        Regime::DataDominated
    } else if rel > REGIME_BAND {
        Regime::ParameterDominated
    } else {
        Regime::Comparable
    }
}

pub fn predict_memory(batch_size: usize, num_params: usize, data_size: usize) -> Result<MemoryEstimate> {
    if batch_size == 0 {
        return Err(config_err("batch size must be positive"));
    }
    if num_params == 0 && data_size == 0 {
        return Err(config_err("parameter count and data size cannot both be zero"));
    }
    let (b, l, c) = (batch_size as f64, num_params as f64, data_size as f64);
    let m_non_dp = b * c + 2.0 * l;
    let m_dp = b * c + (1.0 + b) * l;
    let regime = classify(batch_size, num_params, data_size);
    let approx_ratio = match regime {
        Regime::DataDominated => 1.0 + l / c,
        Regime::Comparable => (2.0 + b) / 3.0,
        Regime::ParameterDominated => (1.0 + b) / 2.0,
    };
    Ok(MemoryEstimate {
        batch_size,
        num_params,
        data_size,
        m_non_dp,
        m_dp,
        ratio: m_dp / m_non_dp,
        regime,
        approx_ratio,
    })
}
