//! Analytical training-versus-verification cost accounting.
//!
//! `C_train = F·(1 + b) + U` and `C_verify = α·F / s + M`, where `F` is one
//! 32-bit forward pass over the full dataset, `b` the backward/forward cost
//! ratio, `U` the update cost, `α` the verification fraction, `s` the 4-bit
//! speedup and `M` the Merkle check cost. Units are GPU-hours.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per gigabyte (decimal).
pub const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("invalid cost parameter: {0}")]
    Invalid(String),
    #[error("verification cost is zero, ratio undefined")]
    UndefinedRatio,
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub full_forward_cost: f64,
    pub backward_multiplier: f64,
    pub update_cost: f64,
    pub alpha: f64,
    pub quant_speedup: f64,
    pub merk_cost: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            full_forward_cost: 10.0,
            backward_multiplier: 2.0,
            update_cost: 0.0,
            alpha: 0.01,
            quant_speedup: 8.0,
            merk_cost: 0.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("full_forward_cost", self.full_forward_cost),
            ("backward_multiplier", self.backward_multiplier),
            ("update_cost", self.update_cost),
            ("merk_cost", self.merk_cost),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::Invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.quant_speedup.is_finite() && self.quant_speedup > 0.0) {
            return Err(CostError::Invalid(format!("quant_speedup must be positive, got {}", self.quant_speedup)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CostError::Invalid(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `param_count × bits / 8` bytes.
pub fn model_bytes(param_count: u64, bits_per_param: u32) -> f64 {
    (u128::from(param_count) * u128::from(bits_per_param)) as f64 / 8.0
}

pub fn model_gb(param_count: u64, bits_per_param: u32) -> f64 {
    model_bytes(param_count, bits_per_param) / BYTES_PER_GB
}

pub fn verify_cost(p: &CostParams) -> f64 {
    p.alpha * p.full_forward_cost / p.quant_speedup + p.merk_cost
}

pub fn train_cost(p: &CostParams) -> f64 {
    p.full_forward_cost * (1.0 + p.backward_multiplier) + p.update_cost
}

pub fn cost_ratio(p: &CostParams) -> Result<f64, CostError> {
    let verify = verify_cost(p);
    if verify == 0.0 {
        return Err(CostError::UndefinedRatio);
    }
    Ok(train_cost(p) / verify)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeRow {
    pub model: &'static str,
    pub params: u64,
    pub bits: u32,
    pub gigabytes: f64,
}

/// Reference models at 32-bit and 4-bit precision.
pub fn size_table() -> Vec<SizeRow> {
    const MODELS: [(&str, u64); 2] = [("GPT-3", 175_000_000_000), ("Gemma 3", 27_000_000_000)];
    MODELS
        .iter()
        .flat_map(|&(model, params)| {
            [32, 4].map(|bits| SizeRow { model, params, bits, gigabytes: model_gb(params, bits) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub train_gpu_hours: f64,
    pub verify_gpu_hours: f64,
    pub ratio: f64,
}

/// Costs at each `alpha`, all other parameters fixed.
pub fn sweep(base: &CostParams, alphas: &[f64]) -> Result<Vec<SweepRow>, CostError> {
    alphas
        .iter()
        .map(|&alpha| {
            let p = CostParams { alpha, ..base.clone() };
            p.validate()?;
            Ok(SweepRow {
                alpha,
                train_gpu_hours: train_cost(&p),
                verify_gpu_hours: verify_cost(&p),
                ratio: cost_ratio(&p)?,
            })
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CostError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CostError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CostError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CostError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_costs() {
        assert_eq!(model_bytes(0, 32), 0.0);
        let p = CostParams { alpha: 1.0, quant_speedup: 1.0, ..CostParams::default() };
        assert_eq!(verify_cost(&p), p.full_forward_cost);
        let p = CostParams { full_forward_cost: 0.0, merk_cost: 0.3, ..CostParams::default() };
        assert_eq!(verify_cost(&p), 0.3);
        let p = CostParams { backward_multiplier: 0.0, alpha: 1.0, quant_speedup: 1.0, ..CostParams::default() };
        assert_eq!(cost_ratio(&p).unwrap(), 1.0);
        let p = CostParams { full_forward_cost: 0.0, ..CostParams::default() };
        assert_eq!(cost_ratio(&p), Err(CostError::UndefinedRatio));
    }

    #[test]
    fn validation() {
        assert!(CostParams::default().validate().is_ok());
        assert!(CostParams { alpha: 0.0, ..CostParams::default() }.validate().is_err());
        assert!(CostParams { alpha: 1.5, ..CostParams::default() }.validate().is_err());
        assert!(CostParams { quant_speedup: 0.0, ..CostParams::default() }.validate().is_err());
        assert!(CostParams { merk_cost: -1.0, ..CostParams::default() }.validate().is_err());
    }

    #[test]
    fn csv_output_has_header_and_rows() {
        let csv = to_csv(&size_table()).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "model,params,bits,gigabytes");
        assert_eq!(lines[1], "GPT-3,175000000000,32,700.0");
        assert_eq!(lines.len(), 5);
        let sweep = sweep(&CostParams::default(), &[0.01]).unwrap();
        assert_eq!(sweep[0].verify_gpu_hours, 0.0125);
        assert!(to_csv(&sweep).unwrap().starts_with("alpha,train_gpu_hours,verify_gpu_hours,ratio\n"));
    }
}
