//! Descriptive statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `N`).
pub fn variance(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "variance needs at least 2 values, got {}",
            xs.len()
        )));
    }
    let m = mean(xs);
    Ok(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64)
}

pub fn empirical_variance(t: &Tensor) -> Result<f64> {
    variance(t.data())
}

/// Mean of squares: the variance about zero.
pub fn mean_square(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
    pub std: f64,
    pub count: usize,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Result<Self> {
        let var = variance(xs)?;
        Ok(Moments {
            mean: mean(xs),
            var,
            std: var.sqrt(),
            count: xs.len(),
        })
    }
}
