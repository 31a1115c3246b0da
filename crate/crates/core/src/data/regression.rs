use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::Result;
use crate::mainnet::Targets;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Scalar target families. Each is scaled to stay within a few units on
/// its default interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionFunction {
    /// `(x + 3)^3`
    Cubic,
    /// `sin(πx)`
    Sine,
    /// `(x - 3)^2 - 0.5`
    Quadratic,
}

impl RegressionFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            RegressionFunction::Cubic => (x + 3.0).powi(3),
            RegressionFunction::Sine => (std::f64::consts::PI * x).sin(),
            RegressionFunction::Quadratic => (x - 3.0).powi(2) - 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub function: RegressionFunction,
    pub range: (f64, f64),
    pub samples: usize,
    pub noise_std: f64,
}

impl TaskConfig {
    /// Cubic on [-4, -2], sine on [-1, 1], quadratic on [2, 4]; 100 points
    /// each with noise std 0.05.
    pub fn defaults() -> [TaskConfig; 3] {
        let t = |function, range| TaskConfig {
            function,
            range,
            samples: 100,
            noise_std: 0.05,
        };
        [
            t(RegressionFunction::Cubic, (-4.0, -2.0)),
            t(RegressionFunction::Sine, (-1.0, 1.0)),
            t(RegressionFunction::Quadratic, (2.0, 4.0)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTask {
    pub config: TaskConfig,
    /// Inputs `(N, 1)` and noisy targets `(N, 1)`.
    pub data: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTaskSeq {
    pub seed: u64,
    pub tasks: Vec<RegressionTask>,
}

pub fn make_regression_tasks(seed: u64) -> RegressionTaskSeq {
    make_regression_tasks_with(seed, &TaskConfig::defaults()).expect("default tasks are valid")
}

/// Inputs are uniform on each range; every task uses its own RNG stream so
/// changing one task leaves the others untouched.
pub fn make_regression_tasks_with(seed: u64, configs: &[TaskConfig]) -> Result<RegressionTaskSeq> {
    let tasks = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = Rng::with_stream(seed, 0x5e9 + i as u64);
            let (lo, hi) = c.range;
            let xs: Vec<f64> = (0..c.samples).map(|_| lo + (hi - lo) * rng.uniform()).collect();
            let ys: Vec<f64> = xs.iter().map(|&x| c.function.eval(x) + c.noise_std * rng.normal()).collect();
            let data = Dataset::new(
                Tensor::new(vec![c.samples, 1], xs)?,
                Targets::Values(Tensor::new(vec![c.samples, 1], ys)?),
                Split::Train,
            )?;
            Ok(RegressionTask { config: *c, data })
        })
        .collect::<Result<_>>()?;
    Ok(RegressionTaskSeq { seed, tasks })
}
