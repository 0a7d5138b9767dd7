//! Random search over LM weight and word bonus.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SearchSpace {
    /// Uniform draws from `[lambda.0, lambda.1] x [beta.0, beta.1]`.
    Box { lambda: (f64, f64), beta: (f64, f64) },
    /// Uniform draws from the grid points.
    Grid { lambdas: Vec<f64>, betas: Vec<f64> },
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace::Box {
            lambda: (0.0, 5.0),
            beta: (-5.0, 5.0),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        match self {
            SearchSpace::Box { lambda, beta } => {
                if !(lambda.0 <= lambda.1 && beta.0 <= beta.1) || lambda.0 < 0.0 {
                    return Err(Error::Config(format!("bad search box {lambda:?} x {beta:?}")));
                }
            }
            SearchSpace::Grid { lambdas, betas } => {
                if lambdas.is_empty() || betas.is_empty() || lambdas.iter().any(|&l| l < 0.0) {
                    return Err(Error::Config("grid needs nonnegative lambdas and at least one beta".into()));
                }
            }
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> (f64, f64) {
        match self {
            SearchSpace::Box { lambda, beta } => (
                if lambda.0 == lambda.1 { lambda.0 } else { rng.random_range(lambda.0..=lambda.1) },
                if beta.0 == beta.1 { beta.0 } else { rng.random_range(beta.0..=beta.1) },
            ),
            SearchSpace::Grid { lambdas, betas } => (
                lambdas[rng.random_range(0..lambdas.len())],
                betas[rng.random_range(0..betas.len())],
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda: f64,
    pub beta: f64,
    pub error_rate: f64,
    /// Every trial as `(lambda, beta, error rate)`, in draw order.
    pub trials: Vec<(f64, f64, f64)>,
}

/// Draws `trials` pairs and returns the one with the lowest `objective`;
/// ties go to the smaller lambda, then the smaller beta. Repeated pairs are
/// evaluated once.
pub fn tune_lm(
    space: &SearchSpace,
    trials: usize,
    rng: &mut impl Rng,
    mut objective: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<TuneResult> {
    space.validate()?;
    if trials == 0 {
        return Err(Error::InvalidInput("at least one trial is needed".into()));
    }
    let mut seen: HashMap<(u64, u64), f64> = HashMap::new();
    let mut log = Vec::with_capacity(trials);
    let mut best: Option<(f64, f64, f64)> = None;
    for _ in 0..trials {
        let (l, b) = space.draw(rng);
        let key = (l.to_bits(), b.to_bits());
        let e = match seen.get(&key) {
            Some(&e) => e,
            None => {
                let e = objective(l, b)?;
                seen.insert(key, e);
                e
            }
        };
        log.push((l, b, e));
        let better = match best {
            None => true,
            Some((bl, bb, be)) => (e, l, b) < (be, bl, bb),
        };
        if better {
            best = Some((l, b, e));
        }
    }
    let (lambda, beta, error_rate) = best.expect("at least one trial");
    Ok(TuneResult {
        lambda,
        beta,
        error_rate,
        trials: log,
    })
}
