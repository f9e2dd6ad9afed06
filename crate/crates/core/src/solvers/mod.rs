//! Local update functions run by each worker on its own chunks.
//!
//! - [`cocoa`]: stochastic dual coordinate ascent on the hinge-loss SVM dual,
//!   the local solver of CoCoA.
//! - [`sgd`]: local SGD with momentum on logistic regression, `H` steps of
//!   `L` samples each.

pub mod cocoa;
pub mod sgd;

use serde::{Deserialize, Serialize};

use crate::data::{DataChunk, Model, Sample, WorkerId};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use cocoa::{
    dual_objective, duality_gap, gap_report, primal_from_dual, primal_objective, scd_local_solve,
    GapPartial, GapReport,
};
pub use sgd::{logistic_gradient, logistic_loss, sgd_local_solve};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// SVM hinge loss, solved in the dual (CoCoA).
    Hinge,
    /// Logistic regression, solved with local SGD.
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams<F> {
    /// Samples per local step (`L`).
    pub batch_size: usize,
    /// Local steps per iteration (`H`).
    pub local_steps: usize,
    /// Step size actually applied by local SGD.
    pub learning_rate: F,
    pub momentum: F,
    /// CoCoA subproblem scaling `sigma'`.
    pub sigma_prime: F,
    /// Regularization strength of the mean-loss primal.
    pub lambda: F,
    pub loss: Loss,
}

impl<F: Real> HyperParams<F> {
    /// CoCoA defaults: one sample per coordinate step, `sigma' = 1`
    /// (safe with convex-combination merging).
    pub fn cocoa(lambda: F) -> Self {
        HyperParams {
            batch_size: 1,
            local_steps: 1,
            learning_rate: F::zero(),
            momentum: F::zero(),
            sigma_prime: F::one(),
            lambda,
            loss: Loss::Hinge,
        }
    }

    pub fn local_sgd(batch_size: usize, local_steps: usize, learning_rate: F, momentum: F) -> Self {
        HyperParams {
            batch_size,
            local_steps,
            learning_rate,
            momentum,
            sigma_prime: F::one(),
            lambda: F::one(),
            loss: Loss::Logistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyperParams(m.to_string()));
        if self.batch_size == 0 || self.local_steps == 0 {
            return bad("batch size and local steps must be positive");
        }
        if !(self.sigma_prime > F::zero()) || !(self.lambda > F::zero()) {
            return bad("sigma' and lambda must be positive");
        }
        if !(self.momentum >= F::zero() && self.momentum < F::one()) {
            return bad("momentum must lie in [0, 1)");
        }
        match self.loss {
            Loss::Hinge if self.batch_size != 1 => bad("CoCoA runs with a batch size of 1"),
            Loss::Logistic if !(self.learning_rate > F::zero()) => {
                bad("learning rate must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Output of one worker's local solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate<F> {
    pub worker: WorkerId,
    pub iteration: u64,
    pub delta_weights: Vec<F>,
    pub samples_processed: usize,
    /// Coordinate steps skipped because the drawn sample had zero norm.
    pub skipped: usize,
}

/// Learning rate scaled with the square root of the data parallelism.
pub fn effective_lr<F: Real>(base: F, parallelism: usize) -> F {
    assert!(parallelism >= 1, "data parallelism must be at least 1");
    base * F::from_usize_lossy(parallelism).sqrt()
}

/// Seed for one worker's solve in one iteration. Mixing is splitmix64 so
/// neighbouring inputs give unrelated streams.
pub fn solve_seed(global: u64, iteration: u64, worker: WorkerId) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(global) ^ iteration) ^ u64::from(worker.0))
}

/// Flat index over the samples of several chunks, in chunk order.
pub(crate) fn flat_positions<F: Real>(chunks: &[DataChunk<F>]) -> Vec<(usize, usize)> {
    chunks
        .iter()
        .enumerate()
        .flat_map(|(c, chunk)| (0..chunk.samples().len()).map(move |s| (c, s)))
        .collect()
}

pub(crate) fn hinge<F: Real>(margin: F) -> F {
    (F::one() - margin).max(F::zero())
}

/// Mean loss and sign-prediction accuracy (ties predict `+1`).
pub fn evaluate<F: Real>(model: &Model<F>, samples: &[Sample<F>], loss: Loss) -> Result<(F, F)> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut total = F::zero();
    let mut correct = 0usize;
    for s in samples {
        let score = s.dot(&model.weights);
        let margin = s.label * score;
        total += match loss {
            Loss::Hinge => hinge(margin),
            Loss::Logistic => sgd::softplus(-margin),
        };
        let predicted = if score >= F::zero() {
            F::one()
        } else {
            -F::one()
        };
        if predicted == s.label {
            correct += 1;
        }
    }
    let n = F::from_usize_lossy(samples.len());
    Ok((total / n, F::from_usize_lossy(correct) / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_lr_scales_with_sqrt() {
        assert_eq!(effective_lr(0.3f64, 1), 0.3);
        assert!((effective_lr(1e-4f64, 16) - 4e-4).abs() < 1e-18);
        assert!((effective_lr(5e-4f64, 4) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn cocoa_requires_unit_batch() {
        let mut hp = HyperParams::cocoa(0.1f64);
        assert!(hp.validate().is_ok());
        hp.batch_size = 8;
        assert!(hp.validate().is_err());
    }

    #[test]
    fn seeds_differ_per_worker_and_iteration() {
        let a = solve_seed(1, 0, WorkerId(0));
        assert_ne!(a, solve_seed(1, 0, WorkerId(1)));
        assert_ne!(a, solve_seed(1, 1, WorkerId(0)));
        assert_eq!(a, solve_seed(1, 0, WorkerId(0)));
    }

    fn s(id: u64, x: &[f64], y: f64) -> Sample<f64> {
        let f = x.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect();
        Sample::new(id, f, y).unwrap()
    }

    #[test]
    fn evaluate_separable_and_tie_break() {
        let data = vec![s(0, &[1.0, 0.0], 1.0), s(1, &[-1.0, 0.5], -1.0)];
        let model = Model {
            weights: vec![1.0, 0.0],
            iteration: 0,
        };
        assert_eq!(evaluate(&model, &data, Loss::Hinge).unwrap().1, 1.0);
        let zero = Model::zeros(2);
        assert_eq!(evaluate(&zero, &data, Loss::Hinge).unwrap().1, 0.5);
        assert!(matches!(
            evaluate(&zero, &[], Loss::Hinge),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn evaluate_matches_per_sample_loop() {
        let data: Vec<_> = (0..10)
            .map(|i| {
                let t = i as f64;
                s(
                    i,
                    &[t.sin(), (0.3 * t).cos(), t / 10.0],
                    if i % 3 == 0 { -1.0 } else { 1.0 },
                )
            })
            .collect();
        let model = Model {
            weights: vec![0.4, -0.7, 1.3],
            iteration: 0,
        };
        for loss in [Loss::Hinge, Loss::Logistic] {
            let mut l = 0.0;
            let mut hits = 0.0;
            for x in &data {
                let z: f64 = x
                    .features
                    .iter()
                    .map(|&(i, v)| v * model.weights[i as usize])
                    .sum();
                l += match loss {
                    Loss::Hinge => (1.0 - x.label * z).max(0.0),
                    Loss::Logistic => (1.0 + (-x.label * z).exp()).ln(),
                };
                let pred = if z >= 0.0 { 1.0 } else { -1.0 };
                if pred == x.label {
                    hits += 1.0;
                }
            }
            let (got_l, got_a) = evaluate(&model, &data, loss).unwrap();
            assert!((got_l - l / 10.0).abs() < 1e-12);
            assert_eq!(got_a, hits / 10.0);
        }
    }
}
