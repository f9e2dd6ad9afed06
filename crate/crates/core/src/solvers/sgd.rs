//! Local SGD with momentum on logistic regression.
//!
//! One call performs `H` local steps; each step averages the gradient over
//! `L` samples drawn without replacement from the worker's chunks. With
//! `H = 1` this is a single mini-batch SGD step.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{flat_positions, HyperParams, LocalUpdate, Loss};
use crate::data::{DataChunk, Model, Sample, WorkerId};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus<F: Real>(z: F) -> F {
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Mean logistic loss `1/m sum ln(1 + exp(-y w.x))`.
pub fn logistic_loss<F: Real>(weights: &[F], samples: &[&Sample<F>]) -> F {
    let total: F = samples
        .iter()
        .map(|s| softplus(-(s.label * s.dot(weights))))
        .sum();
    total / F::from_usize_lossy(samples.len())
}

/// Gradient of [`logistic_loss`]: `-1/m sum y x sigma(-y w.x)`.
pub fn logistic_gradient<F: Real>(weights: &[F], samples: &[&Sample<F>]) -> Vec<F> {
    let mut grad = vec![F::zero(); weights.len()];
    for s in samples {
        let coeff = -s.label * sigmoid(-(s.label * s.dot(weights)));
        s.axpy_into(coeff, &mut grad);
    }
    let m = F::from_usize_lossy(samples.len());
    for g in &mut grad {
        *g /= m;
    }
    grad
}

pub fn sgd_local_solve<F: Real>(
    chunks: &[DataChunk<F>],
    model: &Model<F>,
    hp: &HyperParams<F>,
    worker: WorkerId,
    seed: u64,
) -> Result<LocalUpdate<F>> {
    if hp.loss != Loss::Logistic {
        return Err(Error::InvalidHyperParams(
            "local SGD needs the logistic loss".into(),
        ));
    }
    let positions = flat_positions(chunks);
    if hp.batch_size > positions.len() {
        return Err(Error::InsufficientSamples {
            batch: hp.batch_size,
            available: positions.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = model.weights.clone();
    let mut velocity = vec![F::zero(); weights.len()];
    let mut batch: Vec<&Sample<F>> = Vec::with_capacity(hp.batch_size);
    for _ in 0..hp.local_steps {
        batch.clear();
        batch.extend(
            index::sample(&mut rng, positions.len(), hp.batch_size)
                .into_iter()
                .map(|k| {
                    let (c, s) = positions[k];
                    &chunks[c].samples()[s]
                }),
        );
        let grad = logistic_gradient(&weights, &batch);
        for ((w, v), g) in weights.iter_mut().zip(&mut velocity).zip(grad) {
            *v = hp.momentum * *v + g;
            *w -= hp.learning_rate * *v;
        }
    }
    let delta_weights = weights
        .iter()
        .zip(&model.weights)
        .map(|(a, b)| *a - *b)
        .collect();
    Ok(LocalUpdate {
        worker,
        iteration: model.iteration,
        delta_weights,
        samples_processed: (hp.batch_size * hp.local_steps).min(positions.len()),
        skipped: 0,
    })
}
