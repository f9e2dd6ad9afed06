//! Hinge-loss SVM in the dual, solved by stochastic coordinate ascent.
//!
//! Primal (mean loss):
//! `P(w) = lambda/2 ||w||^2 + 1/n sum_i max(0, 1 - y_i w.x_i)`
//!
//! Dual over `alpha in [0, 1]^n`:
//! `D(alpha) = 1/n sum_i alpha_i - lambda/2 ||w(alpha)||^2`,
//! `w(alpha) = 1/(lambda n) sum_i alpha_i y_i x_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flat_positions, hinge, HyperParams, LocalUpdate, Loss};
use crate::data::{ChunkId, DataChunk, Model, WorkerId};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Runs `steps` coordinate updates on uniformly drawn local samples.
///
/// The local view of the model is `w + sigma' * dw`, where `dw` is the update
/// accumulated so far in this call. Dual variables are updated in place; the
/// model itself is left untouched and `dw` is returned.
pub fn scd_local_solve<F: Real>(
    chunks: &mut [DataChunk<F>],
    model: &Model<F>,
    hp: &HyperParams<F>,
    n_total: usize,
    steps: usize,
    worker: WorkerId,
    seed: u64,
) -> Result<LocalUpdate<F>> {
    if hp.loss != Loss::Hinge {
        return Err(Error::InvalidHyperParams(
            "coordinate ascent needs the hinge loss".into(),
        ));
    }
    if let Some(c) = chunks.iter().find(|c| !c.has_dual_state()) {
        return Err(Error::StateMissing(c.id));
    }
    let positions = flat_positions(chunks);
    let mut delta = vec![F::zero(); model.dim()];
    let mut update = LocalUpdate {
        worker,
        iteration: model.iteration,
        delta_weights: Vec::new(),
        samples_processed: steps.min(positions.len()),
        skipped: 0,
    };
    if positions.is_empty() {
        update.delta_weights = delta;
        return Ok(update);
    }

    let scale = hp.lambda * F::from_usize_lossy(n_total);
    let sigma = hp.sigma_prime;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        let (c, s) = positions[rng.random_range(0..positions.len())];
        let (samples, duals) = chunks[c].parts_mut();
        let sample = &samples[s];
        let norm_sq = sample.norm_sq();
        if norm_sq <= F::zero() {
            update.skipped += 1;
            continue;
        }
        let margin = sample.label * (sample.dot(&model.weights) + sigma * sample.dot(&delta));
        let old = duals[s];
        let proposed = old + scale * (F::one() - margin) / (sigma * norm_sq);
        let new = proposed.max(F::zero()).min(F::one());
        let step = new - old;
        if step != F::zero() {
            duals[s] = new;
            sample.axpy_into(step * sample.label / scale, &mut delta);
        }
    }
    update.delta_weights = delta;
    Ok(update)
}

/// Sufficient statistics of one chunk for the primal and dual objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct GapPartial<F> {
    pub chunk: ChunkId,
    /// `sum max(0, 1 - y w.x)` under the given model.
    pub hinge_sum: F,
    /// `sum alpha`
    pub alpha_sum: F,
    /// `sum alpha y x` (dense)
    pub weighted_sum: Vec<F>,
}

impl<F: Real> GapPartial<F> {
    pub fn of_chunk(chunk: &DataChunk<F>, weights: &[F]) -> Result<Self> {
        if !chunk.has_dual_state() && !chunk.is_empty() {
            return Err(Error::StateMissing(chunk.id));
        }
        let mut partial = GapPartial {
            chunk: chunk.id,
            hinge_sum: F::zero(),
            alpha_sum: F::zero(),
            weighted_sum: vec![F::zero(); weights.len()],
        };
        for (s, &alpha) in chunk.samples().iter().zip(chunk.dual_state()) {
            partial.hinge_sum += hinge(s.label * s.dot(weights));
            partial.alpha_sum += alpha;
            if alpha != F::zero() {
                s.axpy_into(alpha * s.label, &mut partial.weighted_sum);
            }
        }
        Ok(partial)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport<F> {
    pub primal: F,
    pub dual: F,
    pub gap: F,
}

impl<F: Real> GapReport<F> {
    /// Folds per-chunk statistics in chunk-id order, so the result does not
    /// depend on which worker held which chunk.
    pub fn combine(
        mut partials: Vec<GapPartial<F>>,
        weights: &[F],
        lambda: F,
        n_total: usize,
    ) -> Self {
        partials.sort_by_key(|p| p.chunk);
        let mut hinge_sum = F::zero();
        let mut alpha_sum = F::zero();
        let mut weighted = vec![F::zero(); weights.len()];
        for p in &partials {
            hinge_sum += p.hinge_sum;
            alpha_sum += p.alpha_sum;
            for (acc, v) in weighted.iter_mut().zip(&p.weighted_sum) {
                *acc += *v;
            }
        }
        let n = F::from_usize_lossy(n_total);
        let half_lambda = lambda / (F::one() + F::one());
        let w_sq: F = weights.iter().map(|w| *w * *w).sum();
        let primal = half_lambda * w_sq + hinge_sum / n;
        let inv = F::one() / (lambda * n);
        let wa_sq: F = weighted.iter().map(|v| (*v * inv) * (*v * inv)).sum();
        let dual = alpha_sum / n - half_lambda * wa_sq;
        GapReport {
            primal,
            dual,
            gap: primal - dual,
        }
    }
}

/// `P(w) - D(alpha)` for the model's weights and the chunks' dual state.
pub fn duality_gap<F: Real>(
    model: &Model<F>,
    chunks: &[DataChunk<F>],
    lambda: F,
    n_total: usize,
) -> Result<F> {
    Ok(gap_report(model, chunks, lambda, n_total)?.gap)
}

pub fn gap_report<F: Real>(
    model: &Model<F>,
    chunks: &[DataChunk<F>],
    lambda: F,
    n_total: usize,
) -> Result<GapReport<F>> {
    let partials = chunks
        .iter()
        .map(|c| GapPartial::of_chunk(c, &model.weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(GapReport::combine(
        partials,
        &model.weights,
        lambda,
        n_total,
    ))
}

pub fn primal_objective<F: Real>(
    model: &Model<F>,
    chunks: &[DataChunk<F>],
    lambda: F,
    n_total: usize,
) -> F {
    let hinge_sum: F = chunks
        .iter()
        .flat_map(|c| c.samples())
        .map(|s| hinge(s.label * s.dot(&model.weights)))
        .sum();
    let w_sq: F = model.weights.iter().map(|w| *w * *w).sum();
    lambda * w_sq / (F::one() + F::one()) + hinge_sum / F::from_usize_lossy(n_total)
}

pub fn dual_objective<F: Real>(
    chunks: &[DataChunk<F>],
    dim: usize,
    lambda: F,
    n_total: usize,
) -> Result<F> {
    let zero = Model::zeros(dim);
    Ok(gap_report(&zero, chunks, lambda, n_total)?.dual)
}

/// `w(alpha)` for the given chunks.
pub fn primal_from_dual<F: Real>(
    chunks: &[DataChunk<F>],
    dim: usize,
    lambda: F,
    n_total: usize,
) -> Vec<F> {
    let scale = lambda * F::from_usize_lossy(n_total);
    let mut w = vec![F::zero(); dim];
    for c in chunks {
        for (s, &a) in c.samples().iter().zip(c.dual_state()) {
            s.axpy_into(a * s.label / scale, &mut w);
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use rand::Rng;

    fn chunk_of(samples: Vec<Sample<f64>>) -> DataChunk<f64> {
        let mut c = DataChunk::new(ChunkId(0), samples);
        c.init_dual_state();
        c
    }

    fn synthetic(n: usize, d: usize, seed: u64) -> Vec<Sample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let f = (0..d)
                    .map(|j| {
                        (
                            j as u32,
                            rng.random_range(-1.0..1.0) + if j == 0 { 0.5 * y } else { 0.0 },
                        )
                    })
                    .collect();
                Sample::new(i as u64, f, y).unwrap()
            })
            .collect()
    }

    // Dual objective straight from the definition, independent of GapPartial.
    fn dual_oracle(samples: &[Sample<f64>], alpha: &[f64], d: usize, lambda: f64) -> f64 {
        let n = samples.len() as f64;
        let mut w = vec![0.0; d];
        for (s, a) in samples.iter().zip(alpha) {
            for &(j, v) in &s.features {
                w[j as usize] += a * s.label * v / (lambda * n);
            }
        }
        alpha.iter().sum::<f64>() / n - 0.5 * lambda * w.iter().map(|x| x * x).sum::<f64>()
    }

    #[test]
    fn single_sample_closed_form() {
        let mut chunks = vec![chunk_of(vec![Sample::new(0, vec![(0, 1.0)], 1.0).unwrap()])];
        let model = Model::zeros(1);
        let hp = HyperParams::cocoa(1.0);
        let up = scd_local_solve(&mut chunks, &model, &hp, 1, 1, WorkerId(0), 3).unwrap();
        assert_eq!(chunks[0].dual_state(), &[1.0]);
        assert_eq!(up.delta_weights, vec![1.0]);
        let mut after = model.clone();
        after.apply_delta(&up.delta_weights);
        let report = gap_report(&after, &chunks, 1.0, 1).unwrap();
        assert_eq!(report.primal, 0.5);
        assert_eq!(report.dual, 0.5);
        assert_eq!(report.gap, 0.0);
    }

    #[test]
    fn satisfied_margin_at_lower_bound_is_a_no_op() {
        let mut chunks = vec![chunk_of(vec![Sample::new(0, vec![(0, 2.0)], 1.0).unwrap()])];
        let model = Model {
            weights: vec![1.0],
            iteration: 0,
        };
        let up = scd_local_solve(
            &mut chunks,
            &model,
            &HyperParams::cocoa(1.0),
            1,
            5,
            WorkerId(0),
            0,
        )
        .unwrap();
        assert_eq!(chunks[0].dual_state(), &[0.0]);
        assert_eq!(up.delta_weights, vec![0.0]);
    }

    #[test]
    fn gap_at_origin_is_one() {
        let chunks = vec![chunk_of(synthetic(20, 3, 1))];
        assert_eq!(
            duality_gap(&Model::zeros(3), &chunks, 0.5, 20).unwrap(),
            1.0
        );
    }

    #[test]
    fn missing_state_is_reported() {
        let mut chunks = vec![DataChunk::new(ChunkId(4), synthetic(3, 2, 0))];
        let err = scd_local_solve(
            &mut chunks,
            &Model::zeros(2),
            &HyperParams::cocoa(1.0),
            3,
            1,
            WorkerId(0),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StateMissing(ChunkId(4))));
        assert!(matches!(
            duality_gap(&Model::zeros(2), &chunks, 1.0, 3),
            Err(Error::StateMissing(_))
        ));
    }

    #[test]
    fn zero_norm_samples_are_skipped() {
        let mut chunks = vec![chunk_of(vec![Sample::new(0, vec![], 1.0).unwrap()])];
        let up = scd_local_solve(
            &mut chunks,
            &Model::zeros(1),
            &HyperParams::cocoa(1.0),
            1,
            4,
            WorkerId(0),
            0,
        )
        .unwrap();
        assert_eq!(up.skipped, 4);
        assert_eq!(chunks[0].dual_state(), &[0.0]);
    }

    #[test]
    fn every_step_ascends_and_stays_feasible() {
        let data = synthetic(50, 5, 7);
        let lambda = 0.05;
        let mut chunks = vec![chunk_of(data.clone())];
        let mut model = Model::zeros(5);
        let hp = HyperParams::cocoa(lambda);
        let mut before = dual_oracle(&data, chunks[0].dual_state(), 5, lambda);
        for step in 0..200u64 {
            let up = scd_local_solve(&mut chunks, &model, &hp, 50, 1, WorkerId(0), step).unwrap();
            model.apply_delta(&up.delta_weights);
            let after = dual_oracle(&data, chunks[0].dual_state(), 5, lambda);
            assert!(after >= before - 1e-15, "step {step}: {after} < {before}");
            assert!(chunks[0]
                .dual_state()
                .iter()
                .all(|a| (0.0..=1.0).contains(a)));
            before = after;
        }
    }

    #[test]
    fn full_pass_ascends() {
        let data = synthetic(50, 5, 11);
        let lambda = 0.05;
        let mut chunks = vec![chunk_of(data.clone())];
        let before = dual_oracle(&data, chunks[0].dual_state(), 5, lambda);
        scd_local_solve(
            &mut chunks,
            &Model::zeros(5),
            &HyperParams::cocoa(lambda),
            50,
            50,
            WorkerId(0),
            1,
        )
        .unwrap();
        assert!(dual_oracle(&data, chunks[0].dual_state(), 5, lambda) >= before);
    }

    #[test]
    fn model_tracks_primal_from_dual() {
        let data = synthetic(40, 4, 2);
        let mut chunks = vec![chunk_of(data)];
        let mut model = Model::zeros(4);
        let hp = HyperParams::cocoa(0.1);
        for it in 0..5 {
            let up = scd_local_solve(&mut chunks, &model, &hp, 40, 40, WorkerId(0), it).unwrap();
            model.apply_delta(&up.delta_weights);
        }
        let w = primal_from_dual(&chunks, 4, 0.1, 40);
        for (a, b) in w.iter().zip(&model.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        let gap = duality_gap(&model, &chunks, 0.1, 40).unwrap();
        assert!(gap >= -1e-12);
        assert!(
            (primal_objective(&model, &chunks, 0.1, 40)
                - dual_objective(&chunks, 4, 0.1, 40).unwrap()
                - gap)
                .abs()
                < 1e-12
        );
    }
}
