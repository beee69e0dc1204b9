//! Fits the toy linear encoder by gradient descent with Adam.
//!
//! The decoder stays frozen (it is the world's template decoder matrix);
//! only the encoder is trained. Runs are deterministic: the encoder
//! initialization is seeded, batches are visited in fixed order, and
//! gradient accumulation uses pairwise summation in index order, so the
//! optional parallel mode produces bit-identical traces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

use crate::image::ImageGrid;
use crate::linalg::Matrix;
use crate::losses::{FeaturePyramidSpec, LossError, LossEvaluator, PixelLossKind};
use crate::seed::derive_seed;
use crate::toyworld::ToyWorldSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

/// Loss ceiling beyond which training aborts as diverged.
pub const DIVERGENCE_CEILING: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid optimizer config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}: loss = {loss:e}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Adam hyperparameters and run shape. `batch = 0` means full batch.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Initial learning rate; halved every `halve_every` epochs.
    pub lr0: f64,
    pub halve_every: usize,
    pub max_epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Evaluate per-image gradients across threads; the fixed-order pairwise
    /// reduction keeps results identical to the serial path.
    pub parallel: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr0: 0.001,
            halve_every: 500,
            max_epochs: 1000,
            batch: 0,
            seed: 0,
            parallel: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(TrainError::BadConfig(
                "beta1 and beta2 must lie strictly in (0, 1)".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::BadConfig("epsilon must be > 0".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::BadConfig("lr0 must be > 0".into()));
        }
        if self.halve_every == 0 {
            return Err(TrainError::BadConfig("halve_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `lr0 * 0.5^(epoch / halve_every)`.
pub fn learning_rate(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn zeros_like(params: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(params.rows(), params.cols()),
            v: Matrix::zeros(params.rows(), params.cols()),
        }
    }
}

/// One Adam update with bias correction; `t` is the 1-based step counter and
/// `epoch` drives the halving schedule.
pub fn adam_step(
    params: &Matrix,
    grad: &Matrix,
    state: &AdamState,
    t: usize,
    epoch: usize,
    cfg: &OptimizerConfig,
) -> Result<(Matrix, AdamState), TrainError> {
    cfg.validate()?;
    if t == 0 {
        return Err(TrainError::BadConfig("step counter t must be >= 1".into()));
    }
    if params.rows() != grad.rows()
        || params.cols() != grad.cols()
        || state.m.rows() != params.rows()
        || state.m.cols() != params.cols()
    {
        return Err(TrainError::ShapeMismatch(format!(
            "params {}x{}, grad {}x{}, moments {}x{}",
            params.rows(),
            params.cols(),
            grad.rows(),
            grad.cols(),
            state.m.rows(),
            state.m.cols()
        )));
    }
    let lr = learning_rate(cfg, epoch);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let n = params.as_slice().len();
    let mut new_p = vec![0.0; n];
    let mut new_m = vec![0.0; n];
    let mut new_v = vec![0.0; n];
    for i in 0..n {
        let g = grad.as_slice()[i];
        let m = cfg.beta1 * state.m.as_slice()[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v.as_slice()[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        new_p[i] = params.as_slice()[i] - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        new_m[i] = m;
        new_v[i] = v;
    }
    Ok((
        Matrix::from_raw(params.rows(), params.cols(), new_p),
        AdamState {
            m: Matrix::from_raw(params.rows(), params.cols(), new_m),
            v: Matrix::from_raw(params.rows(), params.cols(), new_v),
        },
    ))
}

/// Seeded encoder initialization: uniform in `[-s, s]`, `s = 1/sqrt(input_dim)`.
pub fn init_encoder(latent_dim: usize, input_dim: usize, seed: u64) -> Matrix {
    let s = 1.0 / (input_dim as f64).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "train.init"));
    let data: Vec<f64> = (0..latent_dim * input_dim)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s)
        .collect();
    Matrix::from_raw(latent_dim, input_dim, data)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss per epoch, evaluated on the weights in effect when each
    /// batch gradient was computed. Length equals epochs run.
    pub trace: Vec<f64>,
    /// Mean loss over all images under the final encoder.
    pub final_loss: f64,
    pub encoder: Matrix,
    pub wall_time_secs: f64,
    pub config: OptimizerConfig,
}

/// Sum in a fixed pairwise tree over the index order; parallel evaluation
/// then reduces to bit-identical results.
fn pairwise_sum(mut grads: Vec<Matrix>) -> Matrix {
    debug_assert!(!grads.is_empty());
    while grads.len() > 1 {
        let mut next = Vec::with_capacity(grads.len().div_ceil(2));
        let mut it = grads.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *x += y;
                }
            }
            next.push(a);
        }
        grads = next;
    }
    grads.pop().unwrap()
}

/// Trains the encoder against the world's frozen template decoder.
///
/// Full-batch by default; mini-batches iterate in fixed order. Aborts with
/// a diagnostic if the loss exceeds [`DIVERGENCE_CEILING`] or turns
/// non-finite.
pub fn train_encoder(
    world: &ToyWorldSpec,
    spec: Option<&FeaturePyramidSpec>,
    kind: PixelLossKind,
    images: &[ImageGrid],
    cfg: &OptimizerConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(TrainError::BadConfig("at least one image required".into()));
    }
    let hw = world.img_h() * world.img_w();
    for (i, img) in images.iter().enumerate() {
        if img.height() != world.img_h() || img.width() != world.img_w() {
            return Err(TrainError::ShapeMismatch(format!(
                "image {i} is {}x{}, world decodes {}x{}",
                img.height(),
                img.width(),
                world.img_h(),
                world.img_w()
            )));
        }
    }

    let start = Instant::now();
    let decoder = world.decoder_matrix();
    let evaluators: Vec<LossEvaluator> = images
        .iter()
        .map(|img| LossEvaluator::new(spec, kind, img))
        .collect::<Result<_, _>>()?;

    let mut encoder = init_encoder(world.p(), hw, cfg.seed);
    let mut state = AdamState::zeros_like(&encoder);
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut t = 0usize;

    let batch_size = if cfg.batch == 0 || cfg.batch >= images.len() {
        images.len()
    } else {
        cfg.batch
    };

    for epoch in 0..cfg.max_epochs {
        let mut epoch_loss_sum = 0.0;
        let mut start_idx = 0;
        while start_idx < evaluators.len() {
            let end = (start_idx + batch_size).min(evaluators.len());
            let batch = &evaluators[start_idx..end];
            let results: Vec<(f64, Matrix)> = if cfg.parallel {
                batch
                    .par_iter()
                    .map(|ev| ev.loss_and_encoder_grad(&decoder, &encoder))
                    .collect::<Result<_, _>>()?
            } else {
                batch
                    .iter()
                    .map(|ev| ev.loss_and_encoder_grad(&decoder, &encoder))
                    .collect::<Result<_, _>>()?
            };
            let bn = results.len() as f64;
            let mut grads = Vec::with_capacity(results.len());
            for (l, g) in results {
                epoch_loss_sum += l;
                grads.push(g);
            }
            let mut mean_grad = pairwise_sum(grads);
            for g in mean_grad.as_mut_slice() {
                *g /= bn;
            }
            t += 1;
            let (p2, s2) = adam_step(&encoder, &mean_grad, &state, t, epoch, cfg)?;
            encoder = p2;
            state = s2;
            start_idx = end;
        }
        let epoch_loss = epoch_loss_sum / images.len() as f64;
        if !epoch_loss.is_finite() || epoch_loss > DIVERGENCE_CEILING {
            return Err(TrainError::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        trace.push(epoch_loss);
    }

    let mut final_loss = 0.0;
    for ev in &evaluators {
        final_loss += ev.loss_with_matrices(&decoder, &encoder)?;
    }
    final_loss /= images.len() as f64;

    Ok(TrainReport {
        trace,
        final_loss,
        encoder,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}

/// Compares the analytic encoder gradient against central finite
/// differences at `n_coords` seeded coordinates; returns the maximum
/// relative error `|analytic - fd| / max(1e-8, |fd|)`.
pub fn grad_check(
    spec: Option<&FeaturePyramidSpec>,
    kind: PixelLossKind,
    decoder: &Matrix,
    encoder: &Matrix,
    x: &ImageGrid,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    if n_coords == 0 {
        return Err(TrainError::BadConfig("n_coords must be >= 1".into()));
    }
    if !(h > 0.0) {
        return Err(TrainError::BadConfig("step h must be > 0".into()));
    }
    let ev = LossEvaluator::new(spec, kind, x)?;
    let (_, grad) = ev.loss_and_encoder_grad(decoder, encoder)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = encoder.as_slice().len();
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let idx = rng.gen_range(0..n);
        let mut plus = encoder.clone();
        plus.as_mut_slice()[idx] += h;
        let mut minus = encoder.clone();
        minus.as_mut_slice()[idx] -= h;
        let fd = (ev.loss_with_matrices(decoder, &plus)?
            - ev.loss_with_matrices(decoder, &minus)?)
            / (2.0 * h);
        let rel = (grad.as_slice()[idx] - fd).abs() / fd.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::toyworld::make_world;

    fn scalar(v: f64) -> Matrix {
        Matrix::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn lr_schedule_matches_halving() {
        let cfg = OptimizerConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 0.001);
        assert_eq!(learning_rate(&cfg, 499), 0.001);
        assert_eq!(learning_rate(&cfg, 500), 0.0005);
        assert_eq!(learning_rate(&cfg, 999), 0.0005);
        assert_eq!(learning_rate(&cfg, 1000), 0.00025);
    }

    #[test]
    fn adam_first_step_hand_computed() {
        let cfg = OptimizerConfig::default();
        let g = 3.0;
        let (p2, s2) = adam_step(
            &scalar(1.0),
            &scalar(g),
            &AdamState::zeros_like(&scalar(0.0)),
            1,
            0,
            &cfg,
        )
        .unwrap();
        // t=1: m_hat = g, v_hat = g^2; update = -lr * g / (|g| + eps).
        let want = 1.0 - cfg.lr0 * g / (g.abs() + cfg.epsilon);
        assert!((p2.get(0, 0) - want).abs() < 1e-15);
        assert!((s2.m.get(0, 0) - (1.0 - cfg.beta1) * g).abs() < 1e-15);
        assert!((s2.v.get(0, 0) - (1.0 - cfg.beta2) * g * g).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_moments_decaying() {
        let cfg = OptimizerConfig::default();
        let mut state = AdamState {
            m: scalar(0.5),
            v: scalar(0.25),
        };
        for t in 1..=3 {
            let (_, s2) = adam_step(&scalar(2.0), &scalar(0.0), &state, t, 0, &cfg).unwrap();
            assert!(s2.m.get(0, 0).abs() < state.m.get(0, 0).abs());
            assert!(s2.v.get(0, 0).abs() < state.v.get(0, 0).abs());
            state = s2;
        }
    }

    #[test]
    fn adam_zero_grad_from_rest_keeps_params() {
        let cfg = OptimizerConfig::default();
        let (p2, _) = adam_step(
            &scalar(2.0),
            &scalar(0.0),
            &AdamState::zeros_like(&scalar(0.0)),
            1,
            0,
            &cfg,
        )
        .unwrap();
        assert_eq!(p2.get(0, 0), 2.0);
    }

    #[test]
    fn adam_step_one_magnitude_is_lr_for_any_grad_scale() {
        let cfg = OptimizerConfig {
            epsilon: 1e-300,
            ..OptimizerConfig::default()
        };
        for &g in &[1e-6, 1.0, 1e6, -1e3] {
            let (p2, _) = adam_step(
                &scalar(0.0),
                &scalar(g),
                &AdamState::zeros_like(&scalar(0.0)),
                1,
                0,
                &cfg,
            )
            .unwrap();
            let step = p2.get(0, 0).abs();
            assert!((step - cfg.lr0).abs() < 1e-12, "step {step} for grad {g}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let cfg = OptimizerConfig::default();
        let err = adam_step(
            &scalar(0.0),
            &Matrix::zeros(2, 1),
            &AdamState::zeros_like(&scalar(0.0)),
            1,
            0,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch(_)));
    }

    /// Images inside the decoder's range so the loss can reach zero.
    fn range_images(world: &ToyWorldSpec, n: usize, seed: u64) -> Vec<ImageGrid> {
        let d = world.decoder_matrix();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z = Vector::from_raw(
                    (0..world.p())
                        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                        .collect(),
                );
                let px = d.matvec(&z);
                ImageGrid::from_raw(world.img_h(), world.img_w(), px.into_vec())
            })
            .collect()
    }

    #[test]
    fn zero_epoch_run_returns_initialization() {
        let world = make_world(8, 3, 0.0, 0.0, 16, 16, 3).unwrap();
        let images = range_images(&world, 2, 5);
        let cfg = OptimizerConfig {
            max_epochs: 0,
            seed: 11,
            ..OptimizerConfig::default()
        };
        let report = train_encoder(&world, None, PixelLossKind::Mse, &images, &cfg).unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(report.encoder, init_encoder(8, 256, 11));
    }

    #[test]
    fn training_reduces_mse_loss() {
        let world = make_world(8, 3, 0.0, 0.0, 16, 16, 3).unwrap();
        let images = range_images(&world, 4, 5);
        let cfg = OptimizerConfig {
            max_epochs: 200,
            lr0: 0.01,
            halve_every: 100,
            seed: 11,
            ..OptimizerConfig::default()
        };
        let report = train_encoder(&world, None, PixelLossKind::Mse, &images, &cfg).unwrap();
        assert_eq!(report.trace.len(), 200);
        assert!(report.final_loss < report.trace[0] / 4.0);
    }

    #[test]
    fn traces_are_bit_identical_and_parallel_matches_serial() {
        let world = make_world(8, 3, 0.0, 0.0, 16, 16, 3).unwrap();
        let images = range_images(&world, 3, 5);
        let cfg = OptimizerConfig {
            max_epochs: 20,
            seed: 11,
            ..OptimizerConfig::default()
        };
        let a = train_encoder(&world, None, PixelLossKind::Mse, &images, &cfg).unwrap();
        let b = train_encoder(&world, None, PixelLossKind::Mse, &images, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        let par = OptimizerConfig { parallel: true, ..cfg };
        let c = train_encoder(&world, None, PixelLossKind::Mse, &images, &par).unwrap();
        assert_eq!(a.trace, c.trace);
        assert_eq!(a.encoder, c.encoder);
    }

    #[test]
    fn divergence_guard_reports_epoch() {
        let world = make_world(8, 3, 0.0, 0.0, 16, 16, 3).unwrap();
        let images = range_images(&world, 2, 5);
        let cfg = OptimizerConfig {
            lr0: 1e5,
            max_epochs: 400,
            seed: 11,
            ..OptimizerConfig::default()
        };
        let err = train_encoder(&world, None, PixelLossKind::Mse, &images, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn grad_check_mse_is_tight_and_deterministic() {
        // Image with pixels bounded away from zero (background plus a small
        // latent) so no sampled coordinate has a vanishing gradient; the
        // loss is quadratic in the encoder, so a large step is exact and
        // only rounding noise remains.
        let world = make_world(8, 3, 0.0, 0.0, 16, 16, 3).unwrap();
        let ds = world.sample_dataset(1, 5).unwrap();
        let z = ds.latent(0).scale(0.2);
        let image = world.decode(&z, false).unwrap();
        let decoder = world.decoder_matrix();
        let encoder = init_encoder(8, 256, 7);
        let err = grad_check(
            None,
            PixelLossKind::Mse,
            &decoder,
            &encoder,
            &image,
            30,
            1e-2,
            13,
        )
        .unwrap();
        assert!(err <= 1e-8, "max rel err {err}");
        let err2 = grad_check(
            None,
            PixelLossKind::Mse,
            &decoder,
            &encoder,
            &image,
            30,
            1e-2,
            13,
        )
        .unwrap();
        assert_eq!(err, err2);
    }
}
