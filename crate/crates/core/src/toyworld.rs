//! Synthetic ground-truth generative world.
//!
//! Known unit attribute directions with a controllable pairwise
//! entanglement, a linear template decoder producing grayscale images, and
//! a noiseless labeler. Everything is a pure function of the construction
//! arguments and explicit seeds, so repeated calls are bit-identical.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::axes::{validate_attr_name, AxisError, LatentDataset};
use crate::image::ImageGrid;
use crate::linalg::{gram_schmidt, LinalgError, Matrix, Vector};
use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world parameter: {0}")]
    InvalidParam(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("templates {0} and {1} collide; use a different seed or larger images")]
    TemplateCollision(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Axis(#[from] AxisError),
}

/// Ground truth: k true unit directions (pairwise cosine `rho`), per-attribute
/// biases, spatial templates for the linear decoder, and a label noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorldSpec {
    p: usize,
    k: usize,
    names: Vec<String>,
    true_dirs: Vec<Vector>,
    biases: Vec<f64>,
    rho: f64,
    noise_sigma: f64,
    img_h: usize,
    img_w: usize,
    templates: Vec<ImageGrid>,
    background: ImageGrid,
    seed: u64,
}

/// Builds a world with equicorrelated true directions.
///
/// The directions are `a_j = s w_j + t (w_1 + ... + w_k)` over a seeded
/// orthonormal set `w`, with `s = sqrt(1-rho)` and
/// `t = (sqrt(1+(k-1) rho) - s) / k`, which gives every pair the cosine
/// `rho` in closed form. Templates are distinct axis-aligned bars, blobs,
/// and gradients derived from the seed, normalized to unit peak amplitude.
pub fn make_world(
    p: usize,
    k: usize,
    rho: f64,
    noise_sigma: f64,
    img_h: usize,
    img_w: usize,
    seed: u64,
) -> Result<ToyWorldSpec, WorldError> {
    if p == 0 || k == 0 {
        return Err(WorldError::InvalidParam("p and k must be positive".into()));
    }
    if k > p {
        return Err(WorldError::InvalidParam(format!(
            "k = {k} attributes exceed latent dim p = {p}"
        )));
    }
    if !(0.0..=0.95).contains(&rho) {
        return Err(WorldError::InvalidParam(format!(
            "rho = {rho} outside [0, 0.95]"
        )));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(WorldError::InvalidParam(format!(
            "noise_sigma = {noise_sigma} must be finite and >= 0"
        )));
    }
    if img_h < 8 || img_w < 8 {
        return Err(WorldError::InvalidParam(format!(
            "images must be at least 8x8, got {img_h}x{img_w}"
        )));
    }

    // Seeded orthonormal frame.
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "world.dirs"));
    let raw: Vec<Vector> = (0..k)
        .map(|_| Vector::from_raw((0..p).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let frame = gram_schmidt(&raw, 1e-12)?;

    let s = (1.0 - rho).sqrt();
    let t = ((1.0 + (k as f64 - 1.0) * rho).sqrt() - s) / k as f64;
    let mut frame_sum = Vector::zeros(p);
    for w in &frame {
        frame_sum = frame_sum.axpy(1.0, w);
    }
    let true_dirs: Vec<Vector> = frame
        .iter()
        .map(|w| {
            w.scale(s)
                .axpy(t, &frame_sum)
                .normalized()
                .expect("equicorrelated direction has unit-scale norm")
        })
        .collect();

    let mut rng_b = ChaCha12Rng::seed_from_u64(derive_seed(seed, "world.biases"));
    let biases: Vec<f64> = (0..k).map(|_| rng_b.gen::<f64>() - 0.5).collect();

    let mut rng_t = ChaCha12Rng::seed_from_u64(derive_seed(seed, "world.templates"));
    let jitter: Vec<f64> = (0..k).map(|_| rng_t.gen::<f64>()).collect();
    let templates: Vec<ImageGrid> = (0..k)
        .map(|j| make_template(j, img_h, img_w, jitter[j]))
        .collect();
    for i in 0..k {
        for j in i + 1..k {
            let dist = templates[i]
                .pixels()
                .iter()
                .zip(templates[j].pixels())
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            if dist <= 1e-9 {
                return Err(WorldError::TemplateCollision(i, j));
            }
        }
    }

    let mut rng_bg = ChaCha12Rng::seed_from_u64(derive_seed(seed, "world.background"));
    let fx = 1.0 + (rng_bg.gen::<f64>() * 2.0).floor();
    let fy = 1.0 + (rng_bg.gen::<f64>() * 2.0).floor();
    let phase = rng_bg.gen::<f64>() * 2.0 * PI;
    let background = ImageGrid::from_fn(img_h, img_w, |y, x| {
        let u = x as f64 / img_w as f64;
        let v = y as f64 / img_h as f64;
        0.5 + 0.15 * (2.0 * PI * (fx * u + fy * v) + phase).sin()
    });

    let names = (0..k).map(|j| format!("attr{j:02}")).collect();
    Ok(ToyWorldSpec {
        p,
        k,
        names,
        true_dirs,
        biases,
        rho,
        noise_sigma,
        img_h,
        img_w,
        templates,
        background,
        seed,
    })
}

/// One of six pattern families, cycled over the attribute index with
/// seed-jittered placement: horizontal/vertical bars, a Gaussian blob,
/// and three gradient orientations.
fn make_template(j: usize, h: usize, w: usize, jitter: f64) -> ImageGrid {
    let family = j % 6;
    let instance = (j / 6) as f64;
    let place = |span: usize| -> f64 {
        let frac = (0.15 + 0.37 * j as f64 + 0.24 * jitter).fract();
        (0.1 + 0.8 * frac) * span as f64
    };
    let img = match family {
        0 => {
            let c = place(h);
            let half = (h as f64 / 10.0).max(1.0);
            ImageGrid::from_fn(h, w, |y, _| {
                if (y as f64 - c).abs() <= half {
                    1.0
                } else {
                    0.0
                }
            })
        }
        1 => {
            let c = place(w);
            let half = (w as f64 / 10.0).max(1.0);
            ImageGrid::from_fn(h, w, |_, x| {
                if (x as f64 - c).abs() <= half {
                    1.0
                } else {
                    0.0
                }
            })
        }
        2 => {
            let cy = 0.25 * h as f64 + 0.5 * place(h) * 0.8;
            let cx = 0.25 * w as f64 + 0.5 * place(w) * 0.8;
            let sigma = (0.08 + 0.08 * jitter) * h.min(w) as f64;
            ImageGrid::from_fn(h, w, |y, x| {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
            })
        }
        3 => ImageGrid::from_fn(h, w, |_, x| {
            let t = x as f64 / (w - 1) as f64;
            2.0 * (t + 0.31 * instance).fract() - 1.0
        }),
        4 => ImageGrid::from_fn(h, w, |y, _| {
            let t = y as f64 / (h - 1) as f64;
            2.0 * (t + 0.29 * instance).fract() - 1.0
        }),
        _ => ImageGrid::from_fn(h, w, |y, x| {
            let t = (x + y) as f64 / (w + h - 2) as f64;
            2.0 * (t + 0.23 * instance).fract() - 1.0
        }),
    };
    let peak = img.max_abs();
    debug_assert!(peak > 0.0);
    ImageGrid::from_raw(
        h,
        w,
        img.pixels().iter().map(|p| p / peak).collect(),
    )
}

impl ToyWorldSpec {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn true_dir(&self, j: usize) -> &Vector {
        &self.true_dirs[j]
    }

    pub fn true_dirs(&self) -> &[Vector] {
        &self.true_dirs
    }

    pub fn bias(&self, j: usize) -> f64 {
        self.biases[j]
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn img_h(&self) -> usize {
        self.img_h
    }

    pub fn img_w(&self) -> usize {
        self.img_w
    }

    pub fn template(&self, j: usize) -> &ImageGrid {
        &self.templates[j]
    }

    pub fn background(&self) -> &ImageGrid {
        &self.background
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the generated attribute names.
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self, WorldError> {
        if names.len() != self.k {
            return Err(WorldError::InvalidParam(format!(
                "{} names for {} attributes",
                names.len(),
                self.k
            )));
        }
        for n in &names {
            validate_attr_name(n)?;
        }
        for i in 1..names.len() {
            if names[..i].contains(&names[i]) {
                return Err(WorldError::InvalidParam(format!(
                    "duplicate attribute name '{}'",
                    names[i]
                )));
            }
        }
        self.names = names;
        Ok(self)
    }

    /// Noiseless ground-truth scores: `a_j . z + b_j` for every attribute.
    pub fn true_scores(&self, z: &Vector) -> Result<Vector, WorldError> {
        if z.dim() != self.p {
            return Err(WorldError::DimMismatch(format!(
                "latent dim {} vs world dim {}",
                z.dim(),
                self.p
            )));
        }
        Ok(Vector::from_raw(
            self.true_dirs
                .iter()
                .zip(&self.biases)
                .map(|(a, b)| a.dot(z) + b)
                .collect(),
        ))
    }

    /// Linear template decoder: `background + sum_j (a_j . z) template_j`.
    /// Clamping to [0, 1] is applied only when `clamp` is set (export path).
    pub fn decode(&self, z: &Vector, clamp: bool) -> Result<ImageGrid, WorldError> {
        if z.dim() != self.p {
            return Err(WorldError::DimMismatch(format!(
                "latent dim {} vs world dim {}",
                z.dim(),
                self.p
            )));
        }
        let mut pixels = self.background.pixels().to_vec();
        for (a, tmpl) in self.true_dirs.iter().zip(&self.templates) {
            let score = a.dot(z);
            for (px, t) in pixels.iter_mut().zip(tmpl.pixels()) {
                *px += score * t;
            }
        }
        let img = ImageGrid::from_raw(self.img_h, self.img_w, pixels);
        Ok(if clamp { img.clamped01() } else { img })
    }

    /// The fixed decoder as a matrix acting on latents:
    /// `flatten(decode(z) - background) = D z`.
    pub fn decoder_matrix(&self) -> Matrix {
        let hw = self.img_h * self.img_w;
        let mut d = Matrix::zeros(hw, self.p);
        for (a, tmpl) in self.true_dirs.iter().zip(&self.templates) {
            for (pix, t) in tmpl.pixels().iter().enumerate() {
                let row = pix * self.p;
                for (c, ac) in a.as_slice().iter().enumerate() {
                    d.as_mut_slice()[row + c] += t * ac;
                }
            }
        }
        d
    }

    /// Background-free images `D (scale z)` for seeded standard-normal
    /// latents. These lie in the decoder's range, so a trained encoder can
    /// in principle reconstruct them exactly; `scale` keeps the pixel
    /// amplitudes inside the unit dynamic range the image metrics assume.
    pub fn sample_decoder_images(
        &self,
        n: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Vec<ImageGrid>, WorldError> {
        if n == 0 {
            return Err(WorldError::InvalidParam("n must be >= 1".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(WorldError::InvalidParam(format!(
                "image scale must be finite and > 0, got {scale}"
            )));
        }
        let d = self.decoder_matrix();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let z = Vector::from_raw(
                    (0..self.p)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
                ImageGrid::from_raw(self.img_h, self.img_w, d.matvec(&z).into_vec())
            })
            .collect())
    }

    /// Draws `n` latents from a standard normal and labels them with
    /// `a_j . z + b_j` plus Gaussian noise of the world's sigma.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<LatentDataset, WorldError> {
        if n == 0 {
            return Err(WorldError::InvalidParam("n must be >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut latents = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z = Vector::from_raw(
                (0..self.p)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let row: Vec<f64> = self
                .true_dirs
                .iter()
                .zip(&self.biases)
                .map(|(a, b)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    a.dot(&z) + b + self.noise_sigma * eps
                })
                .collect();
            latents.push(z);
            labels.push(row);
        }
        Ok(LatentDataset::new(self.names.clone(), latents, labels)?)
    }
}
