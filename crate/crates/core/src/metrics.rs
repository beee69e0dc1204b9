//! Image-quality metrics (PSNR, SSIM, MS-SSIM) and attribute-editing
//! accuracy against the toy world's ground-truth labeler.
//!
//! SSIM constants and the 5-scale MS-SSIM weights follow the original
//! metric literature. PSNR is capped at 100 dB so reports stay totally
//! ordered without infinities.

#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::axes::{AxisBank, AxisSource};
use crate::editing::{apply_edit_from, EditError};
use crate::image::ImageGrid;
use crate::linalg::Vector;
use crate::seed::derive_seed;
use crate::toyworld::{ToyWorldSpec, WorldError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Cap applied to PSNR so identical images report a finite sentinel.
pub const PSNR_CAP_DB: f64 = 100.0;

/// 5-scale MS-SSIM weights from the metric literature.
pub const MS_SSIM_LITERATURE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("invalid metric parameter: {0}")]
    BadParams(String),
    #[error(
        "images too small for {scales}-scale MS-SSIM: min side {got} < required {required} (window {window} * 2^{})",
        scales - 1
    )]
    ImageTooSmall {
        got: usize,
        required: usize,
        scales: usize,
        window: usize,
    },
    #[error("image {0}x{1} is smaller than the {2}-pixel window")]
    WindowTooLarge(usize, usize, usize),
    #[error("axis '{0}' is not a world attribute")]
    UnknownWorldAttribute(String),
    #[error("n_trials must be >= 1")]
    NoTrials,
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Gaussian-window SSIM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    /// Odd window side, default 11.
    pub window: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range L of the pixel values, default 1.0.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(MetricError::BadParams(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(MetricError::BadParams("gaussian_sigma must be > 0".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(MetricError::BadParams("k1 and k2 must be > 0".into()));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(MetricError::BadParams("dynamic range must be > 0".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Default weights for `scales` MS-SSIM levels: the literature values for
/// five scales, otherwise the leading values renormalized to sum 1.
pub fn default_ms_ssim_weights(scales: usize) -> Vec<f64> {
    if scales == 5 {
        return MS_SSIM_LITERATURE_WEIGHTS.to_vec();
    }
    let mut w: Vec<f64> = MS_SSIM_LITERATURE_WEIGHTS[..scales.min(5)].to_vec();
    while w.len() < scales {
        w.push(*w.last().unwrap());
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid, max_val: f64) -> Result<f64, MetricError> {
    a.same_size(b)
        .map_err(|_| MetricError::SizeMismatch(a.height(), a.width(), b.height(), b.width()))?;
    if !(max_val > 0.0) {
        return Err(MetricError::BadParams(format!(
            "max_val must be > 0, got {max_val}"
        )));
    }
    let n = a.pixels().len() as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

// ---------------------------------------------------------------------------
// Shared filtering machinery (also used by the loss gradients).
// ---------------------------------------------------------------------------

/// Small dense map produced by valid-mode filtering.
#[derive(Debug, Clone)]
pub(crate) struct Map {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

pub(crate) fn gaussian_kernel_1d(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable valid-mode filtering: horizontal then vertical pass.
pub(crate) fn filter_valid(h: usize, w: usize, data: &[f64], k: &[f64]) -> Map {
    let klen = k.len();
    let ow = w - klen + 1;
    let oh = h - klen + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let out = &mut tmp[y * ow..(y + 1) * ow];
        for (x, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (u, kv) in k.iter().enumerate() {
                s += kv * row[x + u];
            }
            *o = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (u, kv) in k.iter().enumerate() {
            let src = &tmp[(y + u) * ow..(y + u + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    Map {
        h: oh,
        w: ow,
        data: out,
    }
}

/// Adjoint of [`filter_valid`]: scatters a gradient over the valid output
/// grid back to the input grid.
pub(crate) fn filter_valid_adjoint(gout: &Map, k: &[f64], in_h: usize, in_w: usize) -> Vec<f64> {
    let klen = k.len();
    debug_assert_eq!(gout.h, in_h - klen + 1);
    debug_assert_eq!(gout.w, in_w - klen + 1);
    // Vertical transpose: in_h x ow <- oh x ow
    let mut gv = vec![0.0; in_h * gout.w];
    for y in 0..gout.h {
        for (u, kv) in k.iter().enumerate() {
            let dst = &mut gv[(y + u) * gout.w..(y + u + 1) * gout.w];
            let src = &gout.data[y * gout.w..(y + 1) * gout.w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    // Horizontal transpose: in_h x in_w <- in_h x ow
    let mut gin = vec![0.0; in_h * in_w];
    for y in 0..in_h {
        let src = &gv[y * gout.w..(y + 1) * gout.w];
        let dst = &mut gin[y * in_w..(y + 1) * in_w];
        for (x, s) in src.iter().enumerate() {
            for (u, kv) in k.iter().enumerate() {
                dst[x + u] += kv * s;
            }
        }
    }
    gin
}

/// 2x2 mean pooling with floor semantics; trailing odd row/column dropped.
pub(crate) fn mean_pool2(h: usize, w: usize, data: &[f64]) -> (usize, usize, Vec<f64>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let base = 2 * y * w + 2 * x;
            out[y * ow + x] =
                0.25 * (data[base] + data[base + 1] + data[base + w] + data[base + w + 1]);
        }
    }
    (oh, ow, out)
}

/// Adjoint of [`mean_pool2`]; dropped rows/columns receive zero gradient.
pub(crate) fn mean_pool2_adjoint(
    gout: &[f64],
    oh: usize,
    ow: usize,
    in_h: usize,
    in_w: usize,
) -> Vec<f64> {
    let mut gin = vec![0.0; in_h * in_w];
    for y in 0..oh {
        for x in 0..ow {
            let g = 0.25 * gout[y * ow + x];
            let base = 2 * y * in_w + 2 * x;
            gin[base] += g;
            gin[base + 1] += g;
            gin[base + in_w] += g;
            gin[base + in_w + 1] += g;
        }
    }
    gin
}

/// Local moment maps shared by SSIM and MS-SSIM.
#[derive(Debug, Clone)]
pub(crate) struct MomentMaps {
    pub mu_a: Map,
    pub mu_b: Map,
    pub s_aa: Map,
    pub s_bb: Map,
    pub s_ab: Map,
}

pub(crate) fn moment_maps(a: &ImageGrid, b: &ImageGrid, k: &[f64]) -> MomentMaps {
    let (h, w) = (a.height(), a.width());
    let ap = a.pixels();
    let bp = b.pixels();
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = ap.iter().zip(bp).map(|(x, y)| x * y).collect();
    MomentMaps {
        mu_a: filter_valid(h, w, ap, k),
        mu_b: filter_valid(h, w, bp, k),
        s_aa: filter_valid(h, w, &sq(ap), k),
        s_bb: filter_valid(h, w, &sq(bp), k),
        s_ab: filter_valid(h, w, &prod, k),
    }
}

/// Per-scale data retained by the MS-SSIM forward pass; the loss gradient
/// path backpropagates through it.
#[derive(Debug, Clone)]
pub(crate) struct ScaleData {
    pub a: ImageGrid,
    pub b: ImageGrid,
    pub moments: MomentMaps,
    /// Contrast-structure value per window and its mean.
    pub cs_map: Vec<f64>,
    pub cs_mean: f64,
    /// Luminance map and mean; coarsest scale only.
    pub l_map: Option<Vec<f64>>,
    pub l_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct MsSsimForward {
    pub scales: Vec<ScaleData>,
    pub weights: Vec<f64>,
    pub value: f64,
    /// Raw (unclamped) per-scale cs means followed by the luminance mean.
    pub raw_terms: Vec<f64>,
}

pub(crate) fn msssim_forward(
    a: &ImageGrid,
    b: &ImageGrid,
    scales: usize,
    weights: &[f64],
    params: &SsimParams,
) -> Result<MsSsimForward, MetricError> {
    params.validate()?;
    a.same_size(b)
        .map_err(|_| MetricError::SizeMismatch(a.height(), a.width(), b.height(), b.width()))?;
    if scales == 0 {
        return Err(MetricError::BadParams("scales must be >= 1".into()));
    }
    if weights.len() != scales {
        return Err(MetricError::BadParams(format!(
            "{} weights for {scales} scales",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(MetricError::BadParams("weights must be positive".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-3 {
        return Err(MetricError::BadParams(format!(
            "weights must sum to 1 (got {wsum})"
        )));
    }
    let required = params.window << (scales - 1);
    let got = a.height().min(a.width());
    if got < required {
        return Err(MetricError::ImageTooSmall {
            got,
            required,
            scales,
            window: params.window,
        });
    }

    let kernel = gaussian_kernel_1d(params.window, params.gaussian_sigma);
    let c1 = params.c1();
    let c2 = params.c2();

    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut out_scales = Vec::with_capacity(scales);
    let mut raw_terms = Vec::with_capacity(scales + 1);
    for s in 0..scales {
        if s > 0 {
            let (oh, ow, pa) = mean_pool2(cur_a.height(), cur_a.width(), cur_a.pixels());
            let (_, _, pb) = mean_pool2(cur_b.height(), cur_b.width(), cur_b.pixels());
            cur_a = ImageGrid::from_raw(oh, ow, pa);
            cur_b = ImageGrid::from_raw(oh, ow, pb);
        }
        let m = moment_maps(&cur_a, &cur_b, &kernel);
        let n = m.mu_a.data.len();
        let mut cs_map = Vec::with_capacity(n);
        for i in 0..n {
            let mu_a = m.mu_a.data[i];
            let mu_b = m.mu_b.data[i];
            let var_a = m.s_aa.data[i] - mu_a * mu_a;
            let var_b = m.s_bb.data[i] - mu_b * mu_b;
            let cov = m.s_ab.data[i] - mu_a * mu_b;
            cs_map.push((2.0 * cov + c2) / (var_a + var_b + c2));
        }
        let cs_mean = cs_map.iter().sum::<f64>() / n as f64;
        raw_terms.push(cs_mean);

        let (l_map, l_mean) = if s == scales - 1 {
            let mut lm = Vec::with_capacity(n);
            for i in 0..n {
                let mu_a = m.mu_a.data[i];
                let mu_b = m.mu_b.data[i];
                lm.push((2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1));
            }
            let mean = lm.iter().sum::<f64>() / n as f64;
            raw_terms.push(mean);
            (Some(lm), Some(mean))
        } else {
            (None, None)
        };

        out_scales.push(ScaleData {
            a: cur_a.clone(),
            b: cur_b.clone(),
            moments: m,
            cs_map,
            cs_mean,
            l_map,
            l_mean,
        });
    }

    // Negative terms are clamped at zero before the fractional powers so
    // the result stays real and totally ordered.
    let mut value = 1.0;
    for (s, sd) in out_scales.iter().enumerate() {
        value *= sd.cs_mean.max(0.0).powf(weights[s]);
    }
    let l_mean = out_scales.last().unwrap().l_mean.unwrap();
    value *= l_mean.max(0.0).powf(weights[scales - 1]);

    Ok(MsSsimForward {
        scales: out_scales,
        weights: weights.to_vec(),
        value,
        raw_terms,
    })
}

/// Mean structural similarity over a Gaussian-weighted sliding window.
/// Follows the standard definition; negative values are possible and are
/// not clamped.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, params: &SsimParams) -> Result<f64, MetricError> {
    params.validate()?;
    a.same_size(b)
        .map_err(|_| MetricError::SizeMismatch(a.height(), a.width(), b.height(), b.width()))?;
    if a.height() < params.window || a.width() < params.window {
        return Err(MetricError::WindowTooLarge(
            a.height(),
            a.width(),
            params.window,
        ));
    }
    let kernel = gaussian_kernel_1d(params.window, params.gaussian_sigma);
    let m = moment_maps(a, b, &kernel);
    let c1 = params.c1();
    let c2 = params.c2();
    let n = m.mu_a.data.len();
    let mut sum = 0.0;
    for i in 0..n {
        let mu_a = m.mu_a.data[i];
        let mu_b = m.mu_b.data[i];
        let var_a = m.s_aa.data[i] - mu_a * mu_a;
        let var_b = m.s_bb.data[i] - mu_b * mu_b;
        let cov = m.s_ab.data[i] - mu_a * mu_b;
        sum += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
    Ok(sum / n as f64)
}

/// Multi-scale SSIM: contrast-structure terms at every scale, luminance at
/// the coarsest, combined with per-scale exponent weights. Downsampling is
/// 2x2 mean pooling.
pub fn ms_ssim(
    a: &ImageGrid,
    b: &ImageGrid,
    scales: usize,
    weights: &[f64],
    params: &SsimParams,
) -> Result<f64, MetricError> {
    Ok(msssim_forward(a, b, scales, weights, params)?.value)
}

/// Outcome of a flip-accuracy run for one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipReport {
    pub axis: String,
    pub n_trials: usize,
    pub alpha: f64,
    /// Fraction of negative-class latents whose true score crossed above
    /// the attribute's bias after the edit.
    pub accuracy: f64,
    /// Mean absolute change of each non-target true score, by name.
    pub nontarget_mean_abs: Vec<(String, f64)>,
}

impl FlipReport {
    /// Mean of the per-attribute non-target changes; scalar leakage figure.
    pub fn mean_leakage(&self) -> f64 {
        if self.nontarget_mean_abs.is_empty() {
            return 0.0;
        }
        self.nontarget_mean_abs.iter().map(|(_, v)| v).sum::<f64>()
            / self.nontarget_mean_abs.len() as f64
    }
}

/// Flip accuracy with decoupled directions; see [`flip_accuracy_from`].
pub fn flip_accuracy(
    world: &ToyWorldSpec,
    bank: &AxisBank,
    axis: &str,
    n_trials: usize,
    alpha: f64,
    seed: u64,
) -> Result<FlipReport, MetricError> {
    flip_accuracy_from(
        world,
        bank,
        axis,
        n_trials,
        alpha,
        seed,
        AxisSource::Decoupled,
    )
}

/// Samples latents whose true score for `axis` is strictly below its bias,
/// applies a `+alpha` edit, and reports the fraction that crossed above the
/// bias plus the mean absolute change of every non-target true score.
///
/// Deterministic: each trial draws from a seed derived from (seed, index),
/// so results are independent of evaluation order.
pub fn flip_accuracy_from(
    world: &ToyWorldSpec,
    bank: &AxisBank,
    axis: &str,
    n_trials: usize,
    alpha: f64,
    seed: u64,
    source: AxisSource,
) -> Result<FlipReport, MetricError> {
    if n_trials == 0 {
        return Err(MetricError::NoTrials);
    }
    let j = world
        .name_index(axis)
        .ok_or_else(|| MetricError::UnknownWorldAttribute(axis.to_string()))?;
    if !bank.contains(axis) {
        return Err(MetricError::Edit(EditError::UnknownAxis(axis.to_string())));
    }

    let k = world.k();
    let mut flips = 0usize;
    let mut abs_delta = vec![0.0f64; k];
    for trial in 0..n_trials {
        let label = format!("flip.trial.{trial}");
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &label));
        // Rejection-sample the negative class: a_j . z < 0.
        let z = loop {
            let cand = Vector::from_raw(
                (0..world.p())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            if world.true_dir(j).dot(&cand) < 0.0 {
                break cand;
            }
        };
        let before = world.true_scores(&z)?;
        let edited = apply_edit_from(&z, bank, axis, alpha, source)?;
        let after = world.true_scores(&edited)?;
        if after[j] > world.bias(j) {
            flips += 1;
        }
        for m in 0..k {
            if m != j {
                abs_delta[m] += (after[m] - before[m]).abs();
            }
        }
    }

    let nontarget_mean_abs = (0..k)
        .filter(|&m| m != j)
        .map(|m| (world.names()[m].clone(), abs_delta[m] / n_trials as f64))
        .collect();

    Ok(FlipReport {
        axis: axis.to_string(),
        n_trials,
        alpha,
        accuracy: flips as f64 / n_trials as f64,
        nontarget_mean_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axes::build_bank;
    use crate::toyworld::make_world;

    fn seeded_image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ImageGrid::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn psnr_examples() {
        let a = ImageGrid::constant(8, 8, 0.0);
        let b = ImageGrid::constant(8, 8, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 6.020599913279624).abs() < 1e-12);
        assert_eq!(v, psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_constant_shift_invariance() {
        let a = seeded_image(16, 16, 1);
        let b = seeded_image(16, 16, 2);
        let shift = |img: &ImageGrid| {
            ImageGrid::from_raw(
                img.height(),
                img.width(),
                img.pixels().iter().map(|p| p + 0.25).collect(),
            )
        };
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&shift(&a), &shift(&b), 1.0).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn psnr_rejects_size_mismatch() {
        let a = ImageGrid::constant(8, 8, 0.0);
        let b = ImageGrid::constant(8, 9, 0.0);
        assert!(matches!(
            psnr(&a, &b, 1.0),
            Err(MetricError::SizeMismatch(..))
        ));
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = seeded_image(32, 32, 3);
        let v = ssim(&a, &a, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let params = SsimParams::default();
        let c1v = 0.25;
        let c2v = 0.75;
        let a = ImageGrid::constant(16, 16, c1v);
        let b = ImageGrid::constant(16, 16, c2v);
        let want = (2.0 * c1v * c2v + params.c1()) / (c1v * c1v + c2v * c2v + params.c1());
        let got = ssim(&a, &b, &params).unwrap();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn ssim_symmetric_and_window_check() {
        let a = seeded_image(24, 24, 4);
        let b = seeded_image(24, 24, 5);
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p).unwrap();
        let ba = ssim(&b, &a, &p).unwrap();
        assert!((ab - ba).abs() < 1e-14);
        assert!(ab.abs() <= 1.0);

        let small = ImageGrid::constant(8, 8, 0.1);
        assert!(matches!(
            ssim(&small, &small, &p),
            Err(MetricError::WindowTooLarge(..))
        ));
    }

    /// Direct per-window recomputation with its own 2-D kernel, checked
    /// against the separable implementation.
    #[test]
    fn ssim_matches_naive_reference() {
        let a = seeded_image(36, 40, 6);
        let b = seeded_image(36, 40, 7);
        let p = SsimParams::default();
        let got = ssim(&a, &b, &p).unwrap();

        let win = p.window;
        let mut k2d = vec![0.0; win * win];
        let c = (win / 2) as f64;
        let mut ks = 0.0;
        for y in 0..win {
            for x in 0..win {
                let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
                let v = (-d2 / (2.0 * p.gaussian_sigma * p.gaussian_sigma)).exp();
                k2d[y * win + x] = v;
                ks += v;
            }
        }
        for v in &mut k2d {
            *v /= ks;
        }
        let (c1, c2) = (p.c1(), p.c2());
        let mut sum = 0.0;
        let mut count = 0usize;
        for oy in 0..=(a.height() - win) {
            for ox in 0..=(a.width() - win) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        let va = a.get(oy + y, ox + x);
                        let vb = b.get(oy + y, ox + x);
                        let kv = k2d[y * win + x];
                        ma += kv * va;
                        mb += kv * vb;
                        saa += kv * va * va;
                        sbb += kv * vb * vb;
                        sab += kv * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let want = sum / count as f64;
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn ms_ssim_identity_and_size_check() {
        let a = seeded_image(192, 192, 8);
        let w = default_ms_ssim_weights(5);
        let v = ms_ssim(&a, &a, 5, &w, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);

        let small = seeded_image(32, 32, 9);
        let err = ms_ssim(&small, &small, 5, &w, &SsimParams::default()).unwrap_err();
        match err {
            MetricError::ImageTooSmall { required, .. } => assert_eq!(required, 176),
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn ms_ssim_is_symmetric() {
        let a = seeded_image(64, 64, 30);
        let b = seeded_image(64, 64, 31);
        let w = default_ms_ssim_weights(2);
        let p = SsimParams::default();
        let ab = ms_ssim(&a, &b, 2, &w, &p).unwrap();
        let ba = ms_ssim(&b, &a, 2, &w, &p).unwrap();
        assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn ms_ssim_weight_validation() {
        let a = seeded_image(64, 64, 10);
        let p = SsimParams::default();
        assert!(matches!(
            ms_ssim(&a, &a, 3, &[0.5, 0.5], &p),
            Err(MetricError::BadParams(_))
        ));
        assert!(matches!(
            ms_ssim(&a, &a, 3, &[0.5, 0.4, 0.3], &p),
            Err(MetricError::BadParams(_))
        ));
    }

    #[test]
    fn flip_accuracy_zero_alpha_is_zero() {
        let world = make_world(16, 4, 0.0, 0.0, 16, 16, 21).unwrap();
        let ds = world.sample_dataset(400, 1).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        let rep = flip_accuracy(&world, &bank, "attr01", 50, 0.0, 77).unwrap();
        assert_eq!(rep.accuracy, 0.0);
    }

    #[test]
    fn flip_accuracy_orthonormal_world_is_perfect() {
        let world = make_world(16, 4, 0.0, 0.0, 16, 16, 21).unwrap();
        let ds = world.sample_dataset(400, 1).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        let rep = flip_accuracy(&world, &bank, "attr02", 100, 6.0, 78).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        for (_, leak) in &rep.nontarget_mean_abs {
            assert!(*leak <= 1e-10, "leak {leak}");
        }
    }

    #[test]
    fn flip_accuracy_is_deterministic() {
        let world = make_world(16, 4, 0.5, 0.0, 16, 16, 21).unwrap();
        let ds = world.sample_dataset(400, 1).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        let a = flip_accuracy(&world, &bank, "attr00", 40, 3.0, 5).unwrap();
        let b = flip_accuracy(&world, &bank, "attr00", 40, 3.0, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_accuracy_unknown_axis() {
        let world = make_world(16, 4, 0.0, 0.0, 16, 16, 21).unwrap();
        let ds = world.sample_dataset(100, 1).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        assert!(flip_accuracy(&world, &bank, "ghost", 10, 1.0, 5).is_err());
    }
}
