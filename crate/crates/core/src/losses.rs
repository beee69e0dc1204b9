//! Composite reconstruction objective: a pixel loss (MSE, MAE, log-cosh,
//! or MS-SSIM+MSE) plus a multi-layer feature distance, with analytic
//! gradients obtained by reverse-mode differentiation through the matrix
//! maps, Gaussian windows, pooling, convolutions, and nonlinearities.
//!
//! The feature extractor is a fixed seeded random convolutional pyramid
//! with a tanh squashing nonlinearity, so the whole objective is smooth
//! and finite-difference checks hold everywhere.

#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::image::ImageGrid;
use crate::linalg::Matrix;
use crate::metrics::{
    self, default_ms_ssim_weights, filter_valid_adjoint, mean_pool2_adjoint, msssim_forward, Map,
    MetricError, MsSsimForward, SsimParams,
};
use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("input too small at layer {layer}: {h}x{w} against kernel {kernel} (stride {stride})")]
    InputTooSmall {
        layer: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("invalid loss parameter: {0}")]
    BadParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite intermediate at {0}")]
    NonFiniteIntermediate(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Pixel-loss selector. The MS-SSIM variant carries its own scale count
/// because small training images cannot host all five standard scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelLossKind {
    Mse,
    Mae,
    LogCosh,
    /// `lambda * (1 - ms_ssim) + (1 - lambda) * mse`.
    MsSsimMse { lambda: f64, scales: usize },
}

/// Standard mix weight for the MS-SSIM+MSE combination.
pub const DEFAULT_MSSSIM_MIX: f64 = 0.84;

impl PixelLossKind {
    /// MS-SSIM+MSE with the standard five scales.
    pub fn ms_ssim_mse(lambda: f64) -> Self {
        PixelLossKind::MsSsimMse { lambda, scales: 5 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PixelLossKind::Mse => "mse",
            PixelLossKind::Mae => "mae",
            PixelLossKind::LogCosh => "log_cosh",
            PixelLossKind::MsSsimMse { .. } => "ms_ssim_mse",
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if let PixelLossKind::MsSsimMse { lambda, scales } = self {
            if !(0.0..=1.0).contains(lambda) {
                return Err(LossError::BadParams(format!(
                    "lambda = {lambda} outside [0, 1]"
                )));
            }
            if *scales == 0 {
                return Err(LossError::BadParams("scales must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// One convolution layer: `out_channels` filters of size `kernel`^2 applied
/// with `stride`, valid padding, followed by tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Fixed seeded random convolutional pyramid standing in for a pretrained
/// feature extractor. Weights are Gaussian with scale `1/sqrt(fan_in)`,
/// bias-free, derived deterministically from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramidSpec {
    pub layers: Vec<ConvLayerSpec>,
    /// Layer indices whose activations enter the feature distance.
    pub tap_layers: Vec<usize>,
    pub seed: u64,
}

impl FeaturePyramidSpec {
    /// Four layers, all tapped, suitable for inputs of 32x32 and up.
    pub fn default_four_taps(seed: u64) -> Self {
        Self {
            layers: vec![
                ConvLayerSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvLayerSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
                ConvLayerSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvLayerSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
            ],
            tap_layers: vec![0, 1, 2, 3],
            seed,
        }
    }

    /// A lighter two-layer pyramid for small ablation tasks.
    pub fn small_two_taps(seed: u64) -> Self {
        Self {
            layers: vec![
                ConvLayerSpec {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
                ConvLayerSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
            ],
            tap_layers: vec![0, 1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.layers.is_empty() {
            return Err(LossError::BadParams(
                "pyramid needs at least one layer".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(LossError::BadParams(format!(
                    "layer {i}: channels, kernel, and stride must be positive"
                )));
            }
        }
        if self.tap_layers.is_empty() {
            return Err(LossError::BadParams(
                "at least one tap layer required".into(),
            ));
        }
        for &t in &self.tap_layers {
            if t >= self.layers.len() {
                return Err(LossError::BadParams(format!(
                    "tap layer {t} out of range for {} layers",
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    fn build(&self) -> Result<FeaturePyramid, LossError> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut in_ch = 1usize;
        for (i, spec) in self.layers.iter().enumerate() {
            let fan_in = in_ch * spec.kernel * spec.kernel;
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(self.seed, &format!("pyramid.layer.{i}")));
            let weights: Vec<f64> = (0..spec.out_channels * fan_in)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(ConvLayer {
                in_ch,
                out_ch: spec.out_channels,
                kernel: spec.kernel,
                stride: spec.stride,
                weights,
            });
            in_ch = spec.out_channels;
        }
        Ok(FeaturePyramid {
            layers,
            taps: self.tap_layers.clone(),
        })
    }
}

/// A C x H x W activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    /// out_ch x in_ch x kernel x kernel, row-major.
    weights: Vec<f64>,
}

impl ConvLayer {
    fn out_dims(&self, h: usize, w: usize, layer_idx: usize) -> Result<(usize, usize), LossError> {
        if h < self.kernel || w < self.kernel {
            return Err(LossError::InputTooSmall {
                layer: layer_idx,
                h,
                w,
                kernel: self.kernel,
                stride: self.stride,
            });
        }
        Ok((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    fn widx(&self, co: usize, ci: usize, ky: usize) -> usize {
        ((co * self.in_ch + ci) * self.kernel + ky) * self.kernel
    }

    /// Valid convolution followed by tanh.
    fn forward(&self, input: &FeatureTensor, layer_idx: usize) -> Result<FeatureTensor, LossError> {
        let (oh, ow) = self.out_dims(input.h, input.w, layer_idx)?;
        let mut out = FeatureTensor::zeros(self.out_ch, oh, ow);
        let (ih, iw) = (input.h, input.w);
        for co in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let base_y = oy * self.stride;
                    let base_x = ox * self.stride;
                    for ci in 0..self.in_ch {
                        let plane = &input.data[ci * ih * iw..(ci + 1) * ih * iw];
                        for ky in 0..self.kernel {
                            let row = &plane[(base_y + ky) * iw + base_x..];
                            let w0 = self.widx(co, ci, ky);
                            let wrow = &self.weights[w0..w0 + self.kernel];
                            for (kx, wv) in wrow.iter().enumerate() {
                                acc += wv * row[kx];
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc.tanh();
                }
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the layer input, given the gradient at the
    /// pre-activation output.
    fn backward_input(&self, g_pre: &FeatureTensor, in_h: usize, in_w: usize) -> FeatureTensor {
        let mut gin = FeatureTensor::zeros(self.in_ch, in_h, in_w);
        let (oh, ow) = (g_pre.h, g_pre.w);
        for co in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = g_pre.data[(co * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let base_y = oy * self.stride;
                    let base_x = ox * self.stride;
                    for ci in 0..self.in_ch {
                        let plane = &mut gin.data[ci * in_h * in_w..(ci + 1) * in_h * in_w];
                        for ky in 0..self.kernel {
                            let w0 = self.widx(co, ci, ky);
                            let wrow = &self.weights[w0..w0 + self.kernel];
                            let dst = &mut plane[(base_y + ky) * in_w + base_x..];
                            for (kx, wv) in wrow.iter().enumerate() {
                                dst[kx] += g * wv;
                            }
                        }
                    }
                }
            }
        }
        gin
    }
}

#[derive(Debug, Clone)]
struct FeaturePyramid {
    layers: Vec<ConvLayer>,
    taps: Vec<usize>,
}

impl FeaturePyramid {
    fn forward(&self, x: &ImageGrid) -> Result<Vec<FeatureTensor>, LossError> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut cur = FeatureTensor {
            channels: 1,
            h: x.height(),
            w: x.width(),
            data: x.pixels().to_vec(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur, i)?;
            acts.push(cur.clone());
        }
        Ok(acts)
    }
}

/// Norm variant for the feature distance; the squared form is the
/// differentiable default, the unsquared form exists for comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptualNorm {
    SquaredL2,
    L2,
}

/// Activations of every pyramid layer for one image.
pub fn extract_features(
    spec: &FeaturePyramidSpec,
    x: &ImageGrid,
) -> Result<Vec<FeatureTensor>, LossError> {
    spec.build()?.forward(x)
}

fn perceptual_from_feats(
    taps: &[usize],
    feats_a: &[FeatureTensor],
    feats_b: &[FeatureTensor],
    norm: PerceptualNorm,
) -> f64 {
    let mut total = 0.0;
    for &t in taps {
        let fa = &feats_a[t];
        let fb = &feats_b[t];
        let scale = 1.0 / fa.len() as f64;
        let ss: f64 = fa
            .data
            .iter()
            .zip(&fb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += match norm {
            PerceptualNorm::SquaredL2 => scale * ss,
            PerceptualNorm::L2 => scale * ss.sqrt(),
        };
    }
    total
}

/// Mean squared feature distance over the tap layers:
/// `sum_i (1/(C_i H_i W_i)) ||E_i(a) - E_i(b)||^2`.
pub fn perceptual_loss(
    spec: &FeaturePyramidSpec,
    a: &ImageGrid,
    b: &ImageGrid,
) -> Result<f64, LossError> {
    perceptual_loss_with_norm(spec, a, b, PerceptualNorm::SquaredL2)
}

/// [`perceptual_loss`] with an explicit norm choice.
pub fn perceptual_loss_with_norm(
    spec: &FeaturePyramidSpec,
    a: &ImageGrid,
    b: &ImageGrid,
    norm: PerceptualNorm,
) -> Result<f64, LossError> {
    a.same_size(b)
        .map_err(|_| LossError::SizeMismatch(a.height(), a.width(), b.height(), b.width()))?;
    let pyr = spec.build()?;
    let fa = pyr.forward(a)?;
    let fb = pyr.forward(b)?;
    Ok(perceptual_from_feats(&pyr.taps, &fa, &fb, norm))
}

fn stable_log_cosh(d: f64) -> f64 {
    // log(cosh(d)) = |d| + log1p(exp(-2|d|)) - log(2), overflow-free.
    let a = d.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Pixel loss of the requested kind between two same-size images.
pub fn pixel_loss(kind: PixelLossKind, x_r: &ImageGrid, x_s: &ImageGrid) -> Result<f64, LossError> {
    kind.validate()?;
    x_r.same_size(x_s).map_err(|_| {
        LossError::SizeMismatch(x_r.height(), x_r.width(), x_s.height(), x_s.width())
    })?;
    let n = x_r.pixels().len() as f64;
    let pair = || x_r.pixels().iter().zip(x_s.pixels());
    Ok(match kind {
        PixelLossKind::Mse => pair().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
        PixelLossKind::Mae => pair().map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        PixelLossKind::LogCosh => pair().map(|(a, b)| stable_log_cosh(a - b)).sum::<f64>() / n,
        PixelLossKind::MsSsimMse { lambda, scales } => {
            let w = default_ms_ssim_weights(scales);
            let ms = metrics::ms_ssim(x_r, x_s, scales, &w, &SsimParams::default())?;
            let mse = pair().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            lambda * (1.0 - ms) + (1.0 - lambda) * mse
        }
    })
}

/// Pixel loss plus (optionally) the feature distance; the two terms are
/// summed without extra weighting.
pub fn total_loss(
    spec: Option<&FeaturePyramidSpec>,
    kind: PixelLossKind,
    x_r: &ImageGrid,
    x_s: &ImageGrid,
) -> Result<f64, LossError> {
    LossEvaluator::new(spec, kind, x_r)?.loss(x_s)
}

/// Reusable evaluator for one reference image: builds the pyramid once and
/// caches the reference activations, which training loops hit every epoch.
pub struct LossEvaluator {
    kind: PixelLossKind,
    x_r: ImageGrid,
    pyramid: Option<FeaturePyramid>,
    feats_r: Option<Vec<FeatureTensor>>,
    ssim_params: SsimParams,
}

impl LossEvaluator {
    pub fn new(
        spec: Option<&FeaturePyramidSpec>,
        kind: PixelLossKind,
        x_r: &ImageGrid,
    ) -> Result<Self, LossError> {
        kind.validate()?;
        let pyramid = spec.map(|s| s.build()).transpose()?;
        let feats_r = pyramid.as_ref().map(|p| p.forward(x_r)).transpose()?;
        Ok(Self {
            kind,
            x_r: x_r.clone(),
            pyramid,
            feats_r,
            ssim_params: SsimParams::default(),
        })
    }

    pub fn reference(&self) -> &ImageGrid {
        &self.x_r
    }

    pub fn loss(&self, x_s: &ImageGrid) -> Result<f64, LossError> {
        self.x_r.same_size(x_s).map_err(|_| {
            LossError::SizeMismatch(
                self.x_r.height(),
                self.x_r.width(),
                x_s.height(),
                x_s.width(),
            )
        })?;
        let mut total = pixel_loss(self.kind, &self.x_r, x_s)?;
        if let (Some(pyr), Some(fr)) = (&self.pyramid, &self.feats_r) {
            let fs = pyr.forward(x_s)?;
            total += perceptual_from_feats(&pyr.taps, fr, &fs, PerceptualNorm::SquaredL2);
        }
        Ok(total)
    }

    /// Loss and its gradient with respect to every pixel of `x_s`.
    pub fn loss_and_image_grad(&self, x_s: &ImageGrid) -> Result<(f64, Vec<f64>), LossError> {
        self.x_r.same_size(x_s).map_err(|_| {
            LossError::SizeMismatch(
                self.x_r.height(),
                self.x_r.width(),
                x_s.height(),
                x_s.width(),
            )
        })?;
        let n = self.x_r.pixels().len();
        let nf = n as f64;
        let mut grad = vec![0.0; n];
        let mut loss = 0.0;

        // Pixel term.
        match self.kind {
            PixelLossKind::Mse => {
                for i in 0..n {
                    let d = x_s.pixels()[i] - self.x_r.pixels()[i];
                    loss += d * d / nf;
                    grad[i] += 2.0 * d / nf;
                }
            }
            PixelLossKind::Mae => {
                for i in 0..n {
                    let d = x_s.pixels()[i] - self.x_r.pixels()[i];
                    loss += d.abs() / nf;
                    grad[i] += if d == 0.0 { 0.0 } else { d.signum() } / nf;
                }
            }
            PixelLossKind::LogCosh => {
                for i in 0..n {
                    let d = x_s.pixels()[i] - self.x_r.pixels()[i];
                    loss += stable_log_cosh(d) / nf;
                    grad[i] += d.tanh() / nf;
                }
            }
            PixelLossKind::MsSsimMse { lambda, scales } => {
                let weights = default_ms_ssim_weights(scales);
                let fwd = msssim_forward(&self.x_r, x_s, scales, &weights, &self.ssim_params)?;
                // A non-positive term clamps the whole product to zero, which
                // is locally constant: the ms-ssim part then contributes no
                // gradient and the mse mix term drives the update.
                let g_ms = if fwd.raw_terms.iter().all(|t| *t > 0.0) {
                    msssim_image_grad(&fwd, &self.ssim_params, x_s.height(), x_s.width())
                } else {
                    vec![0.0; n]
                };
                let mut mse = 0.0;
                for i in 0..n {
                    let d = x_s.pixels()[i] - self.x_r.pixels()[i];
                    mse += d * d / nf;
                    grad[i] += -lambda * g_ms[i] + (1.0 - lambda) * 2.0 * d / nf;
                }
                loss += lambda * (1.0 - fwd.value) + (1.0 - lambda) * mse;
            }
        }

        // Feature term.
        if let (Some(pyr), Some(fr)) = (&self.pyramid, &self.feats_r) {
            let fs = pyr.forward(x_s)?;
            loss += perceptual_from_feats(&pyr.taps, fr, &fs, PerceptualNorm::SquaredL2);

            let nl = pyr.layers.len();
            let mut g_act: Vec<Option<FeatureTensor>> = vec![None; nl];
            for &t in &pyr.taps {
                let scale = 2.0 / fs[t].len() as f64;
                let g = g_act[t]
                    .get_or_insert_with(|| FeatureTensor::zeros(fs[t].channels, fs[t].h, fs[t].w));
                for i in 0..fs[t].data.len() {
                    g.data[i] += scale * (fs[t].data[i] - fr[t].data[i]);
                }
            }
            let mut carry: Option<FeatureTensor> = None;
            for l in (0..nl).rev() {
                let mut g_here = match (g_act[l].take(), carry.take()) {
                    (Some(mut g), Some(c)) => {
                        for (gv, cv) in g.data.iter_mut().zip(&c.data) {
                            *gv += cv;
                        }
                        g
                    }
                    (Some(g), None) => g,
                    (None, Some(c)) => c,
                    (None, None) => continue,
                };
                // tanh backward using the stored activations.
                for (gv, av) in g_here.data.iter_mut().zip(&fs[l].data) {
                    *gv *= 1.0 - av * av;
                }
                let (in_h, in_w) = if l == 0 {
                    (x_s.height(), x_s.width())
                } else {
                    (fs[l - 1].h, fs[l - 1].w)
                };
                let gin = pyr.layers[l].backward_input(&g_here, in_h, in_w);
                if l == 0 {
                    for (gd, gi) in grad.iter_mut().zip(&gin.data) {
                        *gd += gi;
                    }
                } else {
                    carry = Some(gin);
                }
            }
        }

        if !loss.is_finite() {
            return Err(LossError::NonFiniteIntermediate("total loss".into()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(LossError::NonFiniteIntermediate(format!(
                "image gradient pixel {i}"
            )));
        }
        Ok((loss, grad))
    }

    fn check_matrix_shapes(&self, decoder: &Matrix, encoder: &Matrix) -> Result<(), LossError> {
        let hw = self.x_r.pixels().len();
        if decoder.rows() != hw || encoder.cols() != hw || decoder.cols() != encoder.rows() {
            return Err(LossError::ShapeMismatch(format!(
                "decoder {}x{}, encoder {}x{}, image pixels {hw}",
                decoder.rows(),
                decoder.cols(),
                encoder.rows(),
                encoder.cols()
            )));
        }
        Ok(())
    }

    /// Reconstruction through the matrix pair: `x_s = decoder . encoder . x_r`.
    pub fn reconstruct(&self, decoder: &Matrix, encoder: &Matrix) -> Result<ImageGrid, LossError> {
        self.check_matrix_shapes(decoder, encoder)?;
        let x = crate::linalg::Vector::from_raw(self.x_r.pixels().to_vec());
        let z = encoder.matvec(&x);
        let xs = decoder.matvec(&z);
        if let Some(i) = xs.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteIntermediate(format!(
                "reconstruction pixel {i}"
            )));
        }
        Ok(ImageGrid::from_raw(
            self.x_r.height(),
            self.x_r.width(),
            xs.into_vec(),
        ))
    }

    /// Loss of the matrix reconstruction.
    pub fn loss_with_matrices(&self, decoder: &Matrix, encoder: &Matrix) -> Result<f64, LossError> {
        let x_s = self.reconstruct(decoder, encoder)?;
        self.loss(&x_s)
    }

    /// Loss and its analytic gradient with respect to every encoder entry.
    pub fn loss_and_encoder_grad(
        &self,
        decoder: &Matrix,
        encoder: &Matrix,
    ) -> Result<(f64, Matrix), LossError> {
        let x_s = self.reconstruct(decoder, encoder)?;
        let (loss, g_img) = self.loss_and_image_grad(&x_s)?;
        // dL/dz = D^T g_img; dL/dE = (dL/dz) x^T
        let g_vec = crate::linalg::Vector::from_raw(g_img);
        let g_z = decoder.transpose_matvec(&g_vec);
        let p = encoder.rows();
        let hw = encoder.cols();
        let x = self.x_r.pixels();
        let mut g_e = vec![0.0; p * hw];
        for i in 0..p {
            let gi = g_z[i];
            if gi == 0.0 {
                continue;
            }
            let row = &mut g_e[i * hw..(i + 1) * hw];
            for (dst, xv) in row.iter_mut().zip(x) {
                *dst = gi * xv;
            }
        }
        Ok((loss, Matrix::from_raw(p, hw, g_e)))
    }
}

/// Gradient of the MS-SSIM value with respect to the second image, given a
/// retained forward pass. Backpropagates through the per-window statistics,
/// the Gaussian filtering, and the pooling chain.
fn msssim_image_grad(
    fwd: &MsSsimForward,
    params: &SsimParams,
    full_h: usize,
    full_w: usize,
) -> Vec<f64> {
    let kernel = metrics::gaussian_kernel_1d(params.window, params.gaussian_sigma);
    let c1 = params.c1();
    let c2 = params.c2();
    let m = fwd.scales.len();
    let value = fwd.value;

    let mut carry: Option<Vec<f64>> = None;
    for s in (0..m).rev() {
        let sd = &fwd.scales[s];
        let (h, w) = (sd.b.height(), sd.b.width());
        let nmap = sd.cs_map.len() as f64;
        let (mh, mw) = (sd.moments.mu_a.h, sd.moments.mu_a.w);

        // dV/d(cs_mean_s); terms were checked positive by the caller.
        let dv_dcs = value * fwd.weights[s] / sd.cs_mean;
        let gcs = dv_dcs / nmap;

        let mut g_sab = vec![0.0; sd.cs_map.len()];
        let mut g_sbb = vec![0.0; sd.cs_map.len()];
        let mut g_mub = vec![0.0; sd.cs_map.len()];
        for i in 0..sd.cs_map.len() {
            let mu_a = sd.moments.mu_a.data[i];
            let mu_b = sd.moments.mu_b.data[i];
            let var_a = sd.moments.s_aa.data[i] - mu_a * mu_a;
            let var_b = sd.moments.s_bb.data[i] - mu_b * mu_b;
            let denom = var_a + var_b + c2;
            let cs = sd.cs_map[i];
            g_sab[i] = gcs * 2.0 / denom;
            g_sbb[i] = gcs * (-cs / denom);
            g_mub[i] = gcs * (-2.0 * mu_a + 2.0 * cs * mu_b) / denom;
        }
        if s == m - 1 {
            let l_mean = sd.l_mean.unwrap();
            let l_map = sd.l_map.as_ref().unwrap();
            let dv_dl = value * fwd.weights[m - 1] / l_mean;
            let gl = dv_dl / nmap;
            for i in 0..l_map.len() {
                let mu_a = sd.moments.mu_a.data[i];
                let mu_b = sd.moments.mu_b.data[i];
                let dl = mu_a * mu_a + mu_b * mu_b + c1;
                g_mub[i] += gl * (2.0 * mu_a - 2.0 * l_map[i] * mu_b) / dl;
            }
        }

        // Filter adjoints back to the image grid at this scale.
        let wrap = |data: Vec<f64>| Map { h: mh, w: mw, data };
        let adj_sab = filter_valid_adjoint(&wrap(g_sab), &kernel, h, w);
        let adj_sbb = filter_valid_adjoint(&wrap(g_sbb), &kernel, h, w);
        let adj_mub = filter_valid_adjoint(&wrap(g_mub), &kernel, h, w);
        let a_px = sd.a.pixels();
        let b_px = sd.b.pixels();
        let mut g_local: Vec<f64> = (0..h * w)
            .map(|i| adj_sab[i] * a_px[i] + adj_sbb[i] * 2.0 * b_px[i] + adj_mub[i])
            .collect();

        if let Some(c) = carry.take() {
            for (g, cv) in g_local.iter_mut().zip(&c) {
                *g += cv;
            }
        }

        if s == 0 {
            debug_assert_eq!(h, full_h);
            debug_assert_eq!(w, full_w);
            return g_local;
        }
        // Pool back to the next finer scale.
        let (ph, pw) = (fwd.scales[s - 1].b.height(), fwd.scales[s - 1].b.width());
        carry = Some(mean_pool2_adjoint(&g_local, h, w, ph, pw));
    }
    unreachable!("loop returns at scale 0");
}

/// Loss of the matrix reconstruction and its analytic gradient with respect
/// to every encoder entry; `x_s = reshape(decoder . encoder . flatten(x_r))`.
pub fn total_loss_grad(
    spec: Option<&FeaturePyramidSpec>,
    kind: PixelLossKind,
    decoder: &Matrix,
    encoder: &Matrix,
    x_r: &ImageGrid,
) -> Result<(f64, Matrix), LossError> {
    LossEvaluator::new(spec, kind, x_r)?.loss_and_encoder_grad(decoder, encoder)
}
