//! Independent reference implementations used as oracles by the
//! integration tests. Deliberately naive: direct per-window loops with
//! locally computed kernels, sharing no code with the library paths they
//! check.
#![allow(dead_code)]

use latent_axes::image::ImageGrid;
use latent_axes::metrics::SsimParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub fn seeded_image(h: usize, w: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    ImageGrid::from_fn(h, w, |_, _| rng.gen::<f64>())
}

pub fn naive_psnr(a: &ImageGrid, b: &ImageGrid, max_val: f64) -> f64 {
    let mut se = 0.0;
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        se += (x - y) * (x - y);
    }
    let mse = se / a.pixels().len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(100.0)
}

fn gaussian_2d(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let mut k = vec![0.0; window * window];
    let mut sum = 0.0;
    for y in 0..window {
        for x in 0..window {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            k[y * window + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn window_stats(a: &ImageGrid, b: &ImageGrid, oy: usize, ox: usize, k: &[f64], win: usize) -> WindowStats {
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..win {
        for x in 0..win {
            let kv = k[y * win + x];
            let va = a.get(oy + y, ox + x);
            let vb = b.get(oy + y, ox + x);
            ma += kv * va;
            mb += kv * vb;
            saa += kv * va * va;
            sbb += kv * vb * vb;
            sab += kv * va * vb;
        }
    }
    WindowStats {
        mu_a: ma,
        mu_b: mb,
        var_a: saa - ma * ma,
        var_b: sbb - mb * mb,
        cov: sab - ma * mb,
    }
}

pub fn naive_ssim(a: &ImageGrid, b: &ImageGrid, p: &SsimParams) -> f64 {
    let win = p.window;
    let k = gaussian_2d(win, p.gaussian_sigma);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for oy in 0..=(a.height() - win) {
        for ox in 0..=(a.width() - win) {
            let s = window_stats(a, b, oy, ox, &k, win);
            sum += ((2.0 * s.mu_a * s.mu_b + c1) * (2.0 * s.cov + c2))
                / ((s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn half_pool(img: &ImageGrid) -> ImageGrid {
    let oh = img.height() / 2;
    let ow = img.width() / 2;
    ImageGrid::from_fn(oh, ow, |y, x| {
        (img.get(2 * y, 2 * x)
            + img.get(2 * y, 2 * x + 1)
            + img.get(2 * y + 1, 2 * x)
            + img.get(2 * y + 1, 2 * x + 1))
            / 4.0
    })
}

pub fn naive_ms_ssim(
    a: &ImageGrid,
    b: &ImageGrid,
    scales: usize,
    weights: &[f64],
    p: &SsimParams,
) -> f64 {
    let win = p.window;
    let k = gaussian_2d(win, p.gaussian_sigma);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut value = 1.0;
    for s in 0..scales {
        if s > 0 {
            cur_a = half_pool(&cur_a);
            cur_b = half_pool(&cur_b);
        }
        let mut cs_sum = 0.0;
        let mut l_sum = 0.0;
        let mut count = 0usize;
        for oy in 0..=(cur_a.height() - win) {
            for ox in 0..=(cur_a.width() - win) {
                let st = window_stats(&cur_a, &cur_b, oy, ox, &k, win);
                cs_sum += (2.0 * st.cov + c2) / (st.var_a + st.var_b + c2);
                l_sum += (2.0 * st.mu_a * st.mu_b + c1)
                    / (st.mu_a * st.mu_a + st.mu_b * st.mu_b + c1);
                count += 1;
            }
        }
        let cs = (cs_sum / count as f64).max(0.0);
        value *= cs.powf(weights[s]);
        if s == scales - 1 {
            let l = (l_sum / count as f64).max(0.0);
            value *= l.powf(weights[s]);
        }
    }
    value
}
