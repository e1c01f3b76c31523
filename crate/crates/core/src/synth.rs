//! Procedural image pairs related by a known homography.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EdmError, Result};
use crate::homography::Homography;
use crate::image::GrayImage;

/// Ranges of the random warp and photometric jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub rotation_deg: f64,
    /// Relative scale change, drawn from `1 ± scale`.
    pub scale: f64,
    pub translation_px: f64,
    /// Projective coefficient magnitude per pixel from the image centre.
    pub perspective: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            rotation_deg: 15.0,
            scale: 0.15,
            translation_px: 16.0,
            perspective: 2e-4,
            brightness: 0.08,
            contrast: 0.1,
            noise: 0.01,
        }
    }
}

impl DataConfig {
    pub fn zero() -> Self {
        DataConfig {
            rotation_deg: 0.0,
            scale: 0.0,
            translation_px: 0.0,
            perspective: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub a: GrayImage,
    pub b: GrayImage,
    /// Maps pixel coordinates of `a` to `b`.
    pub h: Homography,
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of value-noise octaves with cell sizes from `size / 4` down to 4 px.
fn value_noise(rng: &mut impl Rng, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h];
    let mut cell = (w.max(h) / 4).max(4);
    let mut amp = 1.0f32;
    let mut total = 0.0;
    while cell >= 4 {
        let (gw, gh) = (w / cell + 2, h / cell + 2);
        let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
        for y in 0..h {
            let fy = y as f32 / cell as f32;
            let (iy, ty) = (fy as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f32 / cell as f32;
                let (ix, tx) = (fx as usize, smoothstep(fx.fract()));
                let l = |r: usize, c: usize| lattice[r * gw + c];
                let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
                let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.75;
        cell /= 2;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Value noise overlaid with random filled ellipses, rectangles and bars.
pub fn gen_texture(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    let mut img = value_noise(rng, w, h);
    let shapes = rng.random_range(20..40);
    for _ in 0..shapes {
        let (cx, cy) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
        let (rx, ry) = (rng.random_range(3.0..w as f32 / 8.0), rng.random_range(3.0..h as f32 / 8.0));
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        let value: f32 = rng.random();
        let alpha: f32 = rng.random_range(0.5..1.0);
        let kind = rng.random_range(0..3);
        let x0 = (cx - rx.max(ry) - 1.0).max(0.0) as usize;
        let x1 = ((cx + rx.max(ry) + 1.0) as usize).min(w);
        let y0 = (cy - rx.max(ry) - 1.0).max(0.0) as usize;
        let y1 = ((cy + rx.max(ry) + 1.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                let inside = match kind {
                    0 => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
                    1 => u.abs() <= rx && v.abs() <= ry,
                    _ => u.abs() <= rx && v.abs() <= 1.5,
                };
                if inside {
                    let p = &mut img[y * w + x];
                    *p = *p * (1.0 - alpha) + value * alpha;
                }
            }
        }
    }
    GrayImage { width: w, height: h, data: img }.quantized()
}

/// Random warp around the image centre within `cfg`'s budget.
pub fn random_homography(rng: &mut impl Rng, size: usize, cfg: &DataConfig) -> Homography {
    let c = (size as f64 - 1.0) / 2.0;
    let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    loop {
        let theta = sym(rng, cfg.rotation_deg).to_radians();
        let s = 1.0 + sym(rng, cfg.scale);
        let (tx, ty) = (sym(rng, cfg.translation_px), sym(rng, cfg.translation_px));
        let (px, py) = (sym(rng, cfg.perspective), sym(rng, cfg.perspective));
        let (ct, st) = (theta.cos() * s, theta.sin() * s);
        let center = Homography::translation(-c, -c);
        let persp = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]]);
        let rot = Homography([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]]);
        let back = Homography::translation(c + tx, c + ty);
        let h = back.compose(&rot).compose(&persp).compose(&center).normalized();
        if well_conditioned(&h, size) {
            return h;
        }
    }
}

/// Rejects warps that fold, flip or shrink the image corners too much.
fn well_conditioned(h: &Homography, size: usize) -> bool {
    let m = size as f64 - 1.0;
    let corners = [(0.0, 0.0), (m, 0.0), (m, m), (0.0, m)];
    let mapped: Option<Vec<_>> = corners.iter().map(|&p| h.apply(p)).collect();
    let Some(q) = mapped else { return false };
    let area = |p: &[(f64, f64)]| {
        (0..4)
            .map(|i| {
                let (a, b) = (p[i], p[(i + 1) % 4]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum::<f64>()
            / 2.0
    };
    let ratio = area(&q) / area(&corners);
    ratio > 0.5 && ratio < 2.0 && h.inverse().is_ok()
}

/// Resamples `a` through `h`: `b(p) = a(h⁻¹ p)`, black outside.
pub fn warp_image(a: &GrayImage, h: &Homography, width: usize, height: usize) -> Result<GrayImage> {
    let inv = h.inverse()?;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = inv.apply((x as f64, y as f64)).and_then(|p| a.sample(p.0, p.1));
            data.push(v.unwrap_or(0.0));
        }
    }
    GrayImage::new(width, height, data)
}

/// Deterministic pair for `seed`; `size` must be a multiple of 32.
pub fn gen_synthetic_pair(seed: u64, size: usize, cfg: &DataConfig) -> Result<SyntheticPair> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(EdmError::invalid("gen_synthetic_pair", format!("size {size} is not a multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gen_texture(&mut rng, size, size);
    let h = random_homography(&mut rng, size, cfg);
    let mut b = warp_image(&a, &h, size, size)?;
    let gain = 1.0 + if cfg.contrast > 0.0 { rng.random_range(-cfg.contrast..=cfg.contrast) } else { 0.0 };
    let bias = if cfg.brightness > 0.0 { rng.random_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive std"));
    for v in b.data.iter_mut() {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        *v = ((*v as f64 - 0.5) * gain + 0.5 + bias + n).clamp(0.0, 1.0) as f32;
    }
    Ok(SyntheticPair { a, b: b.quantized(), h })
}
