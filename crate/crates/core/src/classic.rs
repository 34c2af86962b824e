//! Statistical illuminant estimators of the `(n, p, σ)` family.
//!
//! Per channel `c`, the estimate is the Minkowski-`p` mean of
//! `|∂ⁿ (G_σ * f_c)|` over all pixels, normalised to a unit vector. Gray-world,
//! white-patch, shades-of-gray and gray-edge are special cases.

use crate::color::{Illuminant, LinearImage};
use crate::error::{Error, Result};

/// Minkowski norm order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Minkowski {
    Finite(f64),
    /// Channel maximum.
    Infinity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeOrder {
    Zero,
    First,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassicConfig {
    pub order: DerivativeOrder,
    pub p: Minkowski,
    pub sigma: f64,
}

impl ClassicConfig {
    pub fn new(order: u32, p: Minkowski, sigma: f64) -> Result<Self> {
        let order = match order {
            0 => DerivativeOrder::Zero,
            1 => DerivativeOrder::First,
            n => return Err(Error::Config(format!("n: derivative order must be 0 or 1, got {n}"))),
        };
        if let Minkowski::Finite(p) = p {
            if !(p >= 1.0) || !p.is_finite() {
                return Err(Error::Config(format!("p: Minkowski order must be >= 1, got {p}")));
            }
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma: must be >= 0, got {sigma}")));
        }
        Ok(Self { order, p, sigma })
    }
}

pub fn estimate_unified(img: &LinearImage, cfg: &ClassicConfig) -> Result<Illuminant> {
    let (h, w) = (img.height(), img.width());
    let mut stats = [0.0f64; 3];
    for (c, stat) in stats.iter_mut().enumerate() {
        let mut plane: Vec<f64> = img.channel(c).into_iter().map(f64::from).collect();
        if cfg.sigma > 0.0 {
            plane = gaussian_blur(&plane, h, w, cfg.sigma);
        }
        if cfg.order == DerivativeOrder::First {
            plane = gradient_magnitude(&plane, h, w);
        }
        *stat = minkowski_mean(&plane, cfg.p);
    }
    if stats.iter().all(|s| *s == 0.0) {
        return Err(Error::BlackImage);
    }
    Illuminant::from_estimate(stats).map_err(|_| Error::BlackImage)
}

pub fn gray_world(img: &LinearImage) -> Result<Illuminant> {
    estimate_unified(img, &ClassicConfig::new(0, Minkowski::Finite(1.0), 0.0)?)
}

pub fn white_patch(img: &LinearImage) -> Result<Illuminant> {
    estimate_unified(img, &ClassicConfig::new(0, Minkowski::Infinity, 0.0)?)
}

pub fn shades_of_gray(img: &LinearImage, p: f64) -> Result<Illuminant> {
    estimate_unified(img, &ClassicConfig::new(0, Minkowski::Finite(p), 0.0)?)
}

pub fn gray_edge(img: &LinearImage, p: Minkowski, sigma: f64) -> Result<Illuminant> {
    estimate_unified(img, &ClassicConfig::new(1, p, sigma)?)
}

fn minkowski_mean(values: &[f64], p: Minkowski) -> f64 {
    match p {
        Minkowski::Infinity => values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Minkowski::Finite(p) => {
            // scale by the maximum first so large p cannot overflow
            let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max == 0.0 {
                return 0.0;
            }
            let sum: f64 = values.iter().map(|v| (v.abs() / max).powf(p)).sum();
            max * (sum / values.len() as f64).powf(1.0 / p)
        }
    }
}

/// Separable Gaussian truncated at 3σ, replicate border, kernel summing to 1.
pub(crate) fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + clampi(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// `sqrt(dx² + dy²)` with central differences and replicate border.
pub(crate) fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| plane[y * w + x];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) / 2.0;
            let dy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
            out[y * w + x] = (dx * dx + dy * dy).sqrt();
        }
    }
    out
}
