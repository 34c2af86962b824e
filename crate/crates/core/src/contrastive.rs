//! Brightness-contrastive InfoNCE loss.
//!
//! For anchor `z_i` (clean image) and positive `z_i*` (its brightness-augmented
//! counterpart), the negatives are every other clean and augmented embedding
//! in the batch:
//!
//! ```text
//! ℓ_i = −log  exp(s(z_i, z_i*)/τ) / ( exp(s(z_i, z_i*)/τ) + Σ_{n ∈ N_i} exp(s(z_i, n)/τ) )
//! ```
//!
//! with `s` the cosine similarity. The loss is the mean of `ℓ_i` over anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Temperature τ > 0.
    pub tau: f64,
    /// Also use the augmented embeddings as anchors and average both directions.
    #[serde(default)]
    pub symmetric: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            symmetric: false,
        }
    }
}

/// Loss value plus its gradient with respect to every input embedding.
#[derive(Clone, Debug)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_anchors: Vec<Vec<f64>>,
    pub grad_positives: Vec<Vec<f64>>,
}

pub const NORM_TOLERANCE: f64 = 1e-4;

pub fn info_nce(z: &[&[f32]], z_star: &[&[f32]], cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(info_nce_with_grad(z, z_star, cfg)?.loss)
}

pub fn info_nce_with_grad(
    z: &[&[f32]],
    z_star: &[&[f32]],
    cfg: &ContrastiveConfig,
) -> Result<InfoNceOutput> {
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    if z.len() != z_star.len() {
        return Err(Error::shape(&[z.len()], &[z_star.len()]));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!("tau: must be > 0, got {}", cfg.tau)));
    }
    let dim = z[0].len();
    let to64 = |v: &&[f32]| v.iter().map(|x| *x as f64).collect::<Vec<f64>>();
    let a: Vec<Vec<f64>> = z.iter().map(to64).collect();
    let b: Vec<Vec<f64>> = z_star.iter().map(to64).collect();
    for (index, v) in a.iter().chain(&b).enumerate() {
        if v.len() != dim {
            return Err(Error::shape(&[dim], &[v.len()]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NormViolation { index, norm });
        }
    }

    let (loss, ga, gb) = directional(&a, &b, cfg.tau);
    if !cfg.symmetric {
        return Ok(InfoNceOutput {
            loss,
            grad_anchors: ga,
            grad_positives: gb,
        });
    }
    let (loss_rev, gb_rev, ga_rev) = directional(&b, &a, cfg.tau);
    let half = |x: Vec<Vec<f64>>, y: Vec<Vec<f64>>| {
        x.into_iter()
            .zip(y)
            .map(|(u, v)| u.iter().zip(v).map(|(p, q)| 0.5 * (p + q)).collect())
            .collect()
    };
    Ok(InfoNceOutput {
        loss: 0.5 * (loss + loss_rev),
        grad_anchors: half(ga, ga_rev),
        grad_positives: half(gb, gb_rev),
    })
}

// Loss with `a` as anchors and `b` as positives, and gradients w.r.t. both.
fn directional(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.len();
    let dim = a[0].len();
    let mut ga = vec![vec![0.0; dim]; n];
    let mut gb = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let scale = 1.0 / n as f64;

    for i in 0..n {
        // candidates: positive first, then the negatives
        let mut cands: Vec<(bool, usize)> = vec![(true, i)];
        for j in (0..n).filter(|j| *j != i) {
            cands.push((false, j));
            cands.push((true, j));
        }
        let logits: Vec<f64> = cands
            .iter()
            .map(|&(star, j)| cosine(&a[i], if star { &b[j] } else { &a[j] }) / tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[0];

        for (k, &(star, j)) in cands.iter().enumerate() {
            let p = (logits[k] - lse).exp();
            let coef = scale * (p - if k == 0 { 1.0 } else { 0.0 }) / tau;
            if coef == 0.0 {
                continue;
            }
            let other = if star { &b[j] } else { &a[j] };
            let (d_self, d_other) = cosine_grad(&a[i], other);
            for (g, d) in ga[i].iter_mut().zip(&d_self) {
                *g += coef * d;
            }
            let target = if star { &mut gb[j] } else { &mut ga[j] };
            for (g, d) in target.iter_mut().zip(&d_other) {
                *g += coef * d;
            }
        }
    }
    (total * scale, ga, gb)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    d / (norm(x) * norm(y))
}

// Gradients of cos(x, y) with respect to x and y.
fn cosine_grad(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = (norm(x), norm(y));
    let c = cosine(x, y);
    let dx = x
        .iter()
        .zip(y)
        .map(|(a, b)| b / (nx * ny) - c * a / (nx * nx))
        .collect();
    let dy = x
        .iter()
        .zip(y)
        .map(|(a, b)| a / (nx * ny) - c * b / (ny * ny))
        .collect();
    (dx, dy)
}
