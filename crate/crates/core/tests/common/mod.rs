//! Independent f64 reference implementations and finite-difference helpers
//! shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;

pub mod gradcheck;

pub const FD_STEP: f64 = 1e-6;

/// Central difference of `f` with respect to every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |b|, 1e-8)`.
pub fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-8)
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

pub fn to32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Values exactly representable in f32, so the engine and the oracle see the same input.
pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi) as f32 as f64).collect()
}

/// Uniform values with magnitude at least `gap`, for ops with a kink at zero.
pub fn away_from_zero(rng: &mut impl Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            let v = if rng.gen::<bool>() { m } else { -m };
            v as f32 as f64
        })
        .collect()
}

pub fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 0.1 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// primitives

/// Direct 3x3 convolution, zero padding 1. `x: [c, h, w]`, `wt: [o, c, 3, 3]`.
pub fn conv2d(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], b: &[f64], stride: usize) -> (Vec<f64>, usize, usize) {
    let o = b.len();
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (r * stride + ky) as isize - 1;
                            let xx = (q * stride + kx) as isize - 1;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += wt[((oc * c + ic) * 3 + ky) * 3 + kx] * x[(ic * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(oc * oh + r) * ow + q] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn affine(wt: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + dot(&wt[r * x.len()..(r + 1) * x.len()], x))
        .collect()
}

pub fn mean_pool(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    x.chunks(n).map(|p| p.iter().sum::<f64>() / n as f64).collect()
}

pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = norm(x);
    x.iter().map(|v| v / n).collect()
}

pub fn arccos_deg(p: &[f64], t: &[f64]) -> f64 {
    dot(p, t).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// InfoNCE by direct enumeration: for anchor `i` the denominator runs over its
/// positive, every other clean embedding and every other augmented embedding.
pub fn info_nce(z: &[Vec<f64>], zs: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (cosine(&z[i], &zs[i]) / tau).exp();
        let mut denom = pos;
        for j in 0..n {
            if j != i {
                denom += (cosine(&z[i], &z[j]) / tau).exp();
                denom += (cosine(&z[i], &zs[j]) / tau).exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

/// Piecewise-linear curve value `Σ_j θ_j clamp(L·u − j, 0, 1) / Σ θ`.
pub fn en_bright(u: f64, theta: &[f64]) -> f64 {
    let l = theta.len() as f64;
    let num: f64 = theta
        .iter()
        .enumerate()
        .map(|(j, t)| t * (l * u - j as f64).clamp(0.0, 1.0))
        .sum();
    num / theta.iter().sum::<f64>()
}

// ---------------------------------------------------------------------------
// model

/// Toy estimator in f64, tensors in the order of `Architecture::layout`.
pub struct Model64 {
    pub tensors: Vec<Vec<f64>>,
    pub channels: [usize; 4],
}

pub struct Outputs64 {
    pub illuminant: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Model64 {
    pub fn forward(&self, x: &[f64], size: usize) -> Outputs64 {
        let t = &self.tensors;
        let mut act = x.to_vec();
        let (mut h, mut w) = (size, size);
        for block in 0..3 {
            let c = self.channels[block];
            let (out, oh, ow) = conv2d(&act, c, h, w, &t[2 * block], &t[2 * block + 1], 2);
            act = relu(&out);
            h = oh;
            w = ow;
        }
        let feature = mean_pool(&act, self.channels[3]);
        let illuminant = l2_normalize(&affine(&t[6], &t[7], &feature));
        let hidden = relu(&affine(&t[8], &t[9], &feature));
        let embedding = l2_normalize(&affine(&t[10], &t[11], &hidden));
        Outputs64 { illuminant, embedding }
    }
}
