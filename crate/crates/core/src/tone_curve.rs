//! Differentiable piecewise-linear brightness curve.
//!
//! The curve has `L` non-negative segment weights `θ`. With cumulative sums
//! `T_j = θ_0 + … + θ_{j-1}` it passes through the control points
//! `(j / L, T_j / T_L)` and is linear in between:
//!
//! ```text
//! EnBright(u, θ) = (1 / T_L) · Σ_j clamp(L·u − j, 0, 1) · θ_j
//! ```
//!
//! Images are filtered in gain form, `f' = f · EnBright(u) / max(u, 1e-4)`, so
//! each pixel is scaled by a non-negative scalar and its chromaticity survives.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::color::{brightness_map, BrightnessMap, LinearImage};
use crate::error::{Error, Result};

pub const DEFAULT_SEGMENTS: usize = 32;
/// Lower bound enforced on every θ_j by [`project_params`].
pub const THETA_FLOOR: f64 = 1e-3;
/// Floor on the brightness used as the gain denominator.
pub const GAIN_FLOOR: f32 = 1e-4;

static CURVE_APPLICATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of times a curve has been applied to an image in this process.
pub fn curve_application_count() -> u64 {
    CURVE_APPLICATIONS.load(Ordering::Relaxed)
}

/// Segment weights of the brightness curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveJson", into = "CurveJson")]
pub struct CurveParams {
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveJson {
    #[serde(rename = "L")]
    segments: usize,
    theta: Vec<f64>,
}

impl TryFrom<CurveJson> for CurveParams {
    type Error = Error;

    fn try_from(j: CurveJson) -> Result<Self> {
        if j.theta.len() != j.segments {
            return Err(Error::Config(format!(
                "theta: expected L = {} entries, got {}",
                j.segments,
                j.theta.len()
            )));
        }
        CurveParams::new(j.theta)
    }
}

impl From<CurveParams> for CurveJson {
    fn from(p: CurveParams) -> Self {
        CurveJson {
            segments: p.theta.len(),
            theta: p.theta,
        }
    }
}

impl CurveParams {
    /// Requires at least one finite, non-negative weight and a positive sum.
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Config("theta: at least one segment required".into()));
        }
        if theta.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Config(
                "theta: weights must be finite and non-negative".into(),
            ));
        }
        if theta.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("theta: weights must not all be zero".into()));
        }
        Ok(Self { theta })
    }

    /// `θ_j = 1/L`; the induced curve is the identity on `[0, 1]`.
    pub fn identity(segments: usize) -> Self {
        assert!(segments > 0);
        Self {
            theta: vec![1.0 / segments as f64; segments],
        }
    }

    pub fn segments(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `T_L`.
    pub fn total(&self) -> f64 {
        self.theta.iter().sum()
    }

    pub(crate) fn curve(&self) -> Curve {
        Curve::new(self)
    }

    /// Adds `step` to θ without any projection.
    pub(crate) fn shifted(&self, step: &[f64]) -> Vec<f64> {
        self.theta.iter().zip(step).map(|(t, s)| t + s).collect()
    }
}

/// Precomputed cumulative sums for O(1) evaluation.
pub(crate) struct Curve {
    cumulative: Vec<f64>,
    theta: Vec<f64>,
    total: f64,
}

impl Curve {
    fn new(p: &CurveParams) -> Self {
        let mut cumulative = Vec::with_capacity(p.theta.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for t in &p.theta {
            acc += t;
            cumulative.push(acc);
        }
        Self {
            cumulative,
            theta: p.theta.clone(),
            total: acc,
        }
    }

    pub(crate) fn segments(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn total(&self) -> f64 {
        self.total
    }

    pub(crate) fn eval(&self, u: f64) -> f64 {
        let l = self.theta.len();
        let x = (u * l as f64).clamp(0.0, l as f64);
        let k = (x.floor() as usize).min(l - 1);
        let frac = x - k as f64;
        (self.cumulative[k] + frac * self.theta[k]) / self.total
    }

    /// `clamp(L·u − j, 0, 1)` for segment `j`.
    pub(crate) fn ramp(&self, u: f64, j: usize) -> f64 {
        (u * self.theta.len() as f64 - j as f64).clamp(0.0, 1.0)
    }
}

fn check_domain(u: f64) -> Result<f64> {
    if !u.is_finite() || u < -1e-9 || u > 1.0 + 1e-9 {
        return Err(Error::Domain(u));
    }
    Ok(u.clamp(0.0, 1.0))
}

/// Evaluates the curve at brightness `u ∈ [0, 1]`.
pub fn en_bright(u: f64, p: &CurveParams) -> Result<f64> {
    let u = check_domain(u)?;
    Ok(p.curve().eval(u))
}

/// `∂EnBright/∂θ_j = (clamp(L·u − j, 0, 1) − EnBright(u)) / T_L` for every j.
pub fn curve_param_grad(u: f64, p: &CurveParams) -> Result<Vec<f64>> {
    let u = check_domain(u)?;
    let curve = p.curve();
    let value = curve.eval(u);
    Ok((0..curve.segments())
        .map(|j| (curve.ramp(u, j) - value) / curve.total())
        .collect())
}

/// Floors every weight at [`THETA_FLOOR`].
pub fn project_params(p: &CurveParams) -> CurveParams {
    project_theta(&p.theta)
}

pub(crate) fn project_theta(theta: &[f64]) -> CurveParams {
    CurveParams {
        theta: theta.iter().map(|t| t.max(THETA_FLOOR)).collect(),
    }
}

/// The `L + 1` control points `(j / L, T_j / T_L)`.
pub fn control_points(p: &CurveParams) -> Vec<(f64, f64)> {
    let curve = p.curve();
    let l = curve.segments();
    curve
        .cumulative
        .iter()
        .enumerate()
        .map(|(j, t)| {
            if j == l {
                (1.0, 1.0)
            } else {
                (j as f64 / l as f64, t / curve.total)
            }
        })
        .collect()
}

/// Filters an image through the curve in gain form.
pub fn apply_curve(img: &LinearImage, p: &CurveParams) -> LinearImage {
    let map = brightness_map(img);
    apply_curve_with_map(img, &map, p)
}

/// As [`apply_curve`] with a precomputed brightness map of `img`.
pub fn apply_curve_with_map(img: &LinearImage, map: &BrightnessMap, p: &CurveParams) -> LinearImage {
    CURVE_APPLICATIONS.fetch_add(1, Ordering::Relaxed);
    let curve = p.curve();
    let mut data = Vec::with_capacity(img.data().len());
    for (px, &u) in img.pixels().zip(map.values()) {
        let gain = (curve.eval(u as f64) / (u.max(GAIN_FLOOR) as f64)) as f32;
        data.extend(px.iter().map(|v| (v * gain).max(0.0)));
    }
    LinearImage::from_raw(img.height(), img.width(), data)
}

/// Chains a gradient with respect to the filtered image (interleaved RGB,
/// same layout as `img`) into a gradient with respect to θ.
pub fn theta_grad_from_image_grad(
    img: &LinearImage,
    map: &BrightnessMap,
    p: &CurveParams,
    image_grad: &[f32],
) -> Vec<f64> {
    assert_eq!(image_grad.len(), img.data().len());
    let curve = p.curve();
    let l = curve.segments();
    // The ramp of pixel u is 1 below its segment k, the fraction at k and 0
    // above, so per-segment sums are binned and then suffix-summed.
    let mut full = vec![0.0f64; l];
    let mut partial = vec![0.0f64; l];
    let mut offset = 0.0f64;
    for ((px, g), &u) in img
        .pixels()
        .zip(image_grad.chunks_exact(3))
        .zip(map.values())
    {
        // d loss / d EnBright at this pixel
        let w = (px[0] as f64 * g[0] as f64 + px[1] as f64 * g[1] as f64 + px[2] as f64 * g[2] as f64)
            / u.max(GAIN_FLOOR) as f64;
        if w == 0.0 {
            continue;
        }
        let u = u as f64;
        let scaled = w / curve.total();
        offset += scaled * curve.eval(u);
        let x = (u * l as f64).clamp(0.0, l as f64);
        let k = (x.floor() as usize).min(l - 1);
        full[k] += scaled;
        partial[k] += scaled * (x - k as f64);
    }
    let mut grad = vec![0.0f64; l];
    let mut above = 0.0;
    for j in (0..l).rev() {
        grad[j] = above + partial[j] - offset;
        above += full[j];
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Literal sum, kept apart from the cumulative-sum evaluator.
    fn oracle(u: f64, theta: &[f64]) -> f64 {
        let l = theta.len() as f64;
        let total: f64 = theta.iter().sum();
        theta
            .iter()
            .enumerate()
            .map(|(j, t)| (l * u - j as f64).clamp(0.0, 1.0) * t)
            .sum::<f64>()
            / total
    }

    fn params(theta: &[f64]) -> CurveParams {
        CurveParams::new(theta.to_vec()).unwrap()
    }

    #[test]
    fn en_bright_examples() {
        let id = CurveParams::identity(32);
        assert!((en_bright(0.37, &id).unwrap() - 0.37).abs() < 1e-12);
        let p = params(&[0.9, 0.1]);
        assert!((en_bright(0.25, &p).unwrap() - 0.45).abs() < 1e-12);
        assert!((en_bright(0.75, &p).unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(en_bright(0.0, &p).unwrap(), 0.0);
        assert_eq!(en_bright(1.0, &p).unwrap(), 1.0);
        assert!(matches!(en_bright(1.1, &p), Err(Error::Domain(_))));
        assert!(matches!(en_bright(-0.01, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn apply_curve_examples() {
        let img = LinearImage::from_fn(4, 4, |y, x| [0.1 * y as f32, 0.05 * x as f32, 0.3]).unwrap();
        let out = apply_curve(&img, &CurveParams::identity(32));
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }

        let with_black = LinearImage::new(1, 2, vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5]).unwrap();
        let out = apply_curve(&with_black, &params(&[0.9, 0.1]));
        assert_eq!(&out.data()[..3], &[0.0, 0.0, 0.0]);

        // u = 0.25 at the first pixel, EnBright = 0.45, gain 1.8
        let img = LinearImage::new(1, 2, vec![0.25, 0.1, 0.4, 1.0, 1.0, 1.0]).unwrap();
        let out = apply_curve(&img, &params(&[0.9, 0.1]));
        for c in 0..3 {
            assert!((out.pixel(0, 0)[c] - 1.8 * img.pixel(0, 0)[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn param_grad_examples() {
        let g = curve_param_grad(0.5, &CurveParams::identity(2)).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
        assert!(curve_param_grad(0.0, &params(&[0.3, 0.2, 0.9]))
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));

        // central differences, step 1e-5
        let p = CurveParams::identity(2);
        let h = 1e-5;
        for j in 0..2 {
            let mut up = p.theta().to_vec();
            let mut dn = p.theta().to_vec();
            up[j] += h;
            dn[j] -= h;
            let fd = (oracle(0.5, &up) - oracle(0.5, &dn)) / (2.0 * h);
            assert!((fd - g_at(0.5, &p, j)).abs() < 1e-8);
        }
    }

    fn g_at(u: f64, p: &CurveParams, j: usize) -> f64 {
        curve_param_grad(u, p).unwrap()[j]
    }

    #[test]
    fn projection_examples() {
        let p = project_theta(&[-0.2, 0.5]);
        assert_eq!(p.theta(), &[0.001, 0.5]);
        let q = params(&[0.2, 0.5]);
        assert_eq!(project_params(&q), q);
        assert_eq!(project_theta(&[-1.0, -2.0, -0.5]).theta(), &[0.001; 3]);
    }

    #[test]
    fn control_point_examples() {
        let pts = control_points(&CurveParams::identity(4));
        let expect = [(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (0.75, 0.75), (1.0, 1.0)];
        for (a, b) in pts.iter().zip(expect) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
        let pts = control_points(&params(&[0.9, 0.1]));
        assert_eq!(pts.len(), 3);
        assert!((pts[1].0 - 0.5).abs() < 1e-12 && (pts[1].1 - 0.9).abs() < 1e-12);
        assert_eq!(pts[2], (1.0, 1.0));
    }

    #[test]
    fn json_shape() {
        let p = params(&[0.9, 0.1]);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"L":2,"theta":[0.9,0.1]}"#);
        let back: CurveParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<CurveParams>(r#"{"L":3,"theta":[0.9,0.1]}"#).is_err());
    }

    fn theta_strategy() -> impl Strategy<Value = Vec<f64>> {
        (1usize..40).prop_flat_map(|l| prop::collection::vec(THETA_FLOOR..1.0, l))
    }

    proptest! {
        #[test]
        fn matches_literal_sum(theta in theta_strategy(), u in 0.0f64..=1.0) {
            let p = params(&theta);
            prop_assert!((en_bright(u, &p).unwrap() - oracle(u, &theta)).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_u(theta in theta_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let p = params(&theta);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(en_bright(lo, &p).unwrap() <= en_bright(hi, &p).unwrap() + 1e-15);
        }

        #[test]
        fn gradient_is_orthogonal_to_theta(theta in theta_strategy(), u in 0.0f64..=1.0) {
            let p = params(&theta);
            let g = curve_param_grad(u, &p).unwrap();
            let s: f64 = g.iter().zip(&theta).map(|(g, t)| g * t).sum();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn filtering_preserves_chromaticity(
            data in prop::collection::vec(0.0f32..1.0, 27),
            theta in prop::collection::vec(THETA_FLOOR..1.0, 8),
        ) {
            let img = LinearImage::new(3, 3, data).unwrap();
            let out = apply_curve(&img, &params(&theta));
            for (a, b) in img.pixels().zip(out.pixels()) {
                // b = s·a for one s ≥ 0 per pixel
                let s = a.iter().zip(b).filter(|(x, _)| **x > 1e-3).map(|(x, y)| y / x).next();
                if let Some(s) = s {
                    for c in 0..3 {
                        prop_assert!((b[c] - s * a[c]).abs() <= 1e-5 * (1.0 + b[c]));
                    }
                }
            }
        }

        #[test]
        fn image_chain_rule_matches_per_pixel_sum(
            data in prop::collection::vec(0.0f32..1.0, 48),
            grad in prop::collection::vec(-1.0f32..1.0, 48),
            theta in prop::collection::vec(THETA_FLOOR..1.0, 1..12),
        ) {
            let img = LinearImage::new(4, 4, data).unwrap();
            let map = brightness_map(&img);
            let p = params(&theta);
            let fast = theta_grad_from_image_grad(&img, &map, &p, &grad);
            let mut slow = vec![0.0; theta.len()];
            for ((px, g), &u) in img.pixels().zip(grad.chunks_exact(3)).zip(map.values()) {
                let w: f64 = (0..3).map(|c| px[c] as f64 * g[c] as f64).sum::<f64>() / u.max(GAIN_FLOOR) as f64;
                for (s, d) in slow.iter_mut().zip(curve_param_grad(u as f64, &p).unwrap()) {
                    *s += w * d;
                }
            }
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}
