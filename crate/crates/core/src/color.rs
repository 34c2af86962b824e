//! Linear RGB images, brightness maps and illuminant vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A height × width raster of linear, non-negative RGB triples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LinearImage {
    /// Wraps interleaved RGB data. Every value must be finite and `>= 0`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(&[height, width, 3], &[data.len()]));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidImage(format!(
                "sample {bad} is {}, expected a finite value >= 0",
                data[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel closure `(row, col) -> rgb`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// An image filled with one colour.
    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Interleaved RGB samples, row-major, top row first.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(3)
    }

    /// One colour channel as a dense plane.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Channel-major copy (`3 × H × W`), the layout the model consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels().enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        out
    }

    pub fn scaled(&self, factor: f32) -> Self {
        assert!(factor >= 0.0 && factor.is_finite());
        Self::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Area-averaging resize. Each output pixel is the coverage-weighted mean
    /// of the input pixels under its footprint.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage("resize target must be positive".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let rows = area_weights(self.height, height);
        let cols = area_weights(self.width, width);
        let mut data = Vec::with_capacity(height * width * 3);
        for row_w in &rows {
            for col_w in &cols {
                let mut acc = [0.0f64; 3];
                let mut total = 0.0f64;
                for &(sy, wy) in row_w {
                    for &(sx, wx) in col_w {
                        let w = wy * wx;
                        let p = self.pixel(sy, sx);
                        for c in 0..3 {
                            acc[c] += w * p[c] as f64;
                        }
                        total += w;
                    }
                }
                data.extend(acc.iter().map(|a| (a / total) as f32));
            }
        }
        Ok(Self::from_raw(height, width, data))
    }
}

// For each destination index, the (source index, overlap) pairs it covers.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = hi.min((s + 1) as f64) - lo.max(s as f64);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Per-pixel brightness normalised to `[0, 1]` by the image-wide maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct BrightnessMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl BrightnessMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Channel mean `(R + G + B) / 3` divided by its maximum over the image.
/// An all-black image yields an all-zero map.
pub fn brightness_map(img: &LinearImage) -> BrightnessMap {
    let means: Vec<f32> = img.pixels().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let max = means.iter().copied().fold(0.0f32, f32::max);
    let values = if max > 0.0 {
        means.iter().map(|m| (m / max).min(1.0)).collect()
    } else {
        vec![0.0; means.len()]
    };
    BrightnessMap {
        height: img.height,
        width: img.width,
        values,
    }
}

/// A unit-norm RGB illuminant direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Illuminant([f64; 3]);

impl Illuminant {
    pub const NEUTRAL: Illuminant = Illuminant([
        0.577_350_269_189_625_8,
        0.577_350_269_189_625_8,
        0.577_350_269_189_625_8,
    ]);

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    pub fn rgb_f32(&self) -> [f32; 3] {
        [self.0[0] as f32, self.0[1] as f32, self.0[2] as f32]
    }

    pub fn dot(&self, other: &Illuminant) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    /// Normalises an arbitrary (possibly signed) vector, as produced by a model head.
    pub fn from_estimate(v: [f64; 3]) -> Result<Self> {
        let norm = l2(&v);
        if !(norm >= 1e-12) || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Illuminant([v[0] / norm, v[1] / norm, v[2] / norm]))
    }
}

impl TryFrom<[f64; 3]> for Illuminant {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        // already-unit vectors round-trip bit for bit
        if v.iter().all(|c| *c >= 0.0) && (l2(&v) - 1.0).abs() <= 1e-12 {
            return Ok(Illuminant(v));
        }
        normalize_illuminant(v)
    }
}

impl From<Illuminant> for [f64; 3] {
    fn from(e: Illuminant) -> Self {
        e.0
    }
}

fn l2(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `v / ||v||₂` for a non-negative raw illuminant.
pub fn normalize_illuminant(v: [f64; 3]) -> Result<Illuminant> {
    if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidImage(format!(
            "illuminant components must be finite and >= 0, got {v:?}"
        )));
    }
    Illuminant::from_estimate(v)
}

/// Angle between two illuminants in degrees.
///
/// The arccos argument is clamped to `[-1 + 1e-9, 1 - 1e-9]`; exactly
/// parallel or antiparallel vectors evaluate to 0 or 180.
pub fn angular_error(a: &Illuminant, b: &Illuminant) -> f64 {
    let (x, y) = (a.0, b.0);
    let cross = [
        x[1] * y[2] - x[2] * y[1],
        x[2] * y[0] - x[0] * y[2],
        x[0] * y[1] - x[1] * y[0],
    ];
    let dot = a.dot(b);
    if cross == [0.0; 3] {
        return if dot >= 0.0 { 0.0 } else { 180.0 };
    }
    let c = dot.clamp(-1.0 + ANGLE_CLAMP, 1.0 - ANGLE_CLAMP);
    c.acos().to_degrees()
}

pub(crate) const ANGLE_CLAMP: f64 = 1e-9;

/// Diagonal (von Kries) correction: every channel divided by `√3·e_c`, so a
/// neutral illuminant is the identity.
pub fn von_kries_correct(img: &LinearImage, e: &Illuminant) -> Result<LinearImage> {
    let gains = von_kries_gains(e)?;
    Ok(scale_channels(img, gains.map(|g| 1.0 / g)))
}

/// Inverse of [`von_kries_correct`]: casts the illuminant onto a corrected image.
pub fn von_kries_cast(img: &LinearImage, e: &Illuminant) -> Result<LinearImage> {
    let gains = von_kries_gains(e)?;
    Ok(scale_channels(img, gains))
}

fn von_kries_gains(e: &Illuminant) -> Result<[f64; 3]> {
    for (component, &value) in e.0.iter().enumerate() {
        if value < 1e-6 {
            return Err(Error::DegenerateIlluminant { component, value });
        }
    }
    let s3 = 3f64.sqrt();
    Ok([s3 * e.0[0], s3 * e.0[1], s3 * e.0[2]])
}

fn scale_channels(img: &LinearImage, gains: [f64; 3]) -> LinearImage {
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| {
            [
                (p[0] as f64 * gains[0]) as f32,
                (p[1] as f64 * gains[1]) as f32,
                (p[2] as f64 * gains[2]) as f32,
            ]
        })
        .collect();
    LinearImage::from_raw(img.height, img.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn illum(v: [f64; 3]) -> Illuminant {
        normalize_illuminant(v).unwrap()
    }

    #[test]
    fn brightness_map_examples() {
        let img = LinearImage::constant(2, 3, [0.3, 0.3, 0.3]).unwrap();
        assert!(brightness_map(&img).values().iter().all(|v| *v == 1.0));

        let black = LinearImage::constant(2, 2, [0.0; 3]).unwrap();
        assert!(brightness_map(&black).values().iter().all(|v| *v == 0.0));

        let two = LinearImage::new(1, 2, vec![0.6, 0.0, 0.0, 0.3, 0.3, 0.3]).unwrap();
        let m = brightness_map(&two);
        assert!((m.values()[0] - 0.666_666_7).abs() < 1e-6);
        assert_eq!(m.values()[1], 1.0);
    }

    #[test]
    fn normalize_examples() {
        let e = illum([1.0, 1.0, 1.0]).rgb();
        for c in e {
            assert!((c - 0.577_350_3).abs() < 1e-6);
        }
        let e = illum([0.4, 0.2, 0.2]).rgb();
        assert!((e[0] - 0.816_496_6).abs() < 1e-6);
        assert!((e[1] - 0.408_248_3).abs() < 1e-6);
        assert!(matches!(
            normalize_illuminant([0.0; 3]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn angular_error_examples() {
        let a = illum([0.3, 0.5, 0.2]);
        assert_eq!(angular_error(&a, &a), 0.0);
        let x = illum([1.0, 0.0, 0.0]);
        let y = illum([0.0, 1.0, 0.0]);
        assert!((angular_error(&x, &y) - 90.0).abs() < 1e-9);
        let z = illum([0.6, 0.8, 0.0]);
        assert!((angular_error(&x, &z) - 53.130_102_354).abs() < 1e-6);
    }

    #[test]
    fn von_kries_examples() {
        let img = LinearImage::new(1, 2, vec![0.8, 0.4, 0.4, 0.1, 0.7, 0.2]).unwrap();
        let same = von_kries_correct(&img, &Illuminant::NEUTRAL).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let e = illum([0.4, 0.2, 0.2]);
        let out = von_kries_correct(&img, &e).unwrap();
        for c in 0..3 {
            assert!((out.pixel(0, 0)[c] - 0.565_685_4).abs() < 1e-5);
        }

        let bad = illum([1.0, 0.0, 1.0]);
        assert!(matches!(
            von_kries_correct(&img, &bad),
            Err(Error::DegenerateIlluminant { component: 1, .. })
        ));
    }

    #[test]
    fn rejects_invalid_images() {
        assert!(LinearImage::new(0, 1, vec![]).is_err());
        assert!(LinearImage::new(1, 1, vec![0.0, -1.0, 0.0]).is_err());
        assert!(LinearImage::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(LinearImage::new(1, 1, vec![0.0; 2]).is_err());
    }

    #[test]
    fn area_resize_preserves_mean() {
        let img = LinearImage::from_fn(6, 9, |y, x| [(y * 9 + x) as f32, 1.0, 0.5]).unwrap();
        let small = img.resize_area(4, 4).unwrap();
        let mean = |im: &LinearImage| im.channel(0).iter().map(|v| *v as f64).sum::<f64>()
            / im.pixel_count() as f64;
        assert!((mean(&img) - mean(&small)).abs() < 1e-4);
        assert!(small.channel(1).iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit() -> impl Strategy<Value = Illuminant> {
            prop::array::uniform3(0.01f64..1.0).prop_map(|v| illum(v))
        }

        proptest! {
            #[test]
            fn angular_error_is_symmetric(a in unit(), b in unit()) {
                let (ab, ba) = (angular_error(&a, &b), angular_error(&b, &a));
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!(ab >= 0.0);
            }

            #[test]
            fn angular_error_ignores_scale(v in prop::array::uniform3(0.01f64..1.0), s in 0.01f64..100.0, w in unit()) {
                let scaled = illum([v[0] * s, v[1] * s, v[2] * s]);
                let d = angular_error(&scaled, &w) - angular_error(&illum(v), &w);
                prop_assert!(d.abs() < 1e-5);
            }

            #[test]
            fn brightness_map_ignores_scale(
                data in prop::collection::vec(0.0f32..2.0, 12),
                s in 0.1f32..10.0,
            ) {
                let img = LinearImage::new(2, 2, data).unwrap();
                let a = brightness_map(&img);
                let b = brightness_map(&img.scaled(s));
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }

            #[test]
            fn von_kries_round_trip(
                data in prop::collection::vec(0.01f32..2.0, 12),
                e in prop::array::uniform3(0.05f64..1.0),
            ) {
                let img = LinearImage::new(2, 2, data).unwrap();
                let e = illum(e);
                let back = von_kries_cast(&von_kries_correct(&img, &e).unwrap(), &e).unwrap();
                for (x, y) in img.data().iter().zip(back.data()) {
                    prop_assert!(((x - y) / x).abs() < 1e-6);
                }
            }
        }
    }
}
