//! Adversarial brightness augmentation.
//!
//! Per batch: start from the identity curve, take the gradient of the mean
//! angular loss with respect to the curve weights, replace outlying gradient
//! entries, update the momentum step size from the gradient norm, take one
//! normalised ascent step, and blend the resulting adversarial images with
//! the clean ones using `λ ~ U(0, 1)`.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::color::{brightness_map, BrightnessMap, Illuminant, LinearImage};
use crate::error::{Error, Result};
use crate::model::{self, ModelWeights};
use crate::tone_curve::{self, project_theta, CurveParams};

/// Adaptive step-size state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub alpha: f64,
    pub momentum: f64,
    pub t: u64,
}

pub const INITIAL_STEP: f64 = 0.1;
pub const MOMENTUM: f64 = 0.9;

impl Default for StepState {
    fn default() -> Self {
        Self {
            alpha: INITIAL_STEP,
            momentum: MOMENTUM,
            t: 0,
        }
    }
}

/// `α_t = m·α_{t−1} + (1 − m)·‖g′‖₂ / 10`.
pub fn adapt_step(state: &StepState, sanitized: &[f64]) -> StepState {
    let norm = l2(sanitized);
    StepState {
        alpha: state.momentum * state.alpha + (1.0 - state.momentum) * norm / 10.0,
        momentum: state.momentum,
        t: state.t + 1,
    }
}

/// Replaces entries with `|g_j| > 1` by the mean of the in-range entries
/// (zero if every entry is out of range).
pub fn sanitize_gradient(g: &[f64]) -> Vec<f64> {
    let inliers: Vec<f64> = g.iter().copied().filter(|v| v.abs() <= 1.0).collect();
    let fill = if inliers.is_empty() {
        0.0
    } else {
        inliers.iter().sum::<f64>() / inliers.len() as f64
    };
    g.iter().map(|v| if v.abs() <= 1.0 { *v } else { fill }).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub segments: usize,
    /// One curve per image instead of one per batch.
    pub per_image_theta: bool,
    /// One blend coefficient per image instead of one per batch.
    pub per_image_lambda: bool,
    /// Fixed blend coefficient, bypassing sampling.
    pub fixed_lambda: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            segments: tone_curve::DEFAULT_SEGMENTS,
            per_image_theta: false,
            per_image_lambda: false,
            fixed_lambda: None,
        }
    }
}

/// Result of the inner maximisation for one batch.
#[derive(Clone, Debug)]
pub struct AdversarialStep {
    /// One curve for the batch, or one per image.
    pub theta: Vec<CurveParams>,
    /// Raw batch gradient of the mean angular loss with respect to θ.
    pub grad: Vec<f64>,
    pub sanitized: Vec<f64>,
    /// Mean angular loss at the identity curve.
    pub loss: f64,
}

impl AdversarialStep {
    pub fn theta_for(&self, i: usize) -> &CurveParams {
        if self.theta.len() == 1 {
            &self.theta[0]
        } else {
            &self.theta[i]
        }
    }
}

/// Angular loss of one image filtered through `theta`, and its gradient with
/// respect to θ (the model weights are held fixed).
pub fn image_theta_grad(
    img: &LinearImage,
    map: &BrightnessMap,
    label: &Illuminant,
    theta: &CurveParams,
    weights: &ModelWeights,
) -> Result<(f64, Vec<f64>)> {
    let filtered = tone_curve::apply_curve_with_map(img, map, theta);
    let mut tape = Tape::new();
    let params = weights.register(&mut tape, false)?;
    let x = tape.leaf(model::input_tensor(&filtered, weights.architecture())?, true)?;
    let vars = model::forward_on_tape(&mut tape, &params, x)?;
    let loss = model::angular_loss_on_tape(&mut tape, &vars, label)?;
    let grads = tape.backward(loss)?;
    let dx = model::planar_to_interleaved(grads.get(x).expect("input is tracked"));
    let g = tone_curve::theta_grad_from_image_grad(img, map, theta, &dx);
    Ok((tape.value(loss).item() as f64, g))
}

/// Mean angular loss of a batch after filtering through per-image curves.
pub fn batch_angular_loss(
    images: &[LinearImage],
    labels: &[Illuminant],
    theta: impl Fn(usize) -> CurveParams + Sync,
    weights: &ModelWeights,
) -> Result<f64> {
    let losses: Vec<f64> = images
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (img, label))| {
            let filtered = tone_curve::apply_curve(img, &theta(i));
            let out = model::forward(&filtered, weights)?;
            Ok(model::loss_angular(&out, label))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One ascent step on the curve weights, updating `state`.
pub fn adversarial_params(
    images: &[LinearImage],
    labels: &[Illuminant],
    weights: &ModelWeights,
    state: &mut StepState,
    cfg: &AugmentConfig,
) -> Result<AdversarialStep> {
    let maps: Vec<BrightnessMap> = images.iter().map(brightness_map).collect();
    adversarial_params_with_maps(images, &maps, labels, weights, state, cfg)
}

fn adversarial_params_with_maps(
    images: &[LinearImage],
    maps: &[BrightnessMap],
    labels: &[Illuminant],
    weights: &ModelWeights,
    state: &mut StepState,
    cfg: &AugmentConfig,
) -> Result<AdversarialStep> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    if images.len() != labels.len() {
        return Err(Error::shape(&[images.len()], &[labels.len()]));
    }
    let init = CurveParams::identity(cfg.segments);
    let per_image: Vec<(f64, Vec<f64>)> = images
        .par_iter()
        .zip(maps)
        .zip(labels)
        .map(|((img, map), label)| image_theta_grad(img, map, label, &init, weights))
        .collect::<Result<_>>()?;

    let n = images.len() as f64;
    let mut grad = vec![0.0; cfg.segments];
    let mut loss = 0.0;
    for (l, g) in &per_image {
        loss += l / n;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v / n;
        }
    }
    let sanitized = sanitize_gradient(&grad);
    *state = adapt_step(state, &sanitized);

    let ascend = |g: &[f64]| -> CurveParams {
        let norm = l2(g);
        if norm < 1e-12 {
            return init.clone();
        }
        let step: Vec<f64> = g.iter().map(|v| state.alpha * v / norm).collect();
        project_theta(&init.shifted(&step))
    };
    let theta = if cfg.per_image_theta {
        per_image
            .iter()
            .map(|(_, g)| ascend(&sanitize_gradient(&g.iter().map(|v| v / n).collect::<Vec<_>>())))
            .collect()
    } else {
        vec![ascend(&sanitized)]
    };
    Ok(AdversarialStep {
        theta,
        grad,
        sanitized,
        loss,
    })
}

/// `λ·adv + (1 − λ)·clean`.
pub fn blend(clean: &LinearImage, adv: &LinearImage, lambda: f64) -> Result<LinearImage> {
    if clean.height() != adv.height() || clean.width() != adv.width() {
        return Err(Error::shape(
            &[clean.height(), clean.width(), 3],
            &[adv.height(), adv.width(), 3],
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda: must lie in [0, 1], got {lambda}")));
    }
    let data = clean
        .data()
        .iter()
        .zip(adv.data())
        .map(|(c, a)| (lambda * *a as f64 + (1.0 - lambda) * *c as f64) as f32)
        .collect();
    LinearImage::new(clean.height(), clean.width(), data)
}

#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub images: Vec<LinearImage>,
    /// Pre-blend adversarial images.
    pub adversarial: Vec<LinearImage>,
    pub lambdas: Vec<f64>,
    pub step: AdversarialStep,
}

/// Full augmentation of one batch.
pub fn augment_batch(
    images: &[LinearImage],
    labels: &[Illuminant],
    weights: &ModelWeights,
    state: &mut StepState,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<AugmentedBatch> {
    let maps: Vec<BrightnessMap> = images.iter().map(brightness_map).collect();
    let step = adversarial_params_with_maps(images, &maps, labels, weights, state, cfg)?;

    let lambdas: Vec<f64> = match cfg.fixed_lambda {
        Some(l) => vec![l; images.len()],
        None if cfg.per_image_lambda => (0..images.len()).map(|_| rng.gen::<f64>()).collect(),
        None => vec![rng.gen::<f64>(); images.len()],
    };
    // an unchanged curve leaves the image exactly as it was
    let identity = CurveParams::identity(cfg.segments);
    let adversarial: Vec<LinearImage> = images
        .par_iter()
        .zip(&maps)
        .enumerate()
        .map(|(i, (img, map))| {
            let theta = step.theta_for(i);
            if *theta == identity {
                img.clone()
            } else {
                tone_curve::apply_curve_with_map(img, map, theta)
            }
        })
        .collect();
    let blended = images
        .iter()
        .zip(&adversarial)
        .zip(&lambdas)
        .map(|((c, a), l)| blend(c, a, *l))
        .collect::<Result<_>>()?;
    Ok(AugmentedBatch {
        images: blended,
        adversarial,
        lambdas,
        step,
    })
}

/// One adversarial step on a single image at the model's input size.
/// Returns the pre-blend adversarial image and its curve.
pub fn augment_image(
    img: &LinearImage,
    label: &Illuminant,
    weights: &ModelWeights,
    segments: usize,
    seed: u64,
) -> Result<(LinearImage, CurveParams)> {
    let input = model::prepare_input(img, weights.architecture())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = AugmentConfig {
        segments,
        fixed_lambda: Some(1.0),
        ..AugmentConfig::default()
    };
    let mut state = StepState::default();
    let mut batch = augment_batch(&[input], &[*label], weights, &mut state, &mut rng, &cfg)?;
    let theta = batch.step.theta.swap_remove(0);
    Ok((batch.adversarial.swap_remove(0), theta))
}
