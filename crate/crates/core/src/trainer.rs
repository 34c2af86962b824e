//! Joint adversarial/contrastive training and the plain baseline.
//!
//! A BRE step runs the adversarial curve search, forwards the clean batch
//! (held fixed, as contrastive anchors) and the augmented batch, and
//! minimises `λ_adv·L_adv + λ_ctr·L_ctr`. Each image gets its own tape so the
//! batch runs in parallel; the contrastive term couples the tapes through the
//! seed gradients of the augmented embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, StepState};
use crate::autodiff::{Tape, Tensor};
use crate::color::{Illuminant, LinearImage};
use crate::contrastive::{self, ContrastiveConfig};
use crate::error::{Error, Result};
use crate::eval::{self, MetricRow};
use crate::model::{self, Architecture, ModelWeights};
use crate::synth::{self, Dataset, Sample};
use crate::tone_curve;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Loss weights for the first and second half of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSchedule {
    pub early_adv: f64,
    pub early_ctr: f64,
    pub late_adv: f64,
    pub late_ctr: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            early_adv: 1.0,
            early_ctr: 10.0,
            late_adv: 1.0,
            late_ctr: 0.1,
        }
    }
}

impl LossSchedule {
    /// `(λ_adv, λ_ctr)` for `epoch` (0-based); the second half starts at `total/2`.
    pub fn weights(&self, epoch: usize, total: usize) -> (f64, f64) {
        if 2 * epoch < total {
            (self.early_adv, self.early_ctr)
        } else {
            (self.late_adv, self.late_ctr)
        }
    }
}

/// `(λ_adv, λ_ctr)` under the default schedule.
pub fn schedule(epoch: usize, total: usize) -> (f64, f64) {
    LossSchedule::default().weights(epoch, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub bre_enabled: bool,
    pub schedule: LossSchedule,
    pub optimizer: AdamConfig,
    pub curve_segments: usize,
    pub tau: f64,
    pub input_size: usize,
    /// Adds the angular loss on the clean batch to the joint objective.
    pub with_clean_loss: bool,
    pub per_image_theta: bool,
    pub per_image_lambda: bool,
    pub symmetric_contrastive: bool,
    /// Evaluate both splits every this many epochs (the last epoch always is).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 300,
            seed: 0,
            bre_enabled: true,
            schedule: LossSchedule::default(),
            optimizer: AdamConfig::default(),
            curve_segments: tone_curve::DEFAULT_SEGMENTS,
            tau: 1.0,
            input_size: 64,
            with_clean_loss: false,
            per_image_theta: false,
            per_image_lambda: false,
            symmetric_contrastive: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Parses JSON; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        let o = &self.optimizer;
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be >= 1");
        }
        if self.curve_segments == 0 {
            return bad("curve_segments", "must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be > 0");
        }
        if self.input_size < 8 || self.input_size % 8 != 0 {
            return bad("input_size", "must be a positive multiple of 8");
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad("optimizer.learning_rate", "must be > 0");
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return bad("optimizer.beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer.beta2", "must lie in [0, 1)");
        }
        if !(o.epsilon > 0.0) {
            return bad("optimizer.epsilon", "must be > 0");
        }
        let s = &self.schedule;
        for (name, v) in [
            ("schedule.early_adv", s.early_adv),
            ("schedule.early_ctr", s.early_ctr),
            ("schedule.late_adv", s.late_adv),
            ("schedule.late_ctr", s.late_ctr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and >= 0");
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::with_input_size(self.input_size)
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            segments: self.curve_segments,
            per_image_theta: self.per_image_theta,
            per_image_lambda: self.per_image_lambda,
            fixed_lambda: None,
        }
    }

    fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            symmetric: self.symmetric_contrastive,
        }
    }
}

/// Adam with bias correction; moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, weights: &ModelWeights) -> Self {
        let zeros: Vec<Vec<f64>> = weights.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, weights: &mut ModelWeights, grads: &[Vec<f64>]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, tensor) in weights.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Losses of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub adv_loss: f64,
    pub ctr_loss: f64,
    pub clean_loss: f64,
    pub grad_norm: f64,
    pub alpha: f64,
}

/// One image's recorded passes and the seeds that will drive its backward.
struct ImageTape {
    tape: Tape,
    params: Vec<crate::autodiff::Var>,
    seeds: Vec<(crate::autodiff::Var, Vec<f32>)>,
}

impl ImageTape {
    fn weight_grads(self) -> Result<Vec<Vec<f32>>> {
        let seeds: Vec<_> = self.seeds.iter().map(|(v, s)| (*v, s.as_slice())).collect();
        let mut grads = self.tape.backward_seeded(&seeds)?;
        Ok(self
            .params
            .iter()
            .map(|p| {
                grads
                    .take(*p)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(*p).numel()])
            })
            .collect())
    }
}

// Sums per-image gradients in image order so the result is independent of scheduling.
fn sum_grads(weights: &ModelWeights, per_image: Vec<Vec<Vec<f32>>>) -> Vec<Vec<f64>> {
    let mut total: Vec<Vec<f64>> = weights.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for g in per_image {
        for (acc, part) in total.iter_mut().zip(g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p as f64;
            }
        }
    }
    total
}

fn grad_norm(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_batch(images: &[LinearImage], labels: &[Illuminant]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    if images.len() != labels.len() {
        return Err(Error::shape(&[images.len()], &[labels.len()]));
    }
    Ok(())
}

/// Owns everything that changes during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    weights: ModelWeights,
    adam: Adam,
    step_state: StepState,
    rng: ChaCha8Rng,
}

const STREAM_TRAINER: u64 = 7;

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = ModelWeights::init(cfg.architecture(), cfg.seed);
        Self::with_weights(cfg, weights)
    }

    pub fn with_weights(cfg: TrainConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_TRAINER);
        Ok(Self {
            adam: Adam::new(cfg.optimizer.clone(), &weights),
            cfg,
            weights,
            step_state: StepState::default(),
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    pub fn step_state(&self) -> &StepState {
        &self.step_state
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// One BRE or baseline step depending on the configuration.
    pub fn step(&mut self, images: &[LinearImage], labels: &[Illuminant], epoch: usize) -> Result<StepMetrics> {
        if self.cfg.bre_enabled {
            self.train_step_bre(images, labels, epoch)
        } else {
            self.train_step_baseline(images, labels)
        }
    }

    /// Plain angular-loss step on the clean batch.
    pub fn train_step_baseline(&mut self, images: &[LinearImage], labels: &[Illuminant]) -> Result<StepMetrics> {
        check_batch(images, labels)?;
        let n = images.len() as f32;
        let weights = &self.weights;
        let per_image: Vec<(f64, Vec<Vec<f32>>)> = images
            .par_iter()
            .zip(labels)
            .map(|(img, label)| {
                let mut tape = Tape::new();
                let params = weights.register(&mut tape, true)?;
                let x = tape.constant(model::input_tensor(img, weights.architecture())?)?;
                let vars = model::forward_on_tape(&mut tape, &params, x)?;
                let loss = model::angular_loss_on_tape(&mut tape, &vars, label)?;
                let value = tape.value(loss).item() as f64;
                let it = ImageTape {
                    params: params.vars().to_vec(),
                    seeds: vec![(loss, vec![1.0 / n])],
                    tape,
                };
                Ok((value, it.weight_grads()?))
            })
            .collect::<Result<_>>()?;
        let loss = per_image.iter().map(|p| p.0).sum::<f64>() / images.len() as f64;
        let grads = sum_grads(&self.weights, per_image.into_iter().map(|p| p.1).collect());
        let norm = grad_norm(&grads);
        self.adam.step(&mut self.weights, &grads);
        Ok(StepMetrics {
            loss,
            adv_loss: 0.0,
            ctr_loss: 0.0,
            clean_loss: loss,
            grad_norm: norm,
            alpha: self.step_state.alpha,
        })
    }

    /// Adversarial augmentation followed by the joint update.
    pub fn train_step_bre(&mut self, images: &[LinearImage], labels: &[Illuminant], epoch: usize) -> Result<StepMetrics> {
        check_batch(images, labels)?;
        let (lambda_adv, lambda_ctr) = self.cfg.schedule.weights(epoch, self.cfg.epochs);
        let augmented = augment::augment_batch(
            images,
            labels,
            &self.weights,
            &mut self.step_state,
            &mut self.rng,
            &self.cfg.augment_config(),
        )?;
        let n = images.len() as f64;
        let weights = &self.weights;
        let with_clean = self.cfg.with_clean_loss;

        // forward passes; the augmented branch always carries weight gradients
        struct Forward {
            tape: ImageTape,
            clean_embedding: Vec<f32>,
            aug_embedding: Vec<f32>,
            aug_embedding_var: crate::autodiff::Var,
            adv_loss: f64,
            clean_loss: f64,
        }
        let forwards: Vec<Forward> = images
            .par_iter()
            .zip(&augmented.images)
            .zip(labels)
            .map(|((clean, aug), label)| {
                let arch = weights.architecture();
                let mut tape = Tape::new();
                let params = weights.register(&mut tape, true)?;
                let xa = tape.constant(model::input_tensor(aug, arch)?)?;
                let va = model::forward_on_tape(&mut tape, &params, xa)?;
                let la = model::angular_loss_on_tape(&mut tape, &va, label)?;
                let mut seeds = vec![(la, vec![(lambda_adv / n) as f32])];

                let (clean_embedding, clean_loss) = if with_clean {
                    let xc = tape.constant(model::input_tensor(clean, arch)?)?;
                    let vc = model::forward_on_tape(&mut tape, &params, xc)?;
                    let lc = model::angular_loss_on_tape(&mut tape, &vc, label)?;
                    seeds.push((lc, vec![(1.0 / n) as f32]));
                    (tape.value(vc.embedding).data().to_vec(), tape.value(lc).item() as f64)
                } else {
                    (model::forward(clean, weights)?.embedding, 0.0)
                };
                Ok(Forward {
                    clean_embedding,
                    aug_embedding: tape.value(va.embedding).data().to_vec(),
                    aug_embedding_var: va.embedding,
                    adv_loss: tape.value(la).item() as f64,
                    clean_loss,
                    tape: ImageTape {
                        params: params.vars().to_vec(),
                        seeds,
                        tape,
                    },
                })
            })
            .collect::<Result<_>>()?;

        let z: Vec<&[f32]> = forwards.iter().map(|f| f.clean_embedding.as_slice()).collect();
        let z_star: Vec<&[f32]> = forwards.iter().map(|f| f.aug_embedding.as_slice()).collect();
        let ctr = contrastive::info_nce_with_grad(&z, &z_star, &self.cfg.contrastive_config())?;

        let adv_loss = forwards.iter().map(|f| f.adv_loss).sum::<f64>() / n;
        let clean_loss = forwards.iter().map(|f| f.clean_loss).sum::<f64>() / n;

        let per_image: Vec<Vec<Vec<f32>>> = forwards
            .into_par_iter()
            .zip(&ctr.grad_positives)
            .map(|(mut f, g)| {
                if lambda_ctr != 0.0 {
                    let seed = g.iter().map(|v| (lambda_ctr * v) as f32).collect();
                    f.tape.seeds.push((f.aug_embedding_var, seed));
                }
                f.tape.weight_grads()
            })
            .collect::<Result<_>>()?;
        let grads = sum_grads(&self.weights, per_image);
        let norm = grad_norm(&grads);
        self.adam.step(&mut self.weights, &grads);

        let mut loss = lambda_adv * adv_loss + lambda_ctr * ctr.loss;
        if with_clean {
            loss += clean_loss;
        }
        Ok(StepMetrics {
            loss,
            adv_loss,
            ctr_loss: ctr.loss,
            clean_loss,
            grad_norm: norm,
            alpha: self.step_state.alpha,
        })
    }

    /// One pass over `train` in a seeded random order; returns the mean step loss.
    pub fn run_epoch(&mut self, train: &[Sample], epoch: usize) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let images: Vec<LinearImage> = chunk.iter().map(|&i| train[i].image.clone()).collect();
            let labels: Vec<Illuminant> = chunk.iter().map(|&i| train[i].label).collect();
            total += self.step(&images, &labels, epoch)?.loss;
            steps += 1;
        }
        Ok(total / steps as f64)
    }
}

/// Outcome of a full training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub final_weights: ModelWeights,
    /// Weights with the lowest mean training-split error seen at an evaluation.
    pub best_weights: ModelWeights,
    pub best_epoch: usize,
    pub log: Vec<MetricRow>,
    pub steps: u64,
}

fn resized(samples: &[Sample], arch: &Architecture) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Sample {
                image: model::prepare_input(&s.image, arch)?,
                label: s.label,
            })
        })
        .collect()
}

/// Trains on an in-memory dataset, evaluating both splits on schedule.
/// Epochs in the log are 1-based.
pub fn train_on(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    let arch = cfg.architecture();
    let train = resized(&data.train, &arch)?;
    let test = resized(&data.test, &arch)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelWeights)> = None;
    for epoch in 0..cfg.epochs {
        trainer.run_epoch(&train, epoch)?;
        let number = epoch + 1;
        if number % cfg.eval_every != 0 && number != cfg.epochs {
            continue;
        }
        let train_s = eval::summary_stats(&eval::evaluate(trainer.weights(), &train)?)?;
        log.push(MetricRow {
            epoch: number,
            split: "train".into(),
            summary: train_s,
        });
        if !test.is_empty() {
            let test_s = eval::summary_stats(&eval::evaluate(trainer.weights(), &test)?)?;
            log.push(MetricRow {
                epoch: number,
                split: "test".into(),
                summary: test_s,
            });
        }
        if best.as_ref().map_or(true, |b| train_s.mean < b.0) {
            best = Some((train_s.mean, number, trainer.weights().clone()));
        }
    }
    let (_, best_epoch, best_weights) = best.expect("at least one evaluation");
    let steps = trainer.steps();
    Ok(TrainRun {
        final_weights: trainer.into_weights(),
        best_weights,
        best_epoch,
        log,
        steps,
    })
}

/// Paths written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "final.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Loads a dataset directory, trains, and writes checkpoints plus the metric log.
pub fn train(data_dir: impl AsRef<Path>, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<(TrainRun, TrainOutputs)> {
    cfg.validate()?;
    let data_dir = data_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let manifest = synth::DatasetManifest::read(data_dir)?;
    let data = synth::load_dataset(data_dir, &manifest)?;
    if data.train.is_empty() {
        return Err(Error::Config("data: manifest has no training records".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let run = train_on(&data, cfg)?;
    let outputs = TrainOutputs {
        final_checkpoint: out_dir.join(FINAL_CHECKPOINT),
        best_checkpoint: out_dir.join(BEST_CHECKPOINT),
        metrics: out_dir.join(METRICS_FILE),
    };
    model::save_checkpoint(&outputs.final_checkpoint, &run.final_weights, run.steps)?;
    model::save_checkpoint(&outputs.best_checkpoint, &run.best_weights, run.best_epoch as u64)?;
    eval::write_metric_log(&outputs.metrics, &run.log)?;
    let cfg_path = out_dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serialises");
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok((run, outputs))
}

/// Weight gradients of the mean clean angular loss.
pub fn clean_loss_grads(weights: &ModelWeights, images: &[LinearImage], labels: &[Illuminant]) -> Result<Vec<Tensor>> {
    check_batch(images, labels)?;
    let n = images.len() as f32;
    let per_image: Vec<Vec<Vec<f32>>> = images
        .par_iter()
        .zip(labels)
        .map(|(img, label)| {
            let mut tape = Tape::new();
            let params = weights.register(&mut tape, true)?;
            let x = tape.constant(model::input_tensor(img, weights.architecture())?)?;
            let vars = model::forward_on_tape(&mut tape, &params, x)?;
            let loss = model::angular_loss_on_tape(&mut tape, &vars, label)?;
            ImageTape {
                params: params.vars().to_vec(),
                seeds: vec![(loss, vec![1.0 / n])],
                tape,
            }
            .weight_grads()
        })
        .collect::<Result<_>>()?;
    sum_grads(weights, per_image)
        .into_iter()
        .zip(weights.tensors())
        .map(|(g, t)| Tensor::new(t.shape().to_vec(), g.into_iter().map(|v| v as f32).collect()))
        .collect()
}
