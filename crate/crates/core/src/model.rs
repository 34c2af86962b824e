//! Toy convolutional illuminant estimator.
//!
//! ```text
//! image [3,S,S] ─ conv3x3/2 ─ relu ─ conv3x3/2 ─ relu ─ conv3x3/2 ─ relu ─ mean-pool ─ h [32]
//! h ─ affine 32→3 ─ l2_normalize ─ illuminant estimate
//! h ─ affine 32→32 ─ relu ─ affine 32→16 ─ l2_normalize ─ embedding z
//! ```
//!
//! The network sees raw linear values; no per-image standardisation is
//! applied, since brightness is the signal under test.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::color::{Illuminant, LinearImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Side length of the square input.
    pub input_size: usize,
    /// Channel widths of the backbone, input first.
    pub channels: [usize; 4],
    pub projection_hidden: usize,
    pub embedding_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: [3, 8, 16, 32],
            projection_hidden: 32,
            embedding_dim: 16,
        }
    }
}

impl Architecture {
    /// Same block structure at a different input size.
    pub fn with_input_size(input_size: usize) -> Self {
        Self {
            input_size,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[3]
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.channels;
        let f = self.feature_dim();
        vec![
            ("backbone.conv1.weight", vec![c[1], c[0], 3, 3]),
            ("backbone.conv1.bias", vec![c[1]]),
            ("backbone.conv2.weight", vec![c[2], c[1], 3, 3]),
            ("backbone.conv2.bias", vec![c[2]]),
            ("backbone.conv3.weight", vec![c[3], c[2], 3, 3]),
            ("backbone.conv3.bias", vec![c[3]]),
            ("illuminant.weight", vec![3, f]),
            ("illuminant.bias", vec![3]),
            ("projection.fc1.weight", vec![self.projection_hidden, f]),
            ("projection.fc1.bias", vec![self.projection_hidden]),
            ("projection.fc2.weight", vec![self.embedding_dim, self.projection_hidden]),
            ("projection.fc2.bias", vec![self.embedding_dim]),
        ]
    }
}

const CONV1_W: usize = 0;
const ILLUM_W: usize = 6;
const ILLUM_B: usize = 7;
const PROJ1_W: usize = 8;
const PROJ2_W: usize = 10;

/// Every trainable tensor of the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    arch: Architecture,
    seed: u64,
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    /// Uniform He-style fan-in initialisation from a seeded generator.
    /// Biases start at zero except the illuminant head, which starts neutral.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    if name == "illuminant.bias" {
                        vec![1.0 / 3f32.sqrt(); n]
                    } else {
                        vec![0.0; n]
                    }
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                };
                Tensor::new(shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Self { arch, seed, tensors }
    }

    pub fn from_tensors(arch: Architecture, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(Error::shape(&[layout.len()], &[tensors.len()]));
        }
        for ((_, shape), t) in layout.iter().zip(&tensors) {
            if shape.as_slice() != t.shape() {
                return Err(Error::shape(shape, t.shape()));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("model weights"));
            }
        }
        Ok(Self { arch, seed, tensors })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every weight tensor on the tape, tracked or constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars(vars))
    }
}

/// Tape handles of the weight tensors, in [`Architecture::layout`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Tape handles of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub input: Var,
    pub feature: Var,
    pub illuminant: Var,
    pub embedding: Var,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub illuminant_hat: Illuminant,
    pub feature: Vec<f32>,
    pub embedding: Vec<f32>,
}

/// Planar `[3, S, S]` tensor for an image of the architecture's input size.
pub fn input_tensor(img: &LinearImage, arch: &Architecture) -> Result<Tensor> {
    let s = arch.input_size;
    if img.height() != s || img.width() != s {
        return Err(Error::shape(&[s, s, 3], &[img.height(), img.width(), 3]));
    }
    Tensor::new(vec![3, s, s], img.to_planar())
}

/// Resizes (area averaging) to the model input size if needed.
pub fn prepare_input(img: &LinearImage, arch: &Architecture) -> Result<LinearImage> {
    img.resize_area(arch.input_size, arch.input_size)
}

/// Converts a planar `[3, H, W]` gradient back to interleaved RGB.
pub fn planar_to_interleaved(planar: &[f32]) -> Vec<f32> {
    let n = planar.len() / 3;
    let mut out = vec![0.0; planar.len()];
    for i in 0..n {
        out[3 * i] = planar[i];
        out[3 * i + 1] = planar[n + i];
        out[3 * i + 2] = planar[2 * n + i];
    }
    out
}

/// Records a full forward pass on `tape`.
pub fn forward_on_tape(tape: &mut Tape, params: &ParamVars, input: Var) -> Result<ForwardVars> {
    let p = params.vars();
    let mut x = input;
    for block in 0..3 {
        let w = p[CONV1_W + 2 * block];
        let b = p[CONV1_W + 2 * block + 1];
        x = tape.conv2d(x, w, b, 2)?;
        x = tape.relu(x)?;
    }
    let feature = tape.global_mean_pool(x)?;

    let raw = tape.affine(p[ILLUM_W], p[ILLUM_B], feature)?;
    let illuminant = tape.l2_normalize(raw)?;

    let hidden = tape.affine(p[PROJ1_W], p[PROJ1_W + 1], feature)?;
    let hidden = tape.relu(hidden)?;
    let z = tape.affine(p[PROJ2_W], p[PROJ2_W + 1], hidden)?;
    let embedding = tape.l2_normalize(z)?;

    Ok(ForwardVars {
        input,
        feature,
        illuminant,
        embedding,
    })
}

/// Inference on one image already at the model input size.
pub fn forward(img: &LinearImage, weights: &ModelWeights) -> Result<ModelOutputs> {
    let mut tape = Tape::new();
    let params = weights.register(&mut tape, false)?;
    let input = tape.constant(input_tensor(img, &weights.arch)?)?;
    let vars = forward_on_tape(&mut tape, &params, input)?;
    Ok(outputs_from_tape(&tape, &vars))
}

/// Illuminant estimate only.
pub fn predict(img: &LinearImage, weights: &ModelWeights) -> Result<Illuminant> {
    Ok(forward(img, weights)?.illuminant_hat)
}

pub fn outputs_from_tape(tape: &Tape, vars: &ForwardVars) -> ModelOutputs {
    let e = tape.value(vars.illuminant).data();
    ModelOutputs {
        illuminant_hat: Illuminant::from_estimate([e[0] as f64, e[1] as f64, e[2] as f64])
            .expect("l2-normalised output is non-zero"),
        feature: tape.value(vars.feature).data().to_vec(),
        embedding: tape.value(vars.embedding).data().to_vec(),
    }
}

/// Angular error of the prediction in degrees.
pub fn loss_angular(outputs: &ModelOutputs, truth: &Illuminant) -> f64 {
    crate::color::angular_error(&outputs.illuminant_hat, truth)
}

/// Records `arccos_loss(estimate, truth)` for a recorded forward pass.
pub fn angular_loss_on_tape(tape: &mut Tape, vars: &ForwardVars, truth: &Illuminant) -> Result<Var> {
    let t = tape.constant(Tensor::vector(truth.rgb_f32().to_vec()))?;
    tape.arccos_loss(vars.illuminant, t)
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_FORMAT: &str = "lumacurve-checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub seed: u64,
    pub step: u64,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in bytes.
    pub offset: usize,
    /// Number of `f32` values.
    pub len: usize,
}

/// Writes `<path>` (JSON manifest) and `<path stem>.bin` (little-endian `f32`).
pub fn save_checkpoint(path: impl AsRef<Path>, weights: &ModelWeights, step: u64) -> Result<()> {
    let path = path.as_ref();
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
        .to_string();

    let mut blob = Vec::with_capacity(weights.param_count() * 4);
    let mut entries = Vec::new();
    for ((name, _), t) in weights.arch.layout().iter().zip(&weights.tensors) {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        architecture: weights.arch.clone(),
        seed: weights.seed,
        step,
        blob: blob_name,
        tensors: entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelWeights, CheckpointManifest)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format("checkpoint", format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            "checkpoint",
            format!("unexpected format tag {:?}", manifest.format),
        ));
    }
    let blob_path: PathBuf = path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let layout = manifest.architecture.layout();
    if layout.len() != manifest.tensors.len() {
        return Err(Error::format("checkpoint", "tensor count does not match architecture"));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&manifest.tensors) {
        if entry.name != *name || entry.shape != *shape {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {:?} does not match architecture slot {name:?}", entry.name),
            ));
        }
        let end = entry.offset + entry.len * 4;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::format("checkpoint", format!("blob too short for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    let weights = ModelWeights::from_tensors(manifest.architecture.clone(), manifest.seed, tensors)?;
    Ok((weights, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(size: usize, seed: u64) -> LinearImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(size, size, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    #[test]
    fn output_shapes_and_norms() {
        let w = ModelWeights::init(Architecture::default(), 3);
        let out = forward(&random_image(64, 1), &w).unwrap();
        assert_eq!(out.feature.len(), 32);
        assert_eq!(out.embedding.len(), 16);
        let n: f32 = out.embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        let e = out.illuminant_hat.rgb();
        assert!(((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let w = ModelWeights::init(Architecture::default(), 3);
        let img = random_image(64, 2);
        let (a, b) = (forward(&img, &w).unwrap(), forward(&img, &w).unwrap());
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.illuminant_hat, b.illuminant_hat);
        assert_eq!(ModelWeights::init(Architecture::default(), 3), w);
    }

    #[test]
    fn wrong_size_is_shape_mismatch() {
        let w = ModelWeights::init(Architecture::default(), 0);
        assert!(matches!(
            forward(&random_image(32, 0), &w),
            Err(Error::ShapeMismatch { .. })
        ));
        let resized = prepare_input(&random_image(32, 0), w.architecture()).unwrap();
        assert!(forward(&resized, &w).is_ok());
    }

    #[test]
    fn loss_angular_cases() {
        let w = ModelWeights::init(Architecture::default(), 0);
        let out = forward(&random_image(64, 5), &w).unwrap();
        assert_eq!(loss_angular(&out, &out.illuminant_hat), 0.0);
    }

    #[test]
    fn head_never_zero_at_init() {
        for seed in 0..100 {
            let arch = Architecture::with_input_size(16);
            let w = ModelWeights::init(arch, seed);
            let mut tape = Tape::new();
            let params = w.register(&mut tape, false).unwrap();
            let x = tape.constant(input_tensor(&random_image(16, seed + 1000), w.architecture()).unwrap()).unwrap();
            let vars = forward_on_tape(&mut tape, &params, x).unwrap();
            let raw_norm: f32 = tape.value(vars.illuminant).data().iter().map(|v| v * v).sum();
            assert!(raw_norm > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::init(Architecture::default(), 11);
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &w, 42).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.tensors[1].offset, 8 * 27 * 4);

        let blob = dir.path().join("ckpt.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..100]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn parameter_count() {
        let w = ModelWeights::init(Architecture::default(), 0);
        assert_eq!(w.param_count(), 224 + 1168 + 4640 + 99 + 1056 + 528);
    }
}
