//! Procedural scenes whose renders differ in brightness only.
//!
//! A scene is a textured floor seen orthographically from above with a few
//! spheres resting on it. Each image is lit by an ambient term plus one point
//! light on a ring around the scene; both share the illuminant colour `e`:
//!
//! ```text
//! f_c = e_c · [ S_c · (a + I · max(0, n·l) / d²) + m_s · I · max(0, n·h)^k / d² ]
//! ```
//!
//! Shadows and interreflections are not modelled. A dataset sweeps
//! scenes × illuminants × light positions; even positions go to the training
//! split and odd positions to the test split, so the two splits share scene
//! content and illuminant labels and differ only in the brightness field.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{normalize_illuminant, Illuminant, LinearImage};
use crate::error::{Error, Result};
use crate::pfm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 2],
    pub radius: f64,
    pub reflectance: [f64; 3],
    /// Specular weight `m_s`.
    pub specular: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// `K × K` floor patches, row-major from the top-left of the view.
    pub patches: usize,
    pub floor: Vec<[f64; 3]>,
    pub spheres: Vec<Sphere>,
    /// Point light strength shared by every light position of the scene.
    pub point_intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingSpec {
    pub illuminant: Illuminant,
    pub position: usize,
    pub n_positions: usize,
    pub point_intensity: f64,
    pub ambient: f64,
}

const RING_RADIUS: f64 = 1.6;
const LIGHT_HEIGHT: f64 = 1.0;
const SHININESS: i32 = 32;
const FLOOR_PATCHES: usize = 4;

impl SceneSpec {
    /// Random scene: `K × K` floor reflectances in `[0.05, 0.95]³`, one to three
    /// spheres, specular weight 0 with probability 0.8 else `U(0.05, 0.3)`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refl = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(0.05..=0.95),
                rng.gen_range(0.05..=0.95),
                rng.gen_range(0.05..=0.95),
            ]
        };
        let floor = (0..FLOOR_PATCHES * FLOOR_PATCHES).map(|_| refl(&mut rng)).collect();
        let count = rng.gen_range(1..=3);
        let spheres = (0..count)
            .map(|_| {
                let radius = rng.gen_range(0.15..0.35);
                let lim = 0.95 - radius;
                Sphere {
                    center: [rng.gen_range(-lim..lim), rng.gen_range(-lim..lim)],
                    radius,
                    reflectance: refl(&mut rng),
                    specular: if rng.gen_bool(0.8) {
                        0.0
                    } else {
                        rng.gen_range(0.05..0.3)
                    },
                }
            })
            .collect();
        Self {
            seed,
            patches: FLOOR_PATCHES,
            floor,
            spheres,
            point_intensity: rng.gen_range(2.0..4.0),
        }
    }

    /// Matte floor of one reflectance, no spheres.
    pub fn uniform(reflectance: [f64; 3]) -> Self {
        Self {
            seed: 0,
            patches: 1,
            floor: vec![reflectance],
            spheres: vec![],
            point_intensity: 0.0,
        }
    }

    fn floor_reflectance(&self, x: f64, y: f64) -> [f64; 3] {
        let k = self.patches;
        let col = (((x + 1.0) / 2.0 * k as f64) as usize).min(k - 1);
        let row = (((1.0 - y) / 2.0 * k as f64) as usize).min(k - 1);
        self.floor[row * k + col]
    }
}

impl LightingSpec {
    /// World position of the point light: evenly spaced on a ring at fixed height.
    pub fn light_position(&self) -> [f64; 3] {
        let angle = std::f64::consts::TAU * self.position as f64 / self.n_positions.max(1) as f64;
        [RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin(), LIGHT_HEIGHT]
    }
}

/// Renders a square image and returns it with its ground-truth illuminant.
pub fn render(scene: &SceneSpec, light: &LightingSpec, resolution: usize) -> (LinearImage, Illuminant) {
    let e = light.illuminant.rgb();
    let lp = light.light_position();
    let res = resolution as f64;
    let mut data = Vec::with_capacity(resolution * resolution * 3);
    for row in 0..resolution {
        for col in 0..resolution {
            let x = -1.0 + (col as f64 + 0.5) * 2.0 / res;
            let y = 1.0 - (row as f64 + 0.5) * 2.0 / res;
            let (point, normal, refl, spec_w) = surface_at(scene, x, y);

            let to_light = [lp[0] - point[0], lp[1] - point[1], lp[2] - point[2]];
            let d2 = to_light.iter().map(|v| v * v).sum::<f64>();
            let d = d2.sqrt();
            let l = to_light.map(|v| v / d);
            let ndotl = dot3(normal, l).max(0.0);
            let direct = light.point_intensity * ndotl / d2;

            let spec = if spec_w > 0.0 && ndotl > 0.0 {
                // viewer straight above
                let h = [l[0], l[1], l[2] + 1.0];
                let hn = dot3(h, h).sqrt();
                let ndoth = (dot3(normal, h) / hn).max(0.0);
                spec_w * light.point_intensity * ndoth.powi(SHININESS) / d2
            } else {
                0.0
            };
            for c in 0..3 {
                let v = e[c] * (refl[c] * (light.ambient + direct) + spec);
                data.push(v as f32);
            }
        }
    }
    (
        LinearImage::from_raw(resolution, resolution, data),
        light.illuminant,
    )
}

// Visible surface point, normal, body reflectance and specular weight.
fn surface_at(scene: &SceneSpec, x: f64, y: f64) -> ([f64; 3], [f64; 3], [f64; 3], f64) {
    let mut best: Option<([f64; 3], [f64; 3], [f64; 3], f64)> = None;
    for s in &scene.spheres {
        let (dx, dy) = (x - s.center[0], y - s.center[1]);
        let r2 = s.radius * s.radius - dx * dx - dy * dy;
        if r2 < 0.0 {
            continue;
        }
        let z = s.radius + r2.sqrt();
        if best.as_ref().map_or(true, |b| z > b.0[2]) {
            let n = [dx / s.radius, dy / s.radius, r2.sqrt() / s.radius];
            best = Some(([x, y, z], n, s.reflectance, s.specular));
        }
    }
    best.unwrap_or(([x, y, 0.0], [0.0, 0.0, 1.0], scene.floor_reflectance(x, y), 0.0))
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Illuminant chromaticity with `r, b ~ U(0.2, 0.45)`, `g = 1 − r − b`.
pub fn sample_illuminant(rng: &mut impl Rng) -> Illuminant {
    let r: f64 = rng.gen_range(0.2..0.45);
    let b: f64 = rng.gen_range(0.2..0.45);
    normalize_illuminant([r, 1.0 - r - b, b]).expect("chromaticity is positive")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    pub illuminant: Illuminant,
    pub scene: usize,
    pub illuminant_id: usize,
    pub position: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serialises");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a JSON-lines manifest (a directory means `<dir>/manifest.jsonl`).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path(path.as_ref());
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| {
                Error::format("manifest", format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_illuminants: usize,
    pub n_positions: usize,
    pub resolution: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 20,
            n_illuminants: 5,
            n_positions: 8,
            resolution: 64,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scenes", self.n_scenes),
            ("illuminants", self.n_illuminants),
            ("positions", self.n_positions),
            ("resolution", self.resolution),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name}: must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_scenes * self.n_illuminants * self.n_positions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: LinearImage,
    pub label: Illuminant,
}

/// Training and test samples held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

// Independent generator per (domain, index), unaffected by worker count.
fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) | index);
    rng
}

const STREAM_SCENE: u64 = 1;
const STREAM_ILLUMINANT: u64 = 2;
const STREAM_RECORD: u64 = 3;

/// Renders every record in memory; records are ordered scene, illuminant, position.
pub fn generate(params: &DatasetParams) -> Result<Vec<(DatasetRecord, LinearImage)>> {
    params.validate()?;
    let scenes: Vec<SceneSpec> = (0..params.n_scenes)
        .map(|s| SceneSpec::random(stream_rng(params.seed, STREAM_SCENE, s as u64).gen()))
        .collect();
    let illuminants: Vec<Vec<Illuminant>> = (0..params.n_scenes)
        .map(|s| {
            let mut rng = stream_rng(params.seed, STREAM_ILLUMINANT, s as u64);
            (0..params.n_illuminants).map(|_| sample_illuminant(&mut rng)).collect()
        })
        .collect();

    let out = (0..params.len())
        .into_par_iter()
        .map(|index| {
            let position = index % params.n_positions;
            let illuminant_id = (index / params.n_positions) % params.n_illuminants;
            let scene = index / (params.n_positions * params.n_illuminants);
            let mut rng = stream_rng(params.seed, STREAM_RECORD, index as u64);
            let light = LightingSpec {
                illuminant: illuminants[scene][illuminant_id],
                position,
                n_positions: params.n_positions,
                point_intensity: scenes[scene].point_intensity,
                ambient: rng.gen_range(0.05..0.3),
            };
            let (image, truth) = render(&scenes[scene], &light, params.resolution);
            let record = DatasetRecord {
                image: format!("images/s{scene:03}_i{illuminant_id}_p{position}.pfm"),
                illuminant: truth,
                scene,
                illuminant_id,
                position,
                split: if position % 2 == 0 { Split::Train } else { Split::Test },
            };
            (record, image)
        })
        .collect();
    Ok(out)
}

/// Renders the dataset into `out_dir` (`manifest.jsonl` plus `images/*.pfm`).
pub fn generate_dataset(out_dir: impl AsRef<Path>, params: &DatasetParams) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let rendered = generate(params)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    rendered
        .par_iter()
        .try_for_each(|(rec, img)| pfm::write_pfm(out_dir.join(&rec.image), img))?;
    let manifest = DatasetManifest {
        records: rendered.into_iter().map(|(r, _)| r).collect(),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    let params_path = out_dir.join("dataset.json");
    let mut f = fs::File::create(&params_path).map_err(|e| Error::io(&params_path, e))?;
    serde_json::to_writer_pretty(&mut f, params).expect("params serialise");
    writeln!(f).map_err(|e| Error::io(&params_path, e))?;
    Ok(manifest)
}

/// Splits rendered records into an in-memory dataset.
pub fn into_dataset(rendered: Vec<(DatasetRecord, LinearImage)>) -> Dataset {
    let mut ds = Dataset::default();
    for (rec, image) in rendered {
        let sample = Sample {
            image,
            label: rec.illuminant,
        };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    ds
}

/// Loads every image referenced by a manifest, relative to `root`.
pub fn load_dataset(root: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Dataset> {
    let root = root.as_ref();
    let samples: Vec<(Split, Sample)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let image = pfm::read_pfm(root.join(&r.image))?;
            Ok((
                r.split,
                Sample {
                    image,
                    label: r.illuminant,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut ds = Dataset::default();
    for (split, s) in samples {
        match split {
            Split::Train => ds.train.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}
