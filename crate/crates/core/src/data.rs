//! Seeded synthetic multi-site data.
//!
//! Each site renders its own little world: a smooth value-noise
//! background mapped through a site palette, elongated "instrument"
//! capsules, and elliptical "tissue" blobs, all placed by a stream
//! seeded from (site seed, sample seed). Nearer objects occlude farther
//! ones; segmentation labels take the nearest object's class id and
//! depth labels take its constant depth over a gently sloped background
//! plane. Sites differ in palette, class set, object statistics, and
//! task, which is the heterogeneity the protocol is exercised against.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TaskSpec;
use crate::rng::{mix_seeds, Xoshiro256StarStar};
use crate::tdf;
use crate::tensor::Tensor;

const SPLIT_SEED_TAG: u64 = 0x5350_4c49_5400;
const PALETTE_SEED_TAG: u64 = 0x50414c;
const CLASS_COLOR_SEED_TAG: u64 = 0x434f4c;

/// Per-site generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub seed: u64,
    pub task: TaskSpec,
    /// Image size `[h, w]`.
    pub size: [usize; 2],
    /// Three base colors the background noise interpolates through.
    pub palette: [[f64; 3]; 3],
    /// Noise lattice cells per axis.
    pub noise_freq: usize,
    /// Inclusive instrument count range.
    pub instrument_range: [usize; 2],
    /// Inclusive blob count range.
    pub blob_range: [usize; 2],
    /// Foreground class ids objects draw from (`1..C` for segmentation).
    pub class_pool: Vec<usize>,
}

impl SiteSpec {
    /// Derives a complete site spec from a seed, task, and image size;
    /// palette and class pool come from the seed.
    pub fn derive(seed: u64, task: TaskSpec, size: [usize; 2]) -> Result<Self> {
        task.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(mix_seeds(seed, PALETTE_SEED_TAG));
        let mut color = || {
            [
                rng.uniform_in(0.12, 0.5),
                rng.uniform_in(0.12, 0.5),
                rng.uniform_in(0.12, 0.5),
            ]
        };
        let palette = [color(), color(), color()];
        let class_pool = match task {
            TaskSpec::Segmentation { class_count } => (1..class_count).collect(),
            TaskSpec::Depth { .. } => vec![1],
        };
        Ok(Self {
            seed,
            task,
            size,
            palette,
            noise_freq: 4,
            instrument_range: [1, 4],
            blob_range: [0, 3],
            class_pool,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.size[0] < 8 || self.size[1] < 8 {
            return Err(Error::Config(format!(
                "site images must be at least 8x8, got {:?}",
                self.size
            )));
        }
        if self.instrument_range[0] < 1 || self.instrument_range[0] > self.instrument_range[1] {
            return Err(Error::Config(format!(
                "instrument range {:?} invalid",
                self.instrument_range
            )));
        }
        if self.blob_range[0] > self.blob_range[1] {
            return Err(Error::Config(format!("blob range {:?} invalid", self.blob_range)));
        }
        if self.class_pool.is_empty() {
            return Err(Error::Config("class pool must be non-empty".into()));
        }
        if let TaskSpec::Segmentation { class_count } = self.task {
            if self.class_pool.iter().any(|&c| c == 0 || c >= class_count) {
                return Err(Error::Config(format!(
                    "class pool {:?} outside 1..{}",
                    self.class_pool, class_count
                )));
            }
        }
        if self.noise_freq == 0 {
            return Err(Error::Config("noise_freq must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic shading color for a class id: golden-angle hue
    /// spacing keeps every class pair separable even at 10+ classes,
    /// with a site-specific hue offset.
    fn class_color(&self, class_id: usize) -> [f64; 3] {
        let mut rng =
            Xoshiro256StarStar::seed_from_u64(mix_seeds(self.seed, CLASS_COLOR_SEED_TAG));
        let offset = rng.uniform();
        let hue = (offset + 0.618_033_988_75 * class_id as f64).fract();
        hsv_to_rgb(hue, 0.7, 0.9)
    }
}

/// One rendered training example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[h, w, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[h, w]`: integer class ids (segmentation) or depth values.
    pub label: Tensor,
}

/// Geometry of a scene object.
#[derive(Debug, Clone)]
pub enum ObjectShape {
    /// Line segment with a radius ("instrument").
    Capsule {
        p0: (f64, f64),
        p1: (f64, f64),
        radius: f64,
    },
    /// Rotated ellipse ("tissue blob").
    Ellipse {
        center: (f64, f64),
        rx: f64,
        ry: f64,
        rotation: f64,
    },
}

impl ObjectShape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            ObjectShape::Capsule { p0, p1, radius } => {
                let (vx, vy) = (p1.0 - p0.0, p1.1 - p0.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((x - p0.0) * vx + (y - p0.1) * vy) / len2).clamp(0.0, 1.0)
                };
                let (cx, cy) = (p0.0 + t * vx, p0.1 + t * vy);
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= radius * radius
            }
            ObjectShape::Ellipse {
                center,
                rx,
                ry,
                rotation,
            } => {
                let (dx, dy) = (x - center.0, y - center.1);
                let (cos, sin) = (rotation.cos(), rotation.sin());
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0
            }
        }
    }
}

/// A placed object: geometry, class, normalized depth (0 = nearest),
/// and shading color.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub class_id: usize,
    /// Normalized depth in [0, 1); smaller is nearer to the camera.
    pub depth: f64,
    pub color: [f64; 3],
}

/// Bilinearly interpolated value-noise field over a coarse lattice.
pub struct NoiseField {
    lattice: Vec<f64>,
    freq: usize,
}

impl NoiseField {
    pub fn seeded(seed: u64, freq: usize) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let side = freq + 1;
        Self {
            lattice: (0..side * side).map(|_| rng.uniform()).collect(),
            freq,
        }
    }

    /// Value at normalized coordinates in `[0, 1]`.
    pub fn value(&self, ny: f64, nx: f64) -> f64 {
        let side = self.freq + 1;
        let fy = (ny * self.freq as f64).clamp(0.0, self.freq as f64 - 1e-9);
        let fx = (nx * self.freq as f64).clamp(0.0, self.freq as f64 - 1e-9);
        let (y0, x0) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |y: usize, x: usize| self.lattice[y * side + x];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// A fully rasterized scene, including the internals the tests probe.
pub struct RenderedScene {
    pub sample: Sample,
    /// Object index per pixel, -1 for background.
    pub object_ids: Vec<i32>,
    /// Normalized depth per pixel.
    pub depth: Vec<f64>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let i = h6 as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn palette_color(palette: &[[f64; 3]; 3], v: f64) -> [f64; 3] {
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| {
        [
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
        ]
    };
    if v < 0.5 {
        lerp(palette[0], palette[1], v * 2.0)
    } else {
        lerp(palette[1], palette[2], (v - 0.5) * 2.0)
    }
}

/// Rasterizes explicit objects over a noise background.
///
/// Objects are painted far-to-near, so the nearest object wins every
/// contested pixel; the label map records its class id (segmentation)
/// or its depth mapped into the task range (depth).
pub fn paint_scene(
    spec: &SiteSpec,
    objects: &[SceneObject],
    background: &NoiseField,
    gradient_dir: (f64, f64),
) -> Result<RenderedScene> {
    let (h, w) = (spec.size[0], spec.size[1]);
    let mut image = vec![0.0; h * w * 3];
    let mut depth = vec![0.0; h * w];
    let mut object_ids = vec![-1i32; h * w];
    let mut label = vec![0.0; h * w];

    let (depth_min, depth_max, is_depth) = match spec.task {
        TaskSpec::Depth {
            depth_min,
            depth_max,
        } => (depth_min, depth_max, true),
        TaskSpec::Segmentation { .. } => (0.0, 1.0, false),
    };
    let to_task_depth = |nd: f64| depth_min + nd * (depth_max - depth_min);

    // Background: palette-mapped noise, sloped depth plane.
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = (y as f64 / (h - 1) as f64, x as f64 / (w - 1) as f64);
            let v = background.value(ny, nx);
            let color = palette_color(&spec.palette, v);
            let p = y * w + x;
            image[p * 3..p * 3 + 3].copy_from_slice(&color);
            let slope = (gradient_dir.0 * ny + gradient_dir.1 * nx + 1.0) / 2.0;
            let nd = (0.7 + 0.2 * slope + 0.05 * v).min(1.0);
            depth[p] = nd;
            label[p] = if is_depth { to_task_depth(nd) } else { 0.0 };
        }
    }

    // Far-to-near painter's pass.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[b]
            .depth
            .partial_cmp(&objects[a].depth)
            .expect("finite depths")
            .then(a.cmp(&b))
    });
    for &oi in &order {
        let obj = &objects[oi];
        for y in 0..h {
            for x in 0..w {
                if !obj.shape.contains(y as f64, x as f64) {
                    continue;
                }
                let p = y * w + x;
                let (ny, nx) = (y as f64 / (h - 1) as f64, x as f64 / (w - 1) as f64);
                // nearer objects render brighter, so depth is readable
                // from appearance
                let shade = (0.8 + 0.2 * background.value(ny, nx)) * (1.25 - 0.7 * obj.depth);
                for c in 0..3 {
                    image[p * 3 + c] = (obj.color[c] * shade).clamp(0.0, 1.0);
                }
                depth[p] = obj.depth;
                object_ids[p] = oi as i32;
                label[p] = if is_depth {
                    to_task_depth(obj.depth)
                } else {
                    obj.class_id as f64
                };
            }
        }
    }

    Ok(RenderedScene {
        sample: Sample {
            image: Tensor::new(vec![h, w, 3], image)?,
            label: Tensor::new(vec![h, w], label)?,
        },
        object_ids,
        depth,
    })
}

/// Draws the object list for one sample from its seeded stream.
fn sample_objects(spec: &SiteSpec, rng: &mut Xoshiro256StarStar) -> Vec<SceneObject> {
    let (h, w) = (spec.size[0] as f64, spec.size[1] as f64);
    let scale = h.min(w);
    let mut objects = Vec::new();

    let n_instruments = spec.instrument_range[0]
        + rng.below(spec.instrument_range[1] - spec.instrument_range[0] + 1);
    for _ in 0..n_instruments {
        let p0 = (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h));
        let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
        let len = rng.uniform_in(0.25, 0.5) * scale;
        let p1 = (p0.0 + len * angle.cos(), p0.1 + len * angle.sin());
        let radius = rng.uniform_in(0.08, 0.14) * scale;
        let class_id = spec.class_pool[rng.below(spec.class_pool.len())];
        objects.push(SceneObject {
            shape: ObjectShape::Capsule { p0, p1, radius },
            class_id,
            depth: rng.uniform_in(0.1, 0.6),
            color: spec.class_color(class_id),
        });
    }

    let n_blobs = spec.blob_range[0] + rng.below(spec.blob_range[1] - spec.blob_range[0] + 1);
    for _ in 0..n_blobs {
        let center = (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h));
        let rx = rng.uniform_in(0.12, 0.26) * scale;
        let ry = rng.uniform_in(0.12, 0.26) * scale;
        let rotation = rng.uniform_in(0.0, std::f64::consts::PI);
        let class_id = spec.class_pool[rng.below(spec.class_pool.len())];
        objects.push(SceneObject {
            shape: ObjectShape::Ellipse {
                center,
                rx,
                ry,
                rotation,
            },
            class_id,
            depth: rng.uniform_in(0.1, 0.6),
            color: spec.class_color(class_id),
        });
    }
    objects
}

/// Renders one sample with all internals exposed.
pub fn render_scene(spec: &SiteSpec, sample_seed: u64) -> Result<RenderedScene> {
    spec.validate()?;
    // The depth plane's slope direction is a per-site constant so the
    // background depth stays predictable from pixel position.
    let mut site_rng = Xoshiro256StarStar::seed_from_u64(mix_seeds(spec.seed, PALETTE_SEED_TAG));
    let angle = site_rng.uniform_in(0.0, std::f64::consts::TAU);
    let gradient_dir = (angle.sin(), angle.cos());
    let mut rng = Xoshiro256StarStar::seed_from_u64(mix_seeds(spec.seed, sample_seed));
    let noise = NoiseField::seeded(rng.next_u64(), spec.noise_freq);
    let objects = sample_objects(spec, &mut rng);
    paint_scene(spec, &objects, &noise, gradient_dir)
}

/// Renders one sample: a pure function of `(spec, sample_seed)`.
pub fn render_sample(spec: &SiteSpec, sample_seed: u64) -> Result<Sample> {
    Ok(render_scene(spec, sample_seed)?.sample)
}

/// Train/eval split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Seeded 80/20 split: a fifth of the samples (at least one, at most
/// n-1) are held out for evaluation.
pub fn assign_split(spec_seed: u64, n: usize) -> Vec<Split> {
    let mut split = vec![Split::Train; n];
    if n < 2 {
        return split;
    }
    let eval_count = ((0.2 * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    Xoshiro256StarStar::seed_from_u64(mix_seeds(spec_seed, SPLIT_SEED_TAG)).shuffle(&mut order);
    for &i in order.iter().take(eval_count) {
        split[i] = Split::Eval;
    }
    split
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    pub label: String,
    pub image_sha256: String,
    pub label_sha256: String,
}

/// On-disk description of a generated site dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SiteSpec,
    pub sample_count: usize,
    pub split: Vec<Split>,
    pub files: Vec<SampleFiles>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Generates `n` samples into `out_dir` with an accompanying manifest.
pub fn generate_site_dataset(spec: &SiteSpec, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let split = assign_split(spec.seed, n);
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let sample = render_sample(spec, i as u64)?;
        let image_name = format!("sample_{:04}.image.tdf", i);
        let label_name = format!("sample_{:04}.label.tdf", i);
        let image_path = out_dir.join(&image_name);
        let label_path = out_dir.join(&label_name);
        tdf::write_tensor(&image_path, &sample.image)?;
        tdf::write_tensor(&label_path, &sample.label)?;
        files.push(SampleFiles {
            image_sha256: file_sha256(&image_path)?,
            label_sha256: file_sha256(&label_path)?,
            image: image_name,
            label: label_name,
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        sample_count: n,
        split,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Returns true when `out_dir` already holds a dataset generated from
/// exactly this spec and count, with every checksum intact.
pub fn dataset_up_to_date(spec: &SiteSpec, n: usize, out_dir: &Path) -> Result<bool> {
    let manifest_path = out_dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(false);
    }
    let manifest: DatasetManifest = match serde_json::from_str(&fs::read_to_string(&manifest_path)?)
    {
        Ok(m) => m,
        Err(_) => return Ok(false),
    };
    if &manifest.spec != spec || manifest.sample_count != n {
        return Ok(false);
    }
    for entry in &manifest.files {
        for (name, want) in [
            (&entry.image, &entry.image_sha256),
            (&entry.label, &entry.label_sha256),
        ] {
            let path = out_dir.join(name);
            if !path.exists() || &file_sha256(&path)? != want {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// A dataset loaded back into memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl LoadedDataset {
    pub fn train_indices(&self) -> Vec<usize> {
        self.manifest
            .split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Split::Train)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        self.manifest
            .split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Split::Eval)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Loads a generated dataset from disk.
pub fn load_site_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingInput(format!(
            "no dataset manifest at {}",
            manifest_path.display()
        )));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for entry in &manifest.files {
        samples.push(Sample {
            image: tdf::read_tensor(&dir.join(&entry.image))?,
            label: tdf::read_tensor(&dir.join(&entry.label))?,
        });
    }
    Ok(LoadedDataset { manifest, samples })
}

/// Builds an in-memory dataset without touching the filesystem.
pub fn build_dataset_in_memory(spec: &SiteSpec, n: usize) -> Result<LoadedDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    let split = assign_split(spec.seed, n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(render_sample(spec, i as u64)?);
    }
    Ok(LoadedDataset {
        manifest: DatasetManifest {
            spec: spec.clone(),
            sample_count: n,
            split,
            files: Vec::new(),
        },
        samples,
    })
}

/// Convenience directory name for a site's data.
pub fn site_dir(root: &Path, site_index: usize) -> PathBuf {
    root.join(format!("site{}", site_index))
}
