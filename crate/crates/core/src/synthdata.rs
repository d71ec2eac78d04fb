//! Synthetic task-oriented segmentation scenes and the guidance table that
//! stands in for the language model's `<SEG>` embedding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{vltp1, Tensor};
use crate::objectives::derive_gt_patch_labels;
use crate::params::ParamStore;
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    fn channel(self) -> usize {
        self as usize
    }
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::Cross];
const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

/// An object occupying the `size × size` box with top-left corner `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

impl Object {
    /// Whether pixel `(py, px)` is covered by the object.
    pub fn covers(&self, py: usize, px: usize) -> bool {
        if py < self.y || px < self.x || py >= self.y + self.size || px >= self.x + self.size {
            return false;
        }
        let (dy, dx, s) = (py - self.y, px - self.x, self.size);
        match self.shape {
            Shape::Square => true,
            Shape::Disk => {
                // centre at (s−1)/2, radius s/2, in doubled coordinates
                let cy = 2 * dy as i64 - (s as i64 - 1);
                let cx = 2 * dx as i64 - (s as i64 - 1);
                cy * cy + cx * cx <= (s * s) as i64
            }
            Shape::Cross => {
                let t = (s / 3).max(1);
                let lo = (s - t) / 2;
                (lo..lo + t).contains(&dy) || (lo..lo + t).contains(&dx)
            }
        }
    }

    fn overlaps(&self, other: &Object, gap: usize) -> bool {
        let sep = |a: usize, sa: usize, b: usize, sb: usize| a + sa + gap <= b || b + sb + gap <= a;
        !(sep(self.y, self.size, other.y, other.size) || sep(self.x, self.size, other.x, other.size))
    }
}

/// Attribute predicates selecting the objects a task asks for.
pub const TASKS: [&str; 8] = [
    "all disks",
    "all squares",
    "all crosses",
    "all squares or crosses",
    "all red objects",
    "all green objects",
    "all blue objects",
    "all objects that are not red",
];

pub fn task_matches(task: usize, obj: &Object) -> Result<bool> {
    Ok(match task {
        0 => obj.shape == Shape::Disk,
        1 => obj.shape == Shape::Square,
        2 => obj.shape == Shape::Cross,
        3 => obj.shape != Shape::Disk,
        4 => obj.color == Color::Red,
        5 => obj.color == Color::Green,
        6 => obj.color == Color::Blue,
        7 => obj.color != Color::Red,
        _ => return Err(Error::UnknownTask(task)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Tasks emitted per image.
    pub tasks_per_image: usize,
    /// Per-sample bounds on the positive-pixel fraction.
    pub min_positive: f64,
    pub max_positive: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch_size: 4,
            min_objects: 2,
            max_objects: 4,
            min_size: 6,
            max_size: 11,
            tasks_per_image: 2,
            min_positive: 0.05,
            max_positive: 0.6,
            max_retries: 1000,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        crate::backbone::patch_grid_length(self.height, self.width, self.patch_size)?;
        let ok = self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.min_size >= 3
            && self.min_size <= self.max_size
            && self.max_size <= self.height.min(self.width)
            && self.tasks_per_image >= 1
            && self.min_positive <= self.max_positive;
        if ok {
            Ok(())
        } else {
            Err(Error::Scene(format!("invalid scene configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TosSample {
    pub image_id: usize,
    pub task_id: usize,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H×W`, 0/1.
    pub mask: Tensor,
    /// Patch labels, length `N`.
    pub labels: Tensor,
    pub objects: Vec<Object>,
}

/// Union of the task's matching objects as a 0/1 `H×W` mask.
pub fn rasterize_mask(objects: &[Object], task: usize, height: usize, width: usize) -> Result<Tensor> {
    let mut data = vec![0f32; height * width];
    for obj in objects {
        if !task_matches(task, obj)? {
            continue;
        }
        for y in obj.y..obj.y + obj.size {
            for x in obj.x..obj.x + obj.size {
                if obj.covers(y, x) {
                    data[y * width + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![height, width], data)
}

fn render(objects: &[Object], cfg: &SceneConfig, rng: &mut SplitMix64) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut data: Vec<f32> = (0..3 * h * w).map(|_| rng.uniform(0.0, 0.1)).collect();
    for obj in objects {
        let level = rng.uniform(0.8, 1.0);
        for y in obj.y..obj.y + obj.size {
            for x in obj.x..obj.x + obj.size {
                if obj.covers(y, x) {
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = if c == obj.color.channel() { level } else { rng.uniform(0.0, 0.1) };
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

fn place_objects(cfg: &SceneConfig, rng: &mut SplitMix64) -> Option<Vec<Object>> {
    let count = rng.range(cfg.min_objects, cfg.max_objects);
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..50 {
            let size = rng.range(cfg.min_size, cfg.max_size);
            let obj = Object {
                shape: SHAPES[rng.below(3)],
                color: COLORS[rng.below(3)],
                y: rng.range(0, cfg.height - size),
                x: rng.range(0, cfg.width - size),
                size,
            };
            if objects.iter().all(|o| !o.overlaps(&obj, 1)) {
                objects.push(obj);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Scene for image `image_id` and the tasks it is emitted under. Scenes that
/// cannot be placed, or that lack enough tasks with distinct, balanced
/// masks, are redrawn from the same stream.
fn generate_image(seed: u64, image_id: usize, cfg: &SceneConfig, tasks: usize) -> Result<Vec<TosSample>> {
    let mut rng = SplitMix64::indexed(seed, "scene", image_id as u64);
    let pixels = (cfg.height * cfg.width) as f64;
    for _ in 0..cfg.max_retries {
        let Some(objects) = place_objects(cfg, &mut rng) else { continue };
        let mut candidates: Vec<(usize, Tensor)> = Vec::new();
        for task in 0..tasks {
            let mask = rasterize_mask(&objects, task, cfg.height, cfg.width)?;
            let frac = mask.data().iter().filter(|&&v| v > 0.0).count() as f64 / pixels;
            let distinct = candidates.iter().all(|(_, m)| m != &mask);
            if frac >= cfg.min_positive && frac <= cfg.max_positive && distinct {
                candidates.push((task, mask));
            }
        }
        if candidates.len() < cfg.tasks_per_image {
            continue;
        }
        rng.shuffle(&mut candidates);
        candidates.truncate(cfg.tasks_per_image);
        candidates.sort_by_key(|(t, _)| *t);
        let image = render(&objects, cfg, &mut rng);
        return candidates
            .into_iter()
            .map(|(task_id, mask)| {
                Ok(TosSample {
                    image_id,
                    task_id,
                    image: image.clone(),
                    labels: derive_gt_patch_labels(&mask, cfg.patch_size)?,
                    mask,
                    objects: objects.clone(),
                })
            })
            .collect();
    }
    Err(Error::Scene(format!(
        "image {image_id}: no valid scene after {} attempts",
        cfg.max_retries
    )))
}

/// `n_samples` samples over the first `tasks` predicates, each image emitted
/// under `tasks_per_image` different tasks with different masks.
pub fn generate(seed: u64, n_samples: usize, tasks: usize, cfg: &SceneConfig) -> Result<Vec<TosSample>> {
    cfg.validate()?;
    if tasks < cfg.tasks_per_image || tasks > TASKS.len() {
        return Err(Error::Scene(format!(
            "task count {tasks} must lie in [{}, {}]",
            cfg.tasks_per_image,
            TASKS.len()
        )));
    }
    let mut samples = Vec::with_capacity(n_samples);
    let mut image_id = 0;
    while samples.len() < n_samples {
        samples.extend(generate_image(seed, image_id, cfg, tasks)?);
        image_id += 1;
    }
    samples.truncate(n_samples);
    Ok(samples)
}

pub fn positive_fraction(samples: &[TosSample]) -> f64 {
    let total: usize = samples.iter().map(|s| s.mask.len()).sum();
    let pos: usize = samples.iter().map(|s| s.mask.data().iter().filter(|&&v| v > 0.0).count()).sum();
    if total == 0 {
        0.0
    } else {
        pos as f64 / total as f64
    }
}

/// The per-task guidance vectors. Row `t` starts from its own PRNG stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceProvider {
    table: Tensor,
    pub trainable: bool,
}

pub const GUIDE_PARAM: &str = "guide.table";

impl GuidanceProvider {
    pub fn new(num_tasks: usize, dim: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(num_tasks * dim);
        for t in 0..num_tasks {
            let mut rng = SplitMix64::indexed(seed, "guide", t as u64);
            data.extend((0..dim).map(|_| rng.uniform(-1.0, 1.0)));
        }
        Self {
            table: Tensor::from_parts(vec![num_tasks, dim], data),
            trainable: true,
        }
    }

    pub fn from_table(table: Tensor, trainable: bool) -> Result<Self> {
        table.dims2()?;
        if table.rank() != 2 {
            return Err(Error::Format("guidance table must be tasks × dim".into()));
        }
        Ok(Self { table, trainable })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Self::from_table(params.get(GUIDE_PARAM)?.clone(), true)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn num_tasks(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn guidance_for(&self, task: usize) -> Result<&[f32]> {
        if task >= self.num_tasks() {
            return Err(Error::UnknownTask(task));
        }
        Ok(self.table.row(task))
    }

    pub fn install(&self, params: &mut ParamStore) {
        params.insert(GUIDE_PARAM, self.table.clone());
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n_samples: usize,
    pub n_images: usize,
    pub num_tasks: usize,
    pub guide_dim: usize,
    pub scene: SceneConfig,
    pub tasks: Vec<String>,
    pub task_ids: Vec<usize>,
    pub image_ids: Vec<usize>,
    pub positive_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<TosSample>,
    pub guidance: GuidanceProvider,
}

impl Dataset {
    pub fn generate(seed: u64, n_samples: usize, tasks: usize, guide_dim: usize, scene: SceneConfig) -> Result<Self> {
        let samples = generate(seed, n_samples, tasks, &scene)?;
        let meta = DatasetMeta {
            seed,
            n_samples: samples.len(),
            n_images: samples.last().map_or(0, |s| s.image_id + 1),
            num_tasks: tasks,
            guide_dim,
            tasks: TASKS[..tasks].iter().map(|s| s.to_string()).collect(),
            task_ids: samples.iter().map(|s| s.task_id).collect(),
            image_ids: samples.iter().map(|s| s.image_id).collect(),
            positive_fraction: positive_fraction(&samples),
            scene,
        };
        let guidance = GuidanceProvider::new(tasks, guide_dim, seed);
        Ok(Self { meta, samples, guidance })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&meta_path, e))?;
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
        let mut tensors = Vec::with_capacity(3 * self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            tensors.push((format!("img/{i}"), s.image.clone()));
            tensors.push((format!("mask/{i}"), s.mask.clone()));
            tensors.push((format!("labels/{i}"), s.labels.clone()));
        }
        vltp1::write_file(&dir.join("samples.vltp1"), &tensors)?;
        vltp1::write_file(&dir.join("tasks.vltp1"), &[(GUIDE_PARAM.to_string(), self.guidance.table.clone())])
    }

    /// Loads a saved dataset. Object lists are not stored and come back
    /// empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        let mut tensors = vltp1::read_file(&dir.join("samples.vltp1"))?.into_iter();
        let mut samples = Vec::with_capacity(meta.n_samples);
        for i in 0..meta.n_samples {
            let mut next = |kind: &str| -> Result<Tensor> {
                match tensors.next() {
                    Some((name, t)) if name == format!("{kind}/{i}") => Ok(t),
                    other => Err(Error::Format(format!(
                        "samples.vltp1: expected {kind}/{i}, found {:?}",
                        other.map(|(n, _)| n)
                    ))),
                }
            };
            let (image, mask, labels) = (next("img")?, next("mask")?, next("labels")?);
            let task_id = *meta.task_ids.get(i).ok_or_else(|| Error::Format(format!("meta.json: no task for sample {i}")))?;
            let image_id = *meta.image_ids.get(i).ok_or_else(|| Error::Format(format!("meta.json: no image for sample {i}")))?;
            samples.push(TosSample {
                image_id,
                task_id,
                image,
                mask,
                labels,
                objects: Vec::new(),
            });
        }
        let table = vltp1::read_file(&dir.join("tasks.vltp1"))?
            .into_iter()
            .find(|(n, _)| n == GUIDE_PARAM)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("tasks.vltp1: missing {GUIDE_PARAM}")))?;
        Ok(Self {
            meta,
            samples,
            guidance: GuidanceProvider::from_table(table, true)?,
        })
    }
}
