//! Seeded synthetic multi-domain corpus: each group has its own background
//! texture family, each task within a group its own foreground shape.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::{CorpusManifest, ImageRecord, TaskInfo};
use crate::dataset::volume::{Image, Mask, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    SmoothField,
    Stripes,
    Checker,
    Speckle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
    Annulus,
    Triangle,
    Cross,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::SmoothField, Texture::Stripes, Texture::Checker, Texture::Speckle];
}

impl Shape {
    /// Ordered so that neighbours differ strongly in outline and topology.
    pub const ALL: [Shape; 5] = [Shape::Ellipse, Shape::Cross, Shape::Annulus, Shape::Triangle, Shape::Rectangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTask {
    pub group_id: u32,
    pub texture: Texture,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub images_per_task: usize,
    pub image_size: usize,
    pub seed: u64,
    /// One entry per task, in task-id order.
    pub tasks: Vec<SynthTask>,
    /// Standard deviation of the background texture.
    pub texture_amplitude: f64,
    /// Intensity added inside the foreground object and the distractors.
    pub foreground_offset: f64,
    pub noise_sigma: f64,
    /// Unlabeled objects per image (0 by default), drawn from the shapes
    /// that no task of the image's group uses.
    pub distractors: usize,
}

impl SynthSpec {
    /// Tasks are dealt to groups in contiguous blocks; group `g` uses
    /// texture `g mod 4` and its tasks take consecutive shapes, so a group
    /// holds at most five tasks.
    pub fn new(num_tasks: usize, num_groups: usize, images_per_task: usize, image_size: usize, seed: u64) -> Result<Self> {
        if num_groups == 0 || num_tasks < num_groups {
            return Err(Error::InvalidArgument(format!(
                "need num_tasks >= num_groups >= 1, got {num_tasks} tasks and {num_groups} groups"
            )));
        }
        if num_tasks.div_ceil(num_groups) > Shape::ALL.len() {
            return Err(Error::InvalidArgument(format!(
                "{num_tasks} tasks in {num_groups} groups puts more than {} tasks in a group",
                Shape::ALL.len()
            )));
        }
        let mut tasks = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            let g = t * num_groups / num_tasks;
            let first = (0..num_tasks).position(|u| u * num_groups / num_tasks == g).expect("group has a task");
            tasks.push(SynthTask {
                group_id: g as u32 + 1,
                texture: Texture::ALL[g % Texture::ALL.len()],
                shape: Shape::ALL[t - first],
            });
        }
        let spec = Self {
            images_per_task,
            image_size,
            seed,
            tasks,
            texture_amplitude: 0.1,
            foreground_offset: 0.2,
            noise_sigma: 0.03,
            distractors: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 4 tasks in 2 groups, 400 images of 96 x 96 per task.
    pub fn desk(seed: u64) -> Self {
        Self::new(4, 2, 400, 96, seed).expect("valid")
    }

    pub fn num_groups(&self) -> usize {
        self.tasks.iter().map(|t| t.group_id).max().unwrap_or(0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::InvalidArgument(format!("image size {} is below the minimum of 32", self.image_size)));
        }
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("no tasks".into()));
        }
        let g = self.num_groups();
        for gid in 1..=g as u32 {
            let members: Vec<&SynthTask> = self.tasks.iter().filter(|t| t.group_id == gid).collect();
            if members.is_empty() {
                return Err(Error::InvalidArgument(format!("group {gid} has no task")));
            }
            if members.iter().any(|t| t.texture != members[0].texture) {
                return Err(Error::InvalidArgument(format!("tasks of group {gid} use different textures")));
            }
            for (i, a) in members.iter().enumerate() {
                if members[i + 1..].iter().any(|b| b.shape == a.shape) {
                    return Err(Error::InvalidArgument(format!("two tasks of group {gid} share a shape")));
                }
            }
        }
        if !(self.texture_amplitude >= 0.0 && self.noise_sigma >= 0.0 && self.foreground_offset > 0.0) {
            return Err(Error::InvalidArgument("texture amplitude and noise must be >= 0, offset > 0".into()));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Vec<TaskInfo> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TaskInfo {
                id: i as u32 + 1,
                name: format!("synthetic {:?} on {:?}", t.shape, t.texture).to_lowercase(),
                num_classes: 1,
                group_id: t.group_id,
                source_note: String::new(),
            })
            .collect()
    }
}

/// Zero-mean, roughly unit-variance background pattern.
fn texture(kind: Texture, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let s = n as f64;
    match kind {
        Texture::SmoothField => {
            let waves: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    let f = rng.random_range(0.5..2.5);
                    let a = rng.random_range(0.0..2.0 * PI);
                    (f * a.cos(), f * a.sin(), rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            let norm = (waves.len() as f64 / 2.0).sqrt();
            for r in 0..n {
                for c in 0..n {
                    let (y, x) = (r as f64 / s, c as f64 / s);
                    out[r * n + c] =
                        waves.iter().map(|&(fx, fy, p)| (2.0 * PI * (fx * x + fy * y) + p).cos()).sum::<f64>() / norm;
                }
            }
        }
        Texture::Stripes => {
            let f = rng.random_range(5.0..9.0);
            let a: f64 = rng.random_range(0.0..PI);
            let p = rng.random_range(0.0..2.0 * PI);
            for r in 0..n {
                for c in 0..n {
                    let (y, x) = (r as f64 / s, c as f64 / s);
                    out[r * n + c] = 2f64.sqrt() * (2.0 * PI * f * (x * a.cos() + y * a.sin()) + p).sin();
                }
            }
        }
        Texture::Checker => {
            let f = rng.random_range(3.0..6.0);
            let a: f64 = rng.random_range(0.0..PI / 2.0);
            let (p, q) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            for r in 0..n {
                for c in 0..n {
                    let (y, x) = (r as f64 / s, c as f64 / s);
                    let u = x * a.cos() + y * a.sin();
                    let v = -x * a.sin() + y * a.cos();
                    out[r * n + c] = 2.0 * (2.0 * PI * f * u + p).sin() * (2.0 * PI * f * v + q).sin();
                }
            }
        }
        Texture::Speckle => {
            let white: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            acc += white[((r + dr) % n) * n + (c + dc) % n];
                        }
                    }
                    // sum of 4 U(-1,1) has variance 4/3
                    out[r * n + c] = acc / (4.0f64 / 3.0).sqrt();
                }
            }
        }
    }
    out
}

/// One randomly posed object.
#[derive(Debug, Clone, Copy)]
struct Placement {
    kind: Shape,
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    a: f64,
    b: f64,
}

impl Placement {
    /// Pose with the centre drawn from `centre` (a fraction of the side).
    fn sample(kind: Shape, n: usize, centre: std::ops::Range<f64>, rng: &mut ChaCha8Rng) -> Self {
        let s = n as f64;
        let cy = rng.random_range(centre.clone()) * s;
        let cx = rng.random_range(centre) * s;
        let theta: f64 = rng.random_range(0.0..PI);
        let a = rng.random_range(0.13..0.24) * s;
        let b = rng.random_range(0.13..0.24) * s;
        Self { kind, cy, cx, cos: theta.cos(), sin: theta.sin(), a, b }
    }

    /// Radius of a disc that holds the object in any orientation.
    fn extent(&self) -> f64 {
        1.2 * self.a.max(self.b)
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let (a, b) = (self.a, self.b);
        let (dy, dx) = (r as f64 + 0.5 - self.cy, c as f64 + 0.5 - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        match self.kind {
            Shape::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            Shape::Rectangle => u.abs() <= 0.85 * a && v.abs() <= 0.85 * b,
            Shape::Annulus => {
                let rad = (u * u + v * v).sqrt();
                let outer = a.max(b);
                rad <= outer && rad >= 0.55 * outer
            }
            Shape::Triangle => {
                // isoceles, apex along +v
                let h = 1.1 * a.max(b);
                v <= h / 2.0 && v >= -h / 2.0 && u.abs() <= (h / 2.0 - v) * 0.6
            }
            Shape::Cross => {
                let arm = 0.35 * a.min(b);
                let len = a.max(b);
                (u.abs() <= arm && v.abs() <= len) || (v.abs() <= arm && u.abs() <= len)
            }
        }
    }
}

/// Up to `count` unlabeled objects whose shapes no task of the group uses,
/// at most half cut off by the frame and not touching `target` or each other.
fn distractors(kinds: &[Shape], count: usize, target: &Placement, n: usize, rng: &mut ChaCha8Rng) -> Vec<Placement> {
    let mut placed: Vec<Placement> = Vec::new();
    if kinds.is_empty() {
        return placed;
    }
    let s = n as f64;
    for _ in 0..count {
        let kind = kinds[rng.random_range(0..kinds.len())];
        for _ in 0..MAX_PLACEMENT_TRIES {
            let p = Placement::sample(kind, n, 0.0..1.0, rng);
            let e = p.extent();
            let (lo, hi) = (0.5 * e, s - 0.5 * e);
            let inside = (lo..=hi).contains(&p.cy) && (lo..=hi).contains(&p.cx);
            let clear = std::iter::once(target)
                .chain(&placed)
                .all(|q| ((p.cy - q.cy).powi(2) + (p.cx - q.cx).powi(2)).sqrt() > e + q.extent() + 2.0);
            if inside && clear {
                placed.push(p);
                break;
            }
        }
    }
    placed
}

const MAX_PLACEMENT_TRIES: usize = 50;

/// Image and mask for image `index` of task `task_id` (1-based).
pub fn synthesize(spec: &SynthSpec, task_id: u32, index: usize) -> Result<(Image, Mask)> {
    let t = spec
        .tasks
        .get(task_id as usize - 1)
        .ok_or_else(|| Error::InvalidArgument(format!("task {task_id} not in spec")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((task_id as u64) << 40 | index as u64);
    let n = spec.image_size;
    let base = rng.random_range(0.35..0.45);
    let tex = texture(t.texture, n, &mut rng);
    let target = Placement::sample(t.shape, n, 0.32..0.68, &mut rng);
    let unused: Vec<Shape> = Shape::ALL
        .into_iter()
        .filter(|k| !spec.tasks.iter().any(|u| u.group_id == t.group_id && u.shape == *k))
        .collect();
    let clutter = distractors(&unused, spec.distractors, &target, n, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    let mut data = Vec::with_capacity(n * n);
    let mut labels = Vec::with_capacity(n * n);
    for (i, tv) in tex.iter().enumerate() {
        let (r, c) = (i / n, i % n);
        let inside = target.contains(r, c);
        let mut v = base + spec.texture_amplitude * tv;
        if inside || clutter.iter().any(|p| p.contains(r, c)) {
            v += spec.foreground_offset;
        }
        if spec.noise_sigma > 0.0 {
            v += noise.sample(&mut rng);
        }
        data.push(v.clamp(0.0, 1.0) as f32);
        labels.push(inside as u8);
    }
    Ok((Image::new(n, n, data)?, Mask::new(n, n, labels)?))
}

pub fn record_id(task_id: u32, index: usize) -> String {
    format!("t{task_id}-{index:05}")
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mut records = Vec::with_capacity(spec.tasks.len() * spec.images_per_task);
    for task_id in 1..=spec.tasks.len() as u32 {
        for index in 0..spec.images_per_task {
            let (image, mask) = synthesize(spec, task_id, index)?;
            let id = record_id(task_id, index);
            let image_rel = format!("images/{id}.rvol");
            let mask_rel = format!("masks/{id}.rvol");
            Volume::from_image(&image).write(out_dir.join(&image_rel))?;
            let mask_vol = Volume::new([1, mask.height, mask.width], mask.data.iter().map(|&v| v as f32).collect())?;
            mask_vol.write(out_dir.join(&mask_rel))?;
            records.push(ImageRecord {
                id,
                image: image_rel,
                mask: Some(mask_rel),
                task_id,
                group_id: 0,
                split: None,
                labeled: false,
            });
        }
    }
    let manifest = CorpusManifest::new(spec.taxonomy(), records, out_dir.to_path_buf())?;
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_taxonomy() {
        let s = SynthSpec::desk(0);
        assert_eq!(s.tasks.len(), 4);
        assert_eq!(s.num_groups(), 2);
        assert_eq!(s.tasks[0].group_id, s.tasks[1].group_id);
        assert_eq!(s.tasks[0].texture, s.tasks[1].texture);
        assert_ne!(s.tasks[0].shape, s.tasks[1].shape);
        assert_ne!(s.tasks[1].texture, s.tasks[2].texture);
    }

    #[test]
    fn rejects_small_images_and_bad_counts() {
        assert!(SynthSpec::new(4, 2, 10, 31, 0).is_err());
        assert!(SynthSpec::new(1, 2, 10, 64, 0).is_err());
        assert!(SynthSpec::new(2, 0, 10, 64, 0).is_err());
    }

    #[test]
    fn deterministic_and_in_range() {
        let s = SynthSpec::new(4, 2, 3, 32, 5).unwrap();
        let (a, ma) = synthesize(&s, 3, 2).unwrap();
        let (b, mb) = synthesize(&s, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ma.data.contains(&1) && ma.data.contains(&0));
        let (c, _) = synthesize(&s, 3, 1).unwrap();
        assert_ne!(a, c);
    }
}
