//! Deterministic synthetic BEV scenes.
//!
//! A scene is a set of rotated boxes plus simulated point hits on them and on
//! background clutter. The teacher input rasterizes the hits directly; the
//! student input displaces each hit radially by a range-proportional amount
//! and blurs the result, a crude analog of lifting camera features with
//! noisy depth.

mod dataset;
mod format;

pub use dataset::{
    generate_dataset, load_dataset, sample_seed, write_dataset, Dataset, Manifest, MANIFEST_FILE,
    THREADS_ENV,
};
pub use format::{read_scene, write_scene, SCENE_MAGIC, SCENE_VERSION};

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, Result};
use crate::geometry::{rasterize_boxes, render_heatmap, BevBox, EgoPose, GridSpec, Heatmap};
use crate::tensor::Tensor;

const STREAM_WORLD: u64 = 0;
const STREAM_EGO: u64 = 1;
const STREAM_TEACHER_HEATMAP: u64 = 2;
const STREAM_FRAME: u64 = 16;

/// Counter-based generator for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Uniform size ranges `[lo, hi]` in meters for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub length: [f64; 2],
    pub width: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Half side of the square grid in meters.
    pub half_extent: f64,
    /// Cells per side.
    pub cells: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// One entry per class.
    pub class_sizes: Vec<SizeRange>,
    /// Boxes overlapping an earlier box by more than this IoU are redrawn.
    pub max_iou: f64,
    /// Mean simulated hits per square meter of box footprint.
    pub points_per_m2: f64,
    /// Mean clutter hits per grid cell.
    pub clutter_per_cell: f64,
    /// Expected number of spurious blobs in a simulated teacher heatmap.
    pub fp_rate: f64,
    /// Probability a simulated teacher heatmap drops an object.
    pub miss_rate: f64,
    /// Gaussian blur of the student input, in cells.
    pub student_blur: f64,
    /// Standard deviation of the relative radial displacement of student hits.
    pub depth_noise: f64,
    pub frames: usize,
    /// Ego displacement per frame in meters, drawn uniformly from `[lo, hi]`.
    pub ego_speed: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_extent: 16.0,
            cells: 32,
            min_boxes: 2,
            max_boxes: 8,
            class_sizes: vec![
                SizeRange {
                    length: [3.5, 7.0],
                    width: [1.8, 2.8],
                },
                SizeRange {
                    length: [0.6, 1.2],
                    width: [0.5, 1.0],
                },
            ],
            max_iou: 0.5,
            points_per_m2: 3.0,
            clutter_per_cell: 0.03,
            fp_rate: 1.5,
            miss_rate: 0.15,
            student_blur: 1.0,
            depth_noise: 0.06,
            frames: 1,
            ego_speed: [0.0, 2.0],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_extent > 0.0) || self.cells == 0 {
            return bad_config("grid needs a positive extent and at least one cell");
        }
        if self.min_boxes > self.max_boxes {
            return bad_config("min_boxes exceeds max_boxes");
        }
        if self.class_sizes.is_empty() {
            return bad_config("at least one class size range is required");
        }
        for (k, s) in self.class_sizes.iter().enumerate() {
            for r in [s.length, s.width] {
                if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                    return bad_config(format!(
                        "class {k}: size range {r:?} must satisfy 0 < lo ≤ hi"
                    ));
                }
            }
        }
        for (name, p) in [("fp_rate", self.fp_rate)] {
            if !(p >= 0.0 && p.is_finite()) {
                return bad_config(format!("{name} must be a non-negative rate"));
            }
        }
        for (name, p) in [("miss_rate", self.miss_rate), ("max_iou", self.max_iou)] {
            if !(0.0..=1.0).contains(&p) {
                return bad_config(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("points_per_m2", self.points_per_m2),
            ("clutter_per_cell", self.clutter_per_cell),
            ("student_blur", self.student_blur),
            ("depth_noise", self.depth_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad_config(format!("{name} must be non-negative"));
            }
        }
        if self.frames == 0 {
            return bad_config("frames must be at least 1");
        }
        if !(self.ego_speed[0] >= 0.0 && self.ego_speed[1] >= self.ego_speed[0]) {
            return bad_config("ego_speed must satisfy 0 ≤ lo ≤ hi");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec<f64>> {
        GridSpec::centered(self.half_extent, self.cells)
    }

    pub fn classes(&self) -> usize {
        self.class_sizes.len()
    }
}

/// One synthetic frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub grid: GridSpec<f64>,
    pub boxes: Vec<BevBox<f64>>,
    /// Point density and occupancy, `2×H×W`.
    pub teacher_input: Tensor<f64>,
    /// Degraded density and occupancy, `2×H×W`.
    pub student_input: Tensor<f64>,
    pub gt_heatmap: Heatmap<f64>,
    pub ego_pose: EgoPose<f64>,
    pub seed: u64,
}

impl SceneSample {
    pub fn classes(&self) -> usize {
        self.gt_heatmap.classes()
    }
}

/// Static world content shared by all frames of a sequence.
struct World {
    boxes: Vec<BevBox<f64>>,
    points: Vec<(f64, f64)>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

/// IoU estimated on a 16×16 lattice over the first box.
fn lattice_iou(a: &BevBox<f64>, b: &BevBox<f64>) -> f64 {
    const N: usize = 16;
    let (s, c) = a.yaw.sin_cos();
    let mut inside = 0;
    for i in 0..N {
        for j in 0..N {
            let u = ((i as f64 + 0.5) / N as f64 - 0.5) * a.length;
            let v = ((j as f64 + 0.5) / N as f64 - 0.5) * a.width;
            if b.contains(a.cx + c * u - s * v, a.cy + s * u + c * v) {
                inside += 1;
            }
        }
    }
    let inter = inside as f64 / (N * N) as f64 * a.area();
    inter / (a.area() + b.area() - inter)
}

fn sample_world(cfg: &SceneConfig, seed: u64, travel: f64) -> World {
    let mut rng = stream_rng(seed, STREAM_WORLD);
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let lo = -cfg.half_extent + 1.0;
    let hi = cfg.half_extent - 1.0;
    let mut boxes: Vec<BevBox<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..50 {
            let class_id = rng.random_range(0..cfg.classes());
            let size = &cfg.class_sizes[class_id];
            let length = uniform(&mut rng, size.length);
            let width = uniform(&mut rng, size.width);
            let yaw = rng.random_range(-PI..PI);
            let cx = rng.random_range(lo..hi + travel);
            let cy = rng.random_range(lo..hi);
            let b = BevBox::new(cx, cy, length, width, yaw, class_id).expect("positive size");
            if boxes
                .iter()
                .all(|o| lattice_iou(&b, o) <= cfg.max_iou && lattice_iou(o, &b) <= cfg.max_iou)
            {
                boxes.push(b);
                break;
            }
        }
    }
    let mut points = Vec::new();
    for b in &boxes {
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..poisson(&mut rng, cfg.points_per_m2 * b.area()).max(1) {
            let u = rng.random_range(-0.5..0.5) * b.length;
            let v = rng.random_range(-0.5..0.5) * b.width;
            points.push((b.cx + c * u - s * v, b.cy + s * u + c * v));
        }
    }
    let cells = (cfg.cells * cfg.cells) as f64 * (1.0 + travel / (2.0 * cfg.half_extent));
    for _ in 0..poisson(&mut rng, cfg.clutter_per_cell * cells) {
        let x = rng.random_range(-cfg.half_extent..cfg.half_extent + travel);
        let y = rng.random_range(-cfg.half_extent..cfg.half_extent);
        points.push((x, y));
    }
    World { boxes, points }
}

fn quantize(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v as f32 as f64)
}

fn rasterize_points(points: impl Iterator<Item = (f64, f64)>, grid: &GridSpec<f64>) -> Tensor<f64> {
    let (h, w) = grid.shape();
    let mut counts = vec![0u32; h * w];
    for (x, y) in points {
        if let Some((r, c)) = grid.cell_of(x, y) {
            counts[r * w + c] += 1;
        }
    }
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(counts.iter().map(|&n| (n as f64).ln_1p()));
    data.extend(counts.iter().map(|&n| if n > 0 { 1.0 } else { 0.0 }));
    Tensor::from_raw(vec![2, h, w], data)
}

fn gaussian_blur(t: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    if sigma <= 0.0 {
        return t.clone();
    }
    let (c, h, w) = t.dims3().expect("rank 3");
    let r = (2.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let mut tmp = vec![0.0; c * h * w];
    let src = t.data();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = x as isize + i as isize - r;
                    if (0..w as isize).contains(&xx) {
                        acc += kv * src[(ch * h + y) * w + xx as usize];
                    }
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = y as isize + i as isize - r;
                    if (0..h as isize).contains(&yy) {
                        acc += kv * tmp[(ch * h + yy as usize) * w + x];
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::from_raw(vec![c, h, w], out)
}

fn render_frame(
    cfg: &SceneConfig,
    world: &World,
    pose: EgoPose<f64>,
    seed: u64,
    frame: usize,
) -> Result<SceneSample> {
    let grid = cfg.grid()?;
    let boxes: Vec<BevBox<f64>> = world
        .boxes
        .iter()
        .map(|b| pose.box_from_world(b))
        .filter(|b| grid.cell_of(b.cx, b.cy).is_some())
        .collect();
    let local: Vec<(f64, f64)> = world
        .points
        .iter()
        .map(|&(x, y)| pose.from_world(x, y))
        .collect();
    let teacher_input = quantize(rasterize_points(local.iter().copied(), &grid));
    let mut rng = stream_rng(seed, STREAM_FRAME + frame as u64);
    let noise = Normal::new(0.0, cfg.depth_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let displaced: Vec<(f64, f64)> = local
        .iter()
        .map(|&(x, y)| {
            let k = 1.0
                + if cfg.depth_noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
            (x * k, y * k)
        })
        .collect();
    let student_input = quantize(gaussian_blur(
        &rasterize_points(displaced.into_iter(), &grid),
        cfg.student_blur,
    ));
    let gt_heatmap = render_heatmap(&boxes, &grid, cfg.classes())?;
    Ok(SceneSample {
        grid,
        boxes,
        teacher_input,
        student_input,
        gt_heatmap,
        ego_pose: pose,
        seed,
    })
}

/// One frame with the ego at the world origin.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let world = sample_world(cfg, seed, 0.0);
    render_frame(cfg, &world, EgoPose::identity(), seed, 0)
}

/// `cfg.frames` frames of one static world while the ego drives along `+x`
/// at a per-sequence constant speed. Frame 0 equals `generate_scene` when
/// the ego does not move.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let mut ego = stream_rng(seed, STREAM_EGO);
    let speed = uniform(&mut ego, cfg.ego_speed);
    let travel = speed * (cfg.frames - 1) as f64;
    let world = sample_world(cfg, seed, travel);
    (0..cfg.frames)
        .map(|t| {
            render_frame(
                cfg,
                &world,
                EgoPose::new(speed * t as f64, 0.0, 0.0),
                seed,
                t,
            )
        })
        .collect()
}

/// Stand-in for a teacher's predicted heatmap: each object is dropped with
/// probability `miss_rate`, then a Poisson(`fp_rate`) number of blobs with
/// peaks in `[0.3, 0.9]` is placed on cells far from every object.
pub fn simulate_teacher_heatmap(
    gt: &Heatmap<f64>,
    boxes: &[BevBox<f64>],
    grid: &GridSpec<f64>,
    fp_rate: f64,
    miss_rate: f64,
    seed: u64,
) -> Result<Heatmap<f64>> {
    if !(0.0..=1.0).contains(&miss_rate) || !(fp_rate >= 0.0 && fp_rate.is_finite()) {
        return bad_config("miss_rate must lie in [0, 1] and fp_rate must be non-negative");
    }
    let mut rng = stream_rng(seed, STREAM_TEACHER_HEATMAP);
    let kept: Vec<BevBox<f64>> = boxes
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= miss_rate)
        .collect();
    let classes = gt.classes();
    let mut t = render_heatmap(&kept, grid, classes)?.into_tensor();
    let (h, w) = grid.shape();
    let owners = rasterize_boxes(boxes, grid);
    let gt_max = gt.max_over_classes();
    let free: Vec<usize> = (0..h * w)
        .filter(|&i| owners.owner[i].is_none() && gt_max.data()[i] < 0.01)
        .collect();
    let sigma = grid.cell_size();
    for _ in 0..poisson(&mut rng, fp_rate) {
        let peak = rng.random_range(0.3..0.9);
        let class = rng.random_range(0..classes);
        if free.is_empty() {
            continue;
        }
        let cell = free[rng.random_range(0..free.len())];
        let (bx, by) = grid.cell_center(cell / w, cell % w);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = grid.cell_center(r, c);
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                let v = peak * (-d2 / (2.0 * sigma * sigma)).exp();
                let o = &mut t.data_mut()[(class * h + r) * w + c];
                *o = o.max(v);
            }
        }
    }
    Heatmap::new(t)
}

/// Simulated teacher heatmap for a sample using the scene config's rates.
pub fn simulated_teacher_for(sample: &SceneSample, cfg: &SceneConfig) -> Result<Heatmap<f64>> {
    simulate_teacher_heatmap(
        &sample.gt_heatmap,
        &sample.boxes,
        &sample.grid,
        cfg.fp_rate,
        cfg.miss_rate,
        sample.seed,
    )
}

/// Cosine similarity of two equally sized vectors; 0 if either is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
