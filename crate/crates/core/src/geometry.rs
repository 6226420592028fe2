//! BEV grid, rotated boxes, center heatmaps and ego-motion warping.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A regular metric grid. Row `i` spans `y`, column `j` spans `x`; a
/// `C×H×W` feature map on this grid has `H = cells_y`, `W = cells_x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<T> {
    pub x_min: T,
    pub x_max: T,
    pub y_min: T,
    pub y_max: T,
    pub cells_x: usize,
    pub cells_y: usize,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(
        x_min: T,
        x_max: T,
        y_min: T,
        y_max: T,
        cells_x: usize,
        cells_y: usize,
    ) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return invalid("grid extent must be non-empty on both axes");
        }
        if cells_x == 0 || cells_y == 0 {
            return invalid("grid must have at least one cell per axis");
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cells_x,
            cells_y,
        })
    }

    /// Square grid centred on the origin.
    pub fn centered(half_extent: T, cells: usize) -> Result<Self> {
        Self::new(
            -half_extent,
            half_extent,
            -half_extent,
            half_extent,
            cells,
            cells,
        )
    }

    pub fn cell_size_x(&self) -> T {
        (self.x_max - self.x_min) / T::from_usize_lossy(self.cells_x)
    }

    pub fn cell_size_y(&self) -> T {
        (self.y_max - self.y_min) / T::from_usize_lossy(self.cells_y)
    }

    /// Geometric mean of the two cell sizes; equals either one on square cells.
    pub fn cell_size(&self) -> T {
        (self.cell_size_x() * self.cell_size_y()).sqrt()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.cells_y, self.cells_x)
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (T, T) {
        let half = T::lit(0.5);
        (
            self.x_min + (T::from_usize_lossy(col) + half) * self.cell_size_x(),
            self.y_min + (T::from_usize_lossy(row) + half) * self.cell_size_y(),
        )
    }

    /// `(row, col)` of the cell containing a metric point, if inside the grid.
    pub fn cell_of(&self, x: T, y: T) -> Option<(usize, usize)> {
        let fx = ((x - self.x_min) / self.cell_size_x()).floor();
        let fy = ((y - self.y_min) / self.cell_size_y()).floor();
        if fx < T::zero() || fy < T::zero() {
            return None;
        }
        let (col, row) = (fx.to_usize()?, fy.to_usize()?);
        (col < self.cells_x && row < self.cells_y).then_some((row, col))
    }

    /// Same metric extent at a different resolution.
    pub fn with_cells(&self, cells_y: usize, cells_x: usize) -> Result<Self> {
        Self::new(
            self.x_min, self.x_max, self.y_min, self.y_max, cells_x, cells_y,
        )
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let pi = T::from_f64(std::f64::consts::PI).expect("pi");
    let two_pi = pi + pi;
    let mut r = a % two_pi;
    if r <= -pi {
        r += two_pi;
    } else if r > pi {
        r -= two_pi;
    }
    r
}

/// A rotated ground-truth rectangle. `length` runs along the heading `yaw`,
/// `width` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevBox<T> {
    pub cx: T,
    pub cy: T,
    pub length: T,
    pub width: T,
    pub yaw: T,
    pub class_id: usize,
}

impl<T: Scalar> BevBox<T> {
    pub fn new(cx: T, cy: T, length: T, width: T, yaw: T, class_id: usize) -> Result<Self> {
        if !(length > T::zero() && width > T::zero()) {
            return invalid(format!("box extent must be positive, got {length}×{width}"));
        }
        if ![cx, cy, length, width, yaw].iter().all(|v| v.is_finite()) {
            return invalid("box parameters must be finite");
        }
        Ok(Self {
            cx,
            cy,
            length,
            width,
            yaw: wrap_angle(yaw),
            class_id,
        })
    }

    pub fn area(&self) -> T {
        self.length * self.width
    }

    /// Closed containment test in the box frame.
    pub fn contains(&self, x: T, y: T) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        let half = T::lit(0.5);
        along.abs() <= self.length * half && across.abs() <= self.width * half
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(T, T); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length * T::lit(0.5), self.width * T::lit(0.5));
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| (self.cx + a * c - b * s, self.cy + a * s + b * c))
    }
}

/// Per-cell owning box index; `None` for cells outside every box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnerGrid {
    pub height: usize,
    pub width: usize,
    pub owner: Vec<Option<usize>>,
}

impl OwnerGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            owner: vec![None; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.owner[row * self.width + col]
    }

    /// Number of cells owned by each of `n_boxes` boxes.
    pub fn counts(&self, n_boxes: usize) -> Vec<usize> {
        let mut c = vec![0; n_boxes];
        for k in self.owner.iter().flatten() {
            c[*k] += 1;
        }
        c
    }
}

/// Assigns every cell whose center lies inside a box to that box.
///
/// Overlaps go to the box with the smaller footprint area (lower index on
/// equal areas). A box whose footprint covers no cell center still owns the
/// cell containing its center, when that cell is on the grid.
pub fn rasterize_boxes<T: Scalar>(boxes: &[BevBox<T>], grid: &GridSpec<T>) -> OwnerGrid {
    let (h, w) = grid.shape();
    let mut out = OwnerGrid::empty(h, w);
    let beats = |k: usize, cur: Option<usize>| match cur {
        None => true,
        Some(o) => {
            boxes[k].area() < boxes[o].area() || (boxes[k].area() == boxes[o].area() && k < o)
        }
    };
    for (k, b) in boxes.iter().enumerate() {
        let Some((r0, r1, c0, c1)) = cell_bounds(b, grid) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (x, y) = grid.cell_center(row, col);
                if b.contains(x, y) && beats(k, out.owner[row * w + col]) {
                    out.owner[row * w + col] = Some(k);
                }
            }
        }
    }
    let counts = out.counts(boxes.len());
    let mut empty: Vec<usize> = (0..boxes.len()).filter(|&k| counts[k] == 0).collect();
    // larger first so the smallest force-assigned box keeps a contested center cell
    empty.sort_by(|&a, &b| {
        boxes[b]
            .area()
            .partial_cmp(&boxes[a].area())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for k in empty {
        if let Some((row, col)) = grid.cell_of(boxes[k].cx, boxes[k].cy) {
            out.owner[row * w + col] = Some(k);
        }
    }
    out
}

/// Inclusive row/column range covering a box's bounding rectangle, clipped to the grid.
fn cell_bounds<T: Scalar>(
    b: &BevBox<T>,
    grid: &GridSpec<T>,
) -> Option<(usize, usize, usize, usize)> {
    let cs = b.corners();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (cs[0].0, cs[0].0, cs[0].1, cs[0].1);
    for &(x, y) in &cs[1..] {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let to_idx = |v: T, lo: T, size: T, n: usize| -> isize {
        let f = ((v - lo) / size).floor();
        f.max(T::lit(-1.0))
            .min(T::from_usize_lossy(n))
            .to_isize()
            .unwrap_or(-1)
    };
    let c0 = to_idx(xmin, grid.x_min, grid.cell_size_x(), grid.cells_x).max(0);
    let c1 =
        to_idx(xmax, grid.x_min, grid.cell_size_x(), grid.cells_x).min(grid.cells_x as isize - 1);
    let r0 = to_idx(ymin, grid.y_min, grid.cell_size_y(), grid.cells_y).max(0);
    let r1 =
        to_idx(ymax, grid.y_min, grid.cell_size_y(), grid.cells_y).min(grid.cells_y as isize - 1);
    (c0 <= c1 && r0 <= r1).then_some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
}

/// A `K×H×W` grid of per-class center confidences in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T>(Tensor<T>);

impl<T: Scalar> Heatmap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims3()?;
        if values.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return invalid("heatmap values must lie in [0, 1]");
        }
        Ok(Self(values))
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[classes, height, width]))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    /// `H×W` maximum over class channels.
    pub fn max_over_classes(&self) -> Tensor<T> {
        let (k, h, w) = self.0.dims3().expect("rank 3");
        let n = h * w;
        let d = self.0.data();
        Tensor::from_fn(&[h, w], |i| {
            (0..k).fold(T::zero(), |m, c| m.max(d[c * n + i]))
        })
    }

    /// Max-pools each class channel by an integer factor.
    pub fn downsample_max(&self, factor: usize) -> Result<Self> {
        let (k, h, w) = self.0.dims3()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return invalid(format!("cannot downsample a {h}×{w} heatmap by {factor}"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut out = vec![T::zero(); k * ho * wo];
        for c in 0..k {
            for y in 0..h {
                for x in 0..w {
                    let o = &mut out[(c * ho + y / factor) * wo + x / factor];
                    *o = o.max(self.0.data()[(c * h + y) * w + x]);
                }
            }
        }
        Ok(Self(Tensor::from_raw(vec![k, ho, wo], out)))
    }

    /// Brings the heatmap to `height×width` by max-pooling when it is finer.
    pub fn at_resolution(&self, height: usize, width: usize) -> Result<Self> {
        let (h, w) = self.spatial();
        if (h, w) == (height, width) {
            return Ok(self.clone());
        }
        if height == 0 || h % height != 0 || w % width != 0 || h / height != w / width {
            return invalid(format!(
                "heatmap {h}×{w} cannot be brought to {height}×{width}"
            ));
        }
        self.downsample_max(h / height)
    }
}

/// Gaussian spread used for a box: `max(0.2·min(length, width), cell size)`.
pub fn heatmap_sigma<T: Scalar>(b: &BevBox<T>, grid: &GridSpec<T>) -> T {
    (T::lit(0.2) * b.length.min(b.width)).max(grid.cell_size())
}

/// Renders per-class center heatmaps; overlapping Gaussians combine by max.
pub fn render_heatmap<T: Scalar>(
    boxes: &[BevBox<T>],
    grid: &GridSpec<T>,
    classes: usize,
) -> Result<Heatmap<T>> {
    if let Some(b) = boxes.iter().find(|b| b.class_id >= classes) {
        return invalid(format!(
            "box class {} out of range for {classes} classes",
            b.class_id
        ));
    }
    let (h, w) = grid.shape();
    let mut out = vec![T::zero(); classes * h * w];
    for b in boxes {
        let sigma = heatmap_sigma(b, grid);
        let denom = T::lit(2.0) * sigma * sigma;
        let plane = &mut out[b.class_id * h * w..(b.class_id + 1) * h * w];
        for row in 0..h {
            for col in 0..w {
                let (x, y) = grid.cell_center(row, col);
                let d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
                let v = (-d2 / denom).exp();
                let cell = &mut plane[row * w + col];
                *cell = cell.max(v);
            }
        }
    }
    Heatmap::new(Tensor::from_raw(vec![classes, h, w], out))
}

/// Pose of the ego frame in the world: `world = R(heading)·p + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPose<T> {
    pub tx: T,
    pub ty: T,
    pub heading: T,
}

impl<T: Scalar> EgoPose<T> {
    pub fn new(tx: T, ty: T, heading: T) -> Self {
        Self {
            tx,
            ty,
            heading: wrap_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn to_world(&self, x: T, y: T) -> (T, T) {
        let (s, c) = self.heading.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    pub fn from_world(&self, x: T, y: T) -> (T, T) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (x - self.tx, y - self.ty);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Re-expresses a world-frame box in this ego frame.
    pub fn box_from_world(&self, b: &BevBox<T>) -> BevBox<T> {
        let (cx, cy) = self.from_world(b.cx, b.cy);
        BevBox {
            cx,
            cy,
            yaw: wrap_angle(b.yaw - self.heading),
            ..*b
        }
    }
}

/// Resamples a `C×H×W` feature map from the `from_pose` frame into the
/// `to_pose` frame with nearest-neighbour lookup; cells whose source falls
/// outside the grid are zero.
pub fn warp_bev<T: Scalar>(
    feature: &Tensor<T>,
    from_pose: &EgoPose<T>,
    to_pose: &EgoPose<T>,
    grid: &GridSpec<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = feature.dims3()?;
    if (h, w) != grid.shape() {
        return invalid(format!(
            "feature {h}×{w} does not match grid {:?}",
            grid.shape()
        ));
    }
    let n = h * w;
    let mut out = vec![T::zero(); c * n];
    for row in 0..h {
        for col in 0..w {
            let (x, y) = grid.cell_center(row, col);
            let (wx, wy) = to_pose.to_world(x, y);
            let (sx, sy) = from_pose.from_world(wx, wy);
            if let Some((sr, sc)) = grid.cell_of(sx, sy) {
                for ch in 0..c {
                    out[ch * n + row * w + col] = feature.data()[ch * n + sr * w + sc];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, h, w], out))
}
