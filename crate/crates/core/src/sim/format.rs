//! `DBS1` scene files.
//!
//! Layout, all numbers little-endian:
//!
//! ```text
//! magic        b"DBS1"
//! version      u16
//! grid         x_min x_max y_min y_max: f64, cells_x cells_y: u32
//! box count    u32
//!   per box    cx cy length width yaw reserved: f64, class: u32
//! block count  u32
//!   per block  name_len u32, name (UTF-8), C H W: u32, payload f32 × C·H·W
//! ego pose     tx ty heading: f64
//! seed         u64
//! ```
//!
//! Blocks written: `teacher_input`, `student_input`, `gt_heatmap`. On read
//! the ground-truth heatmap is re-rendered from the boxes and checked
//! against the stored block.

use std::io::{Read, Write};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::geometry::{render_heatmap, BevBox, EgoPose, GridSpec};
use crate::tensor::{read_u16, read_u32, Tensor};

pub const SCENE_MAGIC: &[u8; 4] = b"DBS1";
pub const SCENE_VERSION: u16 = 1;

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(read_u32(r)? as usize)
}

fn put_block(w: &mut impl Write, name: &str, t: &Tensor<f64>) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    let (c, h, wd) = t.dims3()?;
    for d in [c, h, wd] {
        put_u32(w, d)?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_scene<W: Write>(mut w: W, s: &SceneSample) -> Result<()> {
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    let g = &s.grid;
    for v in [g.x_min, g.x_max, g.y_min, g.y_max] {
        put_f64(&mut w, v)?;
    }
    put_u32(&mut w, g.cells_x)?;
    put_u32(&mut w, g.cells_y)?;
    put_u32(&mut w, s.boxes.len())?;
    for b in &s.boxes {
        for v in [b.cx, b.cy, b.length, b.width, b.yaw, 0.0] {
            put_f64(&mut w, v)?;
        }
        put_u32(&mut w, b.class_id)?;
    }
    let blocks = [
        ("teacher_input", &s.teacher_input),
        ("student_input", &s.student_input),
        ("gt_heatmap", s.gt_heatmap.tensor()),
    ];
    put_u32(&mut w, blocks.len())?;
    for (name, t) in blocks {
        put_block(&mut w, name, t)?;
    }
    for v in [s.ego_pose.tx, s.ego_pose.ty, s.ego_pose.heading] {
        put_f64(&mut w, v)?;
    }
    w.write_all(&s.seed.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn read_scene<R: Read>(mut r: R) -> Result<SceneSample> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(format_err("not a DBS1 scene file"));
    }
    let version = read_u16(&mut r)?;
    if version != SCENE_VERSION {
        return Err(format_err(format!("unsupported scene version {version}")));
    }
    let ext = [
        get_f64(&mut r)?,
        get_f64(&mut r)?,
        get_f64(&mut r)?,
        get_f64(&mut r)?,
    ];
    let (cx, cy) = (get_u32(&mut r)?, get_u32(&mut r)?);
    let grid = GridSpec::new(ext[0], ext[1], ext[2], ext[3], cx, cy)
        .map_err(|e| format_err(e.to_string()))?;
    let n_boxes = get_u32(&mut r)?;
    let mut boxes = Vec::with_capacity(n_boxes.min(4096));
    for _ in 0..n_boxes {
        let v = [
            get_f64(&mut r)?,
            get_f64(&mut r)?,
            get_f64(&mut r)?,
            get_f64(&mut r)?,
            get_f64(&mut r)?,
            get_f64(&mut r)?,
        ];
        let class = get_u32(&mut r)?;
        boxes.push(
            BevBox::new(v[0], v[1], v[2], v[3], v[4], class)
                .map_err(|e| format_err(e.to_string()))?,
        );
    }
    let n_blocks = get_u32(&mut r)?;
    let (mut teacher, mut student, mut gt) = (None, None, None);
    for _ in 0..n_blocks {
        let len = get_u32(&mut r)?;
        if len > 1024 {
            return Err(format_err("block name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("block name is not UTF-8"))?;
        let (c, h, w) = (get_u32(&mut r)?, get_u32(&mut r)?, get_u32(&mut r)?);
        if (h, w) != grid.shape() {
            return Err(format_err(format!(
                "block {name} is {h}×{w}, grid is {:?}",
                grid.shape()
            )));
        }
        let mut raw = vec![0u8; 4 * c * h * w];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(vec![c, h, w], data)
            .map_err(|e| format_err(format!("block {name}: {e}")))?;
        match name.as_str() {
            "teacher_input" => teacher = Some(t),
            "student_input" => student = Some(t),
            "gt_heatmap" => gt = Some(t),
            _ => {}
        }
    }
    let tx = get_f64(&mut r)?;
    let ty = get_f64(&mut r)?;
    let heading = get_f64(&mut r)?;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let (Some(teacher_input), Some(student_input), Some(stored_gt)) = (teacher, student, gt) else {
        return Err(format_err(
            "scene lacks a teacher_input, student_input or gt_heatmap block",
        ));
    };
    let gt_heatmap = render_heatmap(&boxes, &grid, stored_gt.shape()[0])
        .map_err(|e| format_err(e.to_string()))?;
    if gt_heatmap.tensor().max_abs_diff(&stored_gt)? > 1e-6 {
        return Err(format_err(
            "stored ground-truth heatmap disagrees with the boxes",
        ));
    }
    Ok(SceneSample {
        grid,
        boxes,
        teacher_input,
        student_input,
        gt_heatmap,
        ego_pose: EgoPose::new(tx, ty, heading),
        seed: u64::from_le_bytes(seed),
    })
}
