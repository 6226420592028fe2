//! Datasets: directories of `DBS1` files plus a `manifest.toml`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_sequence, read_scene, write_scene, SceneConfig, SceneSample};
use crate::error::{bad_config, invalid, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Environment variable capping generation threads.
pub const THREADS_ENV: &str = "DISTILLBEV_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    /// Sequence-major, frame-minor.
    pub files: Vec<String>,
    pub scene: SceneConfig,
}

/// Generated or loaded scenes grouped into sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub seed: u64,
    pub sequences: Vec<Vec<SceneSample>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Last frame of every sequence.
    pub fn current_frames(&self) -> impl Iterator<Item = &SceneSample> {
        self.sequences.iter().filter_map(|s| s.last())
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed ^ mix(index as u64))
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bad_config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            )),
        },
        Err(_) => Ok(None),
    }
}

/// Generates `count` sequences in parallel. Output is independent of the
/// thread count.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let sequences = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| generate_sequence(cfg, sample_seed(seed, i)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        sequences,
    })
}

fn file_name(index: usize, frame: usize, frames: usize) -> String {
    if frames == 1 {
        format!("{index:05}.dbs1")
    } else {
        format!("{index:05}_f{frame}.dbs1")
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let frames = ds.config.frames;
    let mut files = Vec::new();
    for (i, seq) in ds.sequences.iter().enumerate() {
        for (t, s) in seq.iter().enumerate() {
            let name = file_name(i, t, frames);
            write_scene(BufWriter::new(File::create(dir.join(&name))?), s)?;
            files.push(name);
        }
    }
    let manifest = Manifest {
        format: "DBS1".into(),
        seed: ds.seed,
        sequences: ds.sequences.len(),
        frames,
        files,
        scene: ds.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST_FILE}: {e}")))?;
    if m.format != "DBS1" || m.frames == 0 || m.files.len() != m.sequences * m.frames {
        return invalid(format!("{MANIFEST_FILE} is inconsistent"));
    }
    m.scene.validate()?;
    let samples = m
        .files
        .iter()
        .map(|f| read_scene(BufReader::new(File::open(dir.join(f))?)))
        .collect::<Result<Vec<_>>>()?;
    let sequences = samples.chunks(m.frames).map(|c| c.to_vec()).collect();
    Ok(Dataset {
        config: m.scene,
        seed: m.seed,
        sequences,
    })
}
