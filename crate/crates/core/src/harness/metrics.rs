//! CSV metrics files. Floats are written in shortest round-trip form, so
//! reading a file back reproduces the recorded values exactly.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::train::{EpochMetrics, LayerLossRow};
use crate::error::{Error, Result};

fn write_rows<W: Write, R: Serialize>(w: W, rows: &[R]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

fn read_rows<Rd: Read, R: DeserializeOwned>(r: Rd) -> Result<Vec<R>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Columns: `epoch,det_loss,l_dist,feature_mse_to_teacher,synthetic_ap`.
pub fn write_metrics<W: Write>(w: W, rows: &[EpochMetrics]) -> Result<()> {
    write_rows(w, rows)
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<EpochMetrics>> {
    read_rows(r)
}

/// Columns: `step,layer_id,l_feat,l_attn`.
pub fn write_layer_losses<W: Write>(w: W, rows: &[LayerLossRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn read_layer_losses<R: Read>(r: R) -> Result<Vec<LayerLossRow>> {
    read_rows(r)
}
