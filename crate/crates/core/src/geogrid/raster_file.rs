//! Raster files: a JSON header line (geometry, variable, units, missing
//! sentinel, times, optional depth grid) followed by little-endian `f64`
//! values in time, latitude, longitude, depth order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DepthGrid, GridGeometry, RasterStack, Result, TimeKey};
use crate::io::{check_format, f64s_to_le, le_to_f64s, read_frame, write_frame};

const FORMAT: &str = "sspfuse-raster/1";

#[derive(Serialize, Deserialize)]
struct RasterHeader {
    format: String,
    variable: String,
    units: String,
    geometry: GridGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<DepthGrid>,
    missing: f64,
    times: Vec<TimeKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn write_raster<W: Write>(stack: &RasterStack, w: W) -> Result<()> {
    stack.check_consistent()?;
    let header = RasterHeader {
        format: FORMAT.to_string(),
        variable: stack.variable.clone(),
        units: stack.units.clone(),
        geometry: stack.geometry,
        depth: stack.depth,
        missing: stack.missing,
        times: stack.times.clone(),
        provenance: stack.provenance.clone(),
    };
    let mut blob = Vec::new();
    f64s_to_le(&stack.values, &mut blob);
    write_frame(w, &header, &blob)?;
    Ok(())
}

pub fn read_raster<R: BufRead>(r: R) -> Result<RasterStack> {
    let (h, blob): (RasterHeader, _) = read_frame(r)?;
    check_format(&h.format, FORMAT)?;
    let stack = RasterStack {
        variable: h.variable,
        units: h.units,
        geometry: h.geometry,
        depth: h.depth,
        times: h.times,
        missing: h.missing,
        values: le_to_f64s(&blob)?,
        provenance: h.provenance,
    };
    stack.check_consistent()?;
    Ok(stack)
}

pub fn write_raster_file(stack: &RasterStack, path: &Path) -> Result<()> {
    write_raster(stack, BufWriter::new(File::create(path)?))
}

pub fn read_raster_file(path: &Path) -> Result<RasterStack> {
    read_raster(BufReader::new(File::open(path)?))
}
