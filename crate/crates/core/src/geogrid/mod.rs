//! Gridded data: coordinates, depth grids, profiles and raster stacks.
//!
//! Two modalities share the [`RasterStack`] container: single-valued rasters
//! (sea-surface temperature) and profile stacks carrying one sound speed per
//! depth layer at every cell. Missing cells hold the stack's own sentinel,
//! which is recorded in every file header.

mod ingest;
mod ops;
mod raster_file;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ingest::{parse_profile_table, parse_sst_table, write_profile_csv, write_sst_csv};
pub use ops::{monthly_mean, regrid_block_mean, resample_linear};
pub use raster_file::{read_raster, read_raster_file, write_raster, write_raster_file};

/// Sentinel used when the caller does not pick one.
pub const DEFAULT_MISSING: f64 = -9999.0;

/// Range of sound speeds accepted as physical data, m/s (exclusive).
pub const PHYSICAL_SPEED_RANGE: (f64, f64) = (1300.0, 1700.0);

#[derive(Debug, thiserror::Error)]
pub enum GeoGridError {
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("row {row}: duplicate key {key}")]
    Duplicate { row: usize, key: String },
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    CoordRange { lat: f64, lon: f64 },
    #[error("invalid depth grid: {0}")]
    DepthGrid(String),
    #[error("invalid time key `{0}`")]
    TimeKey(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("interpolation: {0}")]
    Interpolation(String),
    #[error("profile: {0}")]
    Profile(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Frame(#[from] crate::io::FrameError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GeoGridError> = std::result::Result<T, E>;

/// A point in decimal degrees; `lat ∈ [-90, 90]`, `lon ∈ (-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoord {
    pub lat: f64,
    pub lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(lon > -180.0 && lon <= 180.0) {
            return Err(GeoGridError::CoordRange { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    /// Table-style label such as `7.5N 156.5E`.
    pub fn label(&self) -> String {
        let ns = if self.lat < 0.0 { 'S' } else { 'N' };
        let ew = if self.lon < 0.0 { 'W' } else { 'E' };
        format!("{}{} {}{}", self.lat.abs(), ns, self.lon.abs(), ew)
    }
}

/// Calendar key. Monthly data leaves `day` empty; daily rasters carry it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeKey {
    pub year: i32,
    pub month: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<u32>,
}

impl TimeKey {
    pub fn month(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(GeoGridError::TimeKey(format!("{year}-{month}")));
        }
        Ok(Self { year, month, day: None })
    }

    pub fn day(year: i32, month: u32, day: u32) -> Result<Self> {
        chrono::NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| GeoGridError::TimeKey(format!("{year}-{month}-{day}")))?;
        Ok(Self { year, month, day: Some(day) })
    }

    /// The month this key falls in.
    pub fn month_key(&self) -> TimeKey {
        TimeKey { day: None, ..*self }
    }

    /// Month `n` steps after this one.
    pub fn add_months(&self, n: i32) -> TimeKey {
        let idx = self.year * 12 + self.month as i32 - 1 + n;
        TimeKey { year: idx.div_euclid(12), month: (idx.rem_euclid(12) + 1) as u32, day: None }
    }

    /// Consecutive months starting at `self`.
    pub fn month_range(&self, count: usize) -> Vec<TimeKey> {
        (0..count as i32).map(|i| self.month_key().add_months(i)).collect()
    }
}

impl fmt::Display for TimeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.day {
            Some(d) => write!(f, "{:04}-{:02}-{:02}", self.year, self.month, d),
            None => write!(f, "{:04}-{:02}", self.year, self.month),
        }
    }
}

impl FromStr for TimeKey {
    type Err = GeoGridError;

    /// Accepts `YYYY-MM` or `YYYY-MM-DD`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GeoGridError::TimeKey(s.to_string());
        let parts: Vec<&str> = s.trim().split('-').collect();
        match parts.as_slice() {
            [y, m] => TimeKey::month(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?).map_err(|_| bad()),
            [_, _, _] => {
                let d = chrono::NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| bad())?;
                use chrono::Datelike;
                Ok(TimeKey { year: d.year(), month: d.month(), day: Some(d.day()) })
            }
            _ => Err(bad()),
        }
    }
}

/// Uniform depth grid `z_min, z_min + step, …, z_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DepthGridRepr", into = "DepthGridRepr")]
pub struct DepthGrid {
    z_min: f64,
    z_max: f64,
    step: f64,
    layers: usize,
}

#[derive(Serialize, Deserialize)]
struct DepthGridRepr {
    z_min: f64,
    z_max: f64,
    step: f64,
}

impl TryFrom<DepthGridRepr> for DepthGrid {
    type Error = GeoGridError;
    fn try_from(r: DepthGridRepr) -> Result<Self> {
        DepthGrid::new(r.z_min, r.z_max, r.step)
    }
}

impl From<DepthGrid> for DepthGridRepr {
    fn from(g: DepthGrid) -> Self {
        DepthGridRepr { z_min: g.z_min, z_max: g.z_max, step: g.step }
    }
}

impl Default for DepthGrid {
    /// 5–1980 m at 1 m, i.e. 1976 layers.
    fn default() -> Self {
        DepthGrid::new(5.0, 1980.0, 1.0).expect("default grid is valid")
    }
}

impl DepthGrid {
    pub fn new(z_min: f64, z_max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !z_min.is_finite() || !z_max.is_finite() || z_max < z_min {
            return Err(GeoGridError::DepthGrid(format!("{z_min}:{z_max}:{step}")));
        }
        let span = (z_max - z_min) / step;
        let n = span.round();
        if (span - n).abs() > 1e-9 * span.max(1.0) {
            return Err(GeoGridError::DepthGrid(format!(
                "span {z_min}..{z_max} is not a whole number of {step} m steps"
            )));
        }
        Ok(Self { z_min, z_max, step, layers: n as usize + 1 })
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Layer count `H`.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn depth(&self, layer: usize) -> f64 {
        if layer + 1 == self.layers {
            self.z_max
        } else {
            self.z_min + layer as f64 * self.step
        }
    }

    pub fn depths(&self) -> Vec<f64> {
        (0..self.layers).map(|i| self.depth(i)).collect()
    }

    /// Layers whose depth lies in `[lo, hi]`.
    pub fn layers_within(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let start = (0..self.layers).find(|&i| self.depth(i) >= lo).unwrap_or(self.layers);
        let end = (0..self.layers).rev().find(|&i| self.depth(i) <= hi).map_or(0, |i| i + 1);
        start..end.max(start)
    }
}

impl FromStr for DepthGrid {
    type Err = GeoGridError;

    /// Parses `zmin:zmax:step`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| GeoGridError::DepthGrid(s.to_string()))?;
        match parts.as_slice() {
            [a, b, c] => DepthGrid::new(*a, *b, *c),
            _ => Err(GeoGridError::DepthGrid(s.to_string())),
        }
    }
}

/// Sound speed (m/s) on a depth grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub grid: DepthGrid,
    pub speeds: Vec<f64>,
}

impl Profile {
    pub fn new(grid: DepthGrid, speeds: Vec<f64>) -> Result<Self> {
        if speeds.len() != grid.layers() {
            return Err(GeoGridError::Profile(format!("{} speeds for a {}-layer grid", speeds.len(), grid.layers())));
        }
        if let Some(i) = speeds.iter().position(|v| !v.is_finite()) {
            return Err(GeoGridError::Profile(format!("non-finite speed at layer {i}")));
        }
        Ok(Self { grid, speeds })
    }

    /// Range check for measured or synthesised ocean data.
    pub fn check_physical(&self) -> Result<()> {
        let (lo, hi) = PHYSICAL_SPEED_RANGE;
        match self.speeds.iter().position(|&v| !(v > lo && v < hi)) {
            Some(i) => Err(GeoGridError::Profile(format!(
                "speed {} m/s at {} m outside ({lo}, {hi})",
                self.speeds[i],
                self.grid.depth(i)
            ))),
            None => Ok(()),
        }
    }
}

/// Regular lat/lon grid of cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub n_lat: usize,
    pub n_lon: usize,
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.dlat > 0.0 && self.dlon > 0.0) || self.n_lat == 0 || self.n_lon == 0 {
            return Err(GeoGridError::Geometry(format!("degenerate geometry {self:?}")));
        }
        let last = self.coord(self.n_lat - 1, self.n_lon - 1);
        GeoCoord::new(self.lat0, self.lon0)?;
        GeoCoord::new(last.lat, last.lon)?;
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    /// Centre of cell (row `i` along latitude, column `j` along longitude).
    pub fn coord(&self, i: usize, j: usize) -> GeoCoord {
        GeoCoord { lat: self.lat0 + i as f64 * self.dlat, lon: self.lon0 + j as f64 * self.dlon }
    }

    /// Cell index of a coordinate lying on a cell centre (tolerance 1e-6 cell).
    pub fn index_of(&self, c: GeoCoord) -> Option<(usize, usize)> {
        let fi = (c.lat - self.lat0) / self.dlat;
        let fj = (c.lon - self.lon0) / self.dlon;
        let (ri, rj) = (fi.round(), fj.round());
        if (fi - ri).abs() > 1e-6 || (fj - rj).abs() > 1e-6 || ri < 0.0 || rj < 0.0 {
            return None;
        }
        let (i, j) = (ri as usize, rj as usize);
        (i < self.n_lat && j < self.n_lon).then_some((i, j))
    }
}

/// Time-indexed lat/lon rasters of one variable, optionally with a depth axis.
///
/// Values are stored time-major, then latitude, then longitude, then depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    pub variable: String,
    pub units: String,
    pub geometry: GridGeometry,
    /// Present for profile stacks.
    pub depth: Option<DepthGrid>,
    pub times: Vec<TimeKey>,
    pub missing: f64,
    pub values: Vec<f64>,
    /// Free-form provenance (run configuration) carried into the file header.
    pub provenance: Option<serde_json::Value>,
}

impl RasterStack {
    /// A stack with every value set to the missing sentinel.
    pub fn filled_missing(
        variable: &str,
        units: &str,
        geometry: GridGeometry,
        depth: Option<DepthGrid>,
        times: Vec<TimeKey>,
        missing: f64,
    ) -> Self {
        let layers = depth.map_or(1, |d| d.layers());
        let n = times.len() * geometry.cells() * layers;
        Self {
            variable: variable.to_string(),
            units: units.to_string(),
            geometry,
            depth,
            times,
            missing,
            values: vec![missing; n],
            provenance: None,
        }
    }

    /// Values per cell: `H` for profile stacks, 1 otherwise.
    pub fn layers(&self) -> usize {
        self.depth.map_or(1, |d| d.layers())
    }

    pub fn check_consistent(&self) -> Result<()> {
        self.geometry.validate()?;
        let want = self.times.len() * self.geometry.cells() * self.layers();
        if self.values.len() != want {
            return Err(GeoGridError::Geometry(format!(
                "{} values for {} times x {}x{} cells x {} layers",
                self.values.len(),
                self.times.len(),
                self.geometry.n_lat,
                self.geometry.n_lon,
                self.layers()
            )));
        }
        if self.missing.is_nan() {
            return Err(GeoGridError::Geometry("missing sentinel must not be NaN".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn is_missing(&self, v: f64) -> bool {
        v == self.missing
    }

    #[inline]
    fn offset(&self, t: usize, i: usize, j: usize) -> usize {
        ((t * self.geometry.n_lat + i) * self.geometry.n_lon + j) * self.layers()
    }

    /// All layers of one cell at one time.
    pub fn cell(&self, t: usize, i: usize, j: usize) -> &[f64] {
        let o = self.offset(t, i, j);
        &self.values[o..o + self.layers()]
    }

    pub fn cell_mut(&mut self, t: usize, i: usize, j: usize) -> &mut [f64] {
        let o = self.offset(t, i, j);
        let l = self.layers();
        &mut self.values[o..o + l]
    }

    /// Single value of a 2-D raster cell, `None` when missing.
    pub fn value(&self, t: usize, i: usize, j: usize) -> Option<f64> {
        let v = self.cell(t, i, j)[0];
        (!self.is_missing(v)).then_some(v)
    }

    /// A cell's profile, `None` when any layer is missing.
    pub fn profile(&self, t: usize, i: usize, j: usize) -> Option<Profile> {
        let grid = self.depth?;
        let cell = self.cell(t, i, j);
        if cell.iter().any(|&v| self.is_missing(v)) {
            return None;
        }
        Some(Profile { grid, speeds: cell.to_vec() })
    }

    pub fn time_index(&self, key: &TimeKey) -> Option<usize> {
        self.times.iter().position(|t| t == key)
    }

    /// Index of the raster for the month containing `key`.
    pub fn month_index(&self, key: &TimeKey) -> Option<usize> {
        let m = key.month_key();
        self.times.iter().position(|t| t.month_key() == m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_1976_layers() {
        let g = DepthGrid::default();
        assert_eq!(g.layers(), 1976);
        assert_eq!(g.depth(0), 5.0);
        assert_eq!(g.depth(1975), 1980.0);
    }

    #[test]
    fn depth_grid_rejects_fractional_span() {
        assert!(DepthGrid::new(0.0, 10.0, 3.0).is_err());
        assert!(DepthGrid::new(0.0, 10.0, 0.0).is_err());
        assert!(DepthGrid::new(10.0, 0.0, 1.0).is_err());
        assert_eq!("5:68:1".parse::<DepthGrid>().unwrap().layers(), 64);
    }

    #[test]
    fn band_counting() {
        let g = DepthGrid::default();
        assert_eq!(g.layers_within(0.0, 200.0).len(), 196);
        assert_eq!(g.layers_within(0.0, 2.0).len(), 0);
    }

    #[test]
    fn coord_ranges() {
        assert!(GeoCoord::new(90.0, 180.0).is_ok());
        assert!(GeoCoord::new(90.1, 0.0).is_err());
        assert!(GeoCoord::new(0.0, -180.0).is_err());
        assert_eq!(GeoCoord::new(7.5, 156.5).unwrap().label(), "7.5N 156.5E");
        assert_eq!(GeoCoord::new(-3.0, -20.25).unwrap().label(), "3S 20.25W");
    }

    #[test]
    fn time_keys() {
        let t: TimeKey = "2015-07".parse().unwrap();
        assert_eq!(t, TimeKey::month(2015, 7).unwrap());
        assert_eq!(t.add_months(6).to_string(), "2016-01");
        assert_eq!("2016-02-29".parse::<TimeKey>().unwrap().day, Some(29));
        assert!("2015-02-30".parse::<TimeKey>().is_err());
        assert!("2015-13".parse::<TimeKey>().is_err());
        assert_eq!(t.month_range(3).last().unwrap().to_string(), "2015-09");
    }

    #[test]
    fn physical_range_check() {
        let g = DepthGrid::new(0.0, 1.0, 1.0).unwrap();
        assert!(Profile::new(g, vec![1500.0, 1510.0]).unwrap().check_physical().is_ok());
        assert!(Profile::new(g, vec![1500.0, 1800.0]).unwrap().check_physical().is_err());
        assert!(Profile::new(g, vec![1500.0]).is_err());
        assert!(Profile::new(g, vec![1500.0, f64::NAN]).is_err());
    }
}
