//! Fused supervised samples over a 3×3 window and the dataset file.
//!
//! A sample pairs the eight neighbors' features `x: [H, 6, 8]` with the
//! centre cell's profile `y`. Per neighbor the six channels are SST, latitude
//! and longitude (each repeated down the depth axis) and the first three EOFs
//! of that neighbor's basis. `x` is laid out depth-major, then channel, then
//! neighbor.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::eof::{BasisSet, EofBasis};
use crate::geogrid::{DepthGrid, GeoCoord, GridGeometry, RasterStack, TimeKey};
use crate::io::{self, FrameError};
use crate::model::{CHANNELS, NEIGHBORS};

pub const DATASET_FORMAT: &str = "sspfuse-dataset/1";
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["sst", "lat", "lon", "e1", "e2", "e3"];
/// EOFs carried per neighbor.
pub const EOF_CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("cell ({n},{m}) is on the boundary of a {rows}x{cols} grid; it has no full 3x3 window")]
    Boundary { n: usize, m: usize, rows: usize, cols: usize },
    #[error("missing sst")]
    MissingSst,
    #[error("basis has {k_max} EOFs, need at least 3")]
    BasisOrder { k_max: usize },
    #[error("inputs disagree: {0}")]
    Mismatch(String),
    #[error("nothing to fuse: {0}")]
    Empty(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

/// The eight neighbors of `(n, m)`, row = latitude index, column = longitude index:
/// `(n−1,m−1), (n−1,m), (n−1,m+1), (n,m−1), (n,m+1), (n+1,m−1), (n+1,m), (n+1,m+1)`.
pub fn neighbor_coords(center: (usize, usize), rows: usize, cols: usize) -> Result<[(usize, usize); NEIGHBORS]> {
    let (n, m) = center;
    if n == 0 || m == 0 || n + 1 >= rows || m + 1 >= cols {
        return Err(FusionError::Boundary { n, m, rows, cols });
    }
    Ok([(n - 1, m - 1), (n - 1, m), (n - 1, m + 1), (n, m - 1), (n, m + 1), (n + 1, m - 1), (n + 1, m), (n + 1, m + 1)])
}

/// `H × 6` block, row-major: sst, lat, lon repeated, then `e_1, e_2, e_3`.
pub fn build_feature_block(coord: GeoCoord, sst: f64, basis: &EofBasis) -> Result<Vec<f64>> {
    if !sst.is_finite() {
        return Err(FusionError::MissingSst);
    }
    if basis.k_max() < EOF_CHANNELS {
        return Err(FusionError::BasisOrder { k_max: basis.k_max() });
    }
    let h = basis.layers();
    let mut block = Vec::with_capacity(h * CHANNELS);
    for d in 0..h {
        block.extend_from_slice(&[sst, coord.lat, coord.lon]);
        for k in 0..EOF_CHANNELS {
            block.push(basis.eigvecs[(d, k)]);
        }
    }
    Ok(block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    MissingSst,
    MissingBasis,
    MissingLabel,
    MissingMonth,
    LowOrderBasis,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::MissingSst => "missing-sst",
            SkipReason::MissingBasis => "missing-basis",
            SkipReason::MissingLabel => "missing-label",
            SkipReason::MissingMonth => "missing-month",
            SkipReason::LowOrderBasis => "low-order-basis",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    /// `[H, 6, 8]`, depth-major then channel then neighbor.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub cell: (usize, usize),
    pub center: GeoCoord,
    pub time: TimeKey,
}

fn check_aligned(sst: &RasterStack, profiles: &RasterStack, bases: &BasisSet) -> Result<DepthGrid> {
    let grid = profiles.depth.ok_or_else(|| FusionError::Mismatch("profile stack has no depth axis".into()))?;
    if sst.depth.is_some() {
        return Err(FusionError::Mismatch("sst stack must be 2-D".into()));
    }
    if sst.geometry != profiles.geometry || bases.geometry != profiles.geometry {
        return Err(FusionError::Mismatch(format!(
            "geometries differ: sst {:?}, profiles {:?}, bases {:?}",
            sst.geometry, profiles.geometry, bases.geometry
        )));
    }
    if bases.grid != grid {
        return Err(FusionError::Mismatch("basis depth grid differs from the profile grid".into()));
    }
    Ok(grid)
}

/// The `[H, 6, 8]` input for `center` at `time`, without a label.
///
/// The outer error is a hard failure; the inner one is a skip.
pub fn build_input(
    center: (usize, usize),
    time: TimeKey,
    sst: &RasterStack,
    bases: &BasisSet,
) -> Result<Result<Vec<f64>, SkipReason>> {
    if sst.depth.is_some() {
        return Err(FusionError::Mismatch("sst stack must be 2-D".into()));
    }
    if sst.geometry != bases.geometry {
        return Err(FusionError::Mismatch(format!(
            "geometries differ: sst {:?}, bases {:?}",
            sst.geometry, bases.geometry
        )));
    }
    let g = sst.geometry;
    let nbrs = neighbor_coords(center, g.n_lat, g.n_lon)?;
    let Some(ts) = sst.month_index(&time) else { return Ok(Err(SkipReason::MissingMonth)) };
    let h = bases.grid.layers();
    let mut x = vec![0.0; h * CHANNELS * NEIGHBORS];
    for (i, &(r, c)) in nbrs.iter().enumerate() {
        let Some(s) = sst.value(ts, r, c) else { return Ok(Err(SkipReason::MissingSst)) };
        let Some(basis) = bases.get(r, c) else { return Ok(Err(SkipReason::MissingBasis)) };
        let block = match build_feature_block(g.coord(r, c), s, basis) {
            Ok(b) => b,
            Err(FusionError::BasisOrder { .. }) => return Ok(Err(SkipReason::LowOrderBasis)),
            Err(e) => return Err(e),
        };
        for d in 0..h {
            for ch in 0..CHANNELS {
                x[(d * CHANNELS + ch) * NEIGHBORS + i] = block[d * CHANNELS + ch];
            }
        }
    }
    Ok(Ok(x))
}

/// Pairs the neighbors' features at `time` with the centre profile.
///
/// The outer error is a hard failure; the inner one is a skip.
pub fn build_sample(
    center: (usize, usize),
    time: TimeKey,
    sst: &RasterStack,
    profiles: &RasterStack,
    bases: &BasisSet,
) -> Result<Result<FusionSample, SkipReason>> {
    check_aligned(sst, profiles, bases)?;
    let g = profiles.geometry;
    neighbor_coords(center, g.n_lat, g.n_lon)?;
    let Some(tp) = profiles.month_index(&time) else { return Ok(Err(SkipReason::MissingMonth)) };
    let x = match build_input(center, time, sst, bases)? {
        Ok(x) => x,
        Err(skip) => return Ok(Err(skip)),
    };
    let Some(y) = profiles.profile(tp, center.0, center.1) else {
        return Ok(Err(SkipReason::MissingLabel));
    };
    Ok(Ok(FusionSample { x, y: y.speeds, cell: center, center: g.coord(center.0, center.1), time: time.month_key() }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub cell: (usize, usize),
    pub time: TimeKey,
    pub split: Split,
    /// Byte offset of the sample inside the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub cell: (usize, usize),
    pub time: TimeKey,
    pub reason: SkipReason,
}

/// Per-channel z-score statistics over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    /// Channels whose spread was too small; their std is set to 1.
    pub flagged: Vec<String>,
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; CHANNELS], std: [1.0; CHANNELS], flagged: Vec::new() }
    }
}

/// Fused samples in file precision plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: DepthGrid,
    pub geometry: GridGeometry,
    pub samples: Vec<SampleMeta>,
    pub stats: ChannelStats,
    pub skipped: Vec<SkippedSample>,
    pub provenance: Option<serde_json::Value>,
    /// `x` then `y` per sample, concatenated.
    values: Vec<f32>,
}

impl Dataset {
    fn sample_len(&self) -> usize {
        self.grid.layers() * (CHANNELS * NEIGHBORS + 1)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.grid.layers()
    }

    fn slot(&self, idx: usize) -> &[f32] {
        let n = self.sample_len();
        &self.values[idx * n..(idx + 1) * n]
    }

    /// Raw (un-normalized) `x` of sample `idx`.
    pub fn raw_x(&self, idx: usize) -> &[f32] {
        &self.slot(idx)[..self.layers() * CHANNELS * NEIGHBORS]
    }

    pub fn raw_y(&self, idx: usize) -> &[f32] {
        &self.slot(idx)[self.layers() * CHANNELS * NEIGHBORS..]
    }

    pub fn label(&self, idx: usize) -> Vec<f64> {
        self.raw_y(idx).iter().map(|&v| f64::from(v)).collect()
    }

    /// Normalized `x` of sample `idx` as a `[H, 6, 8]` tensor.
    pub fn input(&self, idx: usize) -> Tensor {
        let raw: Vec<f64> = self.raw_x(idx).iter().map(|&v| f64::from(v)).collect();
        let data = normalize(&raw, &self.stats);
        Tensor::new(vec![self.layers(), CHANNELS, NEIGHBORS], data).expect("sample length")
    }

    pub fn label_tensor(&self, idx: usize) -> Tensor {
        Tensor::from_vec(self.label(idx))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn coord(&self, idx: usize) -> GeoCoord {
        let (i, j) = self.samples[idx].cell;
        self.geometry.coord(i, j)
    }

    /// Blob bytes of the samples in `idx`, in order; used to fingerprint test inputs.
    pub fn sample_bytes(&self, idx: usize) -> Vec<u8> {
        let mut out = Vec::new();
        io::f32s_to_le(self.slot(idx), &mut out);
        out
    }
}

pub fn normalize(raw: &[f64], stats: &ChannelStats) -> Vec<f64> {
    raw.iter()
        .enumerate()
        .map(|(k, v)| {
            let ch = (k / NEIGHBORS) % CHANNELS;
            (v - stats.mean[ch]) / stats.std[ch]
        })
        .collect()
}

pub fn denormalize(x: &[f64], stats: &ChannelStats) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(k, v)| {
            let ch = (k / NEIGHBORS) % CHANNELS;
            v * stats.std[ch] + stats.mean[ch]
        })
        .collect()
}

fn channel_stats(values: &[f32], sample_len: usize, x_len: usize, train: &[usize]) -> ChannelStats {
    if train.is_empty() {
        let mut s = ChannelStats::identity();
        s.flagged = CHANNEL_NAMES.iter().map(|c| c.to_string()).collect();
        return s;
    }
    let mut sum = [0.0; CHANNELS];
    let mut count = 0usize;
    for &i in train {
        for (k, v) in values[i * sample_len..i * sample_len + x_len].iter().enumerate() {
            sum[(k / NEIGHBORS) % CHANNELS] += f64::from(*v);
        }
        count += x_len / CHANNELS;
    }
    let mean = sum.map(|s| s / count as f64);
    let mut ss = [0.0; CHANNELS];
    for &i in train {
        for (k, v) in values[i * sample_len..i * sample_len + x_len].iter().enumerate() {
            let ch = (k / NEIGHBORS) % CHANNELS;
            ss[ch] += (f64::from(*v) - mean[ch]).powi(2);
        }
    }
    let mut std = ss.map(|s| (s / count as f64).sqrt());
    let mut flagged = Vec::new();
    for (ch, s) in std.iter_mut().enumerate() {
        if *s <= 1e-12 {
            *s = 1.0;
            flagged.push(CHANNEL_NAMES[ch].to_string());
        }
    }
    ChannelStats { mean, std, flagged }
}

/// One candidate per interior cell per month; `train` and `test` are
/// disjoint month lists. Missing ingredients skip the candidate.
pub fn slide_dataset(
    sst: &RasterStack,
    profiles: &RasterStack,
    bases: &BasisSet,
    train: &[TimeKey],
    test: &[TimeKey],
) -> Result<Dataset> {
    let grid = check_aligned(sst, profiles, bases)?;
    let g = profiles.geometry;
    if g.n_lat < 3 || g.n_lon < 3 {
        return Err(FusionError::Empty(format!("region {}x{} is smaller than 3x3", g.n_lat, g.n_lon)));
    }
    if train.is_empty() && test.is_empty() {
        return Err(FusionError::Empty("no months selected".into()));
    }
    let train_set: BTreeSet<TimeKey> = train.iter().map(TimeKey::month_key).collect();
    let test_set: BTreeSet<TimeKey> = test.iter().map(TimeKey::month_key).collect();
    if let Some(m) = train_set.intersection(&test_set).next() {
        return Err(FusionError::Mismatch(format!("month {m} is in both splits")));
    }
    let months: Vec<(TimeKey, Split)> =
        train_set.iter().map(|m| (*m, Split::Train)).chain(test_set.iter().map(|m| (*m, Split::Test))).collect();

    let h = grid.layers();
    let x_len = h * CHANNELS * NEIGHBORS;
    let sample_len = x_len + h;
    let mut values = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for &(time, split) in &months {
        for n in 1..g.n_lat - 1 {
            for m in 1..g.n_lon - 1 {
                match build_sample((n, m), time, sst, profiles, bases)? {
                    Ok(s) => {
                        samples.push(SampleMeta { cell: (n, m), time, split, offset: values.len() * 4 });
                        values.extend(s.x.iter().chain(&s.y).map(|&v| v as f32));
                    }
                    Err(reason) => {
                        log::debug!("skip ({n},{m}) {time}: {reason}");
                        skipped.push(SkippedSample { cell: (n, m), time, reason });
                    }
                }
            }
        }
    }
    let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split == Split::Train).collect();
    let stats = channel_stats(&values, sample_len, x_len, &train_idx);
    if !stats.flagged.is_empty() {
        log::warn!("channels with no spread over the training split: {:?}", stats.flagged);
    }
    Ok(Dataset { grid, geometry: g, samples, stats, skipped, provenance: None, values })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    grid: DepthGrid,
    geometry: GridGeometry,
    channels: Vec<String>,
    stats: ChannelStats,
    samples: Vec<SampleMeta>,
    skipped: Vec<SkippedSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn write_dataset<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        grid: ds.grid,
        geometry: ds.geometry,
        channels: CHANNEL_NAMES.iter().map(|c| c.to_string()).collect(),
        stats: ds.stats.clone(),
        samples: ds.samples.clone(),
        skipped: ds.skipped.clone(),
        provenance: ds.provenance.clone(),
    };
    let mut blob = Vec::new();
    io::f32s_to_le(&ds.values, &mut blob);
    io::write_frame(w, &header, &blob)?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let (h, blob): (DatasetHeader, _) = io::read_frame(r)?;
    io::check_format(&h.format, DATASET_FORMAT)?;
    if h.channels != CHANNEL_NAMES {
        return Err(FusionError::Format(format!("channel order {:?}", h.channels)));
    }
    let values = io::le_to_f32s(&blob)?;
    let sample_len = h.grid.layers() * (CHANNELS * NEIGHBORS + 1);
    if values.len() != h.samples.len() * sample_len {
        return Err(FusionError::Format(format!(
            "{} values for {} samples of {sample_len}",
            values.len(),
            h.samples.len()
        )));
    }
    for (i, s) in h.samples.iter().enumerate() {
        if s.offset != i * sample_len * 4 {
            return Err(FusionError::Format(format!("sample {i} offset {}", s.offset)));
        }
    }
    if h.stats.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(FusionError::Format("non-positive channel std".into()));
    }
    Ok(Dataset {
        grid: h.grid,
        geometry: h.geometry,
        samples: h.samples,
        stats: h.stats,
        skipped: h.skipped,
        provenance: h.provenance,
        values,
    })
}

pub fn write_dataset_file(ds: &Dataset, path: &Path) -> Result<()> {
    write_dataset(ds, BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eof::BasisScope;
    use crate::geogrid::DEFAULT_MISSING;

    fn geometry(n_lat: usize, n_lon: usize) -> GridGeometry {
        GridGeometry { lat0: 10.0, lon0: 150.0, dlat: 1.0, dlon: 1.0, n_lat, n_lon }
    }

    /// Rasters where every cell varies by month only, plus a cell-dependent wobble.
    fn rasters(n_lat: usize, n_lon: usize, months: usize) -> (RasterStack, RasterStack) {
        let grid = DepthGrid::new(5.0, 12.0, 1.0).unwrap();
        let times = TimeKey::month(2019, 1).unwrap().month_range(months);
        let g = geometry(n_lat, n_lon);
        let mut sst = RasterStack::filled_missing("sst", "degC", g, None, times.clone(), DEFAULT_MISSING);
        let mut prof = RasterStack::filled_missing("ssp", "m/s", g, Some(grid), times, DEFAULT_MISSING);
        for t in 0..months {
            for i in 0..n_lat {
                for j in 0..n_lon {
                    let s = 20.0 + t as f64 * 0.5 + 0.1 * i as f64 - 0.05 * j as f64;
                    sst.cell_mut(t, i, j)[0] = s;
                    for (d, v) in prof.cell_mut(t, i, j).iter_mut().enumerate() {
                        let phase = (t * 7 + d * 3 + i + 2 * j) as f64;
                        *v = 1500.0 + 3.0 * s * (-(d as f64) / 4.0).exp() + 0.2 * phase.sin() + 0.1 * (d * t) as f64;
                    }
                }
            }
        }
        (sst, prof)
    }

    fn fixture(n_lat: usize, n_lon: usize, months: usize) -> (RasterStack, RasterStack, BasisSet, Vec<TimeKey>) {
        let (sst, prof) = rasters(n_lat, n_lon, months);
        let times = prof.times.clone();
        let (set, skipped) = BasisSet::build(&prof, &times, BasisScope::Cell).unwrap();
        assert!(skipped.is_empty());
        (sst, prof, set, times)
    }

    #[test]
    fn neighbor_order() {
        assert_eq!(
            neighbor_coords((10, 20), 30, 30).unwrap(),
            [(9, 19), (9, 20), (9, 21), (10, 19), (10, 21), (11, 19), (11, 20), (11, 21)]
        );
        assert!(matches!(neighbor_coords((0, 0), 5, 5), Err(FusionError::Boundary { .. })));
        assert!(neighbor_coords((2, 1), 3, 3).is_err());
        let ring = neighbor_coords((1, 1), 3, 3).unwrap();
        assert!(!ring.contains(&(1, 1)));
    }

    #[test]
    fn feature_block_layout() {
        let (_, prof, set, _) = fixture(3, 3, 6);
        let basis = set.get(0, 0).unwrap();
        let c = GeoCoord::new(10.0, 150.0).unwrap();
        let block = build_feature_block(c, 20.0, basis).unwrap();
        let h = prof.layers();
        assert_eq!(block.len(), h * 6);
        for d in 0..h {
            assert_eq!(&block[d * 6..d * 6 + 3], &[20.0, 10.0, 150.0]);
            assert_eq!(block[d * 6 + 3], basis.eigvecs[(d, 0)]);
            assert_eq!(block[d * 6 + 5], basis.eigvecs[(d, 2)]);
        }
        assert!(matches!(build_feature_block(c, f64::NAN, basis), Err(FusionError::MissingSst)));
    }

    #[test]
    fn sample_places_neighbors_in_order() {
        let (sst, prof, set, times) = fixture(4, 4, 6);
        let s = build_sample((1, 2), times[3], &sst, &prof, &set).unwrap().unwrap();
        let nbrs = neighbor_coords((1, 2), 4, 4).unwrap();
        let h = prof.layers();
        assert_eq!(s.x.len(), h * 48);
        for (i, &(r, c)) in nbrs.iter().enumerate() {
            assert_eq!(s.x[i], sst.value(3, r, c).unwrap());
            let d = h - 1;
            assert_eq!(s.x[(d * 6 + 4) * 8 + i], set.get(r, c).unwrap().eigvecs[(d, 1)]);
        }
        assert_eq!(s.y, prof.profile(3, 1, 2).unwrap().speeds);
    }

    #[test]
    fn missing_neighbor_sst_is_skipped() {
        let (mut sst, prof, set, times) = fixture(3, 3, 6);
        sst.cell_mut(2, 0, 1)[0] = DEFAULT_MISSING;
        assert_eq!(build_sample((1, 1), times[2], &sst, &prof, &set).unwrap(), Err(SkipReason::MissingSst));
        assert_eq!(SkipReason::MissingSst.to_string(), "missing-sst");
    }

    #[test]
    fn candidate_counts() {
        let (sst, prof, set, times) = fixture(3, 3, 6);
        let ds = slide_dataset(&sst, &prof, &set, &times[..1], &[]).unwrap();
        assert_eq!(ds.len(), 1);
        let (sst, prof, set, times) = fixture(5, 4, 6);
        let ds = slide_dataset(&sst, &prof, &set, &times[..1], &times[1..2]).unwrap();
        assert_eq!(ds.len(), 3 * 2 * 2);
        assert_eq!(ds.indices(Split::Test).len(), 6);
    }

    #[test]
    fn all_missing_month_yields_no_samples() {
        let (mut sst, prof, set, times) = fixture(4, 4, 6);
        for i in 0..4 {
            for j in 0..4 {
                sst.cell_mut(0, i, j)[0] = DEFAULT_MISSING;
            }
        }
        let ds = slide_dataset(&sst, &prof, &set, &times[..1], &[]).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.skipped.len(), 4);
        assert!(slide_dataset(&sst, &prof, &set, &[], &[]).is_err());
    }

    #[test]
    fn stats_from_train_only_and_normalization_inverts() {
        let (sst, prof, set, times) = fixture(4, 4, 6);
        let ds = slide_dataset(&sst, &prof, &set, &times[..4], &times[4..]).unwrap();
        let only_train = slide_dataset(&sst, &prof, &set, &times[..4], &[]).unwrap();
        assert_eq!(ds.stats, only_train.stats);
        let raw: Vec<f64> = ds.raw_x(5).iter().map(|&v| f64::from(v)).collect();
        let back = denormalize(ds.input(5).data(), &ds.stats);
        for (a, b) in raw.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(ds.stats.std.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn constant_channel_is_flagged() {
        let (mut sst, prof, set, times) = fixture(3, 3, 6);
        sst.values.iter_mut().for_each(|v| *v = 21.0);
        let ds = slide_dataset(&sst, &prof, &set, &times, &[]).unwrap();
        assert!(ds.stats.flagged.contains(&"sst".to_string()));
        assert_eq!(ds.stats.std[0], 1.0);
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let (sst, prof, set, times) = fixture(4, 5, 6);
        let mut ds = slide_dataset(&sst, &prof, &set, &times[..4], &times[4..]).unwrap();
        ds.provenance = Some(serde_json::json!({"seed": 7}));
        let mut a = Vec::new();
        write_dataset(&ds, &mut a).unwrap();
        let back = read_dataset(&a[..]).unwrap();
        assert_eq!(back, ds);
        let mut b = Vec::new();
        write_dataset(&back, &mut b).unwrap();
        assert_eq!(a, b);
        assert!(ds.samples.iter().enumerate().all(|(i, _)| ds.label(i).len() == ds.layers()));
    }

    #[test]
    fn neighbor_permutation_round_trip() {
        let (sst, prof, set, times) = fixture(3, 3, 6);
        let s = build_sample((1, 1), times[0], &sst, &prof, &set).unwrap().unwrap();
        let perm = [4, 2, 7, 0, 1, 6, 3, 5];
        let permute = |x: &[f64], p: &[usize]| -> Vec<f64> {
            x.chunks(NEIGHBORS).flat_map(|slab| p.iter().map(move |&k| slab[k])).collect()
        };
        let mut inv = [0; 8];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        assert_eq!(permute(&permute(&s.x, &perm), &inv), s.x);
    }

    #[test]
    fn identical_cells_give_identical_slabs() {
        let (mut sst, mut prof, _, times) = fixture(3, 3, 6);
        for t in 0..6 {
            let shared = prof.cell(t, 0, 0).to_vec();
            for i in 0..3 {
                for j in 0..3 {
                    sst.cell_mut(t, i, j)[0] = 18.0 + t as f64;
                    prof.cell_mut(t, i, j).copy_from_slice(&shared);
                }
            }
        }
        let (set, _) = BasisSet::build(&prof, &times, BasisScope::Cell).unwrap();
        let mut s = build_sample((1, 1), times[1], &sst, &prof, &set).unwrap().unwrap();
        // coordinates legitimately differ between neighbors; compare the rest
        for d in 0..prof.layers() {
            for ch in [0, 3, 4, 5] {
                let slab = &mut s.x[(d * 6 + ch) * 8..(d * 6 + ch + 1) * 8];
                assert!(slab.iter().all(|v| *v == slab[0]));
            }
        }
        assert_eq!(s.y, prof.profile(1, 0, 0).unwrap().speeds);
    }

    #[test]
    fn input_needs_no_label() {
        let (sst, mut prof) = rasters(4, 4, 3);
        let t = prof.times.clone();
        let (set, _) = BasisSet::build(&prof, &t, BasisScope::Cell).unwrap();
        let s = build_sample((1, 2), t[1], &sst, &prof, &set).unwrap().unwrap();
        let miss = prof.missing;
        prof.cell_mut(1, 1, 2).iter_mut().for_each(|v| *v = miss);
        assert_eq!(build_sample((1, 2), t[1], &sst, &prof, &set).unwrap(), Err(SkipReason::MissingLabel));
        assert_eq!(build_input((1, 2), t[1], &sst, &set).unwrap().unwrap(), s.x);
        assert!(matches!(build_input((0, 2), t[1], &sst, &set), Err(FusionError::Boundary { .. })));
    }
}
