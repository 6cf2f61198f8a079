//! Baselines, RMSE tables, depth-band and error-distribution reports, SVG
//! line plots and attention exports.
//!
//! Four methods are compared on the same test samples: the attention model,
//! the cnn-only ablation, inverse-distance interpolation of the neighbors'
//! same-month profiles (SITP) and the per-cell training-period mean (MEAN).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::fusion::{neighbor_coords, Dataset, FusionError, Split};
use crate::geogrid::{DepthGrid, GeoCoord, Profile, RasterStack, TimeKey};
use crate::io::{self, FrameError};
use crate::model::{self, ModelError, Variant};
use crate::trainer::Checkpoint;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const METHODS: [&str; 4] = ["sa_mdf_cnn", "cnn", "sitp", "mean"];
pub const DEFAULT_BANDS: [f64; 3] = [200.0, 300.0, 500.0];
pub const ATTENTION_FORMAT: &str = "sspfuse-attn/1";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no historical profiles for the mean")]
    NoHistory,
    #[error("no neighbor profiles to interpolate")]
    NoNeighbors,
    #[error("target coincides with a neighbor at {0}")]
    Coincident(String),
    #[error("inputs disagree: {0}")]
    Mismatch(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Per-depth mean of `history`.
pub fn mean_method(history: &[Profile]) -> Result<Profile> {
    let first = history.first().ok_or(EvalError::NoHistory)?;
    let mut acc = vec![0.0; first.speeds.len()];
    for p in history {
        if p.grid != first.grid {
            return Err(EvalError::Mismatch("history profiles on different grids".into()));
        }
        acc.iter_mut().zip(&p.speeds).for_each(|(a, v)| *a += v);
    }
    let n = history.len() as f64;
    Ok(Profile { grid: first.grid, speeds: acc.into_iter().map(|a| a / n).collect() })
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Per-depth inverse-distance weighting with power 2.
pub fn sitp(neighbors: &[(GeoCoord, Profile)], target: GeoCoord) -> Result<Profile> {
    let (_, first) = neighbors.first().ok_or(EvalError::NoNeighbors)?;
    let mut weights = Vec::with_capacity(neighbors.len());
    for (c, p) in neighbors {
        if p.grid != first.grid {
            return Err(EvalError::Mismatch("neighbor profiles on different grids".into()));
        }
        let d = haversine_km(*c, target);
        if d == 0.0 {
            return Err(EvalError::Coincident(c.label()));
        }
        weights.push(1.0 / (d * d));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; first.speeds.len()];
    for ((_, p), w) in neighbors.iter().zip(&weights) {
        out.iter_mut().zip(&p.speeds).for_each(|(o, v)| *o += w / total * v);
    }
    Ok(Profile { grid: first.grid, speeds: out })
}

/// RMSE over the layers whose depth lies in `range` (all layers when `None`).
pub fn rmse(pred: &[f64], truth: &[f64], grid: &DepthGrid, range: Option<(f64, f64)>) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != grid.layers() {
        return Err(EvalError::Mismatch(format!(
            "lengths {} / {} on {} layers",
            pred.len(),
            truth.len(),
            grid.layers()
        )));
    }
    let layers = match range {
        Some((lo, hi)) => grid.layers_within(lo, hi),
        None => 0..grid.layers(),
    };
    if layers.is_empty() {
        return Err(EvalError::Mismatch(format!("no layers inside {range:?}")));
    }
    let n = layers.len() as f64;
    Ok((layers.map(|i| (pred[i] - truth[i]).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub cell: (usize, usize),
    pub location: String,
    pub time: TimeKey,
    /// Full-depth RMSE per method, in [`METHODS`] order.
    pub rmse: [f64; 4],
    /// Band RMSE per method, one row per band.
    pub bands: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocationRow {
    pub location: String,
    pub cell: (usize, usize),
    pub rmse: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub grid: DepthGrid,
    pub samples: Vec<SampleRow>,
    pub locations: Vec<LocationRow>,
    /// Mean of the location rows.
    pub average: [f64; 4],
    /// Band upper depths; each band runs from the surface to that depth.
    pub bands: Vec<f64>,
    /// Mean band RMSE per method over all samples.
    pub band_rmse: Vec<[f64; 4]>,
    /// Mean absolute error per depth layer per method.
    pub depth_mae: Vec<[f64; 4]>,
    /// SHA-256 of the test sample stream every method was scored on.
    pub test_hash: String,
}

fn mean4(rows: impl Iterator<Item = [f64; 4]>) -> [f64; 4] {
    let mut acc = [0.0; 4];
    let mut n = 0usize;
    for r in rows {
        (0..4).for_each(|k| acc[k] += r[k]);
        n += 1;
    }
    acc.map(|a| a / n.max(1) as f64)
}

/// Hex SHA-256 of the test samples' bytes in dataset order.
pub fn test_stream_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for i in ds.indices(Split::Test) {
        h.update(ds.sample_bytes(i));
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Scores every test sample of `ds` with all four methods.
///
/// `profiles` supplies SITP's neighbor profiles and MEAN's history; the
/// training months are those of the dataset's training split.
pub fn compare_methods(
    ds: &Dataset,
    sa: &Checkpoint,
    cnn: &Checkpoint,
    profiles: &RasterStack,
    bands: &[f64],
) -> Result<EvalReport> {
    if sa.params.config().variant != Variant::Attention || cnn.params.config().variant != Variant::Cnn {
        return Err(EvalError::Mismatch("expected an attention checkpoint and a cnn checkpoint".into()));
    }
    let grid = profiles.depth.ok_or_else(|| EvalError::Missing("profile depth axis".into()))?;
    if grid != ds.grid || profiles.geometry != ds.geometry {
        return Err(EvalError::Mismatch("profile rasters do not match the dataset".into()));
    }
    let test = ds.indices(Split::Test);
    if test.is_empty() {
        return Err(EvalError::Missing("test samples".into()));
    }
    let train_months: BTreeSet<TimeKey> =
        ds.samples.iter().filter(|s| s.split == Split::Train).map(|s| s.time).collect();
    let train_t: Vec<usize> = train_months.iter().filter_map(|m| profiles.month_index(m)).collect();
    let g = ds.geometry;

    let rows = test
        .par_iter()
        .map(|&idx| {
            let meta = &ds.samples[idx];
            let (n, m) = meta.cell;
            let x = ds.input(idx);
            let truth = ds.label(idx);
            let p_sa = model::forward(&sa.params, &x)?;
            let p_cnn = model::forward(&cnn.params, &x)?;
            let t = profiles
                .month_index(&meta.time)
                .ok_or_else(|| EvalError::Missing(format!("profiles for {}", meta.time)))?;
            let nbrs: Vec<(GeoCoord, Profile)> = neighbor_coords((n, m), g.n_lat, g.n_lon)?
                .iter()
                .filter_map(|&(r, c)| profiles.profile(t, r, c).map(|p| (g.coord(r, c), p)))
                .collect();
            let p_sitp = sitp(&nbrs, g.coord(n, m))?.speeds;
            let history: Vec<Profile> = train_t.iter().filter_map(|&t| profiles.profile(t, n, m)).collect();
            let p_mean = mean_method(&history)?.speeds;
            let preds = [p_sa, p_cnn, p_sitp, p_mean];
            let mut full = [0.0; 4];
            let mut band_rows = vec![[0.0; 4]; bands.len()];
            let mut abs = vec![[0.0; 4]; grid.layers()];
            for (k, p) in preds.iter().enumerate() {
                full[k] = rmse(p, &truth, &grid, None)?;
                for (b, &depth) in bands.iter().enumerate() {
                    band_rows[b][k] = rmse(p, &truth, &grid, Some((0.0, depth)))?;
                }
                for (d, a) in abs.iter_mut().enumerate() {
                    a[k] = (p[d] - truth[d]).abs();
                }
            }
            let row = SampleRow {
                cell: meta.cell,
                location: g.coord(n, m).label(),
                time: meta.time,
                rmse: full,
                bands: band_rows,
            };
            Ok((row, abs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_cell: BTreeMap<(usize, usize), Vec<[f64; 4]>> = BTreeMap::new();
    for (r, _) in &rows {
        by_cell.entry(r.cell).or_default().push(r.rmse);
    }
    let locations: Vec<LocationRow> = by_cell
        .into_iter()
        .map(|(cell, v)| LocationRow { location: g.coord(cell.0, cell.1).label(), cell, rmse: mean4(v.into_iter()) })
        .collect();
    let average = mean4(locations.iter().map(|l| l.rmse));
    let band_rmse = (0..bands.len()).map(|b| mean4(rows.iter().map(|(r, _)| r.bands[b]))).collect();
    let depth_mae = (0..grid.layers()).map(|d| mean4(rows.iter().map(|(_, a)| a[d]))).collect();
    Ok(EvalReport {
        grid,
        samples: rows.into_iter().map(|(r, _)| r).collect(),
        locations,
        average,
        bands: bands.to_vec(),
        band_rmse,
        depth_mae,
        test_hash: test_stream_hash(ds),
    })
}

fn write_comments<W: Write>(w: &mut W, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    Ok(())
}

/// Location table: `7.5N 156.5E, 0.1125, 0.1317, 0.2456, 0.2591`, then `Average`.
pub fn write_location_table<W: Write>(r: &EvalReport, comments: &[String], mut w: W) -> Result<()> {
    write_comments(&mut w, comments)?;
    writeln!(w, "# test samples sha256: {}", r.test_hash)?;
    writeln!(w, "location, {}", METHODS.join(", "))?;
    let line = |label: &str, v: &[f64; 4]| format!("{label}, {:.4}, {:.4}, {:.4}, {:.4}", v[0], v[1], v[2], v[3]);
    for l in &r.locations {
        writeln!(w, "{}", line(&l.location, &l.rmse))?;
    }
    writeln!(w, "{}", line("Average", &r.average))?;
    Ok(())
}

pub fn write_band_table<W: Write>(r: &EvalReport, comments: &[String], mut w: W) -> Result<()> {
    write_comments(&mut w, comments)?;
    writeln!(w, "# band: RMSE over all layers from the surface down to depth_m")?;
    writeln!(w, "depth_m,{}", METHODS.join(","))?;
    for (d, v) in r.bands.iter().zip(&r.band_rmse) {
        writeln!(w, "{d},{:.6},{:.6},{:.6},{:.6}", v[0], v[1], v[2], v[3])?;
    }
    Ok(())
}

pub fn write_depth_mae<W: Write>(r: &EvalReport, comments: &[String], mut w: W) -> Result<()> {
    write_comments(&mut w, comments)?;
    writeln!(w, "depth_m,mae_sa_mdf_cnn,mae_cnn,mae_sitp,mae_mean")?;
    for (d, v) in r.grid.depths().iter().zip(&r.depth_mae) {
        writeln!(w, "{d},{:.6},{:.6},{:.6},{:.6}", v[0], v[1], v[2], v[3])?;
    }
    Ok(())
}

pub fn write_sample_table<W: Write>(r: &EvalReport, comments: &[String], mut w: W) -> Result<()> {
    write_comments(&mut w, comments)?;
    writeln!(w, "location,time,{}", METHODS.join(","))?;
    for s in &r.samples {
        let v = s.rmse;
        writeln!(w, "{},{},{:.6},{:.6},{:.6},{:.6}", s.location, s.time, v[0], v[1], v[2], v[3])?;
    }
    Ok(())
}

/// Minimal SVG line chart; `series` share the `x` axis.
pub fn svg_lines(title: &str, x_label: &str, y_label: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let finite = |v: &f64| v.is_finite();
    let (x0, x1) =
        x.iter().copied().filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied().filter(finite))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let sx = |v: f64| PAD + (v - x0) / span(x0, x1) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / span(y0, y1) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<path d="M{PAD},{PAD} V{b} H{r}" stroke="black" fill="none"/>"#, b = H - PAD, r = W - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    if x0.is_finite() && y0.is_finite() {
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, fmt_tick(x0));
        let _ =
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W - PAD, H - PAD + 16.0, fmt_tick(x1));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, H - PAD, fmt_tick(y0));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, PAD + 4.0, fmt_tick(y1));
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(&a, &b)| format!("{:.2},{:.2}", sx(a), sy(b)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - PAD - 120.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Attention received per depth, averaged over `indices` of `ds`.
pub fn mean_received_attention(ckpt: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(EvalError::Missing("samples for the attention trace".into()));
    }
    let traces = indices
        .par_iter()
        .map(|&i| Ok(model::attention_trace(&ckpt.params, &ds.input(i))?.received))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; ds.layers()];
    for t in &traces {
        acc.iter_mut().zip(t).for_each(|(a, v)| *a += v);
    }
    let total: f64 = acc.iter().sum();
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Mean weight over the shallowest and the deepest quarter of the layers.
pub fn quartile_contrast(received: &[f64]) -> (f64, f64) {
    let q = (received.len() / 4).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&received[..q]), mean(&received[received.len() - q..]))
}

/// `depth_m,weight` CSV of a received-attention vector.
pub fn write_attention_csv<W: Write>(grid: &DepthGrid, received: &[f64], comments: &[String], mut w: W) -> Result<()> {
    if received.len() != grid.layers() {
        return Err(EvalError::Mismatch(format!("{} weights for {} layers", received.len(), grid.layers())));
    }
    write_comments(&mut w, comments)?;
    writeln!(w, "depth_m,weight")?;
    for (d, v) in grid.depths().iter().zip(received) {
        writeln!(w, "{d},{v:.9e}")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionHeader {
    pub format: String,
    pub heads: usize,
    pub layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// Per-head `[H, H]` matrices, head after head, as f64.
pub fn write_attention_heads<W: Write>(heads: &[Tensor], provenance: Option<serde_json::Value>, w: W) -> Result<()> {
    let layers = heads.first().map_or(Ok(0), |t| t.dims2().map(|d| d.0)).map_err(ModelError::from)?;
    let header = AttentionHeader { format: ATTENTION_FORMAT.into(), heads: heads.len(), layers, provenance };
    let mut blob = Vec::new();
    for h in heads {
        io::f64s_to_le(h.data(), &mut blob);
    }
    io::write_frame(w, &header, &blob)?;
    Ok(())
}

pub fn read_attention_heads<R: std::io::BufRead>(r: R) -> Result<(AttentionHeader, Vec<Tensor>)> {
    let (h, blob): (AttentionHeader, _) = io::read_frame(r)?;
    io::check_format(&h.format, ATTENTION_FORMAT)?;
    let values = io::le_to_f64s(&blob)?;
    let n = h.layers * h.layers;
    if values.len() != n * h.heads {
        return Err(EvalError::Mismatch(format!("{} values for {} heads", values.len(), h.heads)));
    }
    let heads = values
        .chunks(n.max(1))
        .take(h.heads)
        .map(|c| Tensor::new(vec![h.layers, h.layers], c.to_vec()).map_err(ModelError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((h, heads))
}
