//! Deterministic synthetic ocean on the Munk profile.
//!
//! Each profile is the Munk curve plus an SST-driven surface anomaly
//! `a·(SST − SST_ref)·exp(−z/z_mix)` plus smooth noise. SST is a base value
//! with a latitude gradient, an annual cycle and smooth noise. Noise fields are
//! low-order cosine series whose coefficients are drawn per month from the
//! seed, so they are smooth in space and depth and reproducible.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geogrid::{DepthGrid, GeoGridError, GridGeometry, RasterStack, TimeKey, DEFAULT_MISSING};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("degenerate synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GeoGridError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MunkParams {
    pub c1: f64,
    pub eps: f64,
    pub z_axis: f64,
    pub b: f64,
}

impl Default for MunkParams {
    fn default() -> Self {
        Self { c1: 1500.0, eps: 0.00737, z_axis: 1300.0, b: 1300.0 }
    }
}

/// Munk sound speed at depth `z` metres.
pub fn munk(z: f64, p: &MunkParams) -> f64 {
    let zt = 2.0 * (z - p.z_axis) / p.b;
    p.c1 * (1.0 + p.eps * (zt - 1.0 + (-zt).exp()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub geometry: GridGeometry,
    pub depth: DepthGrid,
    pub start: TimeKey,
    pub months: usize,
    pub seed: u64,
    pub munk: MunkParams,
    /// m/s per °C.
    pub coupling: f64,
    /// Metres.
    pub z_mix: f64,
    pub sst_base: f64,
    /// °C per degree of latitude north of the region's centre.
    pub sst_lat_gradient: f64,
    pub sst_seasonal: f64,
    pub sst_noise: f64,
    /// Reference SST of the surface anomaly; defaults to `sst_base`.
    pub sst_ref: Option<f64>,
    /// m/s.
    pub profile_noise: f64,
    /// Cosine terms per noise field.
    pub noise_terms: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            geometry: GridGeometry { lat0: 5.5, lon0: 150.5, dlat: 1.0, dlon: 1.0, n_lat: 12, n_lon: 12 },
            depth: DepthGrid::new(5.0, 68.0, 1.0).expect("valid grid"),
            start: TimeKey::month(2015, 7).expect("valid month"),
            months: 30,
            seed: 42,
            munk: MunkParams::default(),
            coupling: 3.0,
            z_mix: 80.0,
            sst_base: 27.0,
            sst_lat_gradient: -0.25,
            sst_seasonal: 2.0,
            sst_noise: 0.6,
            sst_ref: None,
            profile_noise: 0.5,
            noise_terms: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.geometry.n_lat < 3 || self.geometry.n_lon < 3 {
            return Err(SynthError::Config(format!(
                "region {}x{} is smaller than 3x3",
                self.geometry.n_lat, self.geometry.n_lon
            )));
        }
        if self.months == 0 {
            return Err(SynthError::Config("no months".into()));
        }
        let scales = [self.z_mix, self.munk.c1, self.munk.b];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SynthError::Config("z_mix, c1 and B must be positive".into()));
        }
        let amps = [self.coupling, self.sst_seasonal, self.sst_noise, self.profile_noise, self.munk.eps];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(SynthError::Config("amplitudes must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn sst_ref(&self) -> f64 {
        self.sst_ref.unwrap_or(self.sst_base)
    }

    pub fn times(&self) -> Vec<TimeKey> {
        self.start.month_range(self.months)
    }
}

/// `Σ c·cos(2π(k·u) + φ)` over unit-cube coordinates, scaled so the
/// coefficient vector has unit RMS weight.
struct CosineField {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl CosineField {
    fn draw(rng: &mut ChaCha8Rng, n: usize, dims: usize) -> Self {
        let terms = (0..n)
            .map(|_| {
                let mut k = [0.0; 3];
                for kk in k.iter_mut().take(dims) {
                    *kk = f64::from(rng.gen_range(0u8..=2));
                }
                (k, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, u: [f64; 3]) -> f64 {
        let n = self.terms.len().max(1) as f64;
        self.terms
            .iter()
            .map(|(k, c, phi)| c * (2.0 * PI * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) + phi).cos())
            .sum::<f64>()
            / n.sqrt()
    }
}

fn unit(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Seed stream for month `t` of field `field`.
fn month_rng(seed: u64, field: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (field << 56) ^ ((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// SST and profile rasters in the geo-grid layout; equal configs give equal bytes.
pub fn synth_fields(config: &SynthConfig) -> Result<(RasterStack, RasterStack)> {
    config.validate()?;
    let g = config.geometry;
    let grid = config.depth;
    let times = config.times();
    let mut sst = RasterStack::filled_missing("sst", "degC", g, None, times.clone(), DEFAULT_MISSING);
    let mut prof = RasterStack::filled_missing("ssp", "m/s", g, Some(grid), times.clone(), DEFAULT_MISSING);
    let lat_mid = g.lat0 + g.dlat * (g.n_lat - 1) as f64 / 2.0;
    let depths = grid.depths();
    let base: Vec<f64> = depths.iter().map(|&z| munk(z, &config.munk)).collect();
    let decay: Vec<f64> = depths.iter().map(|&z| (-z / config.z_mix).exp()).collect();
    let span = (grid.z_max() - grid.z_min()).max(f64::EPSILON);
    let sst_ref = config.sst_ref();
    let provenance = serde_json::to_value(config).ok();

    for (t, key) in times.iter().enumerate() {
        let sst_field = CosineField::draw(&mut month_rng(config.seed, 1, t), config.noise_terms, 2);
        let ssp_field = CosineField::draw(&mut month_rng(config.seed, 2, t), config.noise_terms, 3);
        let season = config.sst_seasonal * (2.0 * PI * f64::from(key.month - 1) / 12.0).sin();
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                let c = g.coord(i, j);
                let (ui, uj) = (unit(i, g.n_lat), unit(j, g.n_lon));
                let s = config.sst_base
                    + config.sst_lat_gradient * (c.lat - lat_mid)
                    + season
                    + config.sst_noise * sst_field.at([ui, uj, 0.0]);
                sst.cell_mut(t, i, j)[0] = s;
                let anomaly = config.coupling * (s - sst_ref);
                for (d, v) in prof.cell_mut(t, i, j).iter_mut().enumerate() {
                    let uz = (depths[d] - grid.z_min()) / span;
                    *v = base[d] + anomaly * decay[d] + config.profile_noise * ssp_field.at([ui, uj, uz]);
                }
            }
        }
    }
    sst.provenance = provenance.clone();
    prof.provenance = provenance;
    Ok((sst, prof))
}
