//! Empirical orthogonal functions of historical sound speed profiles.
//!
//! Profiles of one cell are stacked as the columns of an `H × J` matrix, the
//! mean profile is removed and the residual covariance `C = R·Rᵀ / J` is
//! diagonalised. When `J < H` (the usual case: a few dozen monthly profiles
//! on a 1 m depth grid) the `J × J` Gram matrix `Rᵀ·R / J` is diagonalised
//! instead and its eigenvectors are mapped back through `R`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geogrid::{DepthGrid, GridGeometry, Profile, RasterStack, TimeKey};
use crate::io::{check_format, f64s_to_le, le_to_f64s, read_frame, write_frame, FrameError};
use crate::linalg::{dot, jacobi_eigen, norm, Mat};

/// Number of leading modes fed to the fusion stage.
pub const DEFAULT_ORDER: usize = 3;

/// Gram eigenvalues below this fraction of the largest are treated as null modes.
const NULL_MODE_RTOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum EofError {
    #[error("empty profile matrix")]
    Empty,
    #[error("need at least {need} profiles, got {got}")]
    TooFewColumns { need: usize, got: usize },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("order {k} outside 1..={k_max}")]
    Order { k: usize, k_max: usize },
    #[error("basis invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EofError> = std::result::Result<T, E>;

/// Profiles sharing a depth grid, one per column.
#[derive(Debug, Clone)]
pub struct ProfileMatrix {
    grid: DepthGrid,
    columns: Vec<Vec<f64>>,
}

impl ProfileMatrix {
    pub fn new(grid: DepthGrid, profiles: impl IntoIterator<Item = Profile>) -> Result<Self> {
        let mut columns = Vec::new();
        for p in profiles {
            if p.grid != grid || p.speeds.len() != grid.layers() {
                return Err(EofError::Geometry("profile on a different depth grid".into()));
            }
            columns.push(p.speeds);
        }
        Ok(Self { grid, columns })
    }

    pub fn grid(&self) -> DepthGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }
}

/// Row-wise mean of the profile matrix.
pub fn mean_profile(m: &ProfileMatrix) -> Result<Profile> {
    if m.is_empty() {
        return Err(EofError::Empty);
    }
    let h = m.grid.layers();
    let mut mean = vec![0.0; h];
    for c in &m.columns {
        for (a, v) in mean.iter_mut().zip(c) {
            *a += v;
        }
    }
    let j = m.len() as f64;
    mean.iter_mut().for_each(|v| *v /= j);
    Ok(Profile { grid: m.grid, speeds: mean })
}

/// `H × J` matrix whose column `j` is `S_j − S_0`.
pub fn residual_matrix(m: &ProfileMatrix, mean: &Profile) -> Result<Mat> {
    if mean.grid != m.grid || mean.speeds.len() != m.grid.layers() {
        return Err(EofError::Geometry(format!(
            "mean has {} layers, matrix has {}",
            mean.speeds.len(),
            m.grid.layers()
        )));
    }
    let h = m.grid.layers();
    let mut r = Mat::zeros(h, m.len());
    for (j, c) in m.columns.iter().enumerate() {
        for i in 0..h {
            r[(i, j)] = c[i] - mean.speeds[i];
        }
    }
    Ok(r)
}

/// Which eigenproblem to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EofPath {
    /// Gram matrix when `J < H`, covariance otherwise.
    Auto,
    /// `J × J` Gram matrix mapped back through the residuals.
    Gram,
    /// `H × H` covariance.
    Direct,
}

/// Mean profile plus ranked orthonormal EOFs of one cell (or region).
#[derive(Debug, Clone, PartialEq)]
pub struct EofBasis {
    pub grid: DepthGrid,
    pub mean: Profile,
    /// `H × K_max`, one EOF per column.
    pub eigvecs: Mat,
    /// Descending, non-negative.
    pub eigvals: Vec<f64>,
    /// Number of source profiles.
    pub samples: usize,
}

/// Expansion coefficients of a profile anomaly on the leading EOFs.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffVector {
    pub alpha: Vec<f64>,
}

impl CoeffVector {
    pub fn order(&self) -> usize {
        self.alpha.len()
    }
}

/// Flips `v` so its largest-magnitude entry is positive (ties: shallowest).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Gram–Schmidt `v` against the columns gathered so far (two passes).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let d = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
}

/// Decomposes a residual matrix with the path chosen automatically.
pub fn eof_decompose(resid: &Mat, mean: Profile) -> Result<EofBasis> {
    decompose_with(resid, mean, EofPath::Auto)
}

pub fn decompose_with(resid: &Mat, mean: Profile, path: EofPath) -> Result<EofBasis> {
    let (h, j) = (resid.rows(), resid.cols());
    if j < 2 {
        return Err(EofError::TooFewColumns { need: 2, got: j });
    }
    if h != mean.speeds.len() {
        return Err(EofError::Geometry(format!("residual has {h} rows, mean has {}", mean.speeds.len())));
    }
    if !resid.is_finite() {
        return Err(EofError::NonFinite("residual matrix"));
    }
    let gram = match path {
        EofPath::Auto => j < h,
        EofPath::Gram => true,
        EofPath::Direct => false,
    };
    let (vecs, vals) = if gram { gram_path(resid) } else { direct_path(resid) };
    let mut eigvecs = Mat::zeros(h, vecs.len());
    for (k, v) in vecs.iter().enumerate() {
        eigvecs.set_column(k, v);
    }
    Ok(EofBasis { grid: mean.grid, mean, eigvecs, eigvals: vals, samples: j })
}

fn direct_path(resid: &Mat) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut c = resid.gram_rows();
    c.scale(1.0 / resid.cols() as f64);
    let eig = jacobi_eigen(&c);
    let k_max = resid.rows().min(resid.cols());
    let mut vecs = Vec::with_capacity(k_max);
    let mut vals = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let mut v = eig.vectors.column(k);
        fix_sign(&mut v);
        vecs.push(v);
        vals.push(eig.values[k].max(0.0));
    }
    (vecs, vals)
}

fn gram_path(resid: &Mat) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (h, j) = (resid.rows(), resid.cols());
    let mut g = resid.gram_cols();
    g.scale(1.0 / j as f64);
    let eig = jacobi_eigen(&g);
    let k_max = h.min(j);
    let top = eig.values[0].max(0.0);
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut vals = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let mu = eig.values[k];
        if top == 0.0 || mu <= NULL_MODE_RTOL * top {
            break;
        }
        let mut v = resid.matvec(&eig.vectors.column(k));
        orthogonalize(&mut v, &vecs);
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        fix_sign(&mut v);
        vecs.push(v);
        vals.push(mu);
    }
    // null modes: complete with unit vectors orthogonal to the span, depth order
    let mut unit = 0;
    while vecs.len() < k_max && unit < h {
        let mut v = vec![0.0; h];
        v[unit] = 1.0;
        unit += 1;
        orthogonalize(&mut v, &vecs);
        let n = norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        fix_sign(&mut v);
        vecs.push(v);
        vals.push(0.0);
    }
    (vecs, vals)
}

impl EofBasis {
    /// Decomposes the given profiles directly.
    pub fn from_profiles(m: &ProfileMatrix) -> Result<Self> {
        let mean = mean_profile(m)?;
        let r = residual_matrix(m, &mean)?;
        eof_decompose(&r, mean)
    }

    pub fn k_max(&self) -> usize {
        self.eigvecs.cols()
    }

    pub fn layers(&self) -> usize {
        self.grid.layers()
    }

    /// EOF `k` (0-based).
    pub fn eigvec(&self, k: usize) -> Vec<f64> {
        self.eigvecs.column(k)
    }

    /// Checks orthonormality (1e-9), ordering and non-negativity.
    pub fn validate(&self) -> Result<()> {
        let k = self.k_max();
        if self.eigvals.len() != k || self.eigvecs.rows() != self.grid.layers() {
            return Err(EofError::Invariant("shape".into()));
        }
        if self.eigvals.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(EofError::Invariant("negative or non-finite eigenvalue".into()));
        }
        if self.eigvals.windows(2).any(|w| w[1] > w[0]) {
            return Err(EofError::Invariant("eigenvalues not descending".into()));
        }
        let cols: Vec<Vec<f64>> = (0..k).map(|c| self.eigvec(c)).collect();
        for a in 0..k {
            for b in a..k {
                let want = if a == b { 1.0 } else { 0.0 };
                let d = dot(&cols[a], &cols[b]);
                if (d - want).abs() > 1e-9 {
                    return Err(EofError::Invariant(format!("e{a}·e{b} = {d}")));
                }
            }
        }
        Ok(())
    }
}

/// `α = E_{H,K}ᵀ (target − mean)`.
pub fn project(basis: &EofBasis, target: &Profile, k: usize) -> Result<CoeffVector> {
    if k == 0 || k > basis.k_max() {
        return Err(EofError::Order { k, k_max: basis.k_max() });
    }
    if target.speeds.len() != basis.layers() {
        return Err(EofError::Geometry(format!(
            "target has {} layers, basis has {}",
            target.speeds.len(),
            basis.layers()
        )));
    }
    let anomaly: Vec<f64> = target.speeds.iter().zip(&basis.mean.speeds).map(|(t, m)| t - m).collect();
    let alpha = (0..k).map(|c| dot(&basis.eigvec(c), &anomaly)).collect();
    Ok(CoeffVector { alpha })
}

/// `S = S_0 + Σ α_k e_k`.
pub fn reconstruct(basis: &EofBasis, alpha: &CoeffVector) -> Result<Profile> {
    if alpha.order() > basis.k_max() {
        return Err(EofError::Order { k: alpha.order(), k_max: basis.k_max() });
    }
    if alpha.alpha.iter().any(|a| !a.is_finite()) {
        return Err(EofError::NonFinite("coefficients"));
    }
    let mut s = basis.mean.speeds.clone();
    for (c, a) in alpha.alpha.iter().enumerate() {
        for (i, x) in s.iter_mut().enumerate() {
            *x += a * basis.eigvecs[(i, c)];
        }
    }
    Ok(Profile { grid: basis.grid, speeds: s })
}

const BASIS_FORMAT: &str = "sspfuse-eof/1";
const BASIS_SET_FORMAT: &str = "sspfuse-eofset/1";

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    format: String,
    grid: DepthGrid,
    #[serde(rename = "J")]
    samples: usize,
    k_max: usize,
    eigvals: Vec<f64>,
}

fn basis_blob(b: &EofBasis, out: &mut Vec<u8>) {
    f64s_to_le(&b.mean.speeds, out);
    for c in 0..b.k_max() {
        f64s_to_le(&b.eigvec(c), out);
    }
}

fn basis_from_blob(grid: DepthGrid, samples: usize, eigvals: Vec<f64>, values: &[f64]) -> Result<EofBasis> {
    let h = grid.layers();
    let k = eigvals.len();
    if values.len() != h * (k + 1) {
        return Err(EofError::Geometry(format!("blob holds {} values, expected {}", values.len(), h * (k + 1))));
    }
    let mut eigvecs = Mat::zeros(h, k);
    for c in 0..k {
        eigvecs.set_column(c, &values[h * (c + 1)..h * (c + 2)]);
    }
    Ok(EofBasis { grid, mean: Profile { grid, speeds: values[..h].to_vec() }, eigvecs, eigvals, samples })
}

/// Single-basis file: JSON header (grid, J, K_max, eigenvalues) then the mean
/// and the EOFs column by column as little-endian `f64`.
pub fn write_basis<W: Write>(b: &EofBasis, w: W) -> Result<()> {
    let header = BasisHeader {
        format: BASIS_FORMAT.into(),
        grid: b.grid,
        samples: b.samples,
        k_max: b.k_max(),
        eigvals: b.eigvals.clone(),
    };
    let mut blob = Vec::new();
    basis_blob(b, &mut blob);
    write_frame(w, &header, &blob)?;
    Ok(())
}

pub fn read_basis<R: BufRead>(r: R) -> Result<EofBasis> {
    let (h, blob): (BasisHeader, _) = read_frame(r)?;
    check_format(&h.format, BASIS_FORMAT)?;
    if h.eigvals.len() != h.k_max {
        return Err(EofError::Geometry("eigenvalue count differs from K_max".into()));
    }
    basis_from_blob(h.grid, h.samples, h.eigvals, &le_to_f64s(&blob)?)
}

/// Whether bases are computed per grid cell or once for the whole region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisScope {
    #[default]
    Cell,
    Region,
}

impl std::str::FromStr for BasisScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cell" => Ok(Self::Cell),
            "region" => Ok(Self::Region),
            _ => Err(format!("basis scope must be `cell` or `region`, got `{s}`")),
        }
    }
}

/// EOF bases for the cells of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub scope: BasisScope,
    pub grid: DepthGrid,
    pub geometry: GridGeometry,
    bases: Vec<EofBasis>,
    /// cell → index into `bases`
    cells: BTreeMap<(usize, usize), usize>,
    pub provenance: Option<serde_json::Value>,
}

/// A cell left without a basis and why.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCell {
    pub cell: (usize, usize),
    pub reason: String,
}

impl BasisSet {
    pub fn get(&self, i: usize, j: usize) -> Option<&EofBasis> {
        self.cells.get(&(i, j)).map(|&k| &self.bases[k])
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Builds bases from the complete profiles of `months` in `stack`.
    ///
    /// Cell scope needs at least two profiles per cell; cells short of that
    /// are reported as skipped. Region scope pools every profile of every cell.
    pub fn build(stack: &RasterStack, months: &[TimeKey], scope: BasisScope) -> Result<(Self, Vec<SkippedCell>)> {
        let grid = stack.depth.ok_or_else(|| EofError::Geometry("EOFs need a profile stack".into()))?;
        let g = stack.geometry;
        let tis: Vec<usize> = months.iter().filter_map(|m| stack.month_index(m)).collect();
        let history =
            |i: usize, j: usize| -> Vec<Profile> { tis.iter().filter_map(|&t| stack.profile(t, i, j)).collect() };
        let mut set =
            BasisSet { scope, grid, geometry: g, bases: Vec::new(), cells: BTreeMap::new(), provenance: None };
        let mut skipped = Vec::new();
        match scope {
            BasisScope::Cell => {
                for i in 0..g.n_lat {
                    for j in 0..g.n_lon {
                        let hist = history(i, j);
                        if hist.len() < 2 {
                            skipped.push(SkippedCell {
                                cell: (i, j),
                                reason: format!("{} historical profiles (need 2)", hist.len()),
                            });
                            continue;
                        }
                        let basis = EofBasis::from_profiles(&ProfileMatrix::new(grid, hist)?)?;
                        set.cells.insert((i, j), set.bases.len());
                        set.bases.push(basis);
                    }
                }
            }
            BasisScope::Region => {
                let all: Vec<Profile> = (0..g.n_lat)
                    .flat_map(|i| (0..g.n_lon).map(move |j| (i, j)))
                    .flat_map(|(i, j)| history(i, j))
                    .collect();
                if all.len() < 2 {
                    return Err(EofError::TooFewColumns { need: 2, got: all.len() });
                }
                set.bases.push(EofBasis::from_profiles(&ProfileMatrix::new(grid, all)?)?);
                for i in 0..g.n_lat {
                    for j in 0..g.n_lon {
                        set.cells.insert((i, j), 0);
                    }
                }
            }
        }
        Ok((set, skipped))
    }
}

#[derive(Serialize, Deserialize)]
struct SetEntry {
    #[serde(rename = "J")]
    samples: usize,
    eigvals: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SetHeader {
    format: String,
    scope: BasisScope,
    grid: DepthGrid,
    geometry: GridGeometry,
    bases: Vec<SetEntry>,
    /// `[i, j, basis index]`
    cells: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Basis-set file: JSON header listing every basis and the cell map, then
/// each basis blob (mean then EOFs) in header order.
pub fn write_basis_set<W: Write>(set: &BasisSet, w: W) -> Result<()> {
    let header = SetHeader {
        format: BASIS_SET_FORMAT.into(),
        scope: set.scope,
        grid: set.grid,
        geometry: set.geometry,
        bases: set.bases.iter().map(|b| SetEntry { samples: b.samples, eigvals: b.eigvals.clone() }).collect(),
        cells: set.cells.iter().map(|(&(i, j), &k)| [i, j, k]).collect(),
        provenance: set.provenance.clone(),
    };
    let mut blob = Vec::new();
    for b in &set.bases {
        basis_blob(b, &mut blob);
    }
    write_frame(w, &header, &blob)?;
    Ok(())
}

pub fn read_basis_set<R: BufRead>(r: R) -> Result<BasisSet> {
    let (h, blob): (SetHeader, _) = read_frame(r)?;
    check_format(&h.format, BASIS_SET_FORMAT)?;
    let values = le_to_f64s(&blob)?;
    let layers = h.grid.layers();
    let mut bases = Vec::with_capacity(h.bases.len());
    let mut at = 0;
    for e in h.bases {
        let n = layers * (e.eigvals.len() + 1);
        let chunk = values.get(at..at + n).ok_or_else(|| EofError::Geometry("basis-set blob too short".into()))?;
        bases.push(basis_from_blob(h.grid, e.samples, e.eigvals, chunk)?);
        at += n;
    }
    if at != values.len() {
        return Err(EofError::Geometry("trailing data in basis-set blob".into()));
    }
    let mut cells = BTreeMap::new();
    for [i, j, k] in h.cells {
        if k >= bases.len() {
            return Err(EofError::Geometry(format!("cell ({i},{j}) points at missing basis {k}")));
        }
        cells.insert((i, j), k);
    }
    Ok(BasisSet { scope: h.scope, grid: h.grid, geometry: h.geometry, bases, cells, provenance: h.provenance })
}

pub fn write_basis_set_file(set: &BasisSet, path: &Path) -> Result<()> {
    write_basis_set(set, BufWriter::new(File::create(path)?))
}

pub fn read_basis_set_file(path: &Path) -> Result<BasisSet> {
    read_basis_set(BufReader::new(File::open(path)?))
}
