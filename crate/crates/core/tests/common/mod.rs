//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sspfuse::autodiff::Tensor;
use sspfuse::eof::BasisSet;
use sspfuse::fusion::{slide_dataset, Dataset};
use sspfuse::linalg::Mat;
use sspfuse::model::{self, ModelParams};
use sspfuse::synth::{synth_fields, SynthConfig};
use sspfuse::{BasisScope, DepthGrid, RasterStack};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `h × j` matrix of uniform entries in [-1, 1).
pub fn random_matrix(rng: &mut ChaCha8Rng, h: usize, j: usize) -> Mat {
    Mat::from_row_major(h, j, (0..h * j).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Classical Jacobi with largest-pivot selection; independent of the
/// crate's cyclic solver. Returns descending values and matching columns.
pub fn oracle_eigen(a: &Mat, off_tol: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.rows();
    let mut s: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let off = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t += s[i][j] * s[i][j];
                }
            }
        }
        t.sqrt()
    };
    let mut iters = 0;
    while off(&s) > off_tol && iters < 100_000 {
        iters += 1;
        let (mut p, mut q, mut best) = (0, 1, -1.0);
        for i in 0..n {
            for j in i + 1..n {
                if s[i][j].abs() > best {
                    best = s[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        // symmetric Schur 2×2
        let theta = (s[q][q] - s[p][p]) / (2.0 * s[p][q]);
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let t = if theta == 0.0 { 1.0 } else { t };
        let c = 1.0 / (t * t + 1.0).sqrt();
        let sn = t * c;
        for k in 0..n {
            let (skp, skq) = (s[k][p], s[k][q]);
            s[k][p] = c * skp - sn * skq;
            s[k][q] = sn * skp + c * skq;
        }
        for k in 0..n {
            let (spk, sqk) = (s[p][k], s[q][k]);
            s[p][k] = c * spk - sn * sqk;
            s[q][k] = sn * spk + c * sqk;
        }
        for row in v.iter_mut() {
            let (vp, vq) = (row[p], row[q]);
            row[p] = c * vp - sn * vq;
            row[q] = sn * vp + c * vq;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b][b].total_cmp(&s[a][a]));
    let vals = order.iter().map(|&k| s[k][k]).collect();
    let vecs = order.iter().map(|&k| (0..n).map(|i| v[i][k]).collect()).collect();
    (vals, vecs)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error per parameter group of analytic vs central-difference
/// gradients of the RMSE loss.
pub fn model_fd_errors(params: &ModelParams, x: &Tensor, label: &Tensor, h: f64) -> Vec<(String, f64)> {
    let (_, grads) = model::loss_and_grad(params, x, label).unwrap();
    let eval = |p: &ModelParams| model::loss(&model::forward(p, x).unwrap(), label.data());
    let mut out = Vec::new();
    for (g, name) in params.names().iter().enumerate() {
        let mut work = params.clone();
        let n = work.tensors()[g].len();
        let mut num = vec![0.0; n];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = work.tensors()[g].data()[i];
            work.tensors_mut()[g].data_mut()[i] = orig + h;
            let up = eval(&work);
            work.tensors_mut()[g].data_mut()[i] = orig - h;
            let down = eval(&work);
            work.tensors_mut()[g].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = grads.0[g].data();
        let diff = a.iter().zip(&num).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = dot(a, a).sqrt().max(dot(&num, &num).sqrt());
        out.push((name.clone(), if scale < 1e-12 { diff } else { diff / scale }));
    }
    out
}

pub struct Fixture {
    pub config: SynthConfig,
    pub sst: RasterStack,
    pub profiles: RasterStack,
    pub bases: BasisSet,
    pub dataset: Dataset,
}

/// Synthetic region with bases from the training months and a time split.
pub fn fixture(config: SynthConfig, train_months: usize) -> Fixture {
    let (sst, profiles) = synth_fields(&config).unwrap();
    let t = config.times();
    let (bases, skipped) = BasisSet::build(&profiles, &t[..train_months], BasisScope::Cell).unwrap();
    assert!(skipped.is_empty());
    let dataset = slide_dataset(&sst, &profiles, &bases, &t[..train_months], &t[train_months..]).unwrap();
    Fixture { config, sst, profiles, bases, dataset }
}

/// A small fast region: 5×5 cells, 8 layers, 6 months.
pub fn small_config() -> SynthConfig {
    let mut c = SynthConfig { months: 6, ..SynthConfig::default() };
    c.geometry.n_lat = 5;
    c.geometry.n_lon = 5;
    c.depth = DepthGrid::new(5.0, 12.0, 1.0).unwrap();
    c
}
