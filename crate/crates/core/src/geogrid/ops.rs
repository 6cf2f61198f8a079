use std::collections::BTreeMap;

use super::{DepthGrid, GeoGridError, GridGeometry, Profile, RasterStack, Result, TimeKey};

/// Piecewise-linear interpolation of knots onto `grid`. Knot depths must be
/// strictly increasing and cover the grid; knots that coincide with grid
/// layers are reproduced exactly.
pub fn resample_linear(depths: &[f64], speeds: &[f64], grid: DepthGrid) -> Result<Profile> {
    if depths.len() != speeds.len() {
        return Err(GeoGridError::Interpolation(format!("{} depths but {} speeds", depths.len(), speeds.len())));
    }
    if depths.len() < 2 {
        return Err(GeoGridError::Interpolation("at least two samples are required".into()));
    }
    if let Some(w) = depths.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(GeoGridError::Interpolation(format!(
            "depths must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    let (first, last) = (depths[0], depths[depths.len() - 1]);
    if grid.z_min() < first || grid.z_max() > last {
        return Err(GeoGridError::Interpolation(format!(
            "grid {}..{} m needs extrapolation beyond samples {first}..{last} m",
            grid.z_min(),
            grid.z_max()
        )));
    }
    let mut seg = 0;
    let speeds = (0..grid.layers())
        .map(|k| {
            let z = grid.depth(k);
            while seg + 2 < depths.len() && z > depths[seg + 1] {
                seg += 1;
            }
            let (z0, z1) = (depths[seg], depths[seg + 1]);
            let (s0, s1) = (speeds[seg], speeds[seg + 1]);
            if z == z0 {
                s0
            } else if z == z1 {
                s1
            } else {
                s0 + (s1 - s0) * (z - z0) / (z1 - z0)
            }
        })
        .collect();
    Profile::new(grid, speeds)
}

/// Collapses daily rasters into monthly means, per cell and per layer, over
/// the days on which the cell is present. Cells missing on every day stay
/// missing.
pub fn monthly_mean(stack: &RasterStack) -> Result<RasterStack> {
    stack.check_consistent()?;
    if stack.times.is_empty() {
        return Err(GeoGridError::Empty("no rasters to average".into()));
    }
    let mut months: BTreeMap<TimeKey, Vec<usize>> = BTreeMap::new();
    for (ti, t) in stack.times.iter().enumerate() {
        months.entry(t.month_key()).or_default().push(ti);
    }
    let g = stack.geometry;
    let layers = stack.layers();
    let times: Vec<TimeKey> = months.keys().copied().collect();
    let mut out = RasterStack::filled_missing(&stack.variable, &stack.units, g, stack.depth, times, stack.missing);
    out.provenance = stack.provenance.clone();
    for (mi, days) in months.values().enumerate() {
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                for k in 0..layers {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for &d in days {
                        let v = stack.cell(d, i, j)[k];
                        if !stack.is_missing(v) {
                            sum += v;
                            n += 1;
                        }
                    }
                    if n > 0 {
                        out.cell_mut(mi, i, j)[k] = sum / n as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ratio `coarse / fine` when it is a whole number.
fn block_ratio(coarse: f64, fine: f64) -> Option<usize> {
    let r = coarse / fine;
    let n = r.round();
    ((r - n).abs() < 1e-9 && n >= 1.0).then_some(n as usize)
}

/// Integer offset of `dst`'s first cell edge within `src`, in source cells.
fn block_origin(dst_c0: f64, dst_d: f64, src_c0: f64, src_d: f64) -> Option<usize> {
    let off = ((dst_c0 - dst_d / 2.0) - (src_c0 - src_d / 2.0)) / src_d;
    let n = off.round();
    ((off - n).abs() < 1e-6 && n >= 0.0).then_some(n as usize)
}

/// Block-mean regridding from a fine raster onto a coarser aligned geometry
/// (e.g. 0.25° → 1°, a 4×4 block per destination cell). Missing source cells
/// are excluded; an all-missing block stays missing.
pub fn regrid_block_mean(src: &RasterStack, dst: &GridGeometry) -> Result<RasterStack> {
    src.check_consistent()?;
    dst.validate()?;
    let s = src.geometry;
    let mismatch = |what: &str| GeoGridError::Geometry(format!("{what}: {s:?} -> {dst:?}"));
    let rl = block_ratio(dst.dlat, s.dlat).ok_or_else(|| mismatch("non-integer latitude block ratio"))?;
    let rn = block_ratio(dst.dlon, s.dlon).ok_or_else(|| mismatch("non-integer longitude block ratio"))?;
    let oi = block_origin(dst.lat0, dst.dlat, s.lat0, s.dlat).ok_or_else(|| mismatch("misaligned latitude edges"))?;
    let oj = block_origin(dst.lon0, dst.dlon, s.lon0, s.dlon).ok_or_else(|| mismatch("misaligned longitude edges"))?;
    if oi + dst.n_lat * rl > s.n_lat || oj + dst.n_lon * rn > s.n_lon {
        return Err(mismatch("destination extends beyond the source"));
    }
    let layers = src.layers();
    let mut out =
        RasterStack::filled_missing(&src.variable, &src.units, *dst, src.depth, src.times.clone(), src.missing);
    out.provenance = src.provenance.clone();
    for t in 0..src.times.len() {
        for i in 0..dst.n_lat {
            for j in 0..dst.n_lon {
                for k in 0..layers {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for bi in 0..rl {
                        for bj in 0..rn {
                            let v = src.cell(t, oi + i * rl + bi, oj + j * rn + bj)[k];
                            if !src.is_missing(v) {
                                sum += v;
                                n += 1;
                            }
                        }
                    }
                    if n > 0 {
                        out.cell_mut(t, i, j)[k] = sum / n as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::DEFAULT_MISSING;
    use proptest::prelude::*;

    fn quarter_degree_tile(values: &[f64]) -> RasterStack {
        let g = GridGeometry { lat0: 10.125, lon0: 150.125, dlat: 0.25, dlon: 0.25, n_lat: 4, n_lon: 4 };
        let mut s = RasterStack::filled_missing(
            "sst",
            "degC",
            g,
            None,
            vec![TimeKey::day(2020, 1, 1).unwrap()],
            DEFAULT_MISSING,
        );
        s.values.copy_from_slice(values);
        s
    }

    fn one_degree() -> GridGeometry {
        GridGeometry { lat0: 10.5, lon0: 150.5, dlat: 1.0, dlon: 1.0, n_lat: 1, n_lon: 1 }
    }

    #[test]
    fn ramp_on_explicit_grid() {
        let g = DepthGrid::new(0.0, 10.0, 5.0).unwrap();
        let p = resample_linear(&[0.0, 10.0], &[1500.0, 1510.0], g).unwrap();
        assert_eq!(p.speeds, vec![1500.0, 1505.0, 1510.0]);
        let g = DepthGrid::new(5.0, 1980.0, 987.5).unwrap();
        let p = resample_linear(&[5.0, 1980.0], &[1500.0, 1520.0], g).unwrap();
        assert_eq!(p.speeds[1], 1510.0);
    }

    #[test]
    fn knots_on_grid_and_constant_knots() {
        let g = DepthGrid::new(0.0, 4.0, 1.0).unwrap();
        let z = [0.0, 1.0, 2.0, 3.0, 4.0];
        let s = [1500.0, 1499.5, 1503.0, 1490.25, 1511.0];
        assert_eq!(resample_linear(&z, &s, g).unwrap().speeds, s.to_vec());
        let c = resample_linear(&[0.0, 3.5, 9.0], &[1480.0; 3], g).unwrap();
        assert!(c.speeds.iter().all(|&v| v == 1480.0));
    }

    #[test]
    fn resample_errors() {
        let g = DepthGrid::new(0.0, 10.0, 5.0).unwrap();
        assert!(resample_linear(&[1.0, 10.0], &[1.0, 2.0], g).is_err());
        assert!(resample_linear(&[0.0, 9.0], &[1.0, 2.0], g).is_err());
        assert!(resample_linear(&[0.0, 0.0, 10.0], &[1.0, 2.0, 3.0], g).is_err());
        assert!(resample_linear(&[0.0], &[1.0], g).is_err());
        assert!(resample_linear(&[0.0, 10.0], &[1.0], g).is_err());
    }

    #[test]
    fn monthly_mean_examples() {
        let g = GridGeometry { lat0: 0.0, lon0: 0.0, dlat: 1.0, dlon: 1.0, n_lat: 1, n_lon: 1 };
        let days: Vec<TimeKey> = (1..=3).map(|d| TimeKey::day(2020, 2, d).unwrap()).collect();
        let mut s = RasterStack::filled_missing("sst", "degC", g, None, days, DEFAULT_MISSING);
        s.values = vec![1.0, 2.0, 3.0];
        let m = monthly_mean(&s).unwrap();
        assert_eq!(m.times, vec![TimeKey::month(2020, 2).unwrap()]);
        assert_eq!(m.value(0, 0, 0), Some(2.0));

        s.values = vec![DEFAULT_MISSING, 7.0, DEFAULT_MISSING];
        assert_eq!(monthly_mean(&s).unwrap().value(0, 0, 0), Some(7.0));
        s.values = vec![DEFAULT_MISSING; 3];
        assert_eq!(monthly_mean(&s).unwrap().value(0, 0, 0), None);
    }

    #[test]
    fn monthly_mean_idempotent_on_equal_days() {
        let g = GridGeometry { lat0: 0.0, lon0: 0.0, dlat: 1.0, dlon: 1.0, n_lat: 2, n_lon: 3 };
        let days: Vec<TimeKey> = (1..=30).map(|d| TimeKey::day(2020, 4, d).unwrap()).collect();
        let raster = [1.5, -2.0, 3.25, 4.0, 5.5, 6.125];
        let mut s = RasterStack::filled_missing("sst", "degC", g, None, days, DEFAULT_MISSING);
        s.values = raster.iter().copied().cycle().take(180).collect();
        assert_eq!(monthly_mean(&s).unwrap().values, raster.to_vec());
    }

    #[test]
    fn block_mean_examples() {
        let out = regrid_block_mean(&quarter_degree_tile(&[15.5; 16]), &one_degree()).unwrap();
        assert_eq!(out.value(0, 0, 0), Some(15.5));
        let ramp: Vec<f64> = (1..=16).map(f64::from).collect();
        let out = regrid_block_mean(&quarter_degree_tile(&ramp), &one_degree()).unwrap();
        assert_eq!(out.value(0, 0, 0), Some(8.5));
        let half: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { DEFAULT_MISSING } else { 10.0 }).collect();
        let out = regrid_block_mean(&quarter_degree_tile(&half), &one_degree()).unwrap();
        assert_eq!(out.value(0, 0, 0), Some(10.0));
        let out = regrid_block_mean(&quarter_degree_tile(&[DEFAULT_MISSING; 16]), &one_degree()).unwrap();
        assert_eq!(out.value(0, 0, 0), None);
    }

    #[test]
    fn block_mean_geometry_mismatch() {
        let src = quarter_degree_tile(&[1.0; 16]);
        let mut bad = one_degree();
        bad.dlat = 0.6;
        assert!(regrid_block_mean(&src, &bad).is_err());
        let mut shifted = one_degree();
        shifted.lat0 = 10.6;
        assert!(regrid_block_mean(&src, &shifted).is_err());
        let mut big = one_degree();
        big.n_lat = 2;
        assert!(regrid_block_mean(&src, &big).is_err());
    }

    proptest! {
        #[test]
        fn piecewise_linear_data_is_reproduced(
            slopes in proptest::collection::vec(-2.0f64..2.0, 1..6),
            s0 in 1450.0f64..1550.0,
        ) {
            // knots every 4 m, grid every 1 m
            let n = slopes.len();
            let knots_z: Vec<f64> = (0..=n).map(|k| 4.0 * k as f64).collect();
            let mut knots_s = vec![s0];
            for sl in &slopes {
                let last = *knots_s.last().unwrap();
                knots_s.push(last + 4.0 * sl);
            }
            let grid = DepthGrid::new(0.0, 4.0 * n as f64, 1.0).unwrap();
            let p = resample_linear(&knots_z, &knots_s, grid).unwrap();
            for (k, v) in p.speeds.iter().enumerate() {
                let seg = (k / 4).min(n - 1);
                let want = knots_s[seg] + slopes[seg] * (k as f64 - 4.0 * seg as f64);
                prop_assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn means_commute_with_constant_shift(
            vals in proptest::collection::vec(proptest::option::weighted(0.8, -5.0f64..35.0), 32),
            shift in -10.0f64..10.0,
        ) {
            let g = GridGeometry { lat0: 10.125, lon0: 150.125, dlat: 0.25, dlon: 0.25, n_lat: 4, n_lon: 4 };
            let days = vec![TimeKey::day(2020, 1, 1).unwrap(), TimeKey::day(2020, 1, 2).unwrap()];
            let mut s = RasterStack::filled_missing("sst", "degC", g, None, days, DEFAULT_MISSING);
            s.values = vals.iter().map(|v| v.unwrap_or(DEFAULT_MISSING)).collect();
            let mut shifted = s.clone();
            for v in shifted.values.iter_mut().filter(|v| **v != DEFAULT_MISSING) {
                *v += shift;
            }
            let dst = one_degree();
            for (a, b) in [
                (monthly_mean(&s).unwrap(), monthly_mean(&shifted).unwrap()),
                (regrid_block_mean(&s, &dst).unwrap(), regrid_block_mean(&shifted, &dst).unwrap()),
            ] {
                for (x, y) in a.values.iter().zip(&b.values) {
                    if *x == DEFAULT_MISSING {
                        prop_assert_eq!(*y, DEFAULT_MISSING);
                    } else {
                        prop_assert!((x + shift - y).abs() <= 1e-12 * (1.0 + y.abs()));
                    }
                }
            }
        }

        #[test]
        fn sentinel_never_enters_a_mean(
            vals in proptest::collection::vec(proptest::option::weighted(0.6, 0.0f64..30.0), 16),
        ) {
            let s = quarter_degree_tile(&vals.iter().map(|v| v.unwrap_or(DEFAULT_MISSING)).collect::<Vec<_>>());
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            let out = regrid_block_mean(&s, &one_degree()).unwrap();
            match out.value(0, 0, 0) {
                None => prop_assert!(present.is_empty()),
                Some(v) => {
                    let oracle = present.iter().sum::<f64>() / present.len() as f64;
                    prop_assert!((v - oracle).abs() < 1e-12);
                }
            }
        }
    }
}
