//! Strict CSV ingestion for SST tables and long-form profile tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};

use super::{resample_linear, DepthGrid, GeoCoord, GeoGridError, GridGeometry, RasterStack, Result, TimeKey};

const SST_HEADER: [&str; 4] = ["date", "lat", "lon", "sst"];
const PROFILE_HEADER: [&str; 5] = ["date", "lat", "lon", "depth_m", "speed_mps"];

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str]) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(want.iter().copied()) {
        return Err(GeoGridError::Row {
            row: 1,
            msg: format!("header must be `{}`, found `{}`", want.join(","), h.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(())
}

fn row_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn field_f64(rec: &csv::StringRecord, idx: usize, name: &str, row: usize) -> Result<f64> {
    let s = &rec[idx];
    let v: f64 = s.parse().map_err(|_| GeoGridError::Row { row, msg: format!("{name}: `{s}` is not a number") })?;
    if !v.is_finite() {
        return Err(GeoGridError::Row { row, msg: format!("{name}: non-finite value") });
    }
    Ok(v)
}

fn field_time(rec: &csv::StringRecord, row: usize) -> Result<TimeKey> {
    let s = &rec[0];
    let t: TimeKey = s.parse().map_err(|_| GeoGridError::Row { row, msg: format!("date: `{s}` is not YYYY-MM-DD") })?;
    if t.day.is_none() {
        return Err(GeoGridError::Row { row, msg: format!("date: `{s}` is not YYYY-MM-DD") });
    }
    Ok(t)
}

fn field_coord(rec: &csv::StringRecord, row: usize) -> Result<GeoCoord> {
    let lat = field_f64(rec, 1, "lat", row)?;
    let lon = field_f64(rec, 2, "lon", row)?;
    GeoCoord::new(lat, lon)
        .map_err(|_| GeoGridError::Row { row, msg: format!("coordinate out of range: lat {lat}, lon {lon}") })
}

/// Recovers a regular axis (start, step, count) from the distinct values seen.
fn infer_axis(values: &BTreeSet<u64>, fallback_step: Option<f64>) -> Result<(f64, f64, usize)> {
    let vals: Vec<f64> = values.iter().map(|b| f64::from_bits(*b)).collect();
    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let first = sorted[0];
    if sorted.len() == 1 {
        return Ok((first, fallback_step.unwrap_or(1.0), 1));
    }
    let step = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let last = *sorted.last().unwrap();
    let n = ((last - first) / step).round() as usize + 1;
    for v in &sorted {
        let f = (v - first) / step;
        if (f - f.round()).abs() > 1e-6 {
            return Err(GeoGridError::Geometry(format!(
                "coordinate {v} does not lie on a regular {step}° axis starting at {first}"
            )));
        }
    }
    Ok((first, step, n))
}

fn infer_geometry(lats: &BTreeSet<u64>, lons: &BTreeSet<u64>) -> Result<GridGeometry> {
    let (lat0, dlat, n_lat) = infer_axis(lats, None)?;
    let (lon0, dlon, n_lon) = infer_axis(lons, (n_lat > 1).then_some(dlat))?;
    let dlat = if n_lat == 1 { dlon } else { dlat };
    Ok(GridGeometry { lat0, lon0, dlat, dlon, n_lat, n_lon })
}

fn key_bits(c: &GeoCoord) -> (u64, u64) {
    // normalise -0.0 so it collides with 0.0
    ((c.lat + 0.0).to_bits(), (c.lon + 0.0).to_bits())
}

/// Parses an SST table (`date,lat,lon,sst`) into one raster per distinct day.
///
/// Rows may arrive in any order. An empty `sst` field marks a missing value;
/// cells absent from the file are missing as well. The grid geometry is
/// recovered from the distinct coordinates, which must lie on a regular axis.
pub fn parse_sst_table<R: Read>(input: R, missing: f64) -> Result<RasterStack> {
    let mut rdr = reader(input);
    check_header(&mut rdr, &SST_HEADER)?;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let (mut lats, mut lons) = (BTreeSet::new(), BTreeSet::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GeoGridError::Row {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = row_of(&rec);
        let t = field_time(&rec, row)?;
        let c = field_coord(&rec, row)?;
        let v = if rec[3].is_empty() {
            None
        } else {
            let v = field_f64(&rec, 3, "sst", row)?;
            if v == missing {
                return Err(GeoGridError::Row { row, msg: format!("value {v} collides with the missing sentinel") });
            }
            Some(v)
        };
        let (la, lo) = key_bits(&c);
        if !seen.insert((t, la, lo)) {
            return Err(GeoGridError::Duplicate { row, key: format!("{t} {} {}", c.lat, c.lon) });
        }
        lats.insert(la);
        lons.insert(lo);
        rows.push((t, c, v));
    }
    if rows.is_empty() {
        return Err(GeoGridError::Empty("SST table has no rows".into()));
    }
    let geometry = infer_geometry(&lats, &lons)?;
    let times: Vec<TimeKey> = rows.iter().map(|r| r.0).collect::<BTreeSet<_>>().into_iter().collect();
    let mut stack = RasterStack::filled_missing("sst", "degC", geometry, None, times, missing);
    for (t, c, v) in rows {
        if let Some(v) = v {
            let ti = stack.time_index(&t).expect("time collected above");
            let (i, j) = geometry.index_of(c).expect("coordinate on inferred grid");
            stack.cell_mut(ti, i, j)[0] = v;
        }
    }
    Ok(stack)
}

/// Parses a long-form profile table (`date,lat,lon,depth_m,speed_mps`) and
/// resamples every profile onto `grid`.
///
/// Dates are reduced to their month (profiles are monthly products). Within
/// one (month, lat, lon) group depths must be strictly increasing in file
/// order and span the target grid.
pub fn parse_profile_table<R: Read>(input: R, grid: DepthGrid, missing: f64) -> Result<RasterStack> {
    struct Group {
        first_row: usize,
        depths: Vec<f64>,
        speeds: Vec<f64>,
    }
    let mut rdr = reader(input);
    check_header(&mut rdr, &PROFILE_HEADER)?;
    let mut groups: BTreeMap<(TimeKey, u64, u64), Group> = BTreeMap::new();
    let (mut lats, mut lons) = (BTreeSet::new(), BTreeSet::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GeoGridError::Row {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = row_of(&rec);
        let t = field_time(&rec, row)?.month_key();
        let c = field_coord(&rec, row)?;
        let z = field_f64(&rec, 3, "depth_m", row)?;
        let s = field_f64(&rec, 4, "speed_mps", row)?;
        let (la, lo) = key_bits(&c);
        lats.insert(la);
        lons.insert(lo);
        let g = groups.entry((t, la, lo)).or_insert_with(|| Group {
            first_row: row,
            depths: Vec::new(),
            speeds: Vec::new(),
        });
        if g.depths.binary_search_by(|d| d.partial_cmp(&z).unwrap()).is_ok() {
            return Err(GeoGridError::Duplicate { row, key: format!("{t} {} {} depth {z}", c.lat, c.lon) });
        }
        if let Some(&last) = g.depths.last() {
            if z < last {
                return Err(GeoGridError::Row {
                    row,
                    msg: format!("depth {z} m follows {last} m: depths must be strictly increasing"),
                });
            }
        }
        g.depths.push(z);
        g.speeds.push(s);
    }
    if groups.is_empty() {
        return Err(GeoGridError::Empty("profile table has no rows".into()));
    }
    let geometry = infer_geometry(&lats, &lons)?;
    let times: Vec<TimeKey> = groups.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let mut stack = RasterStack::filled_missing("sound_speed", "m/s", geometry, Some(grid), times, missing);
    for ((t, la, lo), g) in groups {
        let p = resample_linear(&g.depths, &g.speeds, grid)
            .map_err(|e| GeoGridError::Row { row: g.first_row, msg: e.to_string() })?;
        let c = GeoCoord { lat: f64::from_bits(la), lon: f64::from_bits(lo) };
        let ti = stack.time_index(&t).expect("time collected above");
        let (i, j) = geometry.index_of(c).expect("coordinate on inferred grid");
        stack.cell_mut(ti, i, j).copy_from_slice(&p.speeds);
    }
    Ok(stack)
}

fn csv_date(t: &TimeKey) -> String {
    // monthly keys are written as mid-month days
    format!("{:04}-{:02}-{:02}", t.year, t.month, t.day.unwrap_or(15))
}

/// Writes a 2-D stack in the SST table schema; missing cells become empty fields.
pub fn write_sst_csv<W: Write>(stack: &RasterStack, w: W) -> Result<()> {
    if stack.depth.is_some() {
        return Err(GeoGridError::Geometry("SST table needs a single-layer stack".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SST_HEADER)?;
    let g = stack.geometry;
    for (ti, t) in stack.times.iter().enumerate() {
        let date = csv_date(t);
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                let c = g.coord(i, j);
                let v = stack.value(ti, i, j).map(|v| v.to_string()).unwrap_or_default();
                wtr.write_record([date.clone(), c.lat.to_string(), c.lon.to_string(), v])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a profile stack in long form, one row per grid layer; missing
/// profiles are omitted.
pub fn write_profile_csv<W: Write>(stack: &RasterStack, w: W) -> Result<()> {
    let grid = stack.depth.ok_or_else(|| GeoGridError::Geometry("profile table needs a depth axis".into()))?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PROFILE_HEADER)?;
    let g = stack.geometry;
    for (ti, t) in stack.times.iter().enumerate() {
        let date = csv_date(t);
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                let Some(p) = stack.profile(ti, i, j) else { continue };
                let c = g.coord(i, j);
                for (k, s) in p.speeds.iter().enumerate() {
                    wtr.write_record([
                        date.clone(),
                        c.lat.to_string(),
                        c.lon.to_string(),
                        grid.depth(k).to_string(),
                        s.to_string(),
                    ])?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::DEFAULT_MISSING;

    #[test]
    fn two_cell_sst_table() {
        let text = "date,lat,lon,sst\n2020-01-01,10.5,151.5,21.0\n2020-01-01,10.5,150.5,20.0\n";
        let s = parse_sst_table(text.as_bytes(), DEFAULT_MISSING).unwrap();
        assert_eq!((s.geometry.n_lat, s.geometry.n_lon), (1, 2));
        assert_eq!(s.value(0, 0, 0), Some(20.0));
        assert_eq!(s.value(0, 0, 1), Some(21.0));
    }

    #[test]
    fn duplicate_sst_key_is_rejected() {
        let text = "date,lat,lon,sst\n2020-01-01,10.5,150.5,20.0\n2020-01-01,10.5,150.5,20.5\n";
        match parse_sst_table(text.as_bytes(), DEFAULT_MISSING) {
            Err(GeoGridError::Duplicate { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_carry_row_numbers() {
        let bad_num = "date,lat,lon,sst\n2020-01-01,10.5,150.5,abc\n";
        assert!(matches!(parse_sst_table(bad_num.as_bytes(), DEFAULT_MISSING), Err(GeoGridError::Row { row: 2, .. })));
        let bad_cols = "date,lat,lon,sst\n2020-01-01,10.5,150.5,1,2\n";
        assert!(parse_sst_table(bad_cols.as_bytes(), DEFAULT_MISSING).is_err());
        let bad_lat = "date,lat,lon,sst\n2020-01-01,91,150.5,1\n";
        assert!(matches!(parse_sst_table(bad_lat.as_bytes(), DEFAULT_MISSING), Err(GeoGridError::Row { row: 2, .. })));
        let bad_header = "day,lat,lon,sst\n";
        assert!(parse_sst_table(bad_header.as_bytes(), DEFAULT_MISSING).is_err());
    }

    #[test]
    fn absent_and_empty_cells_are_missing() {
        let text = "date,lat,lon,sst\n2020-01-01,0,0,1\n2020-01-01,0,2,\n2020-01-02,0,1,5\n";
        let s = parse_sst_table(text.as_bytes(), DEFAULT_MISSING).unwrap();
        assert_eq!(s.geometry.n_lon, 3);
        assert_eq!(s.times.len(), 2);
        assert_eq!(s.value(0, 0, 1), None);
        assert_eq!(s.value(0, 0, 2), None);
        assert_eq!(s.value(1, 0, 0), None);
        assert_eq!(s.value(1, 0, 1), Some(5.0));
    }

    #[test]
    fn two_point_profile_ramp() {
        let grid = DepthGrid::default();
        let text = "date,lat,lon,depth_m,speed_mps\n2019-03-15,10.5,150.5,5,1500\n2019-03-15,10.5,150.5,1980,1520\n";
        let s = parse_profile_table(text.as_bytes(), grid, DEFAULT_MISSING).unwrap();
        let p = s.profile(0, 0, 0).unwrap();
        // 992.5 m sits halfway between two 1 m layers; check the layers either side
        let k = grid.layers_within(992.0, 993.0);
        let mid = (p.speeds[k.start] + p.speeds[k.start + 1]) / 2.0;
        assert!((mid - 1510.0).abs() < 1e-9);
        assert_eq!(p.speeds[0], 1500.0);
        assert_eq!(p.speeds[1975], 1520.0);
    }

    #[test]
    fn profile_depth_errors() {
        let grid = DepthGrid::new(5.0, 100.0, 5.0).unwrap();
        let dup =
            "date,lat,lon,depth_m,speed_mps\n2019-03-15,0,0,5,1500\n2019-03-15,0,0,5,1501\n2019-03-15,0,0,100,1510\n";
        assert!(matches!(
            parse_profile_table(dup.as_bytes(), grid, DEFAULT_MISSING),
            Err(GeoGridError::Duplicate { row: 3, .. })
        ));
        let back = "date,lat,lon,depth_m,speed_mps\n2019-03-15,0,0,50,1500\n2019-03-15,0,0,5,1501\n";
        assert!(matches!(
            parse_profile_table(back.as_bytes(), grid, DEFAULT_MISSING),
            Err(GeoGridError::Row { row: 3, .. })
        ));
        let short = "date,lat,lon,depth_m,speed_mps\n2019-03-15,0,0,5,1500\n2019-03-15,0,0,50,1501\n";
        assert!(parse_profile_table(short.as_bytes(), grid, DEFAULT_MISSING).is_err());
    }

    #[test]
    fn csv_writers_feed_the_parsers() {
        let grid = DepthGrid::new(0.0, 10.0, 5.0).unwrap();
        let text = "date,lat,lon,depth_m,speed_mps\n2019-03-15,1,2,0,1500\n2019-03-15,1,2,10,1510\n2019-03-15,1,3,0,1490\n2019-03-15,1,3,10,1495\n";
        let s = parse_profile_table(text.as_bytes(), grid, DEFAULT_MISSING).unwrap();
        let mut out = Vec::new();
        write_profile_csv(&s, &mut out).unwrap();
        let back = parse_profile_table(&out[..], grid, DEFAULT_MISSING).unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!(back.profile(0, 0, 0).unwrap().speeds, vec![1500.0, 1505.0, 1510.0]);
    }
}
