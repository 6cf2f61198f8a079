//! Runs the built binary end to end on a small synthetic region.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "synth": {"geometry": {"lat0": 5.5, "lon0": 150.5, "dlat": 1.0, "dlon": 1.0, "n_lat": 5, "n_lon": 5}, "months": 6},
  "depth_grid": {"z_min": 5, "z_max": 12, "step": 1},
  "model": {"n_heads": 2, "d_k": 4, "conv_filters": 4, "adaptive": [2, 2]},
  "train": {"batch_size": 4, "max_epochs": 2},
  "attn_epochs": [1, 2]
}"#;

fn sspfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sspfuse"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "cfg.json"])
        .args(args)
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ARTIFACTS: &[&str] = &[
    "sst.raster",
    "profiles.raster",
    "bases.eofset",
    "dataset.bin",
    "attention.ckpt",
    "cnn.ckpt",
    "attention_loss.csv",
    "cnn_loss.csv",
    "report_locations.csv",
    "report_bands.csv",
    "report_depth_mae.csv",
    "report_samples.csv",
    "report_depth_mae.svg",
    "attention_epoch001.csv",
    "attention_epoch002.csv",
];

#[test]
fn staged_pipeline_produces_every_artifact() {
    let dir = workspace();
    for stage in
        [&["synth"][..], &["eof"], &["fuse"], &["train"], &["train", "--variant", "cnn"], &["eval"], &["attn-export"]]
    {
        let o = sspfuse(dir.path(), stage);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    for a in ARTIFACTS {
        assert!(dir.path().join("out").join(a).is_file(), "{a}");
    }
    let table = std::fs::read_to_string(dir.path().join("out/report_locations.csv")).unwrap();
    assert!(table.starts_with("# config: {"));
    assert!(table.contains("\nAverage, "));
    let trace = std::fs::read_to_string(dir.path().join("out/attention_epoch002.csv")).unwrap();
    assert!(trace.contains("\ndepth_m,weight\n5,"));
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (workspace(), workspace());
    for d in [&a, &b] {
        let o = sspfuse(d.path(), &["all"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ARTIFACTS {
        let x = std::fs::read(a.path().join("out").join(name)).unwrap();
        let y = std::fs::read(b.path().join("out").join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn train_without_dataset_is_a_missing_artifact() {
    let dir = workspace();
    let o = sspfuse(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing artifact: dataset"), "{}", stderr(&o));
}

#[test]
fn predict_on_boundary_cell_surfaces_the_boundary_error() {
    let dir = workspace();
    let o = sspfuse(dir.path(), &["all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sspfuse(dir.path(), &["predict", "--lat", "5.5", "--lon", "152.5", "--month", "2015-12"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cell (0,2) is on the boundary of a 5x5 grid"), "{}", stderr(&o));

    let o = sspfuse(dir.path(), &["predict", "--lat", "7.5", "--lon", "152.5", "--month", "2015-12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/predict_7.5N_152.5E_2015-12.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "depth_m,speed_m_s");
    assert_eq!(rows.len(), 9);
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = workspace();
    let o = sspfuse(dir.path(), &["--months", "2015-13", "eof"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error: config:"), "{}", stderr(&o));
}

#[test]
fn csv_inputs_can_replace_synth() {
    let dir = workspace();
    let mut cfg = sspfuse::synth::SynthConfig { months: 4, ..Default::default() };
    cfg.geometry.n_lat = 4;
    cfg.geometry.n_lon = 4;
    cfg.depth = "5:12:1".parse().unwrap();
    let (sst, prof) = sspfuse::synth::synth_fields(&cfg).unwrap();
    let p = dir.path();
    sspfuse::geogrid::write_sst_csv(&sst, std::fs::File::create(p.join("sst.csv")).unwrap()).unwrap();
    sspfuse::geogrid::write_profile_csv(&prof, std::fs::File::create(p.join("ssp.csv")).unwrap()).unwrap();
    std::fs::write(
        p.join("cfg.json"),
        r#"{"inputs": {"sst_csv": "sst.csv", "profile_csv": "ssp.csv"}, "depth_grid": {"z_min": 5, "z_max": 12, "step": 1},
            "train_months": ["2015-07", "2015-08", "2015-09"], "test_months": ["2015-10"]}"#,
    )
    .unwrap();
    for stage in ["ingest", "eof", "fuse"] {
        let o = sspfuse(p, &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let back = sspfuse::geogrid::read_raster_file(&p.join("out/profiles.raster")).unwrap();
    assert_eq!(back.times, prof.times);
    assert!(back.values.iter().zip(&prof.values).all(|(a, b)| (a - b).abs() < 1e-9));
    let ds = sspfuse::fusion::read_dataset_file(&p.join("out/dataset.bin")).unwrap();
    // 2×2 interior cells, 3 + 1 months
    assert_eq!(ds.len(), 16);
}
