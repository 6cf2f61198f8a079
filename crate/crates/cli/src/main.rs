//! `sspfuse`: batch pipeline from rasters to evaluated sound speed profile
//! estimates.
//!
//! Stages read and write fixed file names inside `--out`, so each command
//! picks up where the previous one left off. Progress goes to stderr;
//! results only go to files.

mod config;

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sspfuse::eof::{read_basis_set_file, write_basis_set_file};
use sspfuse::evalkit::{self, compare_methods, METHODS};
use sspfuse::fusion::{build_input, normalize, read_dataset_file, slide_dataset, write_dataset_file, Split};
use sspfuse::geogrid::{
    monthly_mean, parse_profile_table, parse_sst_table, read_raster_file, write_raster_file, DEFAULT_MISSING,
};
use sspfuse::model::attention_trace;
use sspfuse::synth::synth_fields;
use sspfuse::trainer::{self, read_checkpoint_file, write_checkpoint_file, Checkpoint};
use sspfuse::{BasisScope, BasisSet, Dataset, DepthGrid, GeoCoord, RasterStack, TimeKey, Variant};

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Stage { .. } => 1,
            CliError::Missing(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage { stage, message: e.to_string() })
    }
}

#[derive(Parser)]
#[command(name = "sspfuse", version, about = "Sound speed profile estimation from fused SST, coordinates and EOFs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// `zmin:zmax:step` in metres.
    #[arg(long, global = true)]
    depth_grid: Option<DepthGrid>,
    /// Training months, `YYYY-MM,...`.
    #[arg(long, global = true, value_delimiter = ',')]
    months: Option<Vec<String>>,
    /// Test months, `YYYY-MM,...`.
    #[arg(long, global = true, value_delimiter = ',')]
    test_months: Option<Vec<String>>,
    /// `cell` or `region`.
    #[arg(long, global = true)]
    basis_scope: Option<BasisScope>,
    /// `attention` or `cnn`.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic SST and profile rasters.
    Synth,
    /// Read SST and profile CSV tables into monthly rasters.
    Ingest,
    /// Per-cell (or regional) EOF bases from the training months.
    Eof,
    /// Fused training/test dataset.
    Fuse,
    /// Train one variant; writes its checkpoint and loss log.
    Train,
    /// Compare both variants with SITP and MEAN on the test split.
    Eval,
    /// Estimate the profile at one grid cell and month.
    Predict {
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        /// `YYYY-MM`.
        #[arg(long)]
        month: TimeKey,
    },
    /// Received-attention CSVs from the kept epoch checkpoints.
    AttnExport,
    /// Run synth, eof, fuse, train (both variants), eval and attn-export.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Eof => "eof",
            Command::Fuse => "fuse",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict { .. } => "predict",
            Command::AttnExport => "attn-export",
            Command::All => "all",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let mut rc = RunConfig::load(c.config.as_deref())?;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out,
        epochs: c.epochs,
        depth_grid: c.depth_grid,
        months: c.months,
        test_months: c.test_months,
        basis_scope: c.basis_scope,
        variant: c.variant,
    };
    rc.apply(cli.command.name(), overrides)?;
    fs::create_dir_all(&rc.out).stage("output")?;
    match cli.command {
        Command::Synth => cmd_synth(&rc),
        Command::Ingest => cmd_ingest(&rc),
        Command::Eof => cmd_eof(&rc),
        Command::Fuse => cmd_fuse(&rc),
        Command::Train => cmd_train(&rc),
        Command::Eval => cmd_eval(&rc),
        Command::Predict { lat, lon, month } => cmd_predict(&rc, lat, lon, month),
        Command::AttnExport => cmd_attn_export(&rc),
        Command::All => {
            cmd_synth(&rc)?;
            cmd_eof(&rc)?;
            cmd_fuse(&rc)?;
            for v in [Variant::Attention, Variant::Cnn] {
                let mut r = rc.clone();
                r.model.variant = v;
                cmd_train(&r)?;
            }
            cmd_eval(&rc)?;
            cmd_attn_export(&rc)
        }
    }
}

const SST: &str = "sst.raster";
const PROFILES: &str = "profiles.raster";
const BASES: &str = "bases.eofset";
const DATASET: &str = "dataset.bin";

fn path(rc: &RunConfig, name: &str) -> PathBuf {
    rc.out.join(name)
}

fn require(rc: &RunConfig, name: &str, what: &str) -> Result<PathBuf, CliError> {
    let p = path(rc, name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::Missing(what.to_string()))
    }
}

fn load_sst(rc: &RunConfig) -> Result<RasterStack, CliError> {
    read_raster_file(&require(rc, SST, "sst raster")?).stage("load")
}

fn load_profiles(rc: &RunConfig) -> Result<RasterStack, CliError> {
    read_raster_file(&require(rc, PROFILES, "profile raster")?).stage("load")
}

fn load_bases(rc: &RunConfig) -> Result<BasisSet, CliError> {
    read_basis_set_file(&require(rc, BASES, "bases")?).stage("load")
}

fn load_dataset(rc: &RunConfig) -> Result<Dataset, CliError> {
    read_dataset_file(&require(rc, DATASET, "dataset")?).stage("load")
}

fn ckpt_name(v: Variant) -> String {
    format!("{v}.ckpt")
}

fn epoch_ckpt_name(v: Variant, epoch: usize) -> String {
    format!("{v}_epoch{epoch:03}.ckpt")
}

fn load_checkpoint(rc: &RunConfig, name: &str, what: &str) -> Result<Checkpoint, CliError> {
    read_checkpoint_file(&require(rc, name, what)?).stage("load")
}

/// Writes a text artifact through a temp file so a failed stage leaves no partial output.
fn write_text(p: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    let tmp = p.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp).stage("write")?);
    f(&mut w)?;
    w.flush().stage("write")?;
    drop(w);
    fs::rename(&tmp, p).stage("write")?;
    log::info!("wrote {}", p.display());
    Ok(())
}

fn save_rasters(rc: &RunConfig, mut sst: RasterStack, mut profiles: RasterStack) -> Result<(), CliError> {
    sst.provenance = Some(rc.provenance());
    profiles.provenance = Some(rc.provenance());
    write_raster_file(&sst, &path(rc, SST)).stage("write")?;
    write_raster_file(&profiles, &path(rc, PROFILES)).stage("write")?;
    log::info!(
        "{} months on a {}x{} grid, {} layers",
        profiles.times.len(),
        profiles.geometry.n_lat,
        profiles.geometry.n_lon,
        profiles.layers()
    );
    Ok(())
}

fn cmd_synth(rc: &RunConfig) -> Result<(), CliError> {
    let (sst, profiles) = synth_fields(&rc.synth).stage("synth")?;
    save_rasters(rc, sst, profiles)
}

fn cmd_ingest(rc: &RunConfig) -> Result<(), CliError> {
    let sst_csv = rc.inputs.sst_csv.as_ref().ok_or_else(|| CliError::Config("inputs.sst_csv is not set".into()))?;
    let prof_csv =
        rc.inputs.profile_csv.as_ref().ok_or_else(|| CliError::Config("inputs.profile_csv is not set".into()))?;
    let grid = rc.depth_grid.ok_or_else(|| CliError::Config("ingest needs depth_grid or --depth-grid".into()))?;
    let open = |p: &PathBuf, what: &str| {
        File::open(p).map(BufReader::new).map_err(|e| CliError::Missing(format!("{what} ({}: {e})", p.display())))
    };
    let sst = parse_sst_table(open(sst_csv, "sst table")?, DEFAULT_MISSING).stage("ingest")?;
    let profiles = parse_profile_table(open(prof_csv, "profile table")?, grid, DEFAULT_MISSING).stage("ingest")?;
    let sst = monthly_mean(&sst).stage("ingest")?;
    let profiles = monthly_mean(&profiles).stage("ingest")?;
    save_rasters(rc, sst, profiles)
}

fn cmd_eof(rc: &RunConfig) -> Result<(), CliError> {
    let profiles = load_profiles(rc)?;
    let (train, _) = rc.split(&profiles.times)?;
    let (mut set, skipped) = BasisSet::build(&profiles, &train, rc.basis_scope).stage("eof")?;
    set.provenance = Some(rc.provenance());
    write_basis_set_file(&set, &path(rc, BASES)).stage("write")?;
    write_text(&path(rc, "bases_skipped.csv"), |w| {
        writeln!(w, "# {}", rc.comment()).stage("write")?;
        writeln!(w, "lat_index,lon_index,reason").stage("write")?;
        for s in &skipped {
            writeln!(w, "{},{},{}", s.cell.0, s.cell.1, s.reason).stage("write")?;
        }
        Ok(())
    })?;
    log::info!("{} bases, {} cells skipped", set.len(), skipped.len());
    Ok(())
}

fn cmd_fuse(rc: &RunConfig) -> Result<(), CliError> {
    let sst = load_sst(rc)?;
    let profiles = load_profiles(rc)?;
    let bases = load_bases(rc)?;
    let (train, test) = rc.split(&profiles.times)?;
    let mut ds = slide_dataset(&sst, &profiles, &bases, &train, &test).stage("fuse")?;
    ds.provenance = Some(rc.provenance());
    write_dataset_file(&ds, &path(rc, DATASET)).stage("write")?;
    write_text(&path(rc, "dataset_skipped.csv"), |w| {
        writeln!(w, "# {}", rc.comment()).stage("write")?;
        writeln!(w, "lat_index,lon_index,month,reason").stage("write")?;
        for s in &ds.skipped {
            writeln!(w, "{},{},{},{}", s.cell.0, s.cell.1, s.time, s.reason).stage("write")?;
        }
        Ok(())
    })?;
    log::info!(
        "{} train + {} test samples, {} skipped",
        ds.indices(Split::Train).len(),
        ds.indices(Split::Test).len(),
        ds.skipped.len()
    );
    Ok(())
}

fn cmd_train(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(rc)?;
    let model = rc.model.clone();
    let v = model.variant;
    let mut train_cfg = rc.train.clone();
    train_cfg.eval_test = true;
    log::info!("training {v}: {} parameters, {} epochs", model.param_count(), train_cfg.max_epochs);
    let out = trainer::train(&ds, &model, &train_cfg, |c| {
        if rc.attn_epochs.contains(&c.epoch) {
            let mut c = c.clone();
            c.provenance = Some(rc.provenance());
            write_checkpoint_file(&c, &path(rc, &epoch_ckpt_name(v, c.epoch)))?;
        }
        Ok(())
    })
    .stage("train")?;
    let mut ckpt = out.checkpoint;
    ckpt.provenance = Some(rc.provenance());
    write_checkpoint_file(&ckpt, &path(rc, &ckpt_name(v))).stage("write")?;
    let comments = [rc.comment()];
    write_text(&path(rc, &format!("{v}_loss.csv")), |w| {
        trainer::write_loss_log(&ckpt.history, &comments, w).stage("write")
    })?;
    // wall times differ run to run, so they live apart from the reproducible artifacts
    let stats = trainer::report_model_stats(&model, &out.epoch_seconds);
    write_text(&path(rc, &format!("{v}_stats.csv")), |w| trainer::write_model_stats(&[stats], w).stage("write"))?;
    Ok(())
}

fn cmd_eval(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(rc)?;
    let profiles = load_profiles(rc)?;
    let sa = load_checkpoint(rc, &ckpt_name(Variant::Attention), "attention checkpoint")?;
    let cnn = load_checkpoint(rc, &ckpt_name(Variant::Cnn), "cnn checkpoint")?;
    let report = compare_methods(&ds, &sa, &cnn, &profiles, &rc.bands).stage("eval")?;
    let comments = [rc.comment()];
    write_text(&path(rc, "report_locations.csv"), |w| {
        evalkit::write_location_table(&report, &comments, w).stage("write")
    })?;
    write_text(&path(rc, "report_bands.csv"), |w| evalkit::write_band_table(&report, &comments, w).stage("write"))?;
    write_text(&path(rc, "report_depth_mae.csv"), |w| evalkit::write_depth_mae(&report, &comments, w).stage("write"))?;
    write_text(&path(rc, "report_samples.csv"), |w| evalkit::write_sample_table(&report, &comments, w).stage("write"))?;

    let depths = report.grid.depths();
    let mae: Vec<(&str, Vec<f64>)> =
        METHODS.iter().enumerate().map(|(k, m)| (*m, report.depth_mae.iter().map(|r| r[k]).collect())).collect();
    let svg = evalkit::svg_lines("Mean absolute error by depth", "depth (m)", "MAE (m/s)", &depths, &mae);
    write_text(&path(rc, "report_depth_mae.svg"), |w| w.write_all(svg.as_bytes()).stage("write"))?;
    let epochs: Vec<f64> = sa.history.iter().map(|h| h.epoch as f64).collect();
    let loss = [
        (METHODS[0], sa.history.iter().map(|h| h.train_rmse).collect()),
        (METHODS[1], cnn.history.iter().map(|h| h.train_rmse).collect()),
    ];
    if sa.history.len() == cnn.history.len() {
        let svg = evalkit::svg_lines("Training RMSE", "epoch", "RMSE (m/s)", &epochs, &loss);
        write_text(&path(rc, "report_loss.svg"), |w| w.write_all(svg.as_bytes()).stage("write"))?;
    }
    for (k, m) in METHODS.iter().enumerate() {
        log::info!("{m:>11}: average RMSE {:.4} m/s", report.average[k]);
    }
    Ok(())
}

fn cmd_predict(rc: &RunConfig, lat: f64, lon: f64, month: TimeKey) -> Result<(), CliError> {
    let sst = load_sst(rc)?;
    let bases = load_bases(rc)?;
    let ds = load_dataset(rc)?;
    let v = rc.model.variant;
    let ckpt = load_checkpoint(rc, &ckpt_name(v), &format!("{v} checkpoint"))?;
    let coord = GeoCoord::new(lat, lon).stage("predict")?;
    let cell = sst
        .geometry
        .index_of(coord)
        .ok_or_else(|| CliError::Config(format!("{} is not a grid cell centre", coord.label())))?;
    let month = month.month_key();
    let raw = build_input(cell, month, &sst, &bases)
        .stage("predict")?
        .map_err(|skip| CliError::Stage { stage: "predict", message: format!("cannot build the input: {skip}") })?;
    // the dataset stores f32, so round the same way before normalizing
    let raw: Vec<f64> = raw.iter().map(|&v| f64::from(v as f32)).collect();
    let x = sspfuse::autodiff::Tensor::new(
        vec![ds.layers(), sspfuse::model::CHANNELS, sspfuse::model::NEIGHBORS],
        normalize(&raw, &ds.stats),
    )
    .stage("predict")?;
    let pred = ckpt.predict(&x).stage("predict")?;
    let name = format!("predict_{}_{month}.csv", coord.label().replace(' ', "_"));
    write_text(&path(rc, &name), |w| {
        writeln!(w, "# {}", rc.comment()).stage("write")?;
        writeln!(w, "# location: {}, month: {month}, variant: {v}", coord.label()).stage("write")?;
        writeln!(w, "depth_m,speed_m_s").stage("write")?;
        for (d, s) in ds.grid.depths().iter().zip(&pred) {
            writeln!(w, "{d},{s:.6}").stage("write")?;
        }
        Ok(())
    })
}

fn cmd_attn_export(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(rc)?;
    let test = ds.indices(Split::Test);
    let idx = if test.is_empty() { ds.indices(Split::Train) } else { test };
    for &epoch in &rc.attn_epochs {
        let name = epoch_ckpt_name(Variant::Attention, epoch);
        let ckpt = load_checkpoint(rc, &name, &format!("attention checkpoint for epoch {epoch}"))?;
        let received = evalkit::mean_received_attention(&ckpt, &ds, &idx).stage("attn-export")?;
        let (top, bottom) = evalkit::quartile_contrast(&received);
        let comments = [
            rc.comment(),
            format!("epoch: {epoch}"),
            format!("samples: {}", idx.len()),
            format!("shallow quartile mean {top:.6e}, deep quartile mean {bottom:.6e}"),
        ];
        write_text(&path(rc, &format!("attention_epoch{epoch:03}.csv")), |w| {
            evalkit::write_attention_csv(&ds.grid, &received, &comments, w).stage("write")
        })?;
        // per-head matrices for the first sample, for heatmaps
        let trace = attention_trace(&ckpt.params, &ds.input(idx[0])).stage("attn-export")?;
        write_text(&path(rc, &format!("attention_heads_epoch{epoch:03}.bin")), |w| {
            evalkit::write_attention_heads(&trace.heads, Some(rc.provenance()), w).stage("write")
        })?;
        log::info!("epoch {epoch}: shallow quartile {top:.4}, deep quartile {bottom:.4}");
    }
    Ok(())
}
