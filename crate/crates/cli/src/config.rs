//! Run configuration: one JSON file plus command-line overrides.
//!
//! The resolved config is echoed into every artifact, so two runs with the
//! same resolved config and inputs write the same bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sspfuse::evalkit::DEFAULT_BANDS;
use sspfuse::synth::SynthConfig;
use sspfuse::{BasisScope, DepthGrid, ModelConfig, TimeKey, TrainConfig};

use crate::CliError;

/// Optional CSV inputs; when both are set `ingest` reads them instead of
/// relying on `synth`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub sst_csv: Option<PathBuf>,
    pub profile_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    /// Overrides both the synth and the training seed when set.
    pub seed: Option<u64>,
    pub inputs: Inputs,
    /// Grid for ingested profiles; synthetic runs use `synth.depth`.
    pub depth_grid: Option<DepthGrid>,
    /// `YYYY-MM`; empty means the first 80% of the available months.
    pub train_months: Vec<String>,
    /// `YYYY-MM`; empty means the months after the training months.
    pub test_months: Vec<String>,
    pub basis_scope: BasisScope,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Upper depths of the surface bands in the band table, metres.
    pub bands: Vec<f64>,
    /// Epochs whose checkpoints are kept for attention export.
    pub attn_epochs: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            out: PathBuf::from("out"),
            seed: None,
            inputs: Inputs::default(),
            depth_grid: None,
            train_months: Vec::new(),
            test_months: Vec::new(),
            basis_scope: BasisScope::Cell,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            bands: DEFAULT_BANDS.to_vec(),
            attn_epochs: vec![10, 50, 100],
        }
    }
}

/// Flag values that replace config fields.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub depth_grid: Option<DepthGrid>,
    pub months: Option<Vec<String>>,
    pub test_months: Option<Vec<String>>,
    pub basis_scope: Option<BasisScope>,
    pub variant: Option<sspfuse::Variant>,
}

fn parse_months(list: &[String]) -> Result<Vec<TimeKey>, CliError> {
    list.iter()
        .map(|s| s.parse::<TimeKey>().map(|t| t.month_key()).map_err(|e| CliError::Config(format!("month `{s}`: {e}"))))
        .collect()
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, command: &str, o: Overrides) -> Result<(), CliError> {
        self.command = command.to_string();
        if let Some(s) = o.seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.train.seed = s;
        }
        if let Some(out) = o.out {
            self.out = out;
        }
        if let Some(e) = o.epochs {
            self.train.max_epochs = e;
        }
        if let Some(g) = o.depth_grid.or(self.depth_grid) {
            self.depth_grid = Some(g);
            self.synth.depth = g;
        }
        // the layer count always follows the data
        self.model.layers = self.grid().layers();
        if let Some(m) = o.months {
            self.train_months = m;
        }
        if let Some(m) = o.test_months {
            self.test_months = m;
        }
        if let Some(s) = o.basis_scope {
            self.basis_scope = s;
        }
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        self.validate()
    }

    /// Depth grid of the run: explicit grid first, else the synthetic one.
    pub fn grid(&self) -> DepthGrid {
        self.depth_grid.unwrap_or(self.synth.depth)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        // other commands take the model config from their checkpoints
        if matches!(self.command.as_str(), "train" | "all") {
            self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        parse_months(&self.train_months)?;
        parse_months(&self.test_months)?;
        if self.bands.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(CliError::Config("bands must be positive depths".into()));
        }
        Ok(())
    }

    /// Train and test month lists resolved against the months on file.
    pub fn split(&self, available: &[TimeKey]) -> Result<(Vec<TimeKey>, Vec<TimeKey>), CliError> {
        let mut train = parse_months(&self.train_months)?;
        let mut test = parse_months(&self.test_months)?;
        if train.is_empty() {
            let n = available.len() - available.len() / 5;
            train = available[..n].iter().filter(|t| !test.contains(t)).copied().collect();
        }
        if test.is_empty() {
            test = available.iter().filter(|t| !train.contains(t)).copied().collect();
        }
        if train.is_empty() {
            return Err(CliError::Config("no training months".into()));
        }
        if let Some(t) = train.iter().find(|t| test.contains(t)) {
            return Err(CliError::Config(format!("month {t} is in both the training and the test list")));
        }
        Ok((train, test))
    }

    pub fn provenance(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// `config: {...}` comment line for CSV artifacts.
    pub fn comment(&self) -> String {
        format!("config: {}", serde_json::to_string(self).expect("config serializes"))
    }
}
