//! Mini-batch Adam training, the step learning-rate schedule, checkpoints
//! and loss logs.
//!
//! Batch members run forward/backward in parallel; their gradients are summed
//! in sample order, so results do not depend on thread scheduling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::fusion::{Dataset, Split};
use crate::io::{self, FrameError};
use crate::model::{self, init_params, ModelConfig, ModelError, ModelParams, OutputHead};

pub const CHECKPOINT_FORMAT: &str = "sspfuse-ckpt/1";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("non-finite loss or parameters in epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    /// Epochs between learning-rate drops.
    pub lr_drop_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Also record the mean test RMSE after every epoch.
    pub eval_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 100,
            lr: 0.001,
            lr_drop_factor: 0.1,
            lr_drop_period: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_test: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be ≥ 1".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(TrainError::Config("lr drop factor must lie in (0, 1]".into()));
        }
        if self.lr_drop_period == 0 {
            return Err(TrainError::Config("lr drop period must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// `lr · factor^⌊epoch / period⌋`, epoch 0-based.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_drop_period) as i32;
        self.lr * self.lr_drop_factor.powi(drops)
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in iter {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_rmse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub train: TrainConfig,
    pub history: Vec<EpochLog>,
    pub provenance: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(model::forward(&self.params, x)?)
    }
}

/// Mean per-sample RMSE of `params` over `indices`.
pub fn mean_rmse(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let losses = indices
        .par_iter()
        .map(|&i| Ok(model::loss(&model::forward(params, &ds.input(i))?, &ds.label(i))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Fresh parameters for `ds` with the output head fitted to its training labels.
pub fn initial_checkpoint(ds: &Dataset, config: &ModelConfig, train: &TrainConfig) -> Result<Checkpoint> {
    train.validate()?;
    if config.layers != ds.layers() {
        return Err(TrainError::Config(format!(
            "model H = {} but the dataset has {} layers",
            config.layers,
            ds.layers()
        )));
    }
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init_params(config, train.seed)?;
    let labels: Vec<Vec<f64>> = train_idx.iter().map(|&i| ds.label(i)).collect();
    let refs: Vec<&[f64]> = labels.iter().map(Vec::as_slice).collect();
    params.head = OutputHead::fit(&refs).expect("non-empty");
    let adam = AdamState::new(params.tensors());
    Ok(Checkpoint { params, adam, epoch: 0, train: train.clone(), history: Vec::new(), provenance: None })
}

/// Runs one epoch in place and returns its log row.
pub fn run_epoch(ckpt: &mut Checkpoint, ds: &Dataset) -> Result<EpochLog> {
    let cfg = ckpt.train.clone();
    let epoch = ckpt.epoch;
    let mut order = ds.indices(Split::Train);
    if order.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64));
    let lr = cfg.lr_at(epoch);
    let non_finite = |detail: String| TrainError::NonFinite { epoch: epoch + 1, detail };
    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let params = &ckpt.params;
        let results = batch
            .par_iter()
            .map(|&i| model::loss_and_grad(params, &ds.input(i), &ds.label_tensor(i)))
            .collect::<Vec<_>>();
        let mut total: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads) = r.map_err(|e| non_finite(e.to_string()))?;
            if !loss.is_finite() {
                return Err(non_finite("loss".into()));
            }
            loss_sum += loss;
            match total.as_mut() {
                None => total = Some(grads.0),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads.0) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                    }
                }
            }
        }
        let mut grads = total.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        adam_step(ckpt.params.tensors_mut(), &grads, &mut ckpt.adam, lr, &cfg);
        if ckpt.params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(non_finite("parameters after update".into()));
        }
    }
    let test_rmse = if cfg.eval_test {
        let test = ds.indices(Split::Test);
        (!test.is_empty()).then(|| mean_rmse(&ckpt.params, ds, &test)).transpose()?
    } else {
        None
    };
    ckpt.epoch += 1;
    let row = EpochLog { epoch: ckpt.epoch, lr, train_rmse: loss_sum / order.len() as f64, test_rmse };
    ckpt.history.push(row.clone());
    Ok(row)
}

/// Result of [`train`]: the final state plus measured wall time per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_seconds: Vec<f64>,
}

/// Trains from scratch for `train.max_epochs` epochs. `on_epoch` sees the
/// state after every epoch (for periodic checkpoints or snapshots); an error
/// from it stops training.
pub fn train(
    ds: &Dataset,
    config: &ModelConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut ckpt = initial_checkpoint(ds, config, train)?;
    let mut epoch_seconds = Vec::with_capacity(train.max_epochs);
    for _ in 0..train.max_epochs {
        let start = Instant::now();
        let row = run_epoch(&mut ckpt, ds)?;
        epoch_seconds.push(start.elapsed().as_secs_f64());
        log::info!(
            "epoch {:>3}  lr {:.0e}  train {:.4}{}",
            row.epoch,
            row.lr,
            row.train_rmse,
            row.test_rmse.map_or(String::new(), |t| format!("  test {t:.4}"))
        );
        on_epoch(&ckpt)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, epoch_seconds })
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    adam_step: u64,
    head: OutputHead,
    tensors: Vec<TensorEntry>,
    history: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// JSON header, then parameters, first moments and second moments as f64.
pub fn write_checkpoint<W: Write>(c: &Checkpoint, w: W) -> Result<()> {
    let names = c.params.names();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        model: c.params.config().clone(),
        train: c.train.clone(),
        epoch: c.epoch,
        adam_step: c.adam.step,
        head: c.params.head.clone(),
        tensors: names
            .into_iter()
            .zip(c.params.tensors())
            .map(|(name, t)| TensorEntry { name, shape: t.shape().to_vec() })
            .collect(),
        history: c.history.clone(),
        provenance: c.provenance.clone(),
    };
    let mut blob = Vec::new();
    for group in [c.params.tensors(), &c.adam.m, &c.adam.v] {
        for t in group {
            io::f64s_to_le(t.data(), &mut blob);
        }
    }
    io::write_frame(w, &header, &blob)?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let (h, blob): (CheckpointHeader, _) = io::read_frame(r)?;
    io::check_format(&h.format, CHECKPOINT_FORMAT)?;
    let values = io::le_to_f64s(&blob)?;
    let expected = h.model.param_shapes();
    if expected.len() != h.tensors.len()
        || expected.iter().zip(&h.tensors).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(TrainError::Format("tensor table does not match the model config".into()));
    }
    let per_group: usize = h.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if values.len() != 3 * per_group {
        return Err(TrainError::Format(format!("{} values, expected {}", values.len(), 3 * per_group)));
    }
    let mut it = values.into_iter();
    let mut group = || {
        h.tensors
            .iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Tensor::new(e.shape.clone(), it.by_ref().take(n).collect())
                    .map_err(|err| TrainError::Format(err.to_string()))
            })
            .collect::<Result<Vec<_>>>()
    };
    let (p, m, v) = (group()?, group()?, group()?);
    let params = ModelParams::from_parts(h.model, p, h.head)?;
    Ok(Checkpoint {
        params,
        adam: AdamState { m, v, step: h.adam_step },
        epoch: h.epoch,
        train: h.train,
        history: h.history,
        provenance: h.provenance,
    })
}

pub fn write_checkpoint_file(c: &Checkpoint, path: &Path) -> Result<()> {
    // write then rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("tmp");
    write_checkpoint(c, BufWriter::new(std::fs::File::create(&tmp)?))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(std::fs::File::open(path)?))
}

/// `epoch,lr,train_rmse[,test_rmse]`, preceded by `# ` comment lines.
pub fn write_loss_log<W: Write>(history: &[EpochLog], comments: &[String], mut w: W) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let with_test = history.iter().any(|r| r.test_rmse.is_some());
    writeln!(w, "epoch,lr,train_rmse{}", if with_test { ",test_rmse" } else { "" })?;
    for r in history {
        write!(w, "{},{},{}", r.epoch, r.lr, r.train_rmse)?;
        if with_test {
            write!(w, ",{}", r.test_rmse.map_or(String::new(), |t| t.to_string()))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelStats {
    pub variant: String,
    pub parameters: usize,
    pub mean_epoch_seconds: Option<f64>,
}

pub fn report_model_stats(config: &ModelConfig, epoch_seconds: &[f64]) -> ModelStats {
    ModelStats {
        variant: config.variant.to_string(),
        parameters: config.param_count(),
        mean_epoch_seconds: (!epoch_seconds.is_empty())
            .then(|| epoch_seconds.iter().sum::<f64>() / epoch_seconds.len() as f64),
    }
}

/// Side-by-side CSV of several variants.
pub fn write_model_stats<W: Write>(rows: &[ModelStats], mut w: W) -> Result<()> {
    writeln!(w, "variant,parameters,mean_epoch_seconds")?;
    for r in rows {
        let t = r.mean_epoch_seconds.map_or(String::new(), |s| format!("{s:.3}"));
        writeln!(w, "{},{},{t}", r.variant, r.parameters)?;
    }
    Ok(())
}
