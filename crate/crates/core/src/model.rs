//! The attention-assisted CNN regressor and its attention-free ablation.
//!
//! Tokens are depth layers: the `[H, 6, 8]` fused tensor is read as `H`
//! tokens of 48 features. The trunk is
//! embed → multi-head attention (+ pass-through) → conv 2×2 → relu →
//! max-pool → adaptive average pool → fully connected → output head.
//! The output head is a fixed affine map (per-depth offset, global scale)
//! fitted to the training labels; it holds no trainable parameters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};

/// Channels per neighbor: sst, lat, lon, e1, e2, e3.
pub const CHANNELS: usize = 6;
pub const NEIGHBORS: usize = 8;
pub const TOKEN_FEATURES: usize = CHANNELS * NEIGHBORS;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameters do not match config: {0}")]
    Params(String),
    #[error("the cnn-only variant has no attention weights")]
    NoAttention,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Attention,
    Cnn,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Attention => "attention",
            Variant::Cnn => "cnn",
        })
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Variant::Attention),
            "cnn" => Ok(Variant::Cnn),
            other => Err(ModelError::Config(format!("unknown variant `{other}` (attention|cnn)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Depth layers `H`; also the output length.
    pub layers: usize,
    pub n_heads: usize,
    /// Per-head query/key/value width.
    pub d_k: usize,
    pub kernel: [usize; 2],
    pub conv_filters: usize,
    pub pool: [usize; 2],
    pub pool_stride: usize,
    pub adaptive: [usize; 2],
    pub variant: Variant,
    /// Adds the embedded tokens to the attention output.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 1976,
            n_heads: 8,
            d_k: 32,
            kernel: [2, 2],
            conv_filters: 256,
            pool: [2, 2],
            pool_stride: 2,
            adaptive: [8, 8],
            variant: Variant::Attention,
            residual: true,
        }
    }
}

impl ModelConfig {
    /// Small config used by the gradient checks.
    pub fn tiny() -> Self {
        Self { layers: 8, n_heads: 2, d_k: 4, conv_filters: 4, adaptive: [2, 2], ..Self::default() }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_k
    }

    fn conv_out(&self) -> [usize; 2] {
        [self.layers + 1 - self.kernel[0], self.d_model() + 1 - self.kernel[1]]
    }

    fn pooled(&self) -> [usize; 2] {
        let c = self.conv_out();
        [(c[0] - self.pool[0]) / self.pool_stride + 1, (c[1] - self.pool[1]) / self.pool_stride + 1]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.n_heads,
            self.d_k,
            self.kernel[0],
            self.kernel[1],
            self.conv_filters,
            self.pool[0],
            self.pool[1],
            self.pool_stride,
            self.adaptive[0],
            self.adaptive[1],
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config(format!("all dimensions must be ≥ 1: {self:?}")));
        }
        if self.kernel[0] > self.layers || self.kernel[1] > self.d_model() {
            return Err(ModelError::Config("conv kernel larger than the token image".into()));
        }
        let c = self.conv_out();
        if self.pool[0] > c[0] || self.pool[1] > c[1] {
            return Err(ModelError::Config(format!("pool {:?} larger than conv output {c:?}", self.pool)));
        }
        let p = self.pooled();
        if self.adaptive[0] > p[0] || self.adaptive[1] > p[1] {
            return Err(ModelError::Config(format!(
                "adaptive target {:?} larger than pooled map {p:?}",
                self.adaptive
            )));
        }
        Ok(())
    }

    /// Names and shapes of every trainable tensor, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model();
        let mut out = vec![("embed.w".to_string(), vec![TOKEN_FEATURES, d]), ("embed.b".to_string(), vec![d])];
        if self.variant == Variant::Attention {
            for h in 0..self.n_heads {
                for m in ["wq", "wk", "wv"] {
                    out.push((format!("head{h}.{m}"), vec![d, self.d_k]));
                }
            }
            out.push(("attn.wo".to_string(), vec![self.n_heads * self.d_k, d]));
        }
        let fc_in = self.adaptive[0] * self.adaptive[1] * self.conv_filters;
        out.push(("conv.k".to_string(), vec![self.kernel[0], self.kernel[1], 1, self.conv_filters]));
        out.push(("conv.b".to_string(), vec![self.conv_filters]));
        out.push(("fc.w".to_string(), vec![fc_in, self.layers]));
        out.push(("fc.b".to_string(), vec![self.layers]));
        out
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, dk, c) = (self.d_model(), self.n_heads, self.d_k, self.conv_filters);
        let embed = TOKEN_FEATURES * d + d;
        let attn = match self.variant {
            Variant::Attention => h * 3 * d * dk + h * dk * d,
            Variant::Cnn => 0,
        };
        let conv = self.kernel[0] * self.kernel[1] * c + c;
        let fc = self.adaptive[0] * self.adaptive[1] * c * self.layers + self.layers;
        embed + attn + conv + fc
    }
}

/// Fixed map from the network output to m/s: `offset + scale · y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub offset: Vec<f64>,
    pub scale: f64,
}

impl OutputHead {
    pub fn identity(layers: usize) -> Self {
        Self { offset: vec![0.0; layers], scale: 1.0 }
    }

    /// Per-depth label mean and the pooled standard deviation around it.
    pub fn fit(labels: &[&[f64]]) -> Option<Self> {
        let first = labels.first()?;
        let h = first.len();
        let n = labels.len() as f64;
        let mut offset = vec![0.0; h];
        for l in labels {
            offset.iter_mut().zip(l.iter()).for_each(|(o, v)| *o += v);
        }
        offset.iter_mut().for_each(|o| *o /= n);
        let ss: f64 = labels.iter().flat_map(|l| l.iter().zip(&offset).map(|(v, o)| (v - o) * (v - o))).sum();
        let std = (ss / (n * h as f64)).sqrt();
        Some(Self { offset, scale: if std > 1e-12 { std } else { 1.0 } })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    pub head: OutputHead,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [a, b] => (*a, *b),
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        _ => unreachable!("weights are rank 2 or 4"),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("shape product")
}

/// Glorot-uniform weights, zero biases; fully determined by `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .param_shapes()
        .iter()
        .map(|(_, s)| if s.len() == 1 { Tensor::zeros(s) } else { glorot(&mut rng, s) })
        .collect();
    Ok(ModelParams { config: config.clone(), tensors, head: OutputHead::identity(config.layers) })
}

impl ModelParams {
    pub fn from_parts(config: ModelConfig, tensors: Vec<Tensor>, head: OutputHead) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(ModelError::Params(format!("{} tensors, expected {}", tensors.len(), shapes.len())));
        }
        for ((name, s), t) in shapes.iter().zip(&tensors) {
            if t.shape() != s.as_slice() {
                return Err(ModelError::Params(format!("{name}: {:?}, expected {s:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(ModelError::Params(format!("{name} is not finite")));
            }
        }
        if head.offset.len() != config.layers || !head.scale.is_finite() {
            return Err(ModelError::Params("output head does not match H".into()));
        }
        Ok(Self { config, tensors, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names().iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// `[H, 6, 8]` → `[H, 48]`; each token is one depth layer, channel-major.
pub fn tokenize(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [h, CHANNELS, NEIGHBORS] => Ok(x.clone().reshape(&[*h, TOKEN_FEATURES])?),
        s => Err(ModelError::Params(format!("input must be [H, 6, 8], got {s:?}"))),
    }
}

pub fn untokenize(tokens: &Tensor) -> Result<Tensor> {
    let (h, f) = tokens.dims2()?;
    if f != TOKEN_FEATURES {
        return Err(ModelError::Params(format!("tokens must have 48 features, got {f}")));
    }
    Ok(tokens.clone().reshape(&[h, CHANNELS, NEIGHBORS])?)
}

struct Graph {
    pred: Var,
    weights: Vec<Var>,
}

fn head_on_tape(tape: &mut Tape<'_>, xe: Var, wq: Var, wk: Var, wv: Var, d_k: usize) -> Result<(Var, Var)> {
    let q = tape.matmul(xe, wq)?;
    let k = tape.matmul(xe, wk)?;
    let v = tape.matmul(xe, wv)?;
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / (d_k as f64).sqrt())?;
    let a = tape.softmax_rows(s)?;
    Ok((tape.matmul(a, v)?, a))
}

/// Multi-head block on `xe`; `ps` are the head weights followed by `W^O`.
fn multi_head_on_tape(tape: &mut Tape<'_>, xe: Var, ps: &[Var], d_k: usize) -> Result<(Var, Vec<Var>)> {
    let n_heads = (ps.len() - 1) / 3;
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (o, a) = head_on_tape(tape, xe, ps[3 * h], ps[3 * h + 1], ps[3 * h + 2], d_k)?;
        outs.push(o);
        weights.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok((tape.matmul(cat, ps[3 * n_heads])?, weights))
}

fn check_input(params: &ModelParams, x: &Tensor) -> Result<()> {
    let h = params.config.layers;
    if x.shape() != [h, CHANNELS, NEIGHBORS] {
        return Err(ModelError::Params(format!("input {:?}, expected [{h}, 6, 8]", x.shape())));
    }
    Ok(())
}

/// Records a forward pass; parameters are registered in `param_shapes` order.
fn build<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, x: &'a Tensor) -> Result<Graph> {
    check_input(params, x)?;
    let cfg = &params.config;
    let vars = params.tensors.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>, _>>()?;
    let x = tape.constant_ref(x)?;
    let tokens = tape.reshape(x, &[cfg.layers, TOKEN_FEATURES])?;
    let mut h = tape.linear(tokens, vars[0], Some(vars[1]))?;
    let mut weights = Vec::new();
    let mut next = 2;
    if cfg.variant == Variant::Attention {
        let n = 3 * cfg.n_heads + 1;
        let (mh, w) = multi_head_on_tape(tape, h, &vars[next..next + n], cfg.d_k)?;
        h = if cfg.residual { tape.add(h, mh)? } else { mh };
        weights = w;
        next += n;
    }
    let (ck, cb, fw, fb) = (vars[next], vars[next + 1], vars[next + 2], vars[next + 3]);
    let img = tape.reshape(h, &[cfg.layers, cfg.d_model(), 1])?;
    let c = tape.conv2d(img, ck, Some(cb))?;
    let c = tape.relu(c)?;
    let c = tape.maxpool2d(c, cfg.pool, cfg.pool_stride)?;
    let c = tape.adaptive_avgpool(c, cfg.adaptive)?;
    let flat = tape.reshape(c, &[1, cfg.adaptive[0] * cfg.adaptive[1] * cfg.conv_filters])?;
    let y = tape.linear(flat, fw, Some(fb))?;
    let y = tape.reshape(y, &[cfg.layers])?;
    let pred = tape.affine(y, params.head.scale, &params.head.offset)?;
    Ok(Graph { pred, weights })
}

/// Prediction in m/s for one fused input `[H, 6, 8]`.
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let g = build(&mut tape, params, x)?;
    Ok(tape.value(g.pred).data().to_vec())
}

/// RMSE in m/s; the training loss and the evaluation metric.
pub fn loss(pred: &[f64], label: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    (s / pred.len() as f64).sqrt()
}

/// Per-sample loss and gradients for every trainable tensor.
pub fn loss_and_grad(params: &ModelParams, x: &Tensor, label: &Tensor) -> Result<(f64, Gradients)> {
    if label.len() != params.config.layers {
        return Err(ModelError::Params(format!("label length {}, expected {}", label.len(), params.config.layers)));
    }
    let mut tape = Tape::new();
    let g = build(&mut tape, params, x)?;
    let l = tape.constant_ref(label)?;
    let loss = tape.rmse(g.pred, l)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// One attention head: output `[H, d_v]` and row-stochastic weights `[H, H]`.
pub fn attention_head(xe: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_k = wq.dims2()?.1;
    let mut tape = Tape::new();
    let (x, q, k, v) = (tape.constant_ref(xe)?, tape.constant_ref(wq)?, tape.constant_ref(wk)?, tape.constant_ref(wv)?);
    let (o, a) = head_on_tape(&mut tape, x, q, k, v, d_k)?;
    Ok((tape.value(o).clone(), tape.value(a).clone()))
}

/// `concat(head_1..head_h)·W^O` on embedded tokens, plus per-head weights.
pub fn multi_head(xe: &Tensor, params: &ModelParams) -> Result<(Tensor, Vec<Tensor>)> {
    let cfg = &params.config;
    if cfg.variant != Variant::Attention {
        return Err(ModelError::NoAttention);
    }
    let n = 3 * cfg.n_heads + 1;
    let mut tape = Tape::new();
    let x = tape.constant_ref(xe)?;
    let ps = params.tensors[2..2 + n].iter().map(|t| tape.constant_ref(t)).collect::<Result<Vec<_>, _>>()?;
    let (out, w) = multi_head_on_tape(&mut tape, x, &ps, cfg.d_k)?;
    Ok((tape.value(out).clone(), w.iter().map(|a| tape.value(*a).clone()).collect()))
}

/// Embedded tokens `[H, d_model]` for an input.
pub fn embed(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    check_input(params, x)?;
    let t = tokenize(x)?;
    let mut tape = Tape::new();
    let (tv, w, b) =
        (tape.constant_ref(&t)?, tape.constant_ref(&params.tensors[0])?, tape.constant_ref(&params.tensors[1])?);
    let y = tape.linear(tv, w, Some(b))?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Row-stochastic `[H, H]` matrix per head.
    pub heads: Vec<Tensor>,
    /// Attention received by each depth token, summing to 1.
    pub received: Vec<f64>,
}

pub fn attention_trace(params: &ModelParams, x: &Tensor) -> Result<AttentionTrace> {
    if params.config.variant != Variant::Attention {
        return Err(ModelError::NoAttention);
    }
    let mut tape = Tape::new();
    let g = build(&mut tape, params, x)?;
    let heads: Vec<Tensor> = g.weights.iter().map(|w| tape.value(*w).clone()).collect();
    Ok(AttentionTrace { received: received_attention(&heads)?, heads })
}

/// Column means of the head-averaged weights, renormalized.
pub fn received_attention(heads: &[Tensor]) -> Result<Vec<f64>> {
    let first = heads.first().ok_or(ModelError::NoAttention)?;
    let (h, _) = first.dims2()?;
    let mut col = vec![0.0; h];
    for w in heads {
        for row in w.data().chunks_exact(h) {
            col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
        }
    }
    let total: f64 = col.iter().sum();
    Ok(col.into_iter().map(|c| c / total).collect())
}
