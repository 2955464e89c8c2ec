//! Trainable utterance encoder and linear classification head.
//!
//! The encoder maps a token sequence to a representation `h ∈ R^d`:
//! mean of hashed token embeddings, then an MLP (`d_emb → d_hidden → d`)
//! with GELU and dropout on the hidden activations, then optional batch
//! normalization. `h` is what the regularizers and the few-shot probes see;
//! the head `softmax(W h + b)` only exists during pre-training.

mod tokenizer;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numcore::{log_sum_exp, Matrix, Rng, Tape, Var};
use crate::{Error, Result};

pub use tokenizer::{fnv1a64, Tokenizer, UNK};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub tokenizer: Tokenizer,
    #[serde(default = "defaults::d_emb")]
    pub d_emb: usize,
    #[serde(default = "defaults::d_hidden")]
    pub d_hidden: usize,
    #[serde(default = "defaults::d_out")]
    pub d_out: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

/// Nonlinearity applied to the last dense layer's output. `Tanh` keeps the
/// representation bounded, like the pooler of a pre-trained transformer;
/// with `Linear` the norms grow during training and the isotropy metric,
/// which is scale sensitive, collapses towards zero for every objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    #[default]
    Tanh,
}

mod defaults {
    pub fn d_emb() -> usize {
        64
    }
    pub fn d_hidden() -> usize {
        128
    }
    pub fn d_out() -> usize {
        32
    }
    pub fn dropout() -> f64 {
        0.1
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tokenizer: Tokenizer::default(),
            d_emb: defaults::d_emb(),
            d_hidden: defaults::d_hidden(),
            d_out: defaults::d_out(),
            dropout: defaults::dropout(),
            batchnorm: false,
            output_activation: OutputActivation::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.tokenizer.vocab_size < 2 || self.d_emb == 0 || self.d_hidden == 0 || self.d_out == 0
        {
            return Err(Error::config(
                "encoder dimensions must be positive (vocab >= 2)",
            ));
        }
        Ok(())
    }
}

/// Fully connected layer `x ↦ x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        BatchNorm {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
            running_mean: Matrix::zeros(1, d),
            running_var: Matrix::filled(1, d, 1.0),
        }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (r, &b) in self
            .running_mean
            .as_mut_slice()
            .iter_mut()
            .zip(stats.mean.as_slice())
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self
            .running_var
            .as_mut_slice()
            .iter_mut()
            .zip(stats.unbiased_var.as_slice())
        {
            *r = ((1.0 - m) * *r + m * b).max(f64::MIN_POSITIVE);
        }
    }
}

/// Encoder parameters (everything but the classification head).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `vocab_size × d_emb`
    pub embedding: Matrix,
    pub layers: Vec<Dense>,
    pub batchnorm: Option<BatchNorm>,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embedding = rng.normal_matrix(config.tokenizer.vocab_size, config.d_emb, 1.0);
        let dims = [config.d_emb, config.d_hidden, config.d_out];
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: rng.normal_matrix(w[0], w[1], 1.0 / libm::sqrt(w[0] as f64)),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            embedding,
            layers,
            batchnorm: config.batchnorm.then(|| BatchNorm::new(config.d_out)),
        })
    }

    pub fn dim(&self) -> usize {
        self.layers
            .last()
            .map_or(self.config.d_emb, |l| l.weight.cols())
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.config.tokenizer
    }
}

/// Linear softmax classifier over `L` source classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `L × d`
    pub weight: Matrix,
    /// `1 × L`
    pub bias: Matrix,
}

impl HeadParams {
    pub fn init(num_classes: usize, d: usize, rng: &mut Rng) -> Self {
        HeadParams {
            weight: rng.normal_matrix(num_classes, d, 1.0 / libm::sqrt(d as f64)),
            bias: Matrix::zeros(1, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }
}

/// `θ = {φ, W, b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Tensor role, used for weight decay and the L2 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    /// Batch-norm running statistics; saved but never trained.
    Buffer,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("head needs at least one class"));
        }
        let encoder = EncoderParams::init(config, rng)?;
        let head = HeadParams::init(num_classes, encoder.dim(), rng);
        Ok(ModelParams { encoder, head })
    }

    /// Every tensor with its name and role, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, TensorKind, &Matrix)> {
        use TensorKind::*;
        let mut out = vec![("encoder.embedding".into(), Weight, &self.encoder.embedding)];
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((
                alloc::format!("encoder.layers.{i}.weight"),
                Weight,
                &l.weight,
            ));
            out.push((alloc::format!("encoder.layers.{i}.bias"), Bias, &l.bias));
        }
        if let Some(bn) = &self.encoder.batchnorm {
            out.push(("encoder.batchnorm.gamma".into(), Bias, &bn.gamma));
            out.push(("encoder.batchnorm.beta".into(), Bias, &bn.beta));
            out.push((
                "encoder.batchnorm.running_mean".into(),
                Buffer,
                &bn.running_mean,
            ));
            out.push((
                "encoder.batchnorm.running_var".into(),
                Buffer,
                &bn.running_var,
            ));
        }
        out.push(("head.weight".into(), Weight, &self.head.weight));
        out.push(("head.bias".into(), Bias, &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut Matrix)> {
        use TensorKind::*;
        let mut out = vec![(Weight, &mut self.encoder.embedding)];
        for l in &mut self.encoder.layers {
            out.push((Weight, &mut l.weight));
            out.push((Bias, &mut l.bias));
        }
        if let Some(bn) = &mut self.encoder.batchnorm {
            out.push((Bias, &mut bn.gamma));
            out.push((Bias, &mut bn.beta));
            out.push((Buffer, &mut bn.running_mean));
            out.push((Buffer, &mut bn.running_var));
        }
        out.push((Weight, &mut self.head.weight));
        out.push((Bias, &mut self.head.bias));
        out
    }

    /// Trainable tensors (buffers excluded), in a fixed order shared with
    /// [`ParamVars::trainable`] and the gradient vectors.
    pub fn trainable(&self) -> Vec<&Matrix> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, k, _)| *k != TensorKind::Buffer)
            .map(|(_, _, m)| m)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        self.tensors_mut()
            .into_iter()
            .filter(|(k, _)| *k != TensorKind::Buffer)
            .map(|(_, m)| m)
            .collect()
    }

    /// `true` for trainable tensors that count as weights (not biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, k, _)| *k != TensorKind::Buffer)
            .map(|(_, k, _)| k == TensorKind::Weight)
            .collect()
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable().iter().map(|m| m.len()).sum()
    }

    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for m in self.trainable() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn assign_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(Error::contract(
                "flat parameter vector has the wrong length",
            ));
        }
        let mut offset = 0;
        for m in self.trainable_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every trainable tensor as a tape leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        let enc = &self.encoder;
        let embedding = tape.leaf(&enc.embedding);
        let layers = enc
            .layers
            .iter()
            .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
            .collect();
        let batchnorm = enc
            .batchnorm
            .as_ref()
            .map(|bn| (tape.leaf(&bn.gamma), tape.leaf(&bn.beta)));
        let head = (tape.leaf(&self.head.weight), tape.leaf(&self.head.bias));
        ParamVars {
            encoder: EncoderVars {
                embedding,
                layers,
                batchnorm,
            },
            head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embedding: Var,
    pub layers: Vec<(Var, Var)>,
    pub batchnorm: Option<(Var, Var)>,
}

impl EncoderVars {
    pub fn bind<'a>(params: &'a EncoderParams, tape: &mut Tape<'a>) -> Self {
        EncoderVars {
            embedding: tape.leaf(&params.embedding),
            layers: params
                .layers
                .iter()
                .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
                .collect(),
            batchnorm: params
                .batchnorm
                .as_ref()
                .map(|bn| (tape.leaf(&bn.gamma), tape.leaf(&bn.beta))),
        }
    }
}

/// Tape handles of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: EncoderVars,
    pub head: (Var, Var),
}

impl ParamVars {
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = vec![self.encoder.embedding];
        for &(w, b) in &self.encoder.layers {
            out.push(w);
            out.push(b);
        }
        if let Some((g, b)) = self.encoder.batchnorm {
            out.push(g);
            out.push(b);
        }
        out.push(self.head.0);
        out.push(self.head.1);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch norm uses batch statistics.
    Train,
    /// Deterministic: no dropout, batch norm uses running statistics.
    Eval,
}

/// Per-feature statistics of one training batch, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Matrix,
    pub unbiased_var: Matrix,
}

pub struct Encoded {
    /// `N_b × d` representations.
    pub reps: Var,
    pub batch_stats: Option<BatchStats>,
}

/// One forward pass of the encoder over a batch of token sequences.
///
/// In [`Mode::Train`] a fresh dropout mask is drawn from `rng` and frozen
/// into the tape as a constant (inverted dropout, kept units scaled by
/// `1/(1−p)`); [`Mode::Eval`] draws nothing.
pub fn encode<'a>(
    tape: &mut Tape<'a>,
    vars: &EncoderVars,
    params: &EncoderParams,
    seqs: &[Vec<u32>],
    mode: Mode,
    rng: &mut Rng,
) -> Result<Encoded> {
    if seqs.is_empty() {
        return Err(Error::contract("encode: empty batch"));
    }
    let empty: Vec<u32> = vec![UNK];
    let seqs: Vec<Vec<u32>> = seqs
        .iter()
        .map(|s| {
            if s.is_empty() {
                empty.clone()
            } else {
                s.clone()
            }
        })
        .collect();
    let mut x = tape.embed_mean(vars.embedding, &seqs)?;
    let p = params.config.dropout;
    let last = vars.layers.len().saturating_sub(1);
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        let z = tape.matmul(x, w)?;
        x = tape.add_row(z, b)?;
        if i < last {
            x = tape.gelu(x);
            if mode == Mode::Train && p > 0.0 {
                let (r, c) = tape.value(x).shape();
                let keep = 1.0 / (1.0 - p);
                let mask = Matrix::from_fn(r, c, |_, _| if rng.bernoulli(p) { 0.0 } else { keep });
                let m = tape.constant(mask);
                x = tape.mul(x, m)?;
            }
        } else if params.config.output_activation == OutputActivation::Tanh {
            x = tape.tanh(x);
        }
    }
    let mut batch_stats = None;
    if let (Some((gamma, beta)), Some(bn)) = (vars.batchnorm, params.batchnorm.as_ref()) {
        let normalized = match mode {
            Mode::Train => {
                let h = tape.value(x);
                let n = h.rows();
                let mean = h.col_means();
                let centered = h.broadcast_row(&mean, |v, m| v - m)?;
                let ss = centered.map(|v| v * v).col_sums();
                let unbiased_var = if n > 1 {
                    ss.scale(1.0 / (n - 1) as f64)
                } else {
                    ss.clone()
                };
                batch_stats = Some(BatchStats { mean, unbiased_var });
                let c = tape.center_cols(x);
                let sq = tape.square(c);
                let var = tape.col_mean(sq);
                let var = tape.shift(var, BN_EPS);
                let inv = tape.powf(var, -0.5);
                tape.mul_row(c, inv)?
            }
            Mode::Eval => {
                let neg_mean = tape.constant(bn.running_mean.scale(-1.0));
                let inv = tape.constant(bn.running_var.map(|v| 1.0 / libm::sqrt(v + BN_EPS)));
                let c = tape.add_row(x, neg_mean)?;
                tape.mul_row(c, inv)?
            }
        };
        let scaled = tape.mul_row(normalized, gamma)?;
        x = tape.add_row(scaled, beta)?;
    }
    Ok(Encoded {
        reps: x,
        batch_stats,
    })
}

/// Logits `H Wᵀ + b` on the tape.
pub fn head_logits(tape: &mut Tape<'_>, head: (Var, Var), reps: Var) -> Result<Var> {
    let z = tape.matmul_nt(reps, head.0)?;
    tape.add_row(z, head.1)
}

/// Eval-mode representations of already tokenized utterances.
pub fn encode_eval(params: &EncoderParams, seqs: &[Vec<u32>]) -> Result<Matrix> {
    const CHUNK: usize = 512;
    let mut out = Matrix::zeros(0, params.dim());
    let mut rng = Rng::new(0);
    for chunk in seqs.chunks(CHUNK) {
        let mut tape = Tape::new();
        let vars = EncoderVars::bind(params, &mut tape);
        let enc = encode(&mut tape, &vars, params, chunk, Mode::Eval, &mut rng)?;
        out = out.vstack(tape.value(enc.reps))?;
    }
    Ok(out)
}

/// Eval-mode representations of raw texts.
pub fn encode_texts<S: AsRef<str>>(params: &EncoderParams, texts: &[S]) -> Result<Matrix> {
    let seqs = params.tokenizer().encode_batch(texts);
    encode_eval(params, &seqs)
}

/// `softmax(W h + b)`, max-subtracted.
pub fn classify(head: &HeadParams, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != head.weight.cols() {
        return Err(Error::DimensionMismatch {
            op: "classify",
            left: (1, h.len()),
            right: head.weight.shape(),
        });
    }
    let logits: Vec<f64> = (0..head.num_classes())
        .map(|k| crate::numcore::dot(head.weight.row(k), h) + head.bias[(0, k)])
        .collect();
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| libm::exp(z - lse)).collect()
}
