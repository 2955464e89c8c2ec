//! Pre-training losses and their composition.
//!
//! Every regularizer exists twice: a `*_var` builder that records the loss
//! on a [`Tape`] so gradients flow into the encoder, and a plain function
//! on matrices that evaluates the same graph on a throwaway tape.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{self, BatchStats, Mode, ModelParams, TensorKind};
use crate::numcore::{log_sum_exp, Matrix, Rng, Tape, Var};
use crate::{Error, Result};

/// Added to row norms before cosine similarity.
pub const NORM_EPS: f64 = 1e-12;
/// Added under the square root of the Frobenius norms.
pub const FROBENIUS_EPS: f64 = 1e-12;

pub const DEFAULT_CL_LAMBDA: f64 = 1.7;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_COR_LAMBDA: f64 = 0.04;

/// Diagonal target of the covariance-matrix ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovVariant {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "target-1")]
    TargetOne,
    #[serde(rename = "target-0.5")]
    TargetHalf,
    /// Mean of the current batch's variances, held constant for the step.
    #[serde(rename = "target-mean")]
    TargetMean,
}

impl CovVariant {
    pub const ALL: [CovVariant; 3] = [
        CovVariant::TargetOne,
        CovVariant::TargetHalf,
        CovVariant::TargetMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovVariant::None => "none",
            CovVariant::TargetOne => "target-1",
            CovVariant::TargetHalf => "target-0.5",
            CovVariant::TargetMean => "target-mean",
        }
    }
}

/// Which encoder pass feeds the cross-entropy term. Only the first
/// (dropout-active) pass is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CePass {
    #[default]
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub use_cl: bool,
    pub use_cor: bool,
    /// Weight of a lone regularizer. `None` picks the default for whichever
    /// one is active.
    pub lambda: Option<f64>,
    /// CL-Reg weight when both regularizers are active.
    pub lambda1: f64,
    /// Cor-Reg (or Cov-Reg) weight when both regularizers are active.
    pub lambda2: f64,
    pub tau: f64,
    pub cov_variant: CovVariant,
    /// Explicit `weight · Σ w²` term added to the loss.
    pub l2_weight: f64,
    /// Use `‖Σ − I‖²` instead of `‖Σ − I‖`.
    pub cor_squared: bool,
    pub ce_pass: CePass,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            use_cl: false,
            use_cor: false,
            lambda: None,
            lambda1: DEFAULT_CL_LAMBDA,
            lambda2: DEFAULT_COR_LAMBDA,
            tau: DEFAULT_TAU,
            cov_variant: CovVariant::None,
            l2_weight: 0.0,
            cor_squared: false,
            ce_pass: CePass::First,
        }
    }
}

impl ObjectiveConfig {
    pub fn ce_only() -> Self {
        Self::default()
    }

    pub fn cl() -> Self {
        ObjectiveConfig {
            use_cl: true,
            ..Self::default()
        }
    }

    pub fn cor() -> Self {
        ObjectiveConfig {
            use_cor: true,
            ..Self::default()
        }
    }

    pub fn cl_cor() -> Self {
        ObjectiveConfig {
            use_cl: true,
            use_cor: true,
            ..Self::default()
        }
    }

    pub fn cov(variant: CovVariant) -> Self {
        ObjectiveConfig {
            cov_variant: variant,
            ..Self::default()
        }
    }

    pub fn l2(weight: f64) -> Self {
        ObjectiveConfig {
            l2_weight: weight,
            ..Self::default()
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda.unwrap_or(0.0),
            self.lambda1,
            self.lambda2,
            self.l2_weight,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("temperature tau must be > 0"));
        }
        if self.use_cor && self.cov_variant != CovVariant::None {
            return Err(Error::config(
                "cov_variant and use_cor are mutually exclusive",
            ));
        }
        Ok(())
    }

    /// True when a Cor-Reg or Cov-Reg term is active.
    pub fn uses_matrix_reg(&self) -> bool {
        self.use_cor || self.cov_variant != CovVariant::None
    }

    pub fn uses_regularizer(&self) -> bool {
        self.use_cl || self.uses_matrix_reg()
    }

    /// `(weight on CL-Reg, weight on the matrix regularizer)`.
    pub fn weights(&self) -> (f64, f64) {
        match (self.use_cl, self.uses_matrix_reg()) {
            (true, true) => (self.lambda1, self.lambda2),
            (true, false) => (self.lambda.unwrap_or(DEFAULT_CL_LAMBDA), 0.0),
            (false, true) => (0.0, self.lambda.unwrap_or(DEFAULT_COR_LAMBDA)),
            (false, false) => (0.0, 0.0),
        }
    }

    /// Short human label, e.g. `ce+cl+cor` or `ce+cov(target-mean)`.
    pub fn label(&self) -> alloc::string::String {
        let mut s = alloc::string::String::from("ce");
        if self.use_cl {
            s.push_str("+cl");
        }
        if self.use_cor {
            s.push_str("+cor");
        }
        if self.cov_variant != CovVariant::None {
            s.push_str("+cov(");
            s.push_str(self.cov_variant.name());
            s.push(')');
        }
        if self.l2_weight > 0.0 {
            s.push_str(&alloc::format!("+l2({})", self.l2_weight));
        }
        s
    }
}

/// Loss values and forward timings of one step.
///
/// `cov` holds the Cov-Reg value when a covariance variant replaces Cor-Reg.
/// Timings are in seconds and come from the caller's [`Clock`]; they are
/// the only non-deterministic fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub ce: f64,
    pub cl: f64,
    pub cor: f64,
    pub cov: f64,
    pub l2: f64,
    pub total: f64,
    pub t_ce: f64,
    pub t_cl: f64,
    pub t_cor: f64,
    pub t_backward: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the components under `config`.
    pub fn recompose(&self, config: &ObjectiveConfig) -> f64 {
        let (w_cl, w_mat) = config.weights();
        let mat = if config.use_cor { self.cor } else { self.cov };
        self.ce + w_cl * self.cl + w_mat * mat + self.l2
    }
}

/// Monotonic time source in seconds.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Clock that always reads zero, keeping all outputs reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroClock;

impl Clock for ZeroClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Mean of `−log p(yᵢ)` over rows of a probability matrix.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(alloc::format!(
                "row {r} is not a probability distribution"
            )));
        }
    }
    let logits = probs.map(libm::log);
    // log-probabilities are already normalized, so this is −log p(y) again
    cross_entropy_logits(&logits, labels)
}

/// Mean softmax cross-entropy from unnormalized logits.
pub fn cross_entropy_logits(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_sum_exp(logits.row(i)) - logits[(i, y)])
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(m: &Matrix, labels: &[usize]) -> Result<()> {
    if m.rows() != labels.len() || labels.is_empty() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy",
            left: m.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m.cols()) {
        return Err(Error::contract(alloc::format!(
            "label {y} outside {} classes",
            m.cols()
        )));
    }
    Ok(())
}

/// Contrastive loss between two encodings of the same batch; row `i` of
/// `h_plus` is the positive for row `i` of `h`, every other row a negative.
pub fn cl_reg_var(tape: &mut Tape<'_>, h: Var, h_plus: Var, tau: f64) -> Result<Var> {
    let (n, _) = tape.value(h).shape();
    if tape.value(h_plus).shape() != tape.value(h).shape() {
        return Err(Error::DimensionMismatch {
            op: "cl_reg",
            left: tape.value(h).shape(),
            right: tape.value(h_plus).shape(),
        });
    }
    let a = tape.row_normalize(h, NORM_EPS);
    let b = tape.row_normalize(h_plus, NORM_EPS);
    let sim = tape.matmul_nt(a, b)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let labels: Vec<usize> = (0..n).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

pub fn cl_reg(h: &Matrix, h_plus: &Matrix, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config("temperature tau must be > 0"));
    }
    let mut tape = Tape::new();
    let a = tape.constant_ref(h);
    let b = tape.constant_ref(h_plus);
    let loss = cl_reg_var(&mut tape, a, b, tau)?;
    Ok(tape.scalar(loss))
}

fn ensure_batch(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::Degenerate(alloc::format!(
            "{what} needs a batch of at least 2, got {n}"
        )));
    }
    Ok(())
}

/// Sample covariance `HcᵀHc / (n−1)` on the tape.
fn covariance_var(tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    let n = tape.value(h).rows();
    let hc = tape.center_cols(h);
    let gram = tape.matmul_tn(hc, hc)?;
    Ok(tape.scale(gram, 1.0 / (n - 1) as f64))
}

/// `‖M‖_F` guarded as `√(Σm² + ε)`, or `Σm²` when `squared`.
fn frobenius_var(tape: &mut Tape<'_>, m: Var, squared: bool) -> Var {
    let sq = tape.square(m);
    let s = tape.sum(sq);
    if squared {
        s
    } else {
        let s = tape.shift(s, FROBENIUS_EPS);
        tape.sqrt(s)
    }
}

/// `‖Σ(H) − I‖_F` with `Σ` the batch Pearson correlation matrix.
pub fn cor_reg_var(tape: &mut Tape<'_>, h: Var, squared: bool) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    ensure_batch(n, "cor_reg")?;
    let cov = covariance_var(tape, h)?;
    let var = tape.diag(cov)?;
    let var = tape.shift(var, crate::geometry::CORRELATION_EPS);
    let inv_std = tape.powf(var, -0.5);
    let outer = tape.matmul_tn(inv_std, inv_std)?;
    let corr = tape.mul(cov, outer)?;
    let eye = tape.constant(Matrix::identity(d));
    let diff = tape.sub(corr, eye)?;
    Ok(frobenius_var(tape, diff, squared))
}

pub fn cor_reg(h: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant_ref(h);
    let loss = cor_reg_var(&mut tape, v, false)?;
    Ok(tape.scalar(loss))
}

/// `‖C − tI‖_F` with `C` the batch covariance.
pub fn cov_reg_var(tape: &mut Tape<'_>, h: Var, variant: CovVariant, squared: bool) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    ensure_batch(n, "cov_reg")?;
    let cov = covariance_var(tape, h)?;
    let t = match variant {
        CovVariant::None => return Err(Error::contract("cov_reg needs a target variant")),
        CovVariant::TargetOne => 1.0,
        CovVariant::TargetHalf => 0.5,
        CovVariant::TargetMean => tape.value(cov).diagonal().iter().sum::<f64>() / d as f64,
    };
    let target = tape.constant(Matrix::identity(d).scale(t));
    let diff = tape.sub(cov, target)?;
    Ok(frobenius_var(tape, diff, squared))
}

pub fn cov_reg(h: &Matrix, variant: CovVariant) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant_ref(h);
    let loss = cov_reg_var(&mut tape, v, variant, false)?;
    Ok(tape.scalar(loss))
}

/// `weight · Σ w²` over encoder and head weights; biases, batch-norm
/// parameters and running statistics are excluded.
pub fn l2_penalty(params: &ModelParams, weight: f64) -> Result<f64> {
    if !(weight >= 0.0) {
        return Err(Error::config("l2 weight must be >= 0"));
    }
    let s: f64 = params
        .named_tensors()
        .into_iter()
        .filter(|(_, k, _)| *k == TensorKind::Weight)
        .map(|(_, _, m)| m.sum_squares())
        .sum();
    Ok(weight * s)
}

fn l2_var(tape: &mut Tape<'_>, weights: &[Var], weight: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in weights {
        let sq = tape.square(w);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::contract("model has no weight tensors"))?;
    Ok(tape.scale(total, weight))
}

/// A mini-batch of tokenized utterances with their source-class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub seqs: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Result of one forward/backward evaluation of the joint objective.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Gradients in [`ModelParams::trainable`] order.
    pub grads: Vec<Matrix>,
    /// First-pass batch-norm statistics, for the running-average update.
    pub batch_stats: Option<BatchStats>,
}

/// Evaluates the joint objective without gradients.
pub fn joint_loss(
    batch: &Batch,
    params: &ModelParams,
    config: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    Ok(run_joint(batch, params, config, rng, &ZeroClock, false)?.breakdown)
}

/// Evaluates the joint objective and its gradient with respect to every
/// trainable tensor.
///
/// The encoder runs once in training mode to produce `H`, which feeds the
/// head (cross-entropy) and the matrix regularizer. When CL-Reg is active a
/// second pass with fresh dropout produces `H⁺`.
pub fn joint_loss_and_grads(
    batch: &Batch,
    params: &ModelParams,
    config: &ObjectiveConfig,
    rng: &mut Rng,
    clock: &dyn Clock,
) -> Result<StepOutput> {
    run_joint(batch, params, config, rng, clock, true)
}

fn run_joint(
    batch: &Batch,
    params: &ModelParams,
    config: &ObjectiveConfig,
    rng: &mut Rng,
    clock: &dyn Clock,
    with_grads: bool,
) -> Result<StepOutput> {
    config.validate()?;
    if batch.is_empty() || batch.seqs.len() != batch.labels.len() {
        return Err(Error::contract(
            "batch must be non-empty with one label per sequence",
        ));
    }
    if config.uses_regularizer() {
        ensure_batch(batch.len(), "a regularized objective")?;
    }
    let mut bd = LossBreakdown::default();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);

    let t0 = clock.seconds();
    let first = model::encode(
        &mut tape,
        &vars.encoder,
        &params.encoder,
        &batch.seqs,
        Mode::Train,
        rng,
    )?;
    let h = first.reps;
    let logits = model::head_logits(&mut tape, vars.head, h)?;
    let ce = tape.softmax_cross_entropy(logits, &batch.labels)?;
    bd.ce = tape.scalar(ce);
    let mut total = ce;
    let t1 = clock.seconds();
    bd.t_ce = t1 - t0;

    let (w_cl, w_mat) = config.weights();
    if config.use_cl {
        let second = model::encode(
            &mut tape,
            &vars.encoder,
            &params.encoder,
            &batch.seqs,
            Mode::Train,
            rng,
        )?;
        let cl = cl_reg_var(&mut tape, h, second.reps, config.tau)?;
        bd.cl = tape.scalar(cl);
        let term = tape.scale(cl, w_cl);
        total = tape.add(total, term)?;
    }
    let t2 = clock.seconds();
    bd.t_cl = t2 - t1;

    if config.uses_matrix_reg() {
        let reg = if config.use_cor {
            let v = cor_reg_var(&mut tape, h, config.cor_squared)?;
            bd.cor = tape.scalar(v);
            v
        } else {
            let v = cov_reg_var(&mut tape, h, config.cov_variant, config.cor_squared)?;
            bd.cov = tape.scalar(v);
            v
        };
        let term = tape.scale(reg, w_mat);
        total = tape.add(total, term)?;
    }
    let t3 = clock.seconds();
    bd.t_cor = t3 - t2;

    if config.l2_weight > 0.0 {
        let weights: Vec<Var> = vars
            .trainable()
            .into_iter()
            .zip(params.weight_mask())
            .filter(|(_, is_weight)| *is_weight)
            .map(|(v, _)| v)
            .collect();
        let l2 = l2_var(&mut tape, &weights, config.l2_weight)?;
        bd.l2 = tape.scalar(l2);
        total = tape.add(total, l2)?;
    }
    bd.total = tape.scalar(total);

    let mut grads = Vec::new();
    if with_grads {
        let mut g = tape.backward(total)?;
        for (v, m) in vars.trainable().into_iter().zip(params.trainable()) {
            grads.push(g.take_or_zeros(v, m.shape()));
        }
        bd.t_backward = clock.seconds() - t3;
    }
    Ok(StepOutput {
        breakdown: bd,
        grads,
        batch_stats: first.batch_stats,
    })
}
