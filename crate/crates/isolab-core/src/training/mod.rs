//! Supervised pre-training with early stopping on few-shot validation
//! accuracy.

mod adam;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::fewshot::{self, EpisodeSpec, ProbeClassifier};
use crate::geometry;
use crate::model::{self, EncoderConfig, ModelParams};
use crate::numcore::Rng;
use crate::objectives::{self, Batch, Clock, LossBreakdown, ObjectiveConfig};
use crate::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Smallest batch allowed when a batch-statistics regularizer is active.
pub const MIN_REGULARIZED_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub patience_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    /// Episodes used for each validation check; sampled from a fixed seed
    /// so that every check scores the same tasks.
    pub validation: EpisodeSpec,
    pub objective: ObjectiveConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Learning rate suited to an encoder trained from scratch.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch_size: 32,
            max_steps: 1000,
            patience_steps: 100,
            eval_every: 20,
            seed: 1,
            validation: EpisodeSpec {
                episodes: 50,
                seed: 0x5eed,
                ..EpisodeSpec::default()
            },
            objective: ObjectiveConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }

    /// The fine-tuning learning rate of a pre-trained language model.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.encoder.validate()?;
        self.validation.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0) || self.learning_rate * self.weight_decay >= 1.0 {
            return Err(Error::config(
                "weight_decay must be >= 0 and lr * weight_decay < 1",
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be positive"));
        }
        if self.patience_steps < self.eval_every {
            return Err(Error::config("patience_steps must be >= eval_every"));
        }
        if self.objective.uses_regularizer() && self.batch_size < MIN_REGULARIZED_BATCH {
            return Err(Error::config(format!(
                "batch_size must be >= {MIN_REGULARIZED_BATCH} when a regularizer is active"
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub val_accuracy: f64,
    pub val_isotropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `max_steps` was zero.
    NoSteps,
    MaxSteps,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    /// Step whose parameters were returned.
    pub best_step: u64,
    pub best_val_accuracy: Option<f64>,
    pub stopped_at: u64,
    pub stop_reason: StopReason,
    pub warnings: Vec<String>,
}

impl TrainLog {
    fn empty() -> Self {
        TrainLog {
            steps: Vec::new(),
            evals: Vec::new(),
            best_step: 0,
            best_val_accuracy: None,
            stopped_at: 0,
            stop_reason: StopReason::NoSteps,
            warnings: Vec::new(),
        }
    }

    /// Summed forward/backward seconds per loss term over all steps.
    pub fn timing_totals(&self) -> LossBreakdown {
        let mut t = LossBreakdown::default();
        for s in &self.steps {
            t.t_ce += s.t_ce;
            t.t_cl += s.t_cl;
            t.t_cor += s.t_cor;
            t.t_backward += s.t_backward;
        }
        t.step = self.steps.len() as u64;
        t
    }
}

/// The parameters `train` starts from for a given config.
pub fn init_params(num_classes: usize, config: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(
        &config.encoder,
        num_classes,
        &mut Rng::derive(config.seed, STREAM_INIT),
    )
}

struct Validator<'a> {
    seqs: Vec<Vec<u32>>,
    labels: Vec<usize>,
    spec: &'a EpisodeSpec,
}

impl Validator<'_> {
    fn run(&self, params: &ModelParams, step: u64) -> Result<EvalPoint> {
        let reps = model::encode_eval(&params.encoder, &self.seqs)?;
        let acc = fewshot::evaluate_representations(
            &reps,
            &self.labels,
            self.spec,
            &ProbeClassifier::default(),
        )?;
        Ok(EvalPoint {
            step,
            val_accuracy: fewshot::mean(&acc),
            val_isotropy: geometry::isotropy(&reps)?,
        })
    }
}

/// Trains on `source` and early-stops on few-shot accuracy over `val`.
///
/// Validation runs before the first step, every `eval_every` steps and at
/// the last step; the returned parameters are those of the best check
/// (earliest on ties). An empty `val` disables early stopping and returns
/// the final parameters.
pub fn train(
    source: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if source.is_empty() || source.num_labels() == 0 {
        return Err(Error::config("source dataset is empty"));
    }
    let mut params = init_params(source.num_labels(), config)?;
    let mut log = TrainLog::empty();
    let shared = source.shared_labels(val);
    if !shared.is_empty() {
        log.warnings.push(format!(
            "source and validation share {} label(s), e.g. {:?}",
            shared.len(),
            shared[0]
        ));
    }
    if config.max_steps == 0 {
        return Ok((params, log));
    }

    let tokenizer = params.encoder.tokenizer().clone();
    let seqs = tokenizer.encode_batch(&source.texts());
    let labels = source.labels();
    let validator = if val.is_empty() {
        log.warnings
            .push("validation set is empty; early stopping disabled".into());
        None
    } else {
        Some(Validator {
            seqs: tokenizer.encode_batch(&val.texts()),
            labels: val.labels(),
            spec: &config.validation,
        })
    };

    let adam_cfg = config.adam();
    let decay = params.weight_mask();
    let mut state = AdamState::for_params(&params.trainable());
    let mut shuffle_rng = Rng::derive(config.seed, STREAM_SHUFFLE);
    let mut dropout_rng = Rng::derive(config.seed, STREAM_DROPOUT);
    let batch_size = config.batch_size.min(source.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut best: Option<(f64, ModelParams)> = None;
    if let Some(v) = &validator {
        let point = v.run(&params, 0)?;
        best = Some((point.val_accuracy, params.clone()));
        log.best_val_accuracy = Some(point.val_accuracy);
        log.evals.push(point);
    }

    let mut step = 0;
    log.stop_reason = StopReason::MaxSteps;
    while step < config.max_steps {
        if cursor + batch_size > order.len() {
            // incomplete tail batches are dropped
            order = (0..source.len()).collect();
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let batch = Batch {
            seqs: idx.iter().map(|&i| seqs[i].clone()).collect(),
            labels: idx.iter().map(|&i| labels[i]).collect(),
        };
        let out = objectives::joint_loss_and_grads(
            &batch,
            &params,
            &config.objective,
            &mut dropout_rng,
            clock,
        )?;
        adam_step(
            &mut params.trainable_mut(),
            &out.grads,
            &decay,
            &mut state,
            &adam_cfg,
        )?;
        if let (Some(stats), Some(bn)) = (&out.batch_stats, params.encoder.batchnorm.as_mut()) {
            bn.update_running(stats);
        }
        step += 1;
        let mut bd = out.breakdown;
        bd.step = step;
        log.steps.push(bd);

        if let Some(v) = &validator {
            if step % config.eval_every == 0 || step == config.max_steps {
                let point = v.run(&params, step)?;
                let (best_acc, _) = best.as_ref().expect("initial check ran");
                if point.val_accuracy > *best_acc {
                    best = Some((point.val_accuracy, params.clone()));
                    log.best_step = step;
                    log.best_val_accuracy = Some(point.val_accuracy);
                }
                log.evals.push(point);
                if step - log.best_step >= config.patience_steps {
                    log.stop_reason = StopReason::Patience;
                    break;
                }
            }
        }
    }
    log.stopped_at = step;
    match best {
        Some((_, p)) => Ok((p, log)),
        None => {
            log.best_step = step;
            Ok((params, log))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_by_domain, SplitSpec, SynthConfig};
    use crate::model::Tokenizer;
    use crate::objectives::{cross_entropy_logits, ZeroClock};
    use alloc::vec;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            tokenizer: Tokenizer {
                vocab_size: 512,
                lowercase: true,
            },
            d_emb: 16,
            d_hidden: 32,
            d_out: 8,
            dropout: 0.1,
            batchnorm: false,
            output_activation: Default::default(),
        }
    }

    fn corpus() -> (Dataset, Dataset) {
        let data = generate_synthetic(&SynthConfig {
            domains: 4,
            intents_per_domain: 6,
            utterances_per_intent: 12,
            noise_vocab: 200,
            ..SynthConfig::default()
        })
        .unwrap();
        let spec = SplitSpec {
            train: vec!["d0".into(), "d1".into()],
            validation: vec!["d2".into(), "d3".into()],
            excluded: vec![],
        };
        split_by_domain(&data, &spec).unwrap()
    }

    fn quick(objective: ObjectiveConfig, max_steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps,
            batch_size: 16,
            encoder: small_encoder(),
            objective,
            validation: EpisodeSpec {
                episodes: 10,
                ..TrainConfig::desk().validation
            },
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (src, val) = corpus();
        let cfg = quick(ObjectiveConfig::ce_only(), 0);
        let (p, log) = train(&src, &val, &cfg, &ZeroClock).unwrap();
        assert_eq!(p, init_params(src.num_labels(), &cfg).unwrap());
        assert!(log.steps.is_empty() && log.evals.is_empty());
        assert_eq!(log.stop_reason, StopReason::NoSteps);
    }

    #[test]
    fn config_checks() {
        let (src, val) = corpus();
        let mut cfg = quick(ObjectiveConfig::cor(), 5);
        cfg.batch_size = 4;
        assert!(train(&src, &val, &cfg, &ZeroClock).unwrap_err().is_config());
        let mut cfg = quick(ObjectiveConfig::ce_only(), 5);
        cfg.patience_steps = 5;
        assert!(cfg.validate().is_err());
        assert!(train(
            &Dataset::default(),
            &val,
            &quick(ObjectiveConfig::ce_only(), 5),
            &ZeroClock
        )
        .unwrap_err()
        .is_config());
        assert!(TrainConfig::preset("laptop").is_err());
        assert_eq!(TrainConfig::preset("paper").unwrap().learning_rate, 2e-5);
    }

    #[test]
    fn separable_source_is_fit() {
        let data = generate_synthetic(&SynthConfig {
            domains: 1,
            intents_per_domain: 3,
            utterances_per_intent: 40,
            signature_prob: 1.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = quick(ObjectiveConfig::ce_only(), 300);
        cfg.encoder.dropout = 0.0;
        let (p, log) = train(&data, &Dataset::default(), &cfg, &ZeroClock).unwrap();
        assert_eq!(log.stopped_at, 300);
        let reps = model::encode_texts(&p.encoder, &data.texts()).unwrap();
        let logits = reps
            .matmul_nt(&p.head.weight)
            .unwrap()
            .broadcast_row(&p.head.bias, |a, b| a + b)
            .unwrap();
        assert!(cross_entropy_logits(&logits, &data.labels()).unwrap() < 0.1);
        let probs: Vec<usize> = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
            })
            .collect();
        let acc = probs
            .iter()
            .zip(data.labels())
            .filter(|(p, y)| **p == *y)
            .count() as f64
            / data.len() as f64;
        assert!(acc > 0.95);
    }

    #[test]
    fn deterministic_and_best_is_max() {
        let (src, val) = corpus();
        let cfg = quick(ObjectiveConfig::cl_cor(), 60);
        let (pa, la) = train(&src, &val, &cfg, &ZeroClock).unwrap();
        let (pb, lb) = train(&src, &val, &cfg, &ZeroClock).unwrap();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        let max = la
            .evals
            .iter()
            .map(|e| e.val_accuracy)
            .fold(f64::MIN, f64::max);
        assert_eq!(la.best_val_accuracy, Some(max));
        assert!(la
            .evals
            .iter()
            .all(|e| (0.0..=1.0).contains(&e.val_accuracy)));
        for s in &la.steps {
            assert!((s.total - s.recompose(&cfg.objective)).abs() < 1e-12);
        }
    }

    #[test]
    fn patience_stops_early() {
        let (src, val) = corpus();
        let mut cfg = quick(ObjectiveConfig::ce_only(), 2000);
        cfg.learning_rate = 1e-9;
        cfg.patience_steps = 40;
        let (_, log) = train(&src, &val, &cfg, &ZeroClock).unwrap();
        assert_eq!(log.stop_reason, StopReason::Patience);
        assert!(log.stopped_at < 2000);
        assert!(log.stopped_at - log.best_step >= 40);
    }

    #[test]
    fn overlapping_labels_warn() {
        let (src, _) = corpus();
        let cfg = quick(ObjectiveConfig::ce_only(), 1);
        let (_, log) = train(&src, &src, &cfg, &ZeroClock).unwrap();
        assert!(log.warnings.iter().any(|w| w.contains("share")));
    }
}
