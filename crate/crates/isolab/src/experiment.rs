//! Pre-train, encode the target domains, and score few-shot episodes.

use isolab_core::data::{self, Dataset, SplitSpec};
use isolab_core::fewshot::{self, EpisodeSpec, ProbeClassifier};
use isolab_core::geometry;
use isolab_core::model::{self, ModelParams};
use isolab_core::objectives::Clock;
use isolab_core::training::{self, TrainConfig, TrainLog};
use isolab_core::Result;
use serde::{Deserialize, Serialize};

/// Source, validation and target splits of one corpus.
#[derive(Debug, Clone)]
pub struct Splits {
    pub source: Dataset,
    pub validation: Dataset,
    pub target: Dataset,
}

impl Splits {
    /// Routes `data` by `split`: train domains become the source, validation
    /// domains the validation split and excluded domains the few-shot target.
    pub fn new(data: &Dataset, split: &SplitSpec) -> Result<Self> {
        let (source, validation) = data::split_by_domain(data, split)?;
        let target = data::excluded_split(data, split)?;
        Ok(Splits {
            source,
            validation,
            target,
        })
    }
}

/// Everything measured for one trained model.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub params: ModelParams,
    pub log: TrainLog,
    /// Target isotropy of the encoder before any training.
    pub initial_isotropy: f64,
    pub target_isotropy: f64,
    pub per_episode: Vec<f64>,
}

impl RunOutcome {
    pub fn accuracy(&self) -> f64 {
        fewshot::mean(&self.per_episode)
    }
}

/// Target-domain isotropy and episode accuracies of an encoder.
pub fn score(
    params: &ModelParams,
    target: &Dataset,
    spec: &EpisodeSpec,
) -> Result<(f64, Vec<f64>)> {
    let reps = model::encode_texts(&params.encoder, &target.texts())?;
    let iso = geometry::isotropy(&reps)?;
    let acc = fewshot::evaluate_representations(
        &reps,
        &target.labels(),
        spec,
        &ProbeClassifier::default(),
    )?;
    Ok((iso, acc))
}

/// Trains with `config` (its `seed` included) and scores the result on the
/// target split.
pub fn run(
    splits: &Splits,
    config: &TrainConfig,
    spec: &EpisodeSpec,
    clock: &dyn Clock,
) -> Result<RunOutcome> {
    let init = training::init_params(splits.source.num_labels(), config)?;
    let initial_isotropy =
        geometry::isotropy(&model::encode_texts(&init.encoder, &splits.target.texts())?)?;
    let (params, log) = training::train(&splits.source, &splits.validation, config, clock)?;
    let (target_isotropy, per_episode) = score(&params, &splits.target, spec)?;
    Ok(RunOutcome {
        seed: config.seed,
        params,
        log,
        initial_isotropy,
        target_isotropy,
        per_episode,
    })
}

/// The per-step losses, validation checks and outcome of a training run as
/// JSON lines. Timings are left out so that equal seeds give equal bytes.
pub fn train_log_jsonl(log: &TrainLog) -> String {
    let mut out = String::new();
    let mut push = |v: serde_json::Value| {
        out.push_str(&v.to_string());
        out.push('\n');
    };
    for s in &log.steps {
        push(serde_json::json!({
            "kind": "step", "step": s.step, "ce": s.ce, "cl": s.cl, "cor": s.cor,
            "cov": s.cov, "l2": s.l2, "total": s.total,
        }));
    }
    for e in &log.evals {
        push(serde_json::json!({
            "kind": "eval", "step": e.step, "val_accuracy": e.val_accuracy,
            "val_isotropy": e.val_isotropy,
        }));
    }
    push(serde_json::json!({
        "kind": "summary", "best_step": log.best_step,
        "best_val_accuracy": log.best_val_accuracy, "stopped_at": log.stopped_at,
        "stop_reason": log.stop_reason, "warnings": log.warnings,
    }));
    out
}

/// Seconds spent per loss term, summed over a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: u64,
    pub ce: f64,
    pub cl: f64,
    /// Correlation or covariance regularizer.
    pub cor: f64,
    pub backward: f64,
}

impl TimingSummary {
    pub fn from_log(log: &TrainLog) -> Self {
        let t = log.timing_totals();
        TimingSummary {
            steps: t.step,
            ce: t.t_ce,
            cl: t.t_cl,
            cor: t.t_cor,
            backward: t.t_backward,
        }
    }

    pub fn total(&self) -> f64 {
        self.ce + self.cl + self.cor + self.backward
    }

    /// `(term, total seconds, seconds per step)` rows.
    pub fn rows(&self) -> Vec<(&'static str, f64, f64)> {
        let per = |x: f64| {
            if self.steps == 0 {
                0.0
            } else {
                x / self.steps as f64
            }
        };
        [
            ("ce", self.ce),
            ("cl", self.cl),
            ("cor", self.cor),
            ("backward", self.backward),
            ("total", self.total()),
        ]
        .into_iter()
        .map(|(name, t)| (name, t, per(t)))
        .collect()
    }
}
