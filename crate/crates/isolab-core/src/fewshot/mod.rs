//! Episodic C-way K-shot evaluation on frozen representations.

mod probe;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{self, EncoderParams};
use crate::numcore::{Matrix, Rng};
use crate::{Error, Result};

pub use probe::{LogRegProbe, ProbeConfig};

/// Stream id used to derive per-episode generators from the episode seed.
const EPISODE_STREAM: u64 = 0x0065_7069_736f_6465;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    /// `C`
    pub ways: usize,
    /// `K`
    pub shots: usize,
    /// `Q`
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            ways: 5,
            shots: 2,
            queries: 5,
            episodes: 500,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots == 0 || self.queries == 0 || self.episodes == 0 {
            return Err(Error::config(
                "episodes need ways >= 2 and positive shots, queries and episode count",
            ));
        }
        Ok(())
    }
}

/// One sampled task; `support[c]` and `query[c]` index utterances of class
/// `classes[c]`, and `c` is the episode-local label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

/// Per-class index built once per label vector.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    by_class: Vec<Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(labels: &[usize]) -> Self {
        let n = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut by_class = alloc::vec![Vec::new(); n];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        EpisodeSampler { by_class }
    }

    /// Classes with at least `K + Q` examples.
    pub fn eligible(&self, spec: &EpisodeSpec) -> Vec<usize> {
        (0..self.by_class.len())
            .filter(|&c| self.by_class[c].len() >= spec.shots + spec.queries)
            .collect()
    }

    /// Samples classes without replacement, then `K + Q` distinct examples
    /// per class; the first `K` form the support set.
    pub fn sample(&self, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
        let eligible = self.eligible(spec);
        if eligible.len() < spec.ways {
            return Err(Error::Sampling {
                needed: spec.ways,
                available: eligible.len(),
            });
        }
        let classes: Vec<usize> = rng
            .sample_indices(eligible.len(), spec.ways)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let mut support = Vec::with_capacity(spec.ways);
        let mut query = Vec::with_capacity(spec.ways);
        for &c in &classes {
            let pool = &self.by_class[c];
            let picks: Vec<usize> = rng
                .sample_indices(pool.len(), spec.shots + spec.queries)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            support.push(picks[..spec.shots].to_vec());
            query.push(picks[spec.shots..].to_vec());
        }
        Ok(Episode {
            classes,
            support,
            query,
        })
    }

    /// The `i`-th episode of `spec`, independent of how many were drawn
    /// before it.
    pub fn episode(&self, spec: &EpisodeSpec, i: usize) -> Result<Episode> {
        let mut rng = Rng::derive(spec.seed ^ EPISODE_STREAM, i as u64);
        self.sample(spec, &mut rng)
    }
}

pub fn sample_episode(data: &Dataset, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
    EpisodeSampler::new(&data.labels()).sample(spec, rng)
}

/// Everything a classifier sees for one episode.
pub struct EpisodeData<'a> {
    pub episode: &'a Episode,
    /// `(C·K) × d`, class-major.
    pub support: Matrix,
    pub support_labels: Vec<usize>,
    /// `(C·Q) × d`, class-major.
    pub query: Matrix,
    /// Utterance indices of the query rows.
    pub query_ids: Vec<usize>,
}

/// Predicts episode-local labels for the query rows.
pub trait EpisodeClassifier {
    fn predict(&self, data: &EpisodeData<'_>) -> Result<Vec<usize>>;
}

/// The logistic-regression probe.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeClassifier(pub ProbeConfig);

impl EpisodeClassifier for ProbeClassifier {
    fn predict(&self, data: &EpisodeData<'_>) -> Result<Vec<usize>> {
        let probe = LogRegProbe::fit(
            &data.support,
            &data.support_labels,
            data.episode.classes.len(),
            &self.0,
        )?;
        probe.predict(&data.query)
    }
}

/// Accuracy of every episode of `spec` on cached representations.
pub fn evaluate_representations(
    reps: &Matrix,
    labels: &[usize],
    spec: &EpisodeSpec,
    classifier: &dyn EpisodeClassifier,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if reps.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "evaluate_representations",
            left: reps.shape(),
            right: (labels.len(), 1),
        });
    }
    let sampler = EpisodeSampler::new(labels);
    let mut out = Vec::with_capacity(spec.episodes);
    for i in 0..spec.episodes {
        let episode = sampler.episode(spec, i)?;
        let flat = |sets: &[Vec<usize>]| -> (Vec<usize>, Vec<usize>) {
            let mut ids = Vec::new();
            let mut ys = Vec::new();
            for (c, set) in sets.iter().enumerate() {
                ids.extend_from_slice(set);
                ys.extend(core::iter::repeat_n(c, set.len()));
            }
            (ids, ys)
        };
        let (support_ids, support_labels) = flat(&episode.support);
        let (query_ids, query_labels) = flat(&episode.query);
        let data = EpisodeData {
            episode: &episode,
            support: reps.select_rows(&support_ids),
            support_labels,
            query: reps.select_rows(&query_ids),
            query_ids,
        };
        let predicted = classifier.predict(&data)?;
        if predicted.len() != query_labels.len() {
            return Err(Error::contract(
                "classifier returned the wrong number of predictions",
            ));
        }
        let hits = predicted
            .iter()
            .zip(&query_labels)
            .filter(|(p, y)| p == y)
            .count();
        out.push(hits as f64 / query_labels.len() as f64);
    }
    Ok(out)
}

/// Encodes `target` once in eval mode and scores it with the probe.
pub fn evaluate(encoder: &EncoderParams, target: &Dataset, spec: &EpisodeSpec) -> Result<Vec<f64>> {
    let reps = model::encode_texts(encoder, &target.texts())?;
    evaluate_representations(&reps, &target.labels(), spec, &ProbeClassifier::default())
}

/// Accuracy summary over one or more model seeds evaluated on the same
/// episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Sample standard deviation of the per-seed means (0 for one seed).
    pub std: f64,
    pub n_episodes: usize,
    #[serde(rename = "C")]
    pub ways: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    #[serde(rename = "Q")]
    pub queries: usize,
    pub episode_seed: u64,
    pub seeds: Vec<u64>,
    pub seed_means: Vec<f64>,
    /// Accuracy of each episode averaged over seeds.
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    /// Combines runs that share `spec`; each run is `(model seed,
    /// per-episode accuracies)`.
    pub fn from_runs(spec: &EpisodeSpec, runs: &[(u64, Vec<f64>)]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::contract("report needs at least one run"));
        }
        let n = runs[0].1.len();
        if n == 0 || runs.iter().any(|(_, r)| r.len() != n) {
            return Err(Error::contract(
                "runs must have the same non-zero episode count",
            ));
        }
        let seed_means: Vec<f64> = runs.iter().map(|(_, r)| mean(r)).collect();
        let per_episode: Vec<f64> = (0..n)
            .map(|i| runs.iter().map(|(_, r)| r[i]).sum::<f64>() / runs.len() as f64)
            .collect();
        Ok(EvalReport {
            mean: mean(&seed_means),
            std: sample_std(&seed_means),
            n_episodes: n,
            ways: spec.ways,
            shots: spec.shots,
            queries: spec.queries,
            episode_seed: spec.seed,
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            seed_means,
            per_episode,
        })
    }

    /// `acc = M.MM% ± S.SS`
    pub fn summary(&self) -> String {
        alloc::format!("acc = {:.2}% ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    libm::sqrt(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
}
