use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetBuilder};
use crate::numcore::Rng;
use crate::{Error, Result};

/// Shape of the generated intent corpus.
///
/// Each intent owns a disjoint set of signature tokens. A token of an
/// utterance comes from its intent's signature set with probability
/// `signature_prob`, from its domain's shared vocabulary with probability
/// `domain_prob`, and otherwise from a Zipf-distributed noise vocabulary
/// shared by all domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub domains: usize,
    pub intents_per_domain: usize,
    pub utterances_per_intent: usize,
    pub signature_tokens: usize,
    pub noise_vocab: usize,
    /// Tokens shared by all intents of one domain.
    pub domain_tokens: usize,
    pub signature_prob: f64,
    pub domain_prob: f64,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            domains: 10,
            intents_per_domain: 15,
            utterances_per_intent: 30,
            signature_tokens: 6,
            noise_vocab: 1000,
            domain_tokens: 0,
            signature_prob: 0.6,
            domain_prob: 0.0,
            zipf_exponent: 1.2,
            min_len: 4,
            max_len: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 || self.intents_per_domain == 0 || self.signature_tokens == 0 {
            return Err(Error::config(
                "synthetic corpus needs domains, intents and signature tokens",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(
                "utterance length range must satisfy 1 <= min_len <= max_len",
            ));
        }
        let p = self.signature_prob + self.domain_prob;
        if !(0.0..=1.0).contains(&self.signature_prob)
            || !(0.0..=1.0).contains(&self.domain_prob)
            || p > 1.0
        {
            return Err(Error::config(
                "token source probabilities must lie in [0, 1] and sum to <= 1",
            ));
        }
        if p < 1.0 && self.noise_vocab == 0 {
            return Err(Error::config(
                "noise_vocab must be positive when noise tokens can be drawn",
            ));
        }
        if self.domain_prob > 0.0 && self.domain_tokens == 0 {
            return Err(Error::config(
                "domain_tokens must be positive when domain_prob > 0",
            ));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::config("zipf_exponent must be > 0"));
        }
        Ok(())
    }

    pub fn num_intents(&self) -> usize {
        self.domains * self.intents_per_domain
    }

    fn total_tokens(&self) -> usize {
        self.num_intents() * self.signature_tokens
            + self.domains * self.domain_tokens
            + self.noise_vocab
    }
}

/// Deterministic synthetic corpus; domains are named `d<i>` and intents
/// `d<i>_intent<j>`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    // a seeded permutation decides which surface token plays which role
    let mut ids: Vec<usize> = (0..config.total_tokens()).collect();
    rng.shuffle(&mut ids);
    let (signature_ids, rest) = ids.split_at(config.num_intents() * config.signature_tokens);
    let (domain_ids, noise_ids) = rest.split_at(config.domains * config.domain_tokens);
    let zipf = if config.noise_vocab > 0 {
        Some(
            Zipf::new(config.noise_vocab as f64, config.zipf_exponent)
                .map_err(|e| Error::config(format!("zipf: {e}")))?,
        )
    } else {
        None
    };

    let mut builder = DatasetBuilder::new();
    for d in 0..config.domains {
        let domain = format!("d{d}");
        let domain_set = &domain_ids[d * config.domain_tokens..(d + 1) * config.domain_tokens];
        for j in 0..config.intents_per_domain {
            let intent = d * config.intents_per_domain + j;
            let label = format!("d{d}_intent{j}");
            let sig = &signature_ids
                [intent * config.signature_tokens..(intent + 1) * config.signature_tokens];
            for _ in 0..config.utterances_per_intent {
                let len = config.min_len + rng.below(config.max_len - config.min_len + 1);
                let mut text = String::new();
                for t in 0..len {
                    let u = rng.uniform();
                    let tok = if u < config.signature_prob {
                        sig[rng.below(sig.len())]
                    } else if u < config.signature_prob + config.domain_prob {
                        domain_set[rng.below(domain_set.len())]
                    } else {
                        let rank = rng.sample(zipf.as_ref().expect("validated")) as usize;
                        noise_ids[rank.clamp(1, noise_ids.len()) - 1]
                    };
                    if t > 0 {
                        text.push(' ');
                    }
                    text.push_str(&format!("t{tok}"));
                }
                builder.push(&text, &label, &domain)?;
            }
        }
    }
    Ok(builder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn single_intent_corpus() {
        let cfg = SynthConfig {
            domains: 1,
            intents_per_domain: 1,
            utterances_per_intent: 5,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.labels().iter().all(|&l| l == 0));
        for u in &d.utterances {
            let n = u.text.split(' ').count();
            assert!((4..=12).contains(&n));
        }
    }

    #[test]
    fn pure_signature_tokens_stay_in_their_sets() {
        let cfg = SynthConfig {
            domains: 2,
            intents_per_domain: 3,
            utterances_per_intent: 20,
            signature_prob: 1.0,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let mut sets: Vec<BTreeSet<&str>> = alloc::vec![BTreeSet::new(); d.num_labels()];
        for u in &d.utterances {
            sets[u.label].extend(u.text.split(' '));
        }
        for (i, s) in sets.iter().enumerate() {
            assert!(s.len() <= cfg.signature_tokens);
            for other in &sets[i + 1..] {
                assert!(s.is_disjoint(other));
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        let cfg = SynthConfig {
            utterances_per_intent: 4,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        let b = generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.utterances[0].text, b.utterances[0].text);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = SynthConfig {
            min_len: 5,
            max_len: 4,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&bad).unwrap_err().is_config());
        let bad = SynthConfig {
            signature_prob: 0.8,
            domain_prob: 0.3,
            domain_tokens: 4,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&bad).unwrap_err().is_config());
    }

    /// Multinomial naive Bayes on token counts, fit on the first two thirds
    /// of every intent and scored on the rest.
    #[test]
    fn bag_of_words_probe_separates_default_corpus() {
        use alloc::collections::BTreeMap;

        let d = generate_synthetic(&SynthConfig::default()).unwrap();
        let k = d.num_labels();
        let per_intent = SynthConfig::default().utterances_per_intent;
        let cut = 2 * per_intent / 3;
        let mut seen = alloc::vec![0usize; k];
        let mut counts: Vec<BTreeMap<&str, f64>> = alloc::vec![BTreeMap::new(); k];
        let mut totals = alloc::vec![0.0; k];
        let mut vocab = BTreeSet::new();
        let mut test = Vec::new();
        for u in &d.utterances {
            seen[u.label] += 1;
            if seen[u.label] > cut {
                test.push(u);
                continue;
            }
            for tok in u.text.split(' ') {
                *counts[u.label].entry(tok).or_default() += 1.0;
                totals[u.label] += 1.0;
                vocab.insert(tok);
            }
        }
        let v = vocab.len() as f64;
        let correct = test
            .iter()
            .filter(|u| {
                let score = |c: usize| -> f64 {
                    u.text
                        .split(' ')
                        .map(|tok| {
                            let n = counts[c].get(tok).copied().unwrap_or(0.0);
                            libm::log((n + 1.0) / (totals[c] + v))
                        })
                        .sum()
                };
                let best = (0..k)
                    .max_by(|&a, &b| score(a).total_cmp(&score(b)))
                    .unwrap();
                best == u.label
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.9, "bag-of-words accuracy {acc}");
    }
}
