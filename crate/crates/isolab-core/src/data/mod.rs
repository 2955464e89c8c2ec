//! Labeled utterances with domain tags, domain-based splits and a synthetic
//! intent corpus.

mod synth;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub label: usize,
    pub domain: usize,
}

/// Utterances with dense label and domain ids.
///
/// Every label belongs to exactly one domain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub label_names: Vec<String>,
    pub domain_names: Vec<String>,
}

/// Incremental builder assigning ids in first-appearance order.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    data: Dataset,
    labels: BTreeMap<String, usize>,
    domains: BTreeMap<String, usize>,
    label_domain: Vec<usize>,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one utterance. Fails if `label` was already seen under a
    /// different domain.
    pub fn push(&mut self, text: &str, label: &str, domain: &str) -> Result<()> {
        let domain_id = intern(&mut self.domains, &mut self.data.domain_names, domain);
        let before = self.data.label_names.len();
        let label_id = intern(&mut self.labels, &mut self.data.label_names, label);
        if label_id == before {
            self.label_domain.push(domain_id);
        } else if self.label_domain[label_id] != domain_id {
            return Err(Error::contract(alloc::format!(
                "label {label:?} appears in domains {:?} and {domain:?}",
                self.data.domain_names[self.label_domain[label_id]]
            )));
        }
        self.data.utterances.push(Utterance {
            text: text.into(),
            label: label_id,
            domain: domain_id,
        });
        Ok(())
    }

    pub fn finish(self) -> Dataset {
        self.data
    }
}

fn intern(map: &mut BTreeMap<String, usize>, names: &mut Vec<String>, key: &str) -> usize {
    if let Some(&id) = map.get(key) {
        return id;
    }
    let id = names.len();
    names.push(key.into());
    map.insert(key.into(), id);
    id
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.text.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|d| d == name)
    }

    /// Checks dense ids and the one-domain-per-label rule.
    pub fn validate(&self) -> Result<()> {
        let mut owner: Vec<Option<usize>> = alloc::vec![None; self.num_labels()];
        for (i, u) in self.utterances.iter().enumerate() {
            if u.label >= self.num_labels() || u.domain >= self.num_domains() {
                return Err(Error::contract(alloc::format!(
                    "utterance {i} has an out-of-range label or domain id"
                )));
            }
            match owner[u.label] {
                None => owner[u.label] = Some(u.domain),
                Some(d) if d != u.domain => {
                    return Err(Error::contract(alloc::format!(
                        "label {} belongs to more than one domain",
                        self.label_names[u.label]
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Sub-dataset of the given domains, with label and domain ids
    /// re-densified in first-appearance order.
    pub fn restrict_to_domains(&self, domains: &[usize]) -> Dataset {
        let mut b = DatasetBuilder::new();
        for u in &self.utterances {
            if domains.contains(&u.domain) {
                // labels are unique to domains here, so push cannot fail
                b.push(
                    &u.text,
                    &self.label_names[u.label],
                    &self.domain_names[u.domain],
                )
                .expect("source dataset is valid");
            }
        }
        b.finish()
    }

    /// Label names present in both datasets.
    pub fn shared_labels(&self, other: &Dataset) -> Vec<String> {
        self.label_names
            .iter()
            .filter(|l| other.label_names.contains(l))
            .cloned()
            .collect()
    }
}

/// Domain names routed to training, validation, or dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    #[serde(default)]
    pub excluded: Vec<String>,
}

impl SplitSpec {
    /// Six training domains, two validation domains and the rest excluded,
    /// in corpus order.
    pub fn default_for(data: &Dataset) -> Result<SplitSpec> {
        let names = &data.domain_names;
        if names.len() < 3 {
            return Err(Error::config("the default split needs at least 3 domains"));
        }
        let n_train = 6.min(names.len() - 2).max(1);
        let n_val = 2.min(names.len() - n_train - 1).max(1);
        Ok(SplitSpec {
            train: names[..n_train].to_vec(),
            validation: names[n_train..n_train + n_val].to_vec(),
            excluded: names[n_train + n_val..].to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.excluded);
        let mut seen = BTreeMap::new();
        for name in all {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::config(alloc::format!(
                    "domain {name:?} appears in more than one split list"
                )));
            }
        }
        Ok(())
    }
}

/// Routes utterances by domain into `(train, validation)`.
pub fn split_by_domain(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                data.domain_id(n)
                    .ok_or_else(|| Error::config(alloc::format!("unknown domain {n:?}")))
            })
            .collect()
    };
    let train = resolve(&spec.train)?;
    let val = resolve(&spec.validation)?;
    resolve(&spec.excluded)?;
    Ok((
        data.restrict_to_domains(&train),
        data.restrict_to_domains(&val),
    ))
}

/// Utterances of the excluded domains, used as the few-shot target.
pub fn excluded_split(data: &Dataset, spec: &SplitSpec) -> Result<Dataset> {
    spec.validate()?;
    let ids = spec
        .excluded
        .iter()
        .map(|n| {
            data.domain_id(n)
                .ok_or_else(|| Error::config(alloc::format!("unknown domain {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(data.restrict_to_domains(&ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn builder_assigns_first_appearance_ids() {
        let mut b = DatasetBuilder::new();
        b.push("hi", "greet", "chat").unwrap();
        b.push("balance?", "balance", "bank").unwrap();
        b.push("hello", "greet", "chat").unwrap();
        let d = b.finish();
        assert_eq!((d.len(), d.num_labels(), d.num_domains()), (3, 2, 2));
        assert_eq!(d.labels(), vec![0, 1, 0]);
        assert!(d.validate().is_ok());

        let mut b = DatasetBuilder::new();
        b.push("x", "l", "a").unwrap();
        assert!(b.push("y", "l", "b").is_err());
    }

    #[test]
    fn split_examples() {
        let data = generate_synthetic(&SynthConfig {
            utterances_per_intent: 3,
            intents_per_domain: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let all = SplitSpec {
            train: data.domain_names.clone(),
            ..Default::default()
        };
        let (train, val) = split_by_domain(&data, &all).unwrap();
        assert_eq!(train.len(), data.len());
        assert!(val.is_empty());

        let spec = SplitSpec::default_for(&data).unwrap();
        assert_eq!(
            (spec.train.len(), spec.validation.len(), spec.excluded.len()),
            (6, 2, 2)
        );
        let (train, val) = split_by_domain(&data, &spec).unwrap();
        let target = excluded_split(&data, &spec).unwrap();
        assert_eq!(train.len() + val.len() + target.len(), data.len());
        assert_eq!(train.num_labels(), 12);
        assert!(train.validate().is_ok() && val.validate().is_ok());
        assert!(train.shared_labels(&val).is_empty());
        // every label id is dense in each split
        assert_eq!(*val.labels().iter().max().unwrap(), val.num_labels() - 1);

        let dup = SplitSpec {
            train: strings(&["d0"]),
            validation: strings(&["d0"]),
            excluded: vec![],
        };
        assert!(split_by_domain(&data, &dup).unwrap_err().is_config());
        let unknown = SplitSpec {
            train: strings(&["nope"]),
            ..Default::default()
        };
        assert!(split_by_domain(&data, &unknown).unwrap_err().is_config());
    }
}
