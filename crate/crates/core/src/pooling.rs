//! Answer-state pooling: collapse per-token activations into one vector.
//!
//! The default strategy averages the activations of the `k` most salient
//! answer tokens, where salience is the token's in-answer count times its
//! inverse document frequency over the calibration answers.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::ActivationRecord;

/// Inverse document frequencies, `idf(t) = ln(N / df(t))`.
///
/// Tokens never seen during construction get idf 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub idf: BTreeMap<String, f64>,
    pub corpus_size: usize,
}

impl IdfTable {
    pub fn get(&self, token: &str) -> f64 {
        self.idf.get(token).copied().unwrap_or(0.0)
    }
}

pub fn build_idf<I, D, S>(docs: I) -> Result<IdfTable>
where
    I: IntoIterator<Item = D>,
    D: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut n = 0usize;
    for doc in docs {
        n += 1;
        let mut seen = HashSet::new();
        for tok in doc {
            let tok = tok.as_ref();
            if seen.insert(tok.to_owned()) {
                *df.entry(tok.to_owned()).or_default() += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Argument("idf needs at least one document".into()));
    }
    let idf = df
        .into_iter()
        .map(|(t, c)| (t, (n as f64 / c as f64).ln()))
        .collect();
    Ok(IdfTable {
        idf,
        corpus_size: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    MeanTopK,
    MaxTopK,
    LastToken,
    /// Plain mean over the full answer span.
    MeanAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub strategy: PoolingStrategy,
    pub k: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            strategy: PoolingStrategy::MeanTopK,
            k: 8,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("pooling k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-token tf-idf weights, sorted by descending weight with ties broken by
/// ascending token index. `tf` is the token's count within the answer, so
/// repeated tokens share the same weight.
pub fn token_salience<S: AsRef<str>>(tokens: &[S], idf: &IdfTable) -> Vec<(usize, f64)> {
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *tf.entry(t.as_ref()).or_default() += 1;
    }
    let mut out: Vec<(usize, f64)> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.as_ref();
            (i, tf[t] as f64 * idf.get(t))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

pub fn salience(record: &ActivationRecord, idf: &IdfTable) -> Vec<(usize, f64)> {
    token_salience(&record.answer_tokens, idf)
}

/// Pools a record into its answer-state vector of dimension `d`.
pub fn pool(record: &ActivationRecord, idf: &IdfTable, cfg: &PoolingConfig) -> Result<Vec<f64>> {
    if let Some(v) = &record.pooled_override {
        return Ok(v.clone());
    }
    let acts = &record.answer_activations;
    if acts.is_empty() {
        return Err(Error::EmptyAnswer {
            id: record.id.clone(),
        });
    }
    let d = acts[0].len();
    let pooled = match cfg.strategy {
        PoolingStrategy::LastToken => acts[acts.len() - 1].clone(),
        PoolingStrategy::MeanAll => mean_of(acts.iter().map(Vec::as_slice), d),
        PoolingStrategy::MeanTopK | PoolingStrategy::MaxTopK => {
            let ranked = salience(record, idf);
            let take = cfg.k.min(ranked.len());
            let selected = ranked[..take].iter().map(|&(i, _)| acts[i].as_slice());
            if cfg.strategy == PoolingStrategy::MeanTopK {
                mean_of(selected, d)
            } else {
                let mut out = vec![f64::NEG_INFINITY; d];
                for a in selected {
                    for (o, x) in out.iter_mut().zip(a) {
                        *o = o.max(*x);
                    }
                }
                out
            }
        }
    };
    Ok(pooled)
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for row in rows {
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    sum
}
