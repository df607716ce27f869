//! Activation records and their line-delimited JSON interchange format.
//!
//! One record describes one generation: the per-token activations of the
//! answer span at a fixed layer, the answer tokens, the retriever embedding
//! of the evidence, and the stress condition the generation was built under.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Version of the line-delimited record schema.
pub const RECORD_FORMAT_VERSION: u32 = 1;

/// Stress condition of a generation. `Faithful` is the only grounded class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionLabel {
    Faithful,
    Contradicted,
    RetrievalMiss,
    Partial,
}

impl ConditionLabel {
    pub const ALL: [ConditionLabel; 4] = [
        ConditionLabel::Faithful,
        ConditionLabel::Contradicted,
        ConditionLabel::RetrievalMiss,
        ConditionLabel::Partial,
    ];

    pub fn is_faithful(self) -> bool {
        self == ConditionLabel::Faithful
    }

    /// Short tag used for pairwise metric keys (`F/C`, `F/RM`, `F/P`).
    pub fn short(self) -> &'static str {
        match self {
            ConditionLabel::Faithful => "F",
            ConditionLabel::Contradicted => "C",
            ConditionLabel::RetrievalMiss => "RM",
            ConditionLabel::Partial => "P",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionLabel::Faithful => "faithful",
            ConditionLabel::Contradicted => "contradicted",
            ConditionLabel::RetrievalMiss => "retrieval_miss",
            ConditionLabel::Partial => "partial",
        }
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub id: String,
    pub dataset: String,
    pub model: String,
    pub condition: ConditionLabel,
    #[serde(default)]
    pub answer_tokens: Vec<String>,
    #[serde(default)]
    pub answer_activations: Vec<Vec<f64>>,
    pub evidence_embedding: Vec<f64>,
    pub layer_index: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_override: Option<Vec<f64>>,
}

impl ActivationRecord {
    /// Hidden size `d` of the answer-state vector.
    pub fn hidden_dim(&self) -> usize {
        match &self.pooled_override {
            Some(v) => v.len(),
            None => self.answer_activations.first().map_or(0, Vec::len),
        }
    }

    pub fn evidence_dim(&self) -> usize {
        self.evidence_embedding.len()
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        if self.answer_tokens.len() != self.answer_activations.len() {
            return Err(Error::Schema(format!(
                "record {}: {} answer tokens but {} activation vectors",
                self.id,
                self.answer_tokens.len(),
                self.answer_activations.len()
            )));
        }
        if self.answer_tokens.is_empty() && self.pooled_override.is_none() {
            return Err(Error::Schema(format!(
                "record {}: neither answer tokens nor a pooled override",
                self.id
            )));
        }
        let d = self.hidden_dim();
        if d == 0 {
            return Err(Error::Schema(format!("record {}: hidden dimension is 0", self.id)));
        }
        if let Some(bad) = self.answer_activations.iter().position(|a| a.len() != d) {
            return Err(Error::Schema(format!(
                "record {}: activation {} has dimension {}, expected {}",
                self.id,
                bad,
                self.answer_activations[bad].len(),
                d
            )));
        }
        if self.evidence_embedding.is_empty() {
            return Err(Error::Schema(format!(
                "record {}: evidence embedding is empty",
                self.id
            )));
        }
        let finite = self
            .answer_activations
            .iter()
            .flatten()
            .chain(self.evidence_embedding.iter())
            .chain(self.pooled_override.iter().flatten())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Schema(format!("record {}: non-finite value", self.id)));
        }
        Ok(())
    }
}

/// Dimension bookkeeping shared by a corpus: every record must agree.
#[derive(Debug, Clone, Copy, Default)]
struct DimCheck {
    dims: Option<(usize, usize)>,
}

impl DimCheck {
    fn check(&mut self, rec: &ActivationRecord, line: usize) -> Result<()> {
        let got = (rec.hidden_dim(), rec.evidence_dim());
        match self.dims {
            None => self.dims = Some(got),
            Some(expected) if expected != got => {
                return Err(Error::Schema(format!(
                    "line {line}: record {} has dimensions (d={}, m={}), corpus has (d={}, m={})",
                    rec.id, got.0, got.1, expected.0, expected.1
                )))
            }
            Some(_) => {}
        }
        Ok(())
    }
}

/// Streaming reader over a record file. Yields validated records in file
/// order; blank lines are skipped.
pub struct RecordReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    dims: DimCheck,
    seen: Option<HashSet<String>>,
}

impl RecordReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(file)))
    }
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            dims: DimCheck::default(),
            seen: Some(HashSet::new()),
        }
    }

    /// Drops duplicate-id tracking so memory stays constant in corpus size.
    pub fn without_id_tracking(mut self) -> Self {
        self.seen = None;
        self
    }

    fn parse_line(&mut self, line: &str) -> Result<ActivationRecord> {
        let rec: ActivationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: self.line_no,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("line {}: {msg}", self.line_no)),
            other => other,
        })?;
        self.dims.check(&rec, self.line_no)?;
        if let Some(seen) = self.seen.as_mut() {
            if !seen.insert(rec.id.clone()) {
                return Err(Error::Integrity(format!(
                    "line {}: duplicate record id {}",
                    self.line_no, rec.id
                )));
            }
        }
        Ok(rec)
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: self.line_no + 1,
                        message: e.to_string(),
                    }))
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse_line(&line));
        }
    }
}

/// Reads a whole corpus file, validating dimensions and id uniqueness.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<ActivationRecord>> {
    RecordReader::open(path)?.collect()
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<ActivationRecord>> {
    RecordReader::new(reader).collect()
}

pub fn write_records<W: Write>(mut out: W, records: &[ActivationRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[ActivationRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_records(&mut out, records)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// SHA-256 over the canonical serialization of `records`, in the given order.
pub fn corpus_hash<'a>(records: impl IntoIterator<Item = &'a ActivationRecord>) -> String {
    let mut hasher = Sha256::new();
    for rec in records {
        let line = serde_json::to_vec(rec).expect("records always serialize");
        hasher.update(&line);
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Calibration / evaluation partition of a corpus, by record id.
///
/// Both id lists preserve corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub calibration: Vec<String>,
    pub evaluation: Vec<String>,
    pub split_fraction: f64,
    pub seed: u64,
}

pub const DEFAULT_CALIBRATION_FRACTION: f64 = 0.10;

impl CorpusSplit {
    /// Returns `(calibration, evaluation)` record references in corpus order.
    pub fn partition<'a>(
        &self,
        records: &'a [ActivationRecord],
    ) -> Result<(Vec<&'a ActivationRecord>, Vec<&'a ActivationRecord>)> {
        let calib: HashSet<&str> = self.calibration.iter().map(String::as_str).collect();
        let eval: HashSet<&str> = self.evaluation.iter().map(String::as_str).collect();
        let mut out = (Vec::new(), Vec::new());
        for rec in records {
            if calib.contains(rec.id.as_str()) {
                out.0.push(rec);
            } else if eval.contains(rec.id.as_str()) {
                out.1.push(rec);
            }
        }
        if out.0.len() != self.calibration.len() || out.1.len() != self.evaluation.len() {
            return Err(Error::Integrity(
                "split references record ids missing from the corpus".into(),
            ));
        }
        Ok(out)
    }
}

/// Stratified calibration split: within each condition, `round(fraction * n)`
/// records are drawn for calibration by a seeded shuffle.
pub fn stratified_split(
    records: &[ActivationRecord],
    fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut strata: BTreeMap<ConditionLabel, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        strata.entry(rec.condition).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_calib = vec![false; records.len()];
    for idx in strata.values_mut() {
        let take = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        for &i in &idx[..take] {
            in_calib[i] = true;
        }
    }
    let (mut calibration, mut evaluation) = (Vec::new(), Vec::new());
    for (rec, &c) in records.iter().zip(&in_calib) {
        if c {
            calibration.push(rec.id.clone());
        } else {
            evaluation.push(rec.id.clone());
        }
    }
    Ok(CorpusSplit {
        calibration,
        evaluation,
        split_fraction: fraction,
        seed,
    })
}
