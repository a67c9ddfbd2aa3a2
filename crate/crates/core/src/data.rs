//! Event sequences and the JSONL dataset format.
//!
//! A dataset file starts with a metadata line
//! `#META {"num_types": K, "time_unit": "..."}` followed by one sequence per
//! line: `{"seq_id": "...", "events": [{"t": 0.5, "k": 1}, ...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_PREFIX: &str = "#META ";

/// A marked event sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    times: Vec<f64>,
    marks: Vec<usize>,
}

impl EventSequence {
    pub fn new(times: Vec<f64>, marks: Vec<usize>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Data("event sequence is empty".into()));
        }
        if times.len() != marks.len() {
            return Err(Error::Data(format!(
                "{} timestamps but {} marks",
                times.len(),
                marks.len()
            )));
        }
        if let Some(i) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::Data(format!("timestamp {i} is not finite")));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at position {}",
                i + 1
            )));
        }
        Ok(Self { times, marks })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn marks(&self) -> &[usize] {
        &self.marks
    }

    /// `t_{j+1} - t_j` for `j = 0..n-1`.
    pub fn gaps(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn check_marks(&self, num_types: usize) -> Result<()> {
        match self.marks.iter().position(|&k| k >= num_types) {
            Some(i) => Err(Error::Data(format!(
                "mark {} at position {i} outside [0, {num_types})",
                self.marks[i]
            ))),
            None => Ok(()),
        }
    }

    /// Every timestamp shifted by `sigma`.
    pub fn translated(&self, sigma: f64) -> Self {
        Self {
            times: self.times.iter().map(|t| t + sigma).collect(),
            marks: self.marks.clone(),
        }
    }

    /// Every timestamp multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            times: self.times.iter().map(|t| t * factor).collect(),
            marks: self.marks.clone(),
        }
    }

    /// Events `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(self.times[start..end].to_vec(), self.marks[start..end].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_types: usize,
    #[serde(default = "default_time_unit")]
    pub time_unit: String,
}

fn default_time_unit() -> String {
    "time-unit".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub ids: Vec<String>,
    pub sequences: Vec<EventSequence>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    t: f64,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    seq_id: String,
    events: Vec<EventRecord>,
}

impl Dataset {
    pub fn new(num_types: usize, sequences: Vec<EventSequence>) -> Result<Self> {
        let ids = (0..sequences.len()).map(|i| format!("seq-{i:05}")).collect();
        Self::with_ids(num_types, ids, sequences)
    }

    pub fn with_ids(num_types: usize, ids: Vec<String>, sequences: Vec<EventSequence>) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::Data("num_types must be positive".into()));
        }
        if ids.len() != sequences.len() {
            return Err(Error::Data("sequence id count mismatch".into()));
        }
        for (id, s) in ids.iter().zip(&sequences) {
            s.check_marks(num_types)
                .map_err(|e| Error::Data(format!("sequence {id}: {e}")))?;
        }
        Ok(Self {
            meta: DatasetMeta {
                num_types,
                time_unit: default_time_unit(),
            },
            ids,
            sequences,
        })
    }

    pub fn num_types(&self) -> usize {
        self.meta.num_types
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Same ids and marks, every sequence transformed by `f`.
    pub fn map_sequences(&self, f: impl Fn(&EventSequence) -> EventSequence) -> Self {
        Self {
            meta: self.meta.clone(),
            ids: self.ids.clone(),
            sequences: self.sequences.iter().map(f).collect(),
        }
    }

    pub fn translated(&self, sigma: f64) -> Self {
        self.map_sequences(|s| s.translated(sigma))
    }

    pub fn require_predictable(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        match self.sequences.iter().position(|s| s.len() < 2) {
            Some(i) => Err(Error::Data(format!(
                "sequence {} has fewer than 2 events",
                self.ids[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{META_PREFIX}{}", serde_json::to_string(&self.meta)?)?;
        for (id, s) in self.ids.iter().zip(&self.sequences) {
            let rec = SequenceRecord {
                seq_id: id.clone(),
                events: s
                    .times()
                    .iter()
                    .zip(s.marks())
                    .map(|(&t, &k)| EventRecord { t, k })
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Data("dataset file is empty".into()))??;
        let meta_json = first
            .strip_prefix(META_PREFIX)
            .ok_or_else(|| Error::Data("first line must start with `#META `".into()))?;
        let meta: DatasetMeta = serde_json::from_str(meta_json)
            .map_err(|e| Error::Data(format!("bad #META header: {e}")))?;
        let mut ids = Vec::new();
        let mut sequences = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SequenceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 2)))?;
            let (times, marks) = rec.events.iter().map(|e| (e.t, e.k)).unzip();
            let seq = EventSequence::new(times, marks)
                .map_err(|e| Error::Data(format!("sequence {}: {e}", rec.seq_id)))?;
            ids.push(rec.seq_id);
            sequences.push(seq);
        }
        let mut ds = Self::with_ids(meta.num_types, ids, sequences)?;
        ds.meta = meta;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}
