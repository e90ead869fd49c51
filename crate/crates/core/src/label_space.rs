//! The label universe: named classes carrying description text and an
//! embedding vector, with cosine retrieval over the row-normalized matrix.
//!
//! Stored embeddings are kept exactly as given. Unit-norm rows live in a
//! separate derived matrix that every similarity computation reads from.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    #[serde(skip)]
    pub id: usize,
    pub name: String,
    pub description: String,
    pub embedding: Vec<f64>,
}

impl LabelRecord {
    pub fn new(name: impl Into<String>, description: impl Into<String>, embedding: Vec<f64>) -> Self {
        LabelRecord {
            id: 0,
            name: name.into(),
            description: description.into(),
            embedding,
        }
    }
}

/// Immutable once built; [`LabelSpace::extend`] returns a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    records: Vec<LabelRecord>,
    dim: usize,
    normalized: Vec<f64>,
}

/// Result of [`LabelSpace::extend`]. Names are not keys, so a duplicate
/// name is reported but still accepted.
#[derive(Debug, Clone)]
pub struct Extended {
    pub space: LabelSpace,
    pub duplicate_name: Option<String>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn validate_embedding(name: &str, v: &[f64]) -> Result<f64> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidEmbedding(format!(
            "label `{name}` has non-finite entry {bad}"
        )));
    }
    let n = norm(v);
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::InvalidEmbedding(format!(
            "label `{name}` has zero norm"
        )));
    }
    Ok(n)
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = validate_embedding("<vector>", v)?;
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_similarity".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = validate_embedding("<lhs>", a)?;
    let nb = validate_embedding("<rhs>", b)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

impl LabelSpace {
    /// Builds a space from records in order, reassigning ids `0..N`.
    pub fn new(records: Vec<LabelRecord>) -> Result<Self> {
        let dim = match records.first() {
            Some(r) => r.embedding.len(),
            None => return Err(Error::InvalidArgument("label space needs at least one record".into())),
        };
        if dim == 0 {
            return Err(Error::InvalidEmbedding("embedding dimension is zero".into()));
        }
        let mut space = LabelSpace {
            records: Vec::with_capacity(records.len()),
            dim,
            normalized: Vec::with_capacity(records.len() * dim),
        };
        for r in records {
            space.push(r)?;
        }
        Ok(space)
    }

    fn push(&mut self, mut record: LabelRecord) -> Result<()> {
        if record.embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: format!("label `{}`", record.name),
                expected: self.dim,
                found: record.embedding.len(),
            });
        }
        let n = validate_embedding(&record.name, &record.embedding)?;
        self.normalized.extend(record.embedding.iter().map(|x| x / n));
        record.id = self.records.len();
        self.records.push(record);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    /// Parses the JSON-lines format: one
    /// `{"name": .., "description": .., "embedding": [..]}` object per line.
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut records = Vec::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let expected = *dim.get_or_insert(record.embedding.len());
            if record.embedding.len() != expected {
                return Err(Error::DimensionMismatch {
                    context: format!("line {lineno} (`{}`)", record.name),
                    expected,
                    found: record.embedding.len(),
                });
            }
            records.push(record);
        }
        Self::new(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("label record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn record(&self, id: usize) -> &LabelRecord {
        &self.records[id]
    }

    /// Unit-norm row `id` of the derived matrix.
    pub fn unit_row(&self, id: usize) -> &[f64] {
        &self.normalized[id * self.dim..(id + 1) * self.dim]
    }

    /// Row-major N×C matrix of unit-norm embeddings.
    pub fn unit_matrix(&self) -> &[f64] {
        &self.normalized
    }

    pub fn similarity_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let c = cosine_similarity(&self.records[i].embedding, &self.records[j].embedding)
                    .expect("records validated on construction");
                s[i][j] = c;
                s[j][i] = c;
            }
        }
        s
    }

    pub fn extend(&self, new: LabelRecord) -> Result<Extended> {
        let duplicate_name = self
            .records
            .iter()
            .any(|r| r.name == new.name)
            .then(|| new.name.clone());
        let mut space = self.clone();
        space.push(new)?;
        Ok(Extended {
            space,
            duplicate_name,
        })
    }

    /// Nearest label by cosine similarity. Ties go to the lowest id.
    pub fn retrieve(&self, v: &[f64]) -> Result<(usize, f64)> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "retrieve".into(),
                expected: self.dim,
                found: v.len(),
            });
        }
        let vn = validate_embedding("<query>", v)?;
        let mut best = (0, f64::NEG_INFINITY);
        for id in 0..self.len() {
            let score = dot(self.unit_row(id), v);
            if score > best.1 {
                best = (id, score);
            }
        }
        Ok((best.0, (best.1 / vn).clamp(-1.0, 1.0)))
    }
}

/// Mean off-diagonal similarity within blocks and across blocks.
pub fn block_similarity_summary(sim: &[Vec<f64>], blocks: &[usize]) -> Result<(f64, f64)> {
    if blocks.len() != sim.len() {
        return Err(Error::DimensionMismatch {
            context: "block assignment".into(),
            expected: sim.len(),
            found: blocks.len(),
        });
    }
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..sim.len() {
        for j in 0..sim.len() {
            if i == j {
                continue;
            }
            if blocks[i] == blocks[j] {
                within += sim[i][j];
                nw += 1;
            } else {
                cross += sim[i][j];
                nc += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok((mean(within, nw), mean(cross, nc)))
}

/// `%.9g`-style rendering used by the similarity export.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let mut s = if !(-5..9).contains(&exp) {
        let s = format!("{:.8e}", x);
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{e}");
    } else {
        format!("{:.*}", (8 - exp).max(0) as usize, x)
    };
    // Rounding can carry into a new digit, e.g. 9.999999999 -> 10.00000000.
    if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 9 && s.contains('.') {
        s = format!("{:.*}", (7 - exp).max(0) as usize, x);
    }
    trim_zeros(&s).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_field(name: &str) -> String {
    if name.contains([',', '"', '\n']) {
        format!("\"{}\"", name.replace('"', "\"\""))
    } else {
        name.to_string()
    }
}

/// Header row of label names, then N rows of N similarities.
pub fn similarity_csv(space: &LabelSpace) -> String {
    let sim = space.similarity_matrix();
    let mut out = String::new();
    let header: Vec<String> = space.records().iter().map(|r| csv_field(&r.name)).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in sim {
        let cells: Vec<String> = row.iter().map(|&x| format_sig9(x)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
