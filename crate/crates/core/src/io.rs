//! On-disk artifacts: 16-bit PGM masks, sample archives, metrics files
//! and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{AnnotatedSample, Payload, Pool, SynthWorld};
use crate::tensor::Tensor;
use crate::train::StepRecord;

/// Binary PGM (P5) with 16-bit big-endian samples: `label + 1`, with 0
/// reserved for ignored pixels.
pub fn encode_pgm(width: usize, height: usize, labels: &[i64]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::DimensionMismatch {
            context: "pgm".into(),
            expected: width * height,
            found: labels.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &l in labels {
        let v = u16::try_from(l + 1).map_err(|_| Error::Format(format!("label {l} does not fit a 16-bit PGM")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_pgm`]; returns `(width, height, labels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<i64>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::Format(format!("expected a 16-bit P5 PGM, got {} / maxval {}", fields[0], fields[3])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("bad PGM extent {s}: {e}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * w * h {
        return Err(Error::Format(format!("PGM body has {} bytes, expected {}", body.len(), 2 * w * h)));
    }
    let labels = body.chunks(2).map(|c| i64::from(u16::from_be_bytes([c[0], c[1]])) - 1).collect();
    Ok((w, h, labels))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes files and remembers their hashes for the run manifest.
#[derive(Debug, Default)]
pub struct ArtifactWriter {
    root: PathBuf,
    hashes: Vec<(String, String)>,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ArtifactWriter { root, hashes: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// Hashes a file written by someone else under the root.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.hashes.push((rel.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Hashes every file below `rel`, in path order.
    pub fn record_dir(&mut self, rel: &str) -> Result<()> {
        let dir = self.root.join(rel);
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|entry| entry.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(&dir, e))?;
        names.sort();
        for name in names {
            let child = format!("{rel}/{name}");
            if self.root.join(&child).is_dir() {
                self.record_dir(&child)?;
            } else {
                self.record(&child)?;
            }
        }
        Ok(())
    }

    pub fn artifacts(&self) -> Vec<ArtifactHash> {
        self.hashes
            .iter()
            .map(|(path, sha256)| ArtifactHash {
                path: path.clone(),
                sha256: sha256.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleIndexEntry {
    id: String,
    dataset_id: usize,
    tier: String,
    height: usize,
    width: usize,
}

#[derive(Serialize)]
struct BoxLine<'a> {
    row0: usize,
    col0: usize,
    row1: usize,
    col1: usize,
    teacher: &'a [f64],
}

fn write_sample(out: &mut ArtifactWriter, dir: &str, s: &AnnotatedSample) -> Result<()> {
    let sc = &s.scene;
    out.write(&format!("{dir}/features.tnsr"), &sc.features.to_bytes())?;
    out.write(&format!("{dir}/truth.pgm"), &encode_pgm(sc.width, sc.height, &sc.truth_labels())?)?;
    match &s.payload {
        Payload::Pixels(p) => out.write(&format!("{dir}/payload.pgm"), &encode_pgm(p.width, p.height, &p.labels)?)?,
        Payload::Boxes(b) => {
            let mut text = String::new();
            for (r, t) in b.boxes.iter().zip(&b.teacher_embeddings) {
                let line = BoxLine {
                    row0: r.row0,
                    col0: r.col0,
                    row1: r.row1,
                    col1: r.col1,
                    teacher: t,
                };
                text.push_str(&serde_json::to_string(&line).expect("box serializes"));
                text.push('\n');
            }
            out.write(&format!("{dir}/boxes.jsonl"), text.as_bytes())?;
        }
    }
    Ok(())
}

/// Sample archive: label space, feature map, and one directory per sample
/// holding features (tensor format), truth and payload masks (PGM) or
/// boxes with teacher embeddings (JSONL).
pub fn write_archive(out: &mut ArtifactWriter, world: &SynthWorld, pools: &[Pool]) -> Result<()> {
    out.write("labels.jsonl", world.space.to_jsonl().as_bytes())?;
    let a = Tensor::new(&[world.feature_dim, world.space.dim()], world.feature_map.clone())?;
    out.write("feature_map.tnsr", &a.to_bytes())?;
    let mut index = String::new();
    for pool in pools {
        for (i, s) in pool.samples.iter().enumerate() {
            let id = format!("d{}_{:05}", pool.dataset_id, i);
            write_sample(out, &format!("samples/{id}"), s)?;
            let entry = SampleIndexEntry {
                id,
                dataset_id: pool.dataset_id,
                tier: s.tier.as_str().into(),
                height: s.scene.height,
                width: s.scene.width,
            };
            index.push_str(&serde_json::to_string(&entry).expect("index serializes"));
            index.push('\n');
        }
    }
    out.write("samples.jsonl", index.as_bytes())
}

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(crate::loss::METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

impl ArtifactHash {
    pub fn of_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(ArtifactHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Everything needed to repeat a command: the resolved config with all
/// defaults filled in, command arguments, hashed inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub args: serde_json::Value,
    pub inputs: Vec<ArtifactHash>,
    pub output_dir: String,
    pub artifacts: Vec<ArtifactHash>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_layout() {
        let bytes = encode_pgm(2, 1, &[-1, 3]).unwrap();
        assert_eq!(&bytes[..13], b"P5\n2 1\n65535\n");
        assert_eq!(&bytes[13..], &[0, 0, 0, 4]);
        assert!(encode_pgm(2, 2, &[0]).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    proptest! {
        #[test]
        fn pgm_roundtrip(w in 1usize..6, h in 1usize..6, seed in any::<u32>()) {
            let labels: Vec<i64> = (0..w * h).map(|i| ((seed as i64 + i as i64 * 7919) % 300) - 1).collect();
            let (w2, h2, back) = decode_pgm(&encode_pgm(w, h, &labels).unwrap()).unwrap();
            prop_assert_eq!((w2, h2), (w, h));
            prop_assert_eq!(back, labels);
        }
    }
}
