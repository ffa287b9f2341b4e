//! Manifests, `EAMF` feature files, cross-validation folds and embedding
//! dumps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eam::MixupMode;
use crate::nn::Matrix;
use crate::scalar::Scalar;
use crate::trainer::{Example, FrameOutput, ModelParams, TrainError};

pub const FEATURE_MAGIC: &[u8; 4] = b"EAMF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown label '{label}'")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: entry '{id}' has neither audio_path nor feature_path")]
    MissingPath { line: usize, id: String },
    #[error("line {line}: duplicate id '{id}'")]
    DuplicateId { line: usize, id: String },
    #[error("{path}: not a feature file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: feature version {version} is not supported (expected {FEATURE_VERSION})")]
    VersionMismatch { path: PathBuf, version: u32 },
    #[error("{path}: truncated, need {need} bytes but have {have}")]
    TruncatedFile { path: PathBuf, need: usize, have: usize },
    #[error("{path}: {extra} trailing bytes after feature data")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("only {groups} distinct groups for {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },
    #[error("entry '{id}': {reason}")]
    BadEntry { id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One utterance in a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    /// Class name; for mixed utterances, the dominant class.
    pub label: String,
    pub speaker: String,
    pub session: String,
    /// Class-name → probability for mixed utterances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_label: Option<BTreeMap<String, f64>>,
    /// Augmentation that produced this entry, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixup: Option<MixupMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
}

impl Manifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Probability vector for `entry`: its soft label when present,
    /// otherwise one-hot on its label.
    pub fn target(&self, entry: &ManifestEntry) -> Result<Vec<f64>, DataError> {
        let mut target = vec![0.0; self.classes.len()];
        let unknown = |label: &str| DataError::BadEntry {
            id: entry.id.clone(),
            reason: format!("unknown class '{label}'"),
        };
        match &entry.soft_label {
            Some(map) => {
                for (name, &p) in map {
                    target[self.class_index(name).ok_or_else(|| unknown(name))?] = p;
                }
                let sum: f64 = target.iter().sum();
                if target.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(DataError::BadEntry {
                        id: entry.id.clone(),
                        reason: format!("soft label sums to {sum}"),
                    });
                }
            }
            None => target[self.class_index(&entry.label).ok_or_else(|| unknown(&entry.label))?] = 1.0,
        }
        Ok(target)
    }
}

/// Reads a JSON-lines manifest. Relative paths are resolved against the
/// manifest's directory; blank lines are skipped. With `classes = None` the
/// class list is the sorted set of labels.
pub fn read_manifest(path: impl AsRef<Path>, classes: Option<&[String]>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut entries = Vec::new();
    let mut lines = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| DataError::Parse {
            line: line_no,
            message: err.to_string(),
        })?;
        if e.audio_path.is_none() && e.feature_path.is_none() {
            return Err(DataError::MissingPath { line: line_no, id: e.id });
        }
        if !seen.insert(e.id.clone()) {
            return Err(DataError::DuplicateId { line: line_no, id: e.id });
        }
        for p in [&mut e.audio_path, &mut e.feature_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        entries.push(e);
        lines.push(line_no);
    }
    let classes = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    for (e, &line) in entries.iter().zip(&lines) {
        let names = std::iter::once(&e.label).chain(e.soft_label.iter().flat_map(|m| m.keys()));
        for name in names {
            if !classes.contains(name) {
                return Err(DataError::UnknownLabel {
                    line,
                    label: name.clone(),
                });
            }
        }
    }
    Ok(Manifest { entries, classes })
}

/// Writes entries as JSON lines, paths verbatim.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn feature_bytes<T: Scalar>(x: &Matrix<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * x.data().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(x.cols() as u32).to_le_bytes());
    for &v in x.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    buf
}

pub fn features_from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Matrix<T>, DataError> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf() });
    }
    let truncated = |need: usize| DataError::TruncatedFile {
        path: path.to_path_buf(),
        need,
        have: bytes.len(),
    };
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            version,
        });
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let need = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < need {
        return Err(truncated(need));
    }
    if bytes.len() > need {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - need,
        });
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
        .collect();
    Ok(Matrix::from_vec(t, d, data).expect("size checked"))
}

/// Writes `x` as `EAMF` v1: magic, version, `T`, `D`, then `T·D` `f32`
/// values row-major, all little-endian.
pub fn write_features<T: Scalar>(path: impl AsRef<Path>, x: &Matrix<T>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, feature_bytes(x)).map_err(io_err(path))
}

pub fn read_features<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    features_from_bytes(&bytes, path)
}

/// Loads the feature file and target of every entry in `entries`.
pub fn load_examples<T: Scalar>(manifest: &Manifest, entries: &[&ManifestEntry]) -> Result<Vec<Example<T>>, DataError> {
    entries
        .iter()
        .map(|e| {
            let path = e.feature_path.as_ref().ok_or_else(|| DataError::BadEntry {
                id: e.id.clone(),
                reason: "no feature_path".into(),
            })?;
            let features = read_features(path)?;
            let target = manifest.target(e)?.into_iter().map(T::of).collect();
            let mut ex = Example::new(e.id.clone(), features, target);
            // The declared label wins over argmax ties in the soft label.
            if let Some(k) = manifest.class_index(&e.label) {
                ex.label = k;
            }
            Ok(ex)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    #[default]
    Session,
    Speaker,
}

impl std::str::FromStr for GroupKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "session" => Ok(Self::Session),
            "speaker" => Ok(Self::Speaker),
            other => Err(format!("unknown group key '{other}' (session|speaker)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub group_key: GroupKey,
    /// Utterance id → fold index.
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

fn group_of(e: &ManifestEntry, key: GroupKey) -> &str {
    match key {
        GroupKey::Session => &e.session,
        GroupKey::Speaker => &e.speaker,
    }
}

/// Group-disjoint folds. Groups are shuffled with `seed`, stably sorted by
/// size (largest first), and each is given to the currently smallest fold.
pub fn make_folds(entries: &[ManifestEntry], n_folds: usize, key: GroupKey, seed: u64) -> Result<FoldPlan, DataError> {
    let mut sizes: Vec<(String, usize)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for e in entries {
        let g = group_of(e, key);
        match index.get(g) {
            Some(&i) => sizes[i].1 += 1,
            None => {
                index.insert(g, sizes.len());
                sizes.push((g.to_string(), 1));
            }
        }
    }
    if n_folds == 0 || sizes.len() < n_folds {
        return Err(DataError::TooFewGroups {
            groups: sizes.len(),
            folds: n_folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes.shuffle(&mut rng);
    sizes.sort_by(|a, b| b.1.cmp(&a.1));
    let mut load = vec![0usize; n_folds];
    let mut group_fold = HashMap::new();
    for (g, n) in &sizes {
        let fold = (0..n_folds).min_by_key(|&f| (load[f], f)).expect("n_folds > 0");
        load[fold] += n;
        group_fold.insert(g.as_str(), fold);
    }
    let assignment = entries
        .iter()
        .map(|e| (e.id.clone(), group_fold[group_of(e, key)]))
        .collect();
    Ok(FoldPlan {
        n_folds,
        group_key: key,
        assignment,
    })
}

/// Writes `id,label,split,e0..e{P-1}` rows of projected features `f_low`.
/// `split` names the partition each example came from.
pub fn dump_embeddings<T: Scalar>(
    rows: &[(&Example<T>, &str)],
    class_names: &[String],
    params: &ModelParams<T>,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let p = params.config.proj_dim;
    let mut header = vec!["id".to_string(), "label".into(), "split".into()];
    header.extend((0..p).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for (ex, split) in rows {
        let out = params
            .forward(&ex.features, FrameOutput::Skip)
            .map_err(TrainError::from)?;
        let label = class_names
            .get(ex.label)
            .cloned()
            .unwrap_or_else(|| ex.label.to_string());
        let mut rec = vec![ex.id.clone(), label, split.to_string()];
        rec.extend(out.f_low.iter().map(|v| format_value(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

/// Shortest decimal that reads back to the same `f32`.
fn format_value<T: Scalar>(v: T) -> String {
    format!("{}", v.as_f64() as f32)
}
