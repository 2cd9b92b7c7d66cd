//! Clip metadata, feature containers and user-grouped splits.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use geomoe_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{data_err, invalid, Result};

pub const TARGETS: usize = 12;

/// Score keys in dataset order: five traits, overall personality, six
/// interview measures.
pub const TARGET_NAMES: [&str; TARGETS] = [
    "Openness (O)",
    "Conscientiousness (C)",
    "Extraversion (E)",
    "Agreeableness (A)",
    "Neuroticism (N)",
    "overall_personality",
    "interview_score",
    "answer_score",
    "speaking_skills",
    "confidence_score",
    "facial_expression",
    "overall_performance",
];

const TEXT_FIELDS: [&str; 9] = [
    "id",
    "video_id",
    "video_filename",
    "duration",
    "question_id",
    "question",
    "video_quality",
    "user_no",
    "transcript",
];

pub fn target_names() -> Vec<String> {
    TARGET_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub video_id: String,
    pub video_filename: String,
    pub duration: String,
    pub question_id: String,
    pub question: String,
    pub video_quality: String,
    pub user_no: String,
    pub scores: [f64; TARGETS],
    pub transcript: String,
}

impl ClipRecord {
    /// A record with only identifiers and scores filled in.
    pub fn new(id: impl Into<String>, user_no: impl Into<String>, scores: [f64; TARGETS]) -> Self {
        Self {
            id: id.into(),
            video_id: String::new(),
            video_filename: String::new(),
            duration: String::new(),
            question_id: String::new(),
            question: String::new(),
            video_quality: String::new(),
            user_no: user_no.into(),
            scores,
            transcript: String::new(),
        }
    }

    pub fn from_json(entry: &Value, index: usize) -> Result<Self> {
        let Some(obj) = entry.as_object() else {
            return data_err(format!("metadata entry {index} is not an object"));
        };
        let text = |key: &str| -> Result<String> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(String::new()),
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Number(n)) => Ok(n.to_string()),
                Some(other) => data_err(format!("metadata entry {index}: field {key:?} has type {other}")),
            }
        };
        let id = text("id")?;
        let label = if id.is_empty() { format!("#{index}") } else { id.clone() };
        for (key, value) in obj {
            if !TEXT_FIELDS.contains(&key.as_str()) && !TARGET_NAMES.contains(&key.as_str()) && value.is_number() {
                return data_err(format!("metadata entry {label}: unexpected score key {key:?}"));
            }
        }
        let mut scores = [0.0; TARGETS];
        for (k, name) in TARGET_NAMES.iter().enumerate() {
            match obj.get(*name).and_then(Value::as_f64) {
                Some(v) if v.is_finite() => scores[k] = v,
                Some(_) => return data_err(format!("metadata entry {label}: score {name:?} is not finite")),
                None => return data_err(format!("metadata entry {label}: missing score key {name:?}")),
            }
        }
        let user_no = text("user_no")?;
        if user_no.is_empty() {
            return data_err(format!("metadata entry {label}: empty user_no"));
        }
        Ok(Self {
            id,
            video_id: text("video_id")?,
            video_filename: text("video_filename")?,
            duration: text("duration")?,
            question_id: text("question_id")?,
            question: text("question")?,
            video_quality: text("video_quality")?,
            user_no,
            scores,
            transcript: text("transcript")?,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        let s = |v: &str| Value::String(v.to_string());
        m.insert("id".into(), s(&self.id));
        m.insert("video_id".into(), s(&self.video_id));
        m.insert("video_filename".into(), s(&self.video_filename));
        m.insert("duration".into(), s(&self.duration));
        m.insert("question_id".into(), s(&self.question_id));
        m.insert("question".into(), s(&self.question));
        m.insert("video_quality".into(), s(&self.video_quality));
        m.insert("user_no".into(), s(&self.user_no));
        for (name, v) in TARGET_NAMES.iter().zip(self.scores) {
            m.insert(name.to_string(), Value::from(v));
        }
        m.insert("transcript".into(), s(&self.transcript));
        Value::Object(m)
    }
}

pub fn parse_metadata(text: &str) -> Result<Vec<ClipRecord>> {
    let v: Value = serde_json::from_str(text)?;
    let Some(entries) = v.as_array() else {
        return data_err("metadata must be a JSON array");
    };
    entries.iter().enumerate().map(|(i, e)| ClipRecord::from_json(e, i)).collect()
}

pub fn load_metadata(path: &Path) -> Result<Vec<ClipRecord>> {
    parse_metadata(&std::fs::read_to_string(path)?)
}

pub fn metadata_json(records: &[ClipRecord]) -> Value {
    Value::Array(records.iter().map(ClipRecord::to_json).collect())
}

/// Per-clip feature sequences, each with rows of width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub clip_id: String,
    pub text: Tensor,
    pub audio: Tensor,
    pub video: Tensor,
    pub targets: Option<[f64; TARGETS]>,
}

impl FeatureBundle {
    pub fn modalities(&self) -> [(&'static str, &Tensor); 3] {
        [("text", &self.text), ("audio", &self.audio), ("video", &self.video)]
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        for (name, t) in self.modalities() {
            if t.rank() != 2 || t.rows() == 0 || t.cols() != d_model {
                return invalid(format!(
                    "clip {}: {name} features {:?}, expected nonempty rows of width {d_model}",
                    self.clip_id,
                    t.shape()
                ));
            }
            if !t.is_finite() {
                return invalid(format!("clip {}: non-finite {name} features", self.clip_id));
            }
        }
        Ok(())
    }
}

pub const CONTAINER_MAGIC: &[u8; 4] = b"GMFC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityShape {
    pub name: String,
    pub len: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub clip_id: String,
    pub version: u32,
    pub endianness: String,
    pub modalities: Vec<ModalityShape>,
}

/// Layout: magic, `u32` version, `u32` header length, JSON header, then
/// each modality's `len × dim` values as little-endian `f32`, in header
/// order. Values are rounded to `f32`.
pub fn encode_container(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    let header = ContainerHeader {
        clip_id: bundle.clip_id.clone(),
        version: CONTAINER_VERSION,
        endianness: "le".into(),
        modalities: bundle
            .modalities()
            .iter()
            .map(|(name, t)| ModalityShape {
                name: name.to_string(),
                len: t.rows(),
                dim: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = bundle.modalities().iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * total);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in bundle.modalities() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(ContainerHeader, Vec<Tensor>)> {
    let take_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| crate::Error::Data("feature container truncated in preamble".into()))
    };
    if bytes.len() < 12 || &bytes[..4] != CONTAINER_MAGIC {
        return data_err("not a feature container (bad magic)");
    }
    let version = take_u32(4)?;
    if version != CONTAINER_VERSION {
        return data_err(format!("unsupported feature container version {version}"));
    }
    let hlen = take_u32(8)? as usize;
    let Some(hbytes) = bytes.get(12..12 + hlen) else {
        return data_err("feature container truncated in header");
    };
    let header: ContainerHeader = serde_json::from_slice(hbytes)?;
    if header.endianness != "le" {
        return data_err(format!("unsupported endianness {:?}", header.endianness));
    }
    if header.version != version {
        return data_err("header version disagrees with preamble");
    }
    let payload = &bytes[12 + hlen..];
    let declared: usize = header.modalities.iter().map(|m| m.len * m.dim).sum();
    if payload.len() != 4 * declared {
        return data_err(format!(
            "clip {}: payload has {} bytes, header declares {} floats",
            header.clip_id,
            payload.len(),
            declared
        ));
    }
    let mut tensors = Vec::with_capacity(header.modalities.len());
    let mut at = 0;
    for m in &header.modalities {
        let n = m.len * m.dim;
        let data: Vec<f64> = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        at += 4 * n;
        tensors.push(Tensor::new(vec![m.len, m.dim], data)?);
    }
    Ok((header, tensors))
}

fn bundle_from_container(
    header: ContainerHeader,
    tensors: Vec<Tensor>,
    targets: Option<[f64; TARGETS]>,
) -> Result<FeatureBundle> {
    let mut by_name: HashMap<String, Tensor> = header
        .modalities
        .iter()
        .map(|m| m.name.clone())
        .zip(tensors)
        .collect();
    let mut get = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| crate::Error::Data(format!("clip {}: no {name} modality", header.clip_id)))
    };
    Ok(FeatureBundle {
        text: get("text")?,
        audio: get("audio")?,
        video: get("video")?,
        clip_id: header.clip_id,
        targets,
    })
}

pub fn container_path(dir: &Path, clip_id: &str) -> std::path::PathBuf {
    dir.join(format!("{clip_id}.gmf"))
}

pub fn write_features(dir: &Path, bundle: &FeatureBundle) -> Result<()> {
    std::fs::write(container_path(dir, &bundle.clip_id), encode_container(bundle)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureBundle> {
    let (h, t) = decode_container(&std::fs::read(path)?)?;
    bundle_from_container(h, t, None)
}

/// Loads the container of every record from `dir`, attaches its scores
/// as targets, and checks widths against `d_model`.
pub fn load_features(dir: &Path, records: &[ClipRecord], d_model: usize) -> Result<Vec<FeatureBundle>> {
    records
        .iter()
        .map(|r| {
            let path = container_path(dir, &r.id);
            let bytes = std::fs::read(&path)
                .map_err(|e| crate::Error::Data(format!("clip {}: cannot read {}: {e}", r.id, path.display())))?;
            let (h, t) = decode_container(&bytes)?;
            if h.clip_id != r.id {
                return data_err(format!("container {} holds clip {:?}", path.display(), h.clip_id));
            }
            let b = bundle_from_container(h, t, Some(r.scores))?;
            b.validate(d_model)?;
            Ok(b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Errors if any clip is listed twice or any user spans two splits.
    pub fn check_disjoint(&self, user_of: &HashMap<String, String>) -> Result<()> {
        let mut owner: HashMap<&str, usize> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        for (s, ids) in self.parts().iter().enumerate() {
            for id in ids.iter() {
                if !seen.insert(id.as_str()) {
                    return data_err(format!("clip {id} appears in two splits"));
                }
                let Some(user) = user_of.get(id) else {
                    return data_err(format!("clip {id} has no user"));
                };
                if *owner.entry(user).or_insert(s) != s {
                    return data_err(format!("user {user} appears in two splits"));
                }
            }
        }
        Ok(())
    }
}

/// Shuffles users under `seed` and gives each user's clips to the split
/// whose clip count is furthest below its target; ties go to the earlier
/// split. No user is ever divided.
pub fn grouped_split(records: &[ClipRecord], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions {fractions:?} must be nonnegative and sum to 1"));
    }
    let mut by_user: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_no.as_str()).or_default().push(r.id.clone());
    }
    if by_user.len() < 3 {
        return invalid(format!("grouped split needs at least 3 users, got {}", by_user.len()));
    }
    let mut users: Vec<(&str, Vec<String>)> = by_user.into_iter().collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = records.len() as f64;
    let mut parts: [Vec<String>; 3] = Default::default();
    for (_, clips) in users {
        let deficit = |s: usize, parts: &[Vec<String>; 3]| fractions[s] * total - parts[s].len() as f64;
        let mut best = 0;
        for s in 1..3 {
            if deficit(s, &parts) > deficit(best, &parts) {
                best = s;
            }
        }
        parts[best].extend(clips);
    }
    let [train, val, test] = parts;
    Ok(SplitSpec {
        train,
        val,
        test,
        fractions,
        seed,
    })
}
