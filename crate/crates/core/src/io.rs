//! safetensors container I/O (float32 only) and (de)serialization of carved
//! MoE layers.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian buffer. Offsets are
//! relative to the start of the buffer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::carve::{ExpertWeights, MoeFfn, RouterWeights};
use crate::error::{Error, Result};
use crate::grouping::MoeConfig;
use crate::tensor::Matrix;

const METADATA_KEY: &str = "__metadata__";

/// Container-level validation failures, one variant per corruption class.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor {name:?} has unsupported dtype {dtype:?} (only F32)")]
    UnknownDtype { name: String, dtype: String },
    #[error("data_offsets of {first:?} and {second:?} overlap")]
    OffsetOverlap { first: String, second: String },
    #[error("tensor {name:?}: byte span {span} does not match shape {shape:?}")]
    SpanMismatch {
        name: String,
        span: usize,
        shape: Vec<usize>,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has rank {rank}, expected {expected}")]
    Rank {
        name: String,
        rank: usize,
        expected: usize,
    },
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::Truncated(_) => "truncated",
            FormatError::MalformedHeader(_) => "malformed_header",
            FormatError::UnknownDtype { .. } => "unknown_dtype",
            FormatError::OffsetOverlap { .. } => "offset_overlap",
            FormatError::SpanMismatch { .. } => "span_mismatch",
            FormatError::DuplicateName(_) => "duplicate_name",
            FormatError::MissingTensor(_) => "missing_tensor",
            FormatError::Rank { .. } => "rank",
        }
    }
}

/// One float32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: (shape.iter().product(), 1),
                right: (data.len(), 1),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Named tensors plus optional string metadata. Names iterate sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(name, Tensor::from(m));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()).into())
    }

    /// Rank-2 tensor as a matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        if t.shape.len() != 2 {
            return Err(FormatError::Rank {
                name: name.to_string(),
                rank: t.shape.len(),
                expected: 2,
            }
            .into());
        }
        Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone())
    }

    /// Rank-2 tensor, or rank-3 `b × s × d` flattened to `(b·s) × d`.
    pub fn token_matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        match t.shape.as_slice() {
            [q, d] => Matrix::from_vec(*q, *d, t.data.clone()),
            [b, s, d] => Matrix::from_vec(b * s, *d, t.data.clone()),
            _ => Err(FormatError::Rank {
                name: name.to_string(),
                rank: t.shape.len(),
                expected: 2,
            }
            .into()),
        }
    }

    /// Rank-1 tensor as a vector.
    pub fn vector(&self, name: &str) -> Result<Vec<f32>> {
        let t = self.get(name)?;
        if t.shape.len() != 1 {
            return Err(FormatError::Rank {
                name: name.to_string(),
                rank: t.shape.len(),
                expected: 1,
            }
            .into());
        }
        Ok(t.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.into(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.data.len() * 4;
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": "F32",
                    "shape": t.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut json = serde_json::to_vec(&header).expect("json");
        // Pad so the buffer starts 8-byte aligned.
        while !json.len().is_multiple_of(8) {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated(format!(
                "{} bytes, need at least 8 for the header length",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(FormatError::Truncated(format!(
                "header length {header_len} exceeds remaining {available} bytes"
            )));
        }
        let header_end = 8 + header_len as usize;
        let text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        let entries: Entries =
            serde_json::from_str(text).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        let buffer = &bytes[header_end..];

        let mut file = TensorFile::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        for (name, value) in entries.0 {
            if name == METADATA_KEY {
                file.metadata = serde_json::from_value(value)
                    .map_err(|e| FormatError::MalformedHeader(format!("__metadata__: {e}")))?;
                continue;
            }
            let info: TensorInfo = serde_json::from_value(value)
                .map_err(|e| FormatError::MalformedHeader(format!("{name}: {e}")))?;
            if info.dtype != "F32" {
                return Err(FormatError::UnknownDtype {
                    name,
                    dtype: info.dtype,
                });
            }
            let [begin, end] = info.data_offsets;
            if begin > end {
                return Err(FormatError::MalformedHeader(format!(
                    "{name}: data_offsets [{begin}, {end}] are reversed"
                )));
            }
            let elems = info
                .shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| FormatError::MalformedHeader(format!("{name}: shape overflows")))?;
            if elems.checked_mul(4) != Some(end - begin) {
                return Err(FormatError::SpanMismatch {
                    name,
                    span: end - begin,
                    shape: info.shape,
                });
            }
            if end > buffer.len() {
                return Err(FormatError::Truncated(format!(
                    "{name} ends at byte {end} but the buffer holds {}",
                    buffer.len()
                )));
            }
            if file.tensors.contains_key(&name) {
                return Err(FormatError::DuplicateName(name));
            }
            let data = buffer[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            spans.push((begin, end, name.clone()));
            file.tensors.insert(
                name,
                Tensor {
                    shape: info.shape,
                    data,
                },
            );
        }

        spans.retain(|(b, e, _)| b < e);
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(FormatError::OffsetOverlap {
                    first: w[0].2.clone(),
                    second: w[1].2.clone(),
                });
            }
        }
        Ok(file)
    }
}

#[derive(Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header object entries in file order, duplicates preserved.
struct Entries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        de.deserialize_map(V)
    }
}

/// Reads a safetensors file.
pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(TensorFile::from_bytes(&bytes)?)
}

/// Writes a safetensors file atomically (temp file, then rename).
pub fn save_tensors(tf: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &tf.to_bytes())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// k-means run summary stored alongside a carved layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansLog {
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each assignment step.
    pub objective: Vec<f64>,
}

/// JSON description of a carved layer; together with the weight file it
/// fully determines the [`MoeFfn`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarveManifest {
    pub d: usize,
    pub d_h: usize,
    pub config: MoeConfig,
    pub shared: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub representatives: Vec<usize>,
    pub centroid_sources: Vec<usize>,
    pub kmeans: KMeansLog,
}

fn put_expert(tf: &mut TensorFile, prefix: &str, e: &ExpertWeights) {
    tf.insert_matrix(format!("{prefix}.up"), &e.w_up);
    tf.insert_matrix(format!("{prefix}.gate"), &e.w_gate);
    tf.insert_matrix(format!("{prefix}.down"), &e.w_down);
}

/// Weight tensors of a carved layer under their canonical names.
pub fn moe_to_tensors(moe: &MoeFfn) -> TensorFile {
    let mut tf = TensorFile::new();
    put_expert(&mut tf, "shared", &moe.shared);
    for (p, e) in moe.routed.iter().enumerate() {
        put_expert(&mut tf, &format!("expert{p}"), e);
    }
    tf.insert_matrix("router.up", &moe.router.w_up);
    tf.insert_matrix("router.gate", &moe.router.w_gate);
    tf.insert("u", Tensor::vector(moe.u.clone()));
    tf.insert("b", Tensor::vector(moe.b.clone()));
    tf
}

fn take_expert(tf: &TensorFile, prefix: &str, indices: &[usize]) -> Result<ExpertWeights> {
    let e = ExpertWeights {
        w_up: tf.matrix(&format!("{prefix}.up"))?,
        w_gate: tf.matrix(&format!("{prefix}.gate"))?,
        w_down: tf.matrix(&format!("{prefix}.down"))?,
        source_indices: indices.to_vec(),
    };
    let k = indices.len();
    if e.w_up.cols() != k || e.w_gate.cols() != k || e.w_down.rows() != k {
        return Err(Error::ShapeMismatch {
            op: "take_expert",
            left: e.w_up.shape(),
            right: (k, e.w_down.cols()),
        });
    }
    Ok(e)
}

/// Rebuilds a carved layer from its weight file and manifest.
pub fn moe_from_tensors(tf: &TensorFile, manifest: &CarveManifest) -> Result<MoeFfn> {
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    let shared = take_expert(tf, "shared", &sorted(&manifest.shared))?;
    let routed = manifest
        .clusters
        .iter()
        .enumerate()
        .map(|(p, c)| take_expert(tf, &format!("expert{p}"), &sorted(c)))
        .collect::<Result<Vec<_>>>()?;
    let router = RouterWeights {
        w_gate: tf.matrix("router.gate")?,
        w_up: tf.matrix("router.up")?,
        source_indices: manifest.representatives.clone(),
    };
    let u = tf.vector("u")?;
    let b = tf.vector("b")?;
    let n_routed = routed.len();
    if router.w_gate.cols() != n_routed || u.len() != n_routed || b.len() != n_routed {
        return Err(Error::InvalidConfig(format!(
            "router/u/b widths do not match {n_routed} routed experts"
        )));
    }
    let n_active = manifest.config.n_active;
    if n_active == 0 || n_active > n_routed {
        return Err(Error::InvalidConfig(format!(
            "n_active {n_active} out of range for {n_routed} routed experts"
        )));
    }
    Ok(MoeFfn {
        shared,
        routed,
        router,
        u,
        b,
        n_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorFile {
        let mut tf = TensorFile::new();
        tf.insert(
            "a",
            Tensor::new(vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()).unwrap(),
        );
        tf.insert("b", Tensor::vector(vec![-1.0, f32::MIN_POSITIVE, 3.25]));
        tf.insert("empty", Tensor::new(vec![4, 0], vec![]).unwrap());
        tf.metadata.insert("k_a".into(), "10".into());
        tf
    }

    /// Rewrites the JSON header of a serialized file.
    fn with_header(bytes: &[u8], f: impl FnOnce(&mut serde_json::Map<String, Value>)) -> Vec<u8> {
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Map<String, Value> =
            serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        f(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend(json);
        out.extend_from_slice(&bytes[8 + n..]);
        out
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let tf = sample();
        save_tensors(&tf, &path).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), tf);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn header_is_aligned() {
        let bytes = sample().to_bytes();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn truncated_inputs() {
        let bytes = sample().to_bytes();
        let mut long = bytes.clone();
        long[..8].copy_from_slice(&(bytes.len() as u64 * 2).to_le_bytes());
        assert!(matches!(
            TensorFile::from_bytes(&long),
            Err(FormatError::Truncated(_))
        ));
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..5]),
            Err(FormatError::Truncated(_))
        ));
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            TensorFile::from_bytes(cut),
            Err(FormatError::Truncated(_))
        ));
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let bytes = with_header(&sample().to_bytes(), |h| {
            h["b"]["data_offsets"] = serde_json::json!([8, 20]);
        });
        assert!(matches!(
            TensorFile::from_bytes(&bytes),
            Err(FormatError::OffsetOverlap { .. })
        ));
    }

    #[test]
    fn other_corruptions_have_their_own_errors() {
        let base = sample().to_bytes();
        let bad_dtype = with_header(&base, |h| h["a"]["dtype"] = "F16".into());
        assert!(matches!(
            TensorFile::from_bytes(&bad_dtype),
            Err(FormatError::UnknownDtype { .. })
        ));

        let bad_span = with_header(&base, |h| h["a"]["shape"] = serde_json::json!([2, 2]));
        assert!(matches!(
            TensorFile::from_bytes(&bad_span),
            Err(FormatError::SpanMismatch { .. })
        ));

        let mut garbage = base.clone();
        garbage[8] = b'x';
        assert!(matches!(
            TensorFile::from_bytes(&garbage),
            Err(FormatError::MalformedHeader(_))
        ));

        let json = br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let mut dup = (json.len() as u64).to_le_bytes().to_vec();
        dup.extend_from_slice(json);
        dup.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            TensorFile::from_bytes(&dup),
            Err(FormatError::DuplicateName(_))
        ));
    }

    #[test]
    fn missing_and_rank_errors() {
        let tf = sample();
        assert!(matches!(
            tf.matrix("nope"),
            Err(Error::Format(FormatError::MissingTensor(_)))
        ));
        assert!(matches!(
            tf.matrix("b"),
            Err(Error::Format(FormatError::Rank { .. }))
        ));
        let mut tf = TensorFile::new();
        tf.insert("x", Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap());
        assert_eq!(tf.token_matrix("x").unwrap().shape(), (6, 4));
    }

    proptest! {
        #[test]
        fn random_files_round_trip_bitwise(
            tensors in prop::collection::btree_map(
                "[a-z]{1,6}",
                (1usize..4, 0usize..5).prop_flat_map(|(r, c)| {
                    prop::collection::vec(any::<u32>(), r * c).prop_map(move |bits| (r, c, bits))
                }),
                0..5,
            )
        ) {
            let mut tf = TensorFile::new();
            for (name, (r, c, bits)) in &tensors {
                let data = bits.iter().map(|&b| f32::from_bits(b)).collect();
                tf.insert(name.clone(), Tensor::new(vec![*r, *c], data).unwrap());
            }
            let back = TensorFile::from_bytes(&tf.to_bytes()).unwrap();
            prop_assert_eq!(back.tensors.len(), tf.tensors.len());
            for (name, t) in &tf.tensors {
                let b = &back.tensors[name];
                prop_assert_eq!(&b.shape, &t.shape);
                let x: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
                let y: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(x, y);
            }
        }
    }
}
