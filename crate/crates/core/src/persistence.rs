//! Versioned JSON envelopes for models, code maps, graphs and reports.
//!
//! Every artifact is written as one canonical line
//! `{"format_version":1,"kind":...,"payload":...}` with sorted keys and
//! shortest round-trip decimals, followed by LF. Its SHA-256 goes into a
//! `<file>.sha256` sidecar in `sha256sum` format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::codec::{spell, CodeAssignment};
use crate::collab::{CooccurrenceGraph, GraphDocument};
use crate::error::{Error, Result};
use crate::quantizer::QuantizerModel;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Model,
    Codemap,
    Graph,
    Report,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Model => "model",
            Kind::Codemap => "codemap",
            Kind::Graph => "graph",
            Kind::Report => "report",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format_version: u64,
    kind: Kind,
    payload: &'a Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn {
    #[serde(rename = "format_version")]
    _format_version: u64,
    kind: String,
    payload: Value,
}

/// Canonical bytes of an artifact. Going through `Value` sorts every map.
pub fn to_canonical_bytes<T: Serialize>(kind: Kind, payload: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(payload).map_err(|e| Error::Corrupt(format!("serialize {kind}: {e}")))?;
    let env = serde_json::to_value(EnvelopeOut {
        format_version: FORMAT_VERSION,
        kind,
        payload: &value,
    })
    .expect("envelope serializes");
    let mut bytes = serde_json::to_vec(&env).expect("value serializes");
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write the artifact and its sidecar; returns the fingerprint.
pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: Kind, payload: &T) -> Result<String> {
    let path = path.as_ref();
    let bytes = to_canonical_bytes(kind, payload)?;
    let digest = fingerprint(&bytes);
    write_atomic(path, &bytes)?;
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    write_atomic(&sidecar_path(path), format!("{digest}  {name}\n").as_bytes())?;
    Ok(digest)
}

/// Decode an in-memory artifact of the expected kind.
pub fn decode<T: DeserializeOwned>(bytes: &[u8], kind: Kind) -> Result<T> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    match value.get("format_version") {
        Some(v) if v.as_u64() == Some(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Version {
                found: v.to_string(),
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::schema("format_version", "missing")),
    }
    let env: EnvelopeIn = serde_json::from_value(value).map_err(|e| Error::schema("$", e.to_string()))?;
    if env.kind != kind.as_str() {
        return Err(Error::schema("kind", format!("expected {kind}, found {:?}", env.kind)));
    }
    serde_path_to_error::deserialize(env.payload).map_err(|e| {
        let at = e.path().to_string();
        let path = if at == "." { "payload".to_string() } else { format!("payload.{at}") };
        Error::schema(path, e.into_inner().to_string())
    })
}

/// Read an artifact, verifying the sidecar fingerprint when one exists.
pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, kind: Kind) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    match std::fs::read_to_string(&side) {
        Ok(text) => {
            let expected = text.split_whitespace().next().unwrap_or_default().to_string();
            let actual = fingerprint(&bytes);
            if expected != actual {
                return Err(Error::Fingerprint {
                    path: path.to_path_buf(),
                    expected,
                    actual,
                });
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(side, e)),
    }
    decode(&bytes, kind)
}

pub fn save_model(path: impl AsRef<Path>, model: &QuantizerModel) -> Result<String> {
    model.validate()?;
    save(path, Kind::Model, model)
}

pub fn decode_model(bytes: &[u8]) -> Result<QuantizerModel> {
    let m: QuantizerModel = decode(bytes, Kind::Model)?;
    m.validate()?;
    Ok(m)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QuantizerModel> {
    let m: QuantizerModel = load(path, Kind::Model)?;
    m.validate()?;
    Ok(m)
}

/// Code map payload: the assignment plus its token spelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodemapDocument {
    levels: usize,
    codes_per_level: usize,
    collision_report: usize,
    codes: BTreeMap<String, Vec<usize>>,
    tokens: BTreeMap<String, String>,
}

impl CodemapDocument {
    fn into_assignment(self) -> Result<CodeAssignment> {
        if self.tokens.len() != self.codes.len() {
            return Err(Error::schema("payload.tokens", "must cover exactly the coded tools"));
        }
        for (id, path) in &self.codes {
            if self.tokens.get(id) != Some(&spell(path)) {
                return Err(Error::schema(format!("payload.tokens.{id}"), "does not spell the code path"));
            }
        }
        CodeAssignment::new(self.levels, self.codes_per_level, self.codes, self.collision_report).map_err(|e| match e {
            Error::Schema { path, msg } => Error::schema(format!("payload.{path}"), msg),
            other => other,
        })
    }
}

pub fn save_codemap(path: impl AsRef<Path>, a: &CodeAssignment) -> Result<String> {
    let doc = CodemapDocument {
        levels: a.levels,
        codes_per_level: a.codes_per_level,
        collision_report: a.collision_report,
        codes: a.codes.clone(),
        tokens: a.tokens(),
    };
    save(path, Kind::Codemap, &doc)
}

pub fn decode_codemap(bytes: &[u8]) -> Result<CodeAssignment> {
    decode::<CodemapDocument>(bytes, Kind::Codemap)?.into_assignment()
}

pub fn load_codemap(path: impl AsRef<Path>) -> Result<CodeAssignment> {
    load::<CodemapDocument>(path, Kind::Codemap)?.into_assignment()
}

pub fn save_graph(path: impl AsRef<Path>, g: &CooccurrenceGraph) -> Result<String> {
    save(path, Kind::Graph, &g.to_document())
}

pub fn decode_graph(bytes: &[u8]) -> Result<CooccurrenceGraph> {
    CooccurrenceGraph::from_document(decode::<GraphDocument>(bytes, Kind::Graph)?)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<CooccurrenceGraph> {
    CooccurrenceGraph::from_document(load::<GraphDocument>(path, Kind::Graph)?)
}

/// Reports are free-form documents; callers pick the payload type.
pub fn save_report<T: Serialize>(path: impl AsRef<Path>, report: &T) -> Result<String> {
    save(path, Kind::Report, report)
}

pub fn load_report<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    load(path, Kind::Report)
}
