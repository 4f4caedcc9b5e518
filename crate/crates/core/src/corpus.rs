//! Tool records, embeddings, and usage trajectories.
//!
//! All three inputs are line-delimited JSON. Embeddings additionally have a
//! compact little-endian binary form (magic `WVEMB1`).

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const EMBEDDING_MAGIC: &[u8; 6] = b"WVEMB1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub tool_id: String,
    pub name: String,
    #[serde(default)]
    pub doc: String,
    #[serde(default)]
    pub category: Option<String>,
}

/// Ordered set of tool records keyed by `tool_id`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolCorpus {
    records: Vec<ToolRecord>,
    index: HashMap<String, usize>,
}

impl ToolCorpus {
    pub fn new(records: Vec<ToolRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.tool_id.is_empty() {
                return Err(Error::parse(i + 1, "empty tool_id"));
            }
            if index.insert(r.tool_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.tool_id.clone()));
            }
        }
        Ok(Self { records, index })
    }

    /// Bare records carrying only ids, for inputs without a tools file.
    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        Self::new(
            ids.iter()
                .map(|id| ToolRecord {
                    tool_id: id.as_ref().to_string(),
                    name: id.as_ref().to_string(),
                    doc: String::new(),
                    category: None,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ToolRecord] {
        &self.records
    }

    pub fn get(&self, tool_id: &str) -> Option<&ToolRecord> {
        self.index.get(tool_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, tool_id: &str) -> Option<usize> {
        self.index.get(tool_id).copied()
    }

    pub fn contains(&self, tool_id: &str) -> bool {
        self.index.contains_key(tool_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.tool_id.as_str())
    }
}

pub fn parse_tools(text: &str) -> Result<ToolCorpus> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ToolRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if rec.tool_id.is_empty() {
            return Err(Error::parse(i + 1, "empty tool_id"));
        }
        if seen.insert(rec.tool_id.clone(), i).is_some() {
            return Err(Error::DuplicateId(rec.tool_id));
        }
        records.push(rec);
    }
    ToolCorpus::new(records)
}

pub fn load_tools(path: impl AsRef<Path>) -> Result<ToolCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tools(&text)
}

pub fn write_tools(corpus: &ToolCorpus) -> String {
    let mut out = String::new();
    for r in corpus.records() {
        out.push_str(&serde_json::to_string(r).expect("tool record serializes"));
        out.push('\n');
    }
    out
}

/// Dense embedding per tool, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut table = Self::new(dim);
        for (id, v) in rows {
            table.push(id, v)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, tool_id: String, vector: Vec<f64>) -> Result<()> {
        let row = self.ids.len();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                row,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row });
        }
        if self.index.insert(tool_id.clone(), row).is_some() {
            return Err(Error::DuplicateId(tool_id));
        }
        self.ids.push(tool_id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, tool_id: &str) -> Option<&[f64]> {
        self.index.get(tool_id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    tool_id: String,
    vector: Vec<f64>,
}

#[derive(Serialize)]
struct EmbeddingLineRef<'a> {
    tool_id: &'a str,
    vector: &'a [f64],
}

/// True when the `vector` array of a malformed line holds a token such as
/// `NaN`, `inf`, or `1e999` that reads as a non-finite float.
fn has_non_finite_token(line: &str) -> bool {
    let Some(start) = line.find("\"vector\"") else {
        return false;
    };
    let rest = &line[start..];
    let (Some(open), Some(close)) = (rest.find('['), rest.find(']')) else {
        return false;
    };
    if close < open {
        return false;
    }
    rest[open + 1..close].split(',').any(|tok| {
        let tok = tok.trim().trim_matches('"');
        matches!(tok.parse::<f64>(), Ok(x) if !x.is_finite())
            || tok.eq_ignore_ascii_case("nan")
            || tok.eq_ignore_ascii_case("infinity")
            || tok.eq_ignore_ascii_case("-infinity")
    })
}

pub fn parse_embeddings_jsonl(text: &str, expected_dim: usize) -> Result<EmbeddingTable> {
    if expected_dim == 0 {
        return Err(Error::Config("expected_dim must be positive".into()));
    }
    let mut table = EmbeddingTable::new(expected_dim);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = table.len();
        let parsed: EmbeddingLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(_) if has_non_finite_token(line) => return Err(Error::NonFinite { row }),
            Err(e) => return Err(Error::parse(i + 1, e.to_string())),
        };
        table.push(parsed.tool_id, parsed.vector)?;
    }
    Ok(table)
}

pub fn write_embeddings_jsonl(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (id, v) in table.iter() {
        let line = EmbeddingLineRef {
            tool_id: id,
            vector: v,
        };
        out.push_str(&serde_json::to_string(&line).expect("embedding serializes"));
        out.push('\n');
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(0, format!("truncated binary embeddings reading {what}"))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decode the `WVEMB1` binary layout: magic, u32 count, u32 dim, then per row
/// a u16 id length, the id bytes, and `dim` f32 values, all little-endian.
pub fn parse_embeddings_binary(bytes: &[u8], expected_dim: usize) -> Result<EmbeddingTable> {
    if expected_dim == 0 {
        return Err(Error::Config("expected_dim must be positive".into()));
    }
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(EMBEDDING_MAGIC.len(), "magic")? != EMBEDDING_MAGIC {
        return Err(Error::parse(0, "bad magic, expected WVEMB1"));
    }
    let count = cur.u32("count")? as usize;
    let dim = cur.u32("dim")? as usize;
    if dim != expected_dim {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: expected_dim,
            found: dim,
        });
    }
    let mut table = EmbeddingTable::new(dim);
    for row in 0..count {
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| Error::parse(row + 1, "tool_id is not UTF-8"))?
            .to_owned();
        let raw = cur.take(dim * 4, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        table.push(id, vector)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(0, "trailing bytes after last embedding row"));
    }
    Ok(table)
}

pub fn write_embeddings_binary(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + table.len() * (2 + 16 + 4 * table.dim()));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for (id, v) in table.iter() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &x in v {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Read embeddings in either format, sniffing the binary magic.
pub fn parse_embeddings(bytes: &[u8], expected_dim: usize) -> Result<EmbeddingTable> {
    if bytes.starts_with(EMBEDDING_MAGIC) {
        parse_embeddings_binary(bytes, expected_dim)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::parse(0, format!("embeddings are not UTF-8: {e}")))?;
        parse_embeddings_jsonl(text, expected_dim)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&bytes, expected_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolveMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrajectorySet {
    pub trajectories: Vec<Vec<String>>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Outcome of trajectory loading; `dropped` counts ids removed in lenient mode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadedTrajectories {
    pub set: TrajectorySet,
    pub dropped: usize,
}

pub fn parse_trajectories(
    text: &str,
    corpus: Option<&ToolCorpus>,
    mode: ResolveMode,
) -> Result<LoadedTrajectories> {
    let mut out = LoadedTrajectories::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let traj: Vec<String> =
            serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if traj.is_empty() {
            return Err(Error::parse(i + 1, "empty trajectory"));
        }
        let traj = match corpus {
            None => traj,
            Some(c) => {
                let mut kept = Vec::with_capacity(traj.len());
                for id in traj {
                    if c.contains(&id) {
                        kept.push(id);
                    } else if mode == ResolveMode::Strict {
                        return Err(Error::UnknownTool(id));
                    } else {
                        out.dropped += 1;
                    }
                }
                kept
            }
        };
        if !traj.is_empty() {
            out.set.trajectories.push(traj);
        }
    }
    if out.dropped > 0 {
        warn!("dropped {} unknown tool ids from trajectories", out.dropped);
    }
    Ok(out)
}

pub fn load_trajectories(
    path: impl AsRef<Path>,
    corpus: Option<&ToolCorpus>,
    mode: ResolveMode,
) -> Result<LoadedTrajectories> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectories(&text, corpus, mode)
}

pub fn write_trajectories(set: &TrajectorySet) -> String {
    let mut out = String::new();
    for t in &set.trajectories {
        out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

/// Deterministic feature-hashing embedding used when no encoder output is
/// available. Tokens are lowercased whitespace splits; each lands in a
/// SHA-256-derived bucket with a hashed sign.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("hash_embed dim must be positive".into()));
    }
    let mut v = vec![0.0; dim];
    let mut tokens = 0usize;
    for tok in text.split_whitespace() {
        tokens += 1;
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(tok.to_lowercase().as_bytes());
        let digest = h.finalize();
        let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % dim as u64;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket as usize] += sign;
    }
    if tokens == 0 {
        return Err(Error::ZeroTokens);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every token cancelled against another; fall back to the first bucket
        v[0] = 1.0;
        return Ok(v);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Parameters of a planted-cluster synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tools: usize,
    pub n_groups: usize,
    pub dim: usize,
    pub group_spread: f64,
    pub trajectories_per_group: usize,
    pub trajectory_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tools: 200,
            n_groups: 8,
            dim: 32,
            group_spread: 0.1,
            trajectories_per_group: 40,
            trajectory_len: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tools == 0
            || self.n_groups == 0
            || self.dim == 0
            || self.trajectories_per_group == 0
            || self.trajectory_len == 0
        {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.n_groups > self.n_tools {
            return Err(Error::Config("n_groups exceeds n_tools".into()));
        }
        if !(self.group_spread > 0.0 && self.group_spread.is_finite()) {
            return Err(Error::Config("group_spread must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: ToolCorpus,
    pub embeddings: EmbeddingTable,
    pub trajectories: TrajectorySet,
    /// Group label per tool, aligned with corpus order.
    pub groups: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Generate `n_groups` unit-scale centroids, stretched when needed so the
/// closest pair sits at least `10 * group_spread` apart; tools are the
/// centroid of their group plus isotropic noise, and trajectories draw
/// tools from one group at a time.
pub fn synth_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Corpus);

    let mut centroids: Vec<Vec<f64>> = (0..spec.n_groups)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng::normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    if spec.n_groups > 1 {
        let mut min_d = f64::INFINITY;
        for i in 0..spec.n_groups {
            for j in i + 1..spec.n_groups {
                min_d = min_d.min(sq_dist(&centroids[i], &centroids[j]).sqrt());
            }
        }
        let target = 10.0 * spec.group_spread;
        if min_d < target {
            let scale = target / min_d.max(f64::MIN_POSITIVE) * (1.0 + 1e-12);
            centroids
                .iter_mut()
                .for_each(|c| c.iter_mut().for_each(|x| *x *= scale));
        }
    }

    let groups: Vec<usize> = (0..spec.n_tools).map(|i| i % spec.n_groups).collect();
    let width = spec.n_tools.to_string().len().max(4);
    let mut records = Vec::with_capacity(spec.n_tools);
    let mut rows = Vec::with_capacity(spec.n_tools);
    for (i, &g) in groups.iter().enumerate() {
        let id = format!("tool_{i:0width$}");
        records.push(ToolRecord {
            tool_id: id.clone(),
            name: format!("synthetic tool {i}"),
            doc: format!("synthetic tool {i} from group {g}"),
            category: Some(format!("group_{g}")),
        });
        let v = centroids[g]
            .iter()
            .map(|c| c + spec.group_spread * rng::normal(&mut rng))
            .collect();
        rows.push((id, v));
    }
    let corpus = ToolCorpus::new(records)?;
    let embeddings = EmbeddingTable::from_rows(spec.dim, rows)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut trajectories = Vec::with_capacity(spec.n_groups * spec.trajectories_per_group);
    for group in &members {
        for _ in 0..spec.trajectories_per_group {
            let traj = (0..spec.trajectory_len)
                .map(|_| {
                    let &i = group.choose(&mut rng).expect("group is non-empty");
                    corpus.records()[i].tool_id.clone()
                })
                .collect();
            trajectories.push(traj);
        }
    }

    Ok(SyntheticCorpus {
        corpus,
        embeddings,
        trajectories: TrajectorySet { trajectories },
        groups,
        centroids,
    })
}
