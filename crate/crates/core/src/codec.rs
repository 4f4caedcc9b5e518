//! Final code assignment, token spelling, the prefix trie of assigned
//! sequences and trie-constrained beam search.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::quantizer::{encode, quantize_level, QuantizerModel};
use crate::sinkhorn::{uniform_assign, SinkhornSettings, UniformityReport};

/// Token for code `index` (0-based) at `level` (1-based).
pub fn token(level: usize, index: usize) -> String {
    format!("<T{level}_{index}>")
}

/// Concatenated token spelling of a code path.
pub fn spell(path: &[usize]) -> String {
    path.iter().enumerate().map(|(l, &i)| token(l + 1, i)).collect()
}

/// Inverse of [`spell`]; levels must run 1, 2, ... in order.
pub fn parse_tokens(s: &str) -> Option<Vec<usize>> {
    let mut path = Vec::new();
    let mut rest = s;
    while !rest.is_empty() {
        let body = rest.strip_prefix("<T")?;
        let end = body.find('>')?;
        let (level, index) = body[..end].split_once('_')?;
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        if !digits(level) || !digits(index) || level.parse::<usize>().ok()? != path.len() + 1 {
            return None;
        }
        path.push(index.parse().ok()?);
        rest = &body[end + 1..];
    }
    Some(path)
}

/// Collision-free map from tool id to its code path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeAssignment {
    pub levels: usize,
    pub codes_per_level: usize,
    pub codes: BTreeMap<String, Vec<usize>>,
    /// Duplicate full sequences before resolution: tools minus distinct paths.
    pub collision_report: usize,
}

impl CodeAssignment {
    /// Validate shape and uniqueness. Duplicate paths are reported with both
    /// tool ids.
    pub fn new(
        levels: usize,
        codes_per_level: usize,
        codes: BTreeMap<String, Vec<usize>>,
        collision_report: usize,
    ) -> Result<Self> {
        let mut seen: HashMap<&[usize], &str> = HashMap::new();
        for (id, path) in &codes {
            if path.len() != levels || path.iter().any(|&i| i >= codes_per_level) {
                return Err(Error::schema(
                    format!("codes.{id}"),
                    format!("expected {levels} indices below {codes_per_level}, got {path:?}"),
                ));
            }
            if let Some(other) = seen.insert(path, id) {
                return Err(Error::schema(
                    format!("codes.{id}"),
                    format!("sequence {path:?} already assigned to {other}"),
                ));
            }
        }
        Ok(Self {
            levels,
            codes_per_level,
            codes,
            collision_report,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, tool_id: &str) -> Option<&[usize]> {
        self.codes.get(tool_id).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> BTreeMap<String, String> {
        self.codes.iter().map(|(id, p)| (id.clone(), spell(p))).collect()
    }

    /// Vocabulary of code tokens, level-major.
    pub fn vocabulary(&self) -> Vec<String> {
        (1..=self.levels)
            .flat_map(|l| (0..self.codes_per_level).map(move |i| token(l, i)))
            .collect()
    }
}

/// Result of [`assign_codes`].
#[derive(Debug, Clone)]
pub struct AssignOutcome {
    pub assignment: CodeAssignment,
    /// Balance of the last-level assignment when transport was used.
    pub uniformity: Option<UniformityReport>,
    /// Same statistics for the plan's per-row argmax, before capacity rounding.
    pub soft_uniformity: Option<UniformityReport>,
    /// Tools whose final path differs from the greedy nearest-centroid path.
    pub moved: Vec<String>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Occupancy of every prefix of the assigned paths.
struct Occupancy {
    levels: usize,
    k: usize,
    counts: HashMap<Vec<usize>, u128>,
}

impl Occupancy {
    fn new(levels: usize, k: usize) -> Self {
        Self {
            levels,
            k,
            counts: HashMap::new(),
        }
    }

    fn count(&self, prefix: &[usize]) -> u128 {
        self.counts.get(prefix).copied().unwrap_or(0)
    }

    fn is_full(&self, prefix: &[usize]) -> bool {
        let room = (self.k as u128).saturating_pow((self.levels - prefix.len()) as u32);
        self.count(prefix) >= room
    }

    fn insert(&mut self, path: &[usize]) {
        for d in 1..=path.len() {
            *self.counts.entry(path[..d].to_vec()).or_insert(0) += 1;
        }
    }

    /// First free full path in depth-first order, trying codes at each
    /// level from nearest to farthest from the running residual.
    fn nearest_free(&self, model: &QuantizerModel, z: &[f64]) -> Option<Vec<usize>> {
        let mut prefix = Vec::with_capacity(self.levels);
        self.descend(model, z, &mut prefix).then_some(prefix)
    }

    fn descend(&self, model: &QuantizerModel, r: &[f64], prefix: &mut Vec<usize>) -> bool {
        if prefix.len() == self.levels {
            return true;
        }
        let cb = &model.codebooks[prefix.len()];
        let mut order: Vec<(f64, usize)> =
            cb.centroids.iter().enumerate().map(|(i, v)| (sq_dist(r, v), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, i) in order {
            prefix.push(i);
            if !self.is_full(prefix) {
                let next: Vec<f64> = r.iter().zip(&cb.centroids[i]).map(|(a, b)| a - b).collect();
                if self.descend(model, &next, prefix) {
                    return true;
                }
            }
            prefix.pop();
        }
        false
    }
}

/// Assign every tool a unique code path.
///
/// Levels before the last take the nearest centroid. The last level is
/// balanced by entropic transport over the whole corpus when
/// `settings.enabled`, and nearest-centroid otherwise. Paths that still
/// coincide are resolved deterministically: the tool closest to the shared
/// last-level centroid keeps it, and the others (by ascending tool id) move
/// to the nearest free path, which is the next-cheapest last-level code
/// under the same prefix whenever one is free.
pub fn assign_codes(
    model: &QuantizerModel,
    embeddings: &EmbeddingTable,
    settings: &SinkhornSettings,
) -> Result<AssignOutcome> {
    let levels = model.levels();
    let k = model.codes_per_level();
    let n = embeddings.len();
    let capacity = model.config.capacity();
    if n as u128 > capacity {
        return Err(Error::Infeasible(format!(
            "{n} tools exceed capacity {k}^{levels} = {capacity}"
        )));
    }
    if n == 0 {
        return Ok(AssignOutcome {
            assignment: CodeAssignment::new(levels, k, BTreeMap::new(), 0)?,
            uniformity: None,
            soft_uniformity: None,
            moved: Vec::new(),
        });
    }

    let zs: Vec<Vec<f64>> = embeddings
        .vectors()
        .iter()
        .map(|e| encode(model, e))
        .collect::<Result<_>>()?;
    let mut paths: Vec<Vec<usize>> = vec![Vec::with_capacity(levels); n];
    let mut residuals = zs.clone();
    for cb in &model.codebooks[..levels - 1] {
        for (p, r) in paths.iter_mut().zip(residuals.iter_mut()) {
            let (i, next) = quantize_level(r, cb);
            p.push(i);
            *r = next;
        }
    }
    let last = &model.codebooks[levels - 1];
    let greedy_last: Vec<usize> = residuals.iter().map(|r| quantize_level(r, last).0).collect();
    let greedy: Vec<Vec<usize>> = paths
        .iter()
        .zip(&greedy_last)
        .map(|(p, &g)| p.iter().copied().chain([g]).collect())
        .collect();
    let (last_codes, uniformity, soft_uniformity) = if settings.enabled {
        let ua = uniform_assign(&residuals, last, settings)?;
        (ua.indices, Some(ua.report), Some(ua.soft_report))
    } else {
        (greedy_last, None, None)
    };
    for (p, &c) in paths.iter_mut().zip(&last_codes) {
        p.push(c);
    }

    let ids = embeddings.ids();
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (i, p) in paths.iter().enumerate() {
        groups.entry(p.as_slice()).or_default().push(i);
    }
    let collision_report = n - groups.len();
    let cost = |i: usize| sq_dist(&residuals[i], &last.centroids[paths[i][levels - 1]]);
    let mut losers = Vec::new();
    let mut occupancy = Occupancy::new(levels, k);
    for members in groups.values() {
        let keep = *members
            .iter()
            .min_by(|&&a, &&b| cost(a).total_cmp(&cost(b)).then_with(|| ids[a].cmp(&ids[b])))
            .expect("groups are nonempty");
        occupancy.insert(&paths[keep]);
        losers.extend(members.iter().copied().filter(|&i| i != keep));
    }
    losers.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    for i in losers {
        let path = occupancy
            .nearest_free(model, &zs[i])
            .ok_or_else(|| Error::Infeasible("no free code path left".into()))?;
        occupancy.insert(&path);
        paths[i] = path;
    }

    let moved = (0..n)
        .filter(|&i| paths[i] != greedy[i])
        .map(|i| ids[i].clone())
        .collect();
    let codes = ids.iter().cloned().zip(paths).collect();
    Ok(AssignOutcome {
        assignment: CodeAssignment::new(levels, k, codes, collision_report)?,
        uniformity,
        soft_uniformity,
        moved,
    })
}

/// Export as `tool_id<TAB>i1,...,iL<TAB><T1_a>...` lines in tool-id order.
pub fn write_codemap_tsv(a: &CodeAssignment) -> String {
    let mut out = String::new();
    for (id, path) in &a.codes {
        let nums: Vec<String> = path.iter().map(usize::to_string).collect();
        out.push_str(&format!("{id}\t{}\t{}\n", nums.join(","), spell(path)));
    }
    out
}

/// Parse a code map. Code depth comes from the first row and the per-level
/// code count is the largest index plus one unless `codes_per_level` is given.
/// The pre-resolution collision count is not part of the format and reads
/// as zero.
pub fn parse_codemap_tsv(text: &str, codes_per_level: Option<usize>) -> Result<CodeAssignment> {
    let mut codes = BTreeMap::new();
    let mut levels = None;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, nums, toks] = fields[..] else {
            return Err(Error::parse(lineno, "expected three tab-separated fields"));
        };
        if id.is_empty() {
            return Err(Error::parse(lineno, "empty tool_id"));
        }
        let path: Vec<usize> = nums
            .split(',')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(lineno, format!("bad index list {nums:?}: {e}")))?;
        if parse_tokens(toks).as_ref() != Some(&path) {
            return Err(Error::parse(lineno, format!("tokens {toks:?} do not spell {nums}")));
        }
        match levels {
            None => levels = Some(path.len()),
            Some(l) if l != path.len() => {
                return Err(Error::parse(lineno, format!("expected {l} levels, found {}", path.len())))
            }
            _ => {}
        }
        if codes.insert(id.to_string(), path).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    let levels = levels.unwrap_or(0);
    let k = codes_per_level
        .unwrap_or_else(|| codes.values().flatten().max().map_or(0, |&m| m + 1));
    CodeAssignment::new(levels, k, codes, 0)
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<usize, usize>,
    tool: Option<String>,
}

/// Prefix tree of assigned code paths; leaves carry tool ids.
#[derive(Debug, Clone)]
pub struct CodeTrie {
    depth: usize,
    nodes: Vec<Node>,
    leaves: usize,
}

pub fn build_trie(a: &CodeAssignment) -> Result<CodeTrie> {
    let mut trie = CodeTrie {
        depth: a.levels,
        nodes: vec![Node::default()],
        leaves: 0,
    };
    for (id, path) in &a.codes {
        if path.len() != a.levels {
            return Err(Error::Corrupt(format!("{id} has {} codes, expected {}", path.len(), a.levels)));
        }
        let mut at = 0;
        for &c in path {
            let next = trie.nodes.len();
            at = match trie.nodes[at].children.get(&c) {
                Some(&child) => child,
                None => {
                    trie.nodes[at].children.insert(c, next);
                    trie.nodes.push(Node::default());
                    next
                }
            };
        }
        if let Some(other) = trie.nodes[at].tool.replace(id.clone()) {
            return Err(Error::Corrupt(format!("{id} and {other} share sequence {path:?}")));
        }
        trie.leaves += 1;
    }
    Ok(trie)
}

impl CodeTrie {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    fn node(&self, prefix: &[usize]) -> Option<&Node> {
        let mut at = 0;
        for c in prefix {
            at = *self.nodes[at].children.get(c)?;
        }
        Some(&self.nodes[at])
    }

    /// Codes that may follow `prefix`, in ascending order.
    pub fn allowed_next(&self, prefix: &[usize]) -> Result<Vec<usize>> {
        if prefix.len() >= self.depth {
            return Err(Error::Config(format!("prefix {prefix:?} is not an internal path")));
        }
        self.node(prefix)
            .map(|n| n.children.keys().copied().collect())
            .ok_or_else(|| Error::Config(format!("prefix {prefix:?} not in trie")))
    }

    /// Tool at a complete path.
    pub fn leaf(&self, path: &[usize]) -> Option<&str> {
        if path.len() != self.depth {
            return None;
        }
        self.node(path).and_then(|n| n.tool.as_deref())
    }

    /// Every `(path, tool_id)` in lexicographic path order.
    pub fn leaves(&self) -> Vec<(Vec<usize>, &str)> {
        let mut out = Vec::with_capacity(self.leaves);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((at, path)) = stack.pop() {
            let node = &self.nodes[at];
            if let Some(t) = &node.tool {
                out.push((path.clone(), t.as_str()));
            }
            for (&c, &child) in node.children.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((child, p));
            }
        }
        out
    }
}

/// Log-scores for every code at the next level given the prefix so far.
pub trait StepScorer {
    fn scores(&self, prefix: &[usize]) -> Vec<f64>;
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepScorer for F {
    fn scores(&self, prefix: &[usize]) -> Vec<f64> {
        self(prefix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub tool_id: String,
    pub path: Vec<usize>,
    pub score: f64,
}

fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam search restricted to trie paths. Keeps the `width` best prefixes
/// per level (ties by lexicographic prefix) and returns up to `topk`
/// completed paths by descending score. A NaN score counts as `-inf`.
pub fn constrained_beam_search(
    scorer: &dyn StepScorer,
    trie: &CodeTrie,
    width: usize,
    topk: usize,
) -> Vec<Hit> {
    if trie.leaf_count() == 0 || width == 0 || topk == 0 {
        return Vec::new();
    }
    let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..trie.depth() {
        let mut next = Vec::new();
        for (prefix, score) in &beam {
            let allowed = trie.allowed_next(prefix).expect("beam prefixes are trie paths");
            let step = scorer.scores(prefix);
            for c in allowed {
                let s = step.get(c).copied().filter(|s| !s.is_nan()).unwrap_or(f64::NEG_INFINITY);
                let mut p = prefix.clone();
                p.push(c);
                next.push((p, score + s));
            }
        }
        next.sort_by(rank);
        next.truncate(width);
        beam = next;
    }
    beam.truncate(topk);
    beam.into_iter()
        .map(|(path, score)| Hit {
            tool_id: trie.leaf(&path).expect("complete beam path is a leaf").to_string(),
            path,
            score,
        })
        .collect()
}
