//! Tool co-occurrence graph and the graph-Laplacian collaborative loss.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{ToolCorpus, TrajectorySet};
use crate::error::{Error, Result};

/// How repeated tools inside one trajectory are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Each distinct pair counts once per trajectory; the diagonal counts
    /// trajectories containing the tool.
    #[default]
    Set,
    /// Pairs count `m_u * m_v` per trajectory and the diagonal `m_u^2`, so the
    /// similarity is the cosine of per-trajectory multiplicity vectors.
    Multiset,
}

/// Symmetric co-occurrence counts `C` and, once computed, similarity `A`.
///
/// Off-diagonal counts are stored once per unordered pair `(u, v)`, `u < v`.
/// Similarity rows are sparse, sorted by column, and include the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    diag: Vec<u64>,
    pairs: BTreeMap<(usize, usize), u64>,
    sim: Option<Vec<Vec<(usize, f64)>>>,
}

impl CooccurrenceGraph {
    pub fn empty(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let diag = vec![0; ids.len()];
        Self {
            ids,
            index,
            diag,
            pairs: BTreeMap::new(),
            sim: None,
        }
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

    pub fn position(&self, tool_id: &str) -> Option<usize> {
        self.index.get(tool_id).copied()
    }

    pub fn count(&self, u: usize, v: usize) -> u64 {
        if u == v {
            self.diag[u]
        } else {
            let key = (u.min(v), u.max(v));
            self.pairs.get(&key).copied().unwrap_or(0)
        }
    }

    pub fn diagonal(&self) -> &[u64] {
        &self.diag
    }

    /// Nonzero off-diagonal counts as `(u, v, C_uv)` with `u < v`.
    pub fn pair_counts(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.pairs.iter().map(|(&(u, v), &c)| (u, v, c))
    }

    pub fn has_similarity(&self) -> bool {
        self.sim.is_some()
    }

    /// Similarity `A_uv`; zero when similarity has not been computed.
    pub fn similarity(&self, u: usize, v: usize) -> f64 {
        let Some(rows) = &self.sim else { return 0.0 };
        match rows[u].binary_search_by_key(&v, |&(c, _)| c) {
            Ok(i) => rows[u][i].1,
            Err(_) => 0.0,
        }
    }

    pub fn similarity_row(&self, u: usize) -> &[(usize, f64)] {
        match &self.sim {
            Some(rows) => &rows[u],
            None => &[],
        }
    }

    /// Nonzero similarities as `(u, v, A_uv)` with `u < v`.
    pub fn similarity_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        if let Some(rows) = &self.sim {
            for (u, row) in rows.iter().enumerate() {
                out.extend(row.iter().filter(|&&(v, _)| v > u).map(|&(v, a)| (u, v, a)));
            }
        }
        out
    }

    /// Within-batch weighted pairs `(i, j, A)` over batch positions, `i < j`,
    /// zero weights omitted.
    pub fn batch_pairs(&self, tools: &[usize]) -> Vec<(usize, usize, f64)> {
        let mut positions: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, &t) in tools.iter().enumerate() {
            positions.entry(t).or_default().push(i);
        }
        let mut out = Vec::new();
        for (i, &u) in tools.iter().enumerate() {
            for &(v, a) in self.similarity_row(u) {
                if let Some(ps) = positions.get(&v) {
                    out.extend(ps.iter().filter(|&&j| j > i).map(|&j| (i, j, a)));
                }
            }
        }
        out.sort_by_key(|x| (x.0, x.1));
        out
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            ids: self.ids.clone(),
            diagonal: self.diag.clone(),
            pairs: self.pair_counts().collect(),
            similarity: self.sim.as_ref().map(|_| self.similarity_pairs()),
        }
    }

    /// Rebuild from a document, checking every stored invariant.
    pub fn from_document(doc: GraphDocument) -> Result<Self> {
        let n = doc.ids.len();
        let mut g = Self::empty(doc.ids);
        if g.index.len() != n {
            let mut seen = std::collections::HashSet::new();
            let dup = g.ids.iter().find(|id| !seen.insert(id.as_str())).cloned();
            return Err(Error::DuplicateId(dup.unwrap_or_default()));
        }
        if doc.diagonal.len() != n {
            return Err(Error::schema("diagonal", format!("expected {n} entries")));
        }
        g.diag = doc.diagonal;
        for (i, &(u, v, c)) in doc.pairs.iter().enumerate() {
            let at = || format!("pairs[{i}]");
            if u >= v || v >= n {
                return Err(Error::schema(at(), "indices must satisfy u < v < n"));
            }
            if c == 0 || c > g.diag[u].min(g.diag[v]) {
                return Err(Error::schema(at(), "count outside 1..=min(C_uu, C_vv)"));
            }
            if g.pairs.insert((u, v), c).is_some() {
                return Err(Error::schema(at(), "repeated pair"));
            }
        }
        if let Some(sim) = doc.similarity {
            let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
            let mut last = None;
            for (i, &(u, v, a)) in sim.iter().enumerate() {
                let at = || format!("similarity[{i}]");
                if u >= v || v >= n || last >= Some((u, v)) {
                    return Err(Error::schema(at(), "indices must be sorted with u < v < n"));
                }
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::schema(at(), "similarity outside (0, 1]"));
                }
                last = Some((u, v));
                rows[u].push((v, a));
                rows[v].push((u, a));
            }
            rows.iter_mut().for_each(|r| r.sort_by_key(|&(c, _)| c));
            g.sim = Some(rows);
        }
        Ok(g)
    }
}

/// Serializable form of a [`CooccurrenceGraph`]: counts as `(u, v, C_uv)`
/// and similarities as `(u, v, A_uv)`, both with `u < v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub ids: Vec<String>,
    pub diagonal: Vec<u64>,
    pub pairs: Vec<(usize, usize, u64)>,
    pub similarity: Option<Vec<(usize, usize, f64)>>,
}

/// Count tool co-occurrences over trajectories.
pub fn build_cooccurrence(
    trajs: &TrajectorySet,
    corpus: &ToolCorpus,
    mode: CountMode,
) -> Result<CooccurrenceGraph> {
    let mut g = CooccurrenceGraph::empty(corpus.ids().map(str::to_owned).collect());
    for traj in &trajs.trajectories {
        let mut mult: BTreeMap<usize, u64> = BTreeMap::new();
        for id in traj {
            let u = corpus
                .position(id)
                .ok_or_else(|| Error::UnknownTool(id.clone()))?;
            *mult.entry(u).or_default() += 1;
        }
        if mode == CountMode::Set {
            mult.values_mut().for_each(|m| *m = 1);
        }
        let present: Vec<(usize, u64)> = mult.into_iter().collect();
        for (a, &(u, mu)) in present.iter().enumerate() {
            g.diag[u] += mu * mu;
            for &(v, mv) in &present[a + 1..] {
                *g.pairs.entry((u, v)).or_default() += mu * mv;
            }
        }
    }
    Ok(g)
}

/// Populate `A_uv = C_uv / sqrt(C_uu C_vv)`, zero where either total is zero.
///
/// With `top_k`, each row keeps only its `k` strongest off-diagonal entries;
/// a pair survives if either endpoint keeps it, so `A` stays symmetric.
pub fn similarity(mut graph: CooccurrenceGraph, top_k: Option<usize>) -> CooccurrenceGraph {
    let n = graph.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (u, v, c) in graph.pair_counts() {
        let (du, dv) = (graph.diag[u], graph.diag[v]);
        if du == 0 || dv == 0 || c == 0 {
            continue;
        }
        let a = c as f64 / ((du as f64) * (dv as f64)).sqrt();
        rows[u].push((v, a));
        rows[v].push((u, a));
    }
    if let Some(k) = top_k {
        let mut keep = std::collections::BTreeSet::new();
        for (u, row) in rows.iter().enumerate() {
            let mut sorted = row.clone();
            sorted.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            for &(v, _) in sorted.iter().take(k) {
                keep.insert((u.min(v), u.max(v)));
            }
        }
        for (u, row) in rows.iter_mut().enumerate() {
            row.retain(|&(v, _)| keep.contains(&(u.min(v), u.max(v))));
        }
    }
    for (u, row) in rows.iter_mut().enumerate() {
        if graph.diag[u] > 0 {
            row.push((u, 1.0));
        }
        row.sort_by_key(|&(v, _)| v);
    }
    graph.sim = Some(rows);
    graph
}

/// Format with `sig` significant digits as a plain decimal.
pub(crate) fn fmt_significant(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Line-delimited `[u, v, A_uv]` records for `u < v`, `A_uv > 0`.
pub fn export_similarity(graph: &CooccurrenceGraph) -> String {
    let mut out = String::new();
    for (u, v, a) in graph.similarity_pairs() {
        out.push_str(&format!(
            "[{},{},{}]\n",
            serde_json::to_string(&graph.ids[u]).unwrap(),
            serde_json::to_string(&graph.ids[v]).unwrap(),
            fmt_significant(a, 9)
        ));
    }
    out
}

/// Graph-Laplacian loss over a batch under the ordered double-sum
/// convention: each weighted pair `(i, j, A)` contributes `2 A ||z_i - z_j||^2`
/// and `4 A (z_i - z_j)` to the gradient of `z_i`.
pub fn collab_loss(zhat: &[Vec<f64>], pairs: &[(usize, usize, f64)]) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = zhat.first().map_or(0, Vec::len);
    if let Some((row, z)) = zhat.iter().enumerate().find(|(_, z)| z.len() != dim) {
        return Err(Error::DimensionMismatch {
            row,
            expected: dim,
            found: z.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; dim]; zhat.len()];
    for &(i, j, a) in pairs {
        if i >= zhat.len() || j >= zhat.len() {
            return Err(Error::Config(format!("pair ({i}, {j}) outside batch")));
        }
        if a == 0.0 || i == j {
            continue;
        }
        let mut d2 = 0.0;
        for k in 0..dim {
            let diff = zhat[i][k] - zhat[j][k];
            d2 += diff * diff;
            grad[i][k] += 4.0 * a * diff;
            grad[j][k] -= 4.0 * a * diff;
        }
        loss += 2.0 * a * d2;
    }
    Ok((loss, grad))
}
