//! Retrieval evaluation: NDCG, a distance-based step scorer standing in for
//! a trained generator, synthetic query sets and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{assign_codes, build_trie, constrained_beam_search, CodeAssignment, CodeTrie, Hit, StepScorer};
use crate::collab::{build_cooccurrence, similarity, CountMode};
use crate::corpus::{synth_corpus, EmbeddingTable, SyntheticSpec, TrajectorySet};
use crate::error::{Error, Result};
use crate::quantizer::{encode, fit, Codebook, QuantizerConfig, QuantizerModel};
use crate::rng::{self, Stream};

/// Binary-relevance NDCG over the first `k` positions.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Config("relevant set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, t)| relevant.contains(t.as_ref()))
        // fold from +0.0: an empty f64 sum is -0.0
        .fold(0.0, |acc, (i, _)| acc + gain(i));
    let idcg: f64 = (0..k.min(relevant.len())).map(gain).sum();
    Ok(dcg / idcg)
}

/// Scores code `c` at the next level by `-||r - v_c||^2`, where `r` is the
/// query latent minus the centroids chosen so far.
#[derive(Debug, Clone)]
pub struct SurrogateScorer<'a> {
    codebooks: &'a [Codebook],
    z: Vec<f64>,
}

pub fn surrogate_scorer<'a>(model: &'a QuantizerModel, query: &[f64]) -> Result<SurrogateScorer<'a>> {
    Ok(SurrogateScorer {
        codebooks: &model.codebooks,
        z: encode(model, query)?,
    })
}

impl StepScorer for SurrogateScorer<'_> {
    fn scores(&self, prefix: &[usize]) -> Vec<f64> {
        let mut r = self.z.clone();
        for (cb, &c) in self.codebooks.iter().zip(prefix) {
            r.iter_mut().zip(&cb.centroids[c]).for_each(|(x, v)| *x -= v);
        }
        self.codebooks[prefix.len()]
            .centroids
            .iter()
            .map(|v| -r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub query_id: String,
    pub embedding: Vec<f64>,
    pub relevant: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// One query per line: `{"query_id", "embedding", "relevant": [...]}`.
/// With `known`, every relevant id must be a known tool.
pub fn parse_queries(text: &str, dim: usize, known: Option<&BTreeSet<&str>>) -> Result<QuerySet> {
    let mut set = QuerySet::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if q.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                row: set.len(),
                expected: dim,
                found: q.embedding.len(),
            });
        }
        if q.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: set.len() });
        }
        if q.relevant.is_empty() {
            return Err(Error::parse(i + 1, "relevant set is empty"));
        }
        if let Some(bad) = known.and_then(|k| q.relevant.iter().find(|r| !k.contains(r.as_str()))) {
            return Err(Error::UnknownTool(bad.clone()));
        }
        if !seen.insert(q.query_id.clone()) {
            return Err(Error::DuplicateId(q.query_id));
        }
        set.queries.push(q);
    }
    Ok(set)
}

pub fn write_queries(set: &QuerySet) -> String {
    set.queries
        .iter()
        .map(|q| serde_json::to_string(q).expect("query serializes") + "\n")
        .collect()
}

/// How synthetic queries pick their relevant tools.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// One query per tool; only that tool is relevant.
    #[default]
    Tool,
    /// One query per trajectory: a noisy copy of one of its tools, with
    /// every tool of the trajectory relevant.
    Trajectory,
}

/// Queries as noisy copies of tool embeddings: `e + noise * N(0, I)`.
pub fn synthetic_queries(
    embeddings: &EmbeddingTable,
    trajectories: &TrajectorySet,
    mode: QueryMode,
    noise: f64,
    seed: u64,
) -> Result<QuerySet> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("query noise must be finite and non-negative".into()));
    }
    let mut rng = rng::stream(seed, Stream::Queries);
    let mut jitter = |e: &[f64]| -> Vec<f64> { e.iter().map(|x| x + noise * rng::normal(&mut rng)).collect() };
    let mut queries = Vec::new();
    match mode {
        QueryMode::Tool => {
            for (i, (id, e)) in embeddings.iter().enumerate() {
                queries.push(Query {
                    query_id: format!("q{i:05}"),
                    embedding: jitter(e),
                    relevant: BTreeSet::from([id.to_string()]),
                });
            }
        }
        QueryMode::Trajectory => {
            let mut pick = rng::stream(seed ^ 0x5eed, Stream::Queries);
            for (i, t) in trajectories.trajectories.iter().enumerate() {
                let anchor = t.choose(&mut pick).expect("trajectories are nonempty");
                let e = embeddings
                    .get(anchor)
                    .ok_or_else(|| Error::UnknownTool(anchor.clone()))?;
                queries.push(Query {
                    query_id: format!("q{i:05}"),
                    embedding: jitter(e),
                    relevant: t.iter().cloned().collect(),
                });
            }
        }
    }
    Ok(QuerySet { queries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    pub query_id: String,
    pub ranked: Vec<Hit>,
}

pub fn retrieve(
    query: &Query,
    model: &QuantizerModel,
    trie: &CodeTrie,
    beam: usize,
    topk: usize,
) -> Result<RankedRetrieval> {
    let scorer = surrogate_scorer(model, &query.embedding)?;
    Ok(RankedRetrieval {
        query_id: query.query_id.clone(),
        ranked: constrained_beam_search(&scorer, trie, beam, topk),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub beam_width: usize,
    pub topk: usize,
    pub ks: Vec<usize>,
    pub query_noise: f64,
    pub query_mode: QueryMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            beam_width: 10,
            topk: 10,
            ks: vec![1, 3, 5],
            query_noise: 0.05,
            query_mode: QueryMode::Tool,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.topk == 0 {
            return Err(Error::Config("beam_width and topk must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be nonempty and positive".into()));
        }
        if !(self.query_noise >= 0.0 && self.query_noise.is_finite()) {
            return Err(Error::Config("query_noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub ndcg: BTreeMap<usize, f64>,
    pub ranked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ndcg: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryResult>,
    /// SHA-256 over the model configuration and evaluation settings.
    pub fingerprint: String,
}

impl EvalReport {
    /// Fixed-width text table: means first, then one row per query.
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self.ndcg.keys().copied().collect();
        let mut out = format!("{:<16}", "query");
        ks.iter().for_each(|k| out.push_str(&format!(" {:>9}", format!("ndcg@{k}"))));
        out.push('\n');
        out.push_str(&format!("{:<16}", "MEAN"));
        ks.iter().for_each(|k| out.push_str(&format!(" {:>9.4}", self.ndcg[k])));
        out.push('\n');
        for q in &self.per_query {
            out.push_str(&format!("{:<16}", q.query_id));
            ks.iter().for_each(|k| out.push_str(&format!(" {:>9.4}", q.ndcg[k])));
            out.push('\n');
        }
        out
    }

    /// One JSON record per query.
    pub fn to_jsonl(&self) -> String {
        self.per_query
            .iter()
            .map(|q| serde_json::to_string(q).expect("record serializes") + "\n")
            .collect()
    }
}

fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("settings serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Retrieve every query and average NDCG per `k`. Per-query rows are
/// sorted by query id and summed in that order, so the report does not
/// depend on query order.
pub fn run_eval(
    queries: &QuerySet,
    model: &QuantizerModel,
    trie: &CodeTrie,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    if queries.is_empty() {
        return Err(Error::Config("query set is empty".into()));
    }
    let topk = settings.topk.max(settings.ks.iter().copied().max().unwrap_or(1));
    let mut per_query = Vec::with_capacity(queries.len());
    for q in &queries.queries {
        let r = retrieve(q, model, trie, settings.beam_width, topk)?;
        let ranked: Vec<String> = r.ranked.into_iter().map(|h| h.tool_id).collect();
        let mut ndcg = BTreeMap::new();
        for &k in &settings.ks {
            ndcg.insert(k, ndcg_at_k(&ranked, &q.relevant, k)?);
        }
        per_query.push(QueryResult {
            query_id: q.query_id.clone(),
            ndcg,
            ranked,
        });
    }
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id).then_with(|| a.ranked.cmp(&b.ranked)));
    let n = per_query.len() as f64;
    let ndcg = settings
        .ks
        .iter()
        .map(|&k| (k, per_query.iter().map(|q| q.ndcg[&k]).sum::<f64>() / n))
        .collect();
    Ok(EvalReport {
        ndcg,
        per_query,
        fingerprint: fingerprint(&(&model.config, settings, queries.len())),
    })
}

/// Fraction of same-group tool pairs that share their first-level code.
pub fn code_sharing_rate(assignment: &CodeAssignment, ids: &[String], groups: &[usize]) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if groups[i] != groups[j] {
                continue;
            }
            let (Some(a), Some(b)) = (assignment.get(&ids[i]), assignment.get(&ids[j])) else {
                continue;
            };
            total += 1;
            same += usize::from(a[0] == b[0]);
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

/// Vocabulary cost of one token per tool against `K * L` code tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub n_tools: usize,
    pub atomic_tokens: usize,
    pub compositional_tokens: usize,
    pub ratio: f64,
    pub capacity: u128,
    pub fits: bool,
}

pub fn atomic_baseline_stats(n_tools: usize, k: usize, levels: usize) -> Result<BaselineStats> {
    if n_tools == 0 || k == 0 || levels == 0 {
        return Err(Error::Config("n_tools, K and L must be positive".into()));
    }
    let compositional = k
        .checked_mul(levels)
        .ok_or_else(|| Error::Config("K * L overflows".into()))?;
    let capacity = (k as u128).saturating_pow(levels as u32);
    Ok(BaselineStats {
        n_tools,
        atomic_tokens: n_tools,
        compositional_tokens: compositional,
        ratio: n_tools as f64 / compositional as f64,
        capacity,
        fits: capacity >= n_tools as u128,
    })
}

/// Everything a single synthetic run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: QuantizerModel,
    pub assignment: CodeAssignment,
    pub report: EvalReport,
    pub sharing: f64,
    pub relative_std: Option<f64>,
}

/// Synthesize a corpus, fit, assign codes and evaluate, all from one seed.
pub fn synthetic_run(
    spec: &SyntheticSpec,
    config: &QuantizerConfig,
    eval: &EvalSettings,
    seed: u64,
) -> Result<RunOutcome> {
    let spec = SyntheticSpec { seed, ..spec.clone() };
    let config = QuantizerConfig {
        seed,
        input_dim: spec.dim,
        ..config.clone()
    };
    let syn = synth_corpus(&spec)?;
    let graph = similarity(build_cooccurrence(&syn.trajectories, &syn.corpus, CountMode::Set)?, None);
    let model = fit(&syn.embeddings, &graph, &config)?;
    let assigned = assign_codes(&model, &syn.embeddings, &config.sinkhorn)?;
    let trie = build_trie(&assigned.assignment)?;
    let queries = synthetic_queries(&syn.embeddings, &syn.trajectories, eval.query_mode, eval.query_noise, seed)?;
    let report = run_eval(&queries, &model, &trie, eval)?;
    let sharing = code_sharing_rate(&assigned.assignment, syn.embeddings.ids(), &syn.groups);
    Ok(RunOutcome {
        model,
        assignment: assigned.assignment,
        report,
        sharing,
        relative_std: assigned.uniformity.map(|u| u.relative_std),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Lambda,
    Vocab,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub codes_per_level: usize,
    pub levels: usize,
    pub vocab_tokens: usize,
    pub capacity: u128,
    pub feasible: bool,
    /// Mean over seeds; empty for infeasible rows.
    pub ndcg: BTreeMap<usize, f64>,
    pub collision_report: f64,
    pub relative_std: Option<f64>,
    pub sharing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,K,L,vocab_tokens,capacity,feasible");
        for k in &self.ks {
            out.push_str(&format!(",ndcg@{k}"));
        }
        out.push_str(",collision_report,relative_std,sharing\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.lambda, r.codes_per_level, r.levels, r.vocab_tokens, r.capacity, r.feasible
            ));
            for k in &self.ks {
                match r.ndcg.get(k) {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            let rstd = r.relative_std.map_or(String::new(), |v| format!("{v:.6}"));
            if r.feasible {
                out.push_str(&format!(",{:.3},{rstd},{:.6}\n", r.collision_report, r.sharing));
            } else {
                out.push_str(",,,\n");
            }
        }
        out
    }
}

fn sweep_row(
    spec: &SyntheticSpec,
    config: &QuantizerConfig,
    eval: &EvalSettings,
    seeds: &[u64],
) -> Result<SweepRow> {
    let capacity = config.capacity();
    let mut row = SweepRow {
        lambda: config.collab_lambda,
        codes_per_level: config.codes_per_level,
        levels: config.levels,
        vocab_tokens: config.codes_per_level * config.levels,
        capacity,
        feasible: capacity >= spec.n_tools as u128,
        ndcg: BTreeMap::new(),
        collision_report: 0.0,
        relative_std: None,
        sharing: 0.0,
    };
    if !row.feasible {
        info!(
            "skipping K={} L={}: capacity {capacity} < {} tools",
            config.codes_per_level, config.levels, spec.n_tools
        );
        return Ok(row);
    }
    let n = seeds.len() as f64;
    let mut rstd = Vec::new();
    for &seed in seeds {
        let run = synthetic_run(spec, config, eval, seed)?;
        for (&k, &v) in &run.report.ndcg {
            *row.ndcg.entry(k).or_insert(0.0) += v / n;
        }
        row.collision_report += run.assignment.collision_report as f64 / n;
        row.sharing += run.sharing / n;
        rstd.extend(run.relative_std);
    }
    if !rstd.is_empty() {
        row.relative_std = Some(rstd.iter().sum::<f64>() / rstd.len() as f64);
    }
    Ok(row)
}

fn sweep(
    kind: SweepKind,
    spec: &SyntheticSpec,
    configs: Vec<QuantizerConfig>,
    eval: &EvalSettings,
    seeds: &[u64],
) -> Result<SweepTable> {
    eval.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let rows = configs
        .iter()
        .map(|c| sweep_row(spec, c, eval, seeds))
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        kind,
        seeds: seeds.to_vec(),
        ks: eval.ks.clone(),
        rows,
    })
}

pub fn sweep_lambda(
    spec: &SyntheticSpec,
    base: &QuantizerConfig,
    eval: &EvalSettings,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepTable> {
    let configs = values
        .iter()
        .map(|&collab_lambda| QuantizerConfig { collab_lambda, ..base.clone() })
        .collect();
    sweep(SweepKind::Lambda, spec, configs, eval, seeds)
}

/// Vary the codes per level at two levels.
pub fn sweep_vocab(
    spec: &SyntheticSpec,
    base: &QuantizerConfig,
    eval: &EvalSettings,
    values: &[usize],
    seeds: &[u64],
) -> Result<SweepTable> {
    let configs = values
        .iter()
        .map(|&codes_per_level| QuantizerConfig { codes_per_level, levels: 2, ..base.clone() })
        .collect();
    sweep(SweepKind::Vocab, spec, configs, eval, seeds)
}

/// Vary the number of levels at fixed codes per level.
pub fn sweep_depth(
    spec: &SyntheticSpec,
    base: &QuantizerConfig,
    eval: &EvalSettings,
    values: &[usize],
    seeds: &[u64],
) -> Result<SweepTable> {
    let configs = values
        .iter()
        .map(|&levels| QuantizerConfig { levels, ..base.clone() })
        .collect();
    sweep(SweepKind::Depth, spec, configs, eval, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ndcg_hand_examples() {
        assert_eq!(ndcg_at_k(&["a", "b", "c"], &rel(&["a"]), 1).unwrap(), 1.0);
        let v = ndcg_at_k(&["b", "a"], &rel(&["a"]), 3).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&["b", "c", "a"], &rel(&["a"]), 2).unwrap(), 0.0);
        assert!(ndcg_at_k(&["a"], &rel(&[]), 1).is_err());
        assert!(ndcg_at_k(&["a"], &rel(&["a"]), 0).is_err());
    }

    #[test]
    fn baseline_arithmetic() {
        let s = atomic_baseline_stats(46_985, 1024, 2).unwrap();
        assert_eq!((s.atomic_tokens, s.compositional_tokens), (46_985, 2048));
        assert!((s.ratio - 22.94).abs() < 0.01);
        assert_eq!(s.capacity, 1_048_576);
        assert!(s.fits);
        assert_eq!(atomic_baseline_stats(2048, 1024, 2).unwrap().ratio, 1.0);
        let one = atomic_baseline_stats(1, 1024, 2).unwrap();
        assert!(one.atomic_tokens < one.compositional_tokens);
    }

    #[test]
    fn scorer_prefers_nearer_centroids() {
        let cbs = vec![Codebook {
            level: 1,
            centroids: vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 3.0]],
        }];
        let s = SurrogateScorer { codebooks: &cbs, z: vec![0.0, 0.0] };
        assert_eq!(s.scores(&[]), vec![-1.0, -1.0, -9.0]);
    }

    #[test]
    fn queries_round_trip_and_validate() {
        let set = QuerySet {
            queries: vec![Query {
                query_id: "q1".into(),
                embedding: vec![0.5, -1.25],
                relevant: rel(&["a", "b"]),
            }],
        };
        let text = write_queries(&set);
        assert_eq!(parse_queries(&text, 2, None).unwrap(), set);
        assert!(matches!(parse_queries(&text, 3, None), Err(Error::DimensionMismatch { .. })));
        let known: BTreeSet<&str> = ["a"].into();
        assert!(matches!(parse_queries(&text, 2, Some(&known)), Err(Error::UnknownTool(_))));
        let twice = format!("{text}{text}");
        assert!(matches!(parse_queries(&twice, 2, None), Err(Error::DuplicateId(_))));
        assert!(parse_queries(r#"{"query_id":"q","embedding":[1],"relevant":[]}"#, 1, None).is_err());
    }
}
