//! Run configuration: one TOML document plus `a.b.c=value` overrides.
//!
//! Precedence is overrides > file > built-in defaults. The top-level `seed`
//! is copied into every stochastic component when the config is resolved.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collab::{build_cooccurrence, similarity, CooccurrenceGraph, CountMode};
use crate::corpus::{
    hash_embed, load_embeddings, load_tools, load_trajectories, synth_corpus, EmbeddingTable, ResolveMode,
    SyntheticSpec, ToolCorpus, TrajectorySet,
};
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::quantizer::QuantizerConfig;

/// Input files. When `embeddings` is unset the synthetic spec is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub tools: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub resolve: ResolveMode,
    pub count_mode: CountMode,
    /// Keep only the strongest `similarity_top_k` neighbours per tool.
    pub similarity_top_k: Option<usize>,
    /// Embed `name + doc` with the hashing embedder instead of reading
    /// `embeddings`. Meant for hermetic tests.
    pub hash_embed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambdas: Vec<f64>,
    pub codes_per_level: Vec<usize>,
    pub levels: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            codes_per_level: vec![8, 16, 32, 64],
            levels: vec![1, 2, 3],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusPaths,
    pub synthetic: SyntheticSpec,
    pub quantizer: QuantizerConfig,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    /// Desk-scale defaults sized for the built-in synthetic corpus.
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            corpus: CorpusPaths::default(),
            synthetic: SyntheticSpec::default(),
            quantizer: QuantizerConfig {
                input_dim: SyntheticSpec::default().dim,
                latent_dim: 8,
                hidden_dims: vec![32],
                codes_per_level: 32,
                learning_rate: 3e-3,
                batch_size: 64,
                epochs: 200,
                warmup_epochs: 5,
                ..QuantizerConfig::default()
            },
            eval: EvalSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

/// Overlay `top` onto `base`, recursing into tables; other values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        Error::parse(line, e.message().to_string())
    })
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string so `--set output_dir=out` needs no quoting.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply one `dotted.key=value` override in place.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::schema(parts[..=i].join("."), "is not a table"))?;
    }
    cur.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Build from optional file text and overrides, then resolve and validate.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(t) = text {
            merge(&mut table, parse_table(t)?);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(path, e.into_inner().to_string())
        })?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    /// Push the run seed into every component and, for synthetic runs, the
    /// synthetic dimension into the encoder input width.
    pub fn resolved(mut self) -> Self {
        self.synthetic.seed = self.seed;
        self.quantizer.seed = self.seed;
        if !self.uses_files() {
            self.quantizer.input_dim = self.synthetic.dim;
        }
        self
    }

    pub fn uses_files(&self) -> bool {
        self.corpus.embeddings.is_some() || self.corpus.hash_embed
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let check = |key: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                Some(p) if !p.is_file() => Err(Error::schema(key, format!("file not found: {}", p.display()))),
                _ => Ok(()),
            }
        };
        check("corpus.tools", &c.tools)?;
        check("corpus.embeddings", &c.embeddings)?;
        check("corpus.trajectories", &c.trajectories)?;
        check("corpus.queries", &c.queries)?;
        if c.tools.is_some() && !self.uses_files() {
            return Err(Error::schema("corpus.embeddings", "required when corpus.tools is set"));
        }
        if c.hash_embed && c.tools.is_none() {
            return Err(Error::schema("corpus.tools", "required when corpus.hash_embed is set"));
        }
        if self.uses_files() && c.trajectories.is_none() {
            return Err(Error::schema("corpus.trajectories", "required with file inputs"));
        }
        if c.similarity_top_k == Some(0) {
            return Err(Error::schema("corpus.similarity_top_k", "must be at least 1"));
        }
        if !self.uses_files() {
            self.synthetic.validate()?;
        }
        self.quantizer.validate()?;
        self.eval.validate()?;
        if self.sweep.seeds.is_empty() {
            return Err(Error::schema("sweep.seeds", "must be nonempty"));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Read or synthesize the tools, embeddings and trajectories.
    pub fn load_inputs(&self) -> Result<Inputs> {
        if !self.uses_files() {
            let syn = synth_corpus(&self.synthetic)?;
            return Ok(Inputs {
                corpus: syn.corpus,
                embeddings: syn.embeddings,
                trajectories: syn.trajectories,
                groups: Some(syn.groups),
            });
        }
        let c = &self.corpus;
        let corpus = c.tools.as_ref().map(load_tools).transpose()?;
        let dim = self.quantizer.input_dim;
        let embeddings = match (&c.embeddings, &corpus) {
            (Some(p), _) => load_embeddings(p, dim)?,
            (None, Some(tools)) => {
                let mut t = EmbeddingTable::new(dim);
                for r in tools.records() {
                    t.push(r.tool_id.clone(), hash_embed(&format!("{} {}", r.name, r.doc), dim, self.seed)?)?;
                }
                t
            }
            (None, None) => unreachable!("validate requires tools for hash_embed"),
        };
        let corpus = match corpus {
            Some(tools) => {
                if let Some(id) = embeddings.ids().iter().find(|id| !tools.contains(id)) {
                    return Err(Error::UnknownTool(id.clone()));
                }
                tools
            }
            None => ToolCorpus::from_ids(embeddings.ids())?,
        };
        let path = c.trajectories.as_ref().expect("validated");
        let trajectories = load_trajectories(path, Some(&corpus), c.resolve)?.set;
        Ok(Inputs {
            corpus,
            embeddings,
            trajectories,
            groups: None,
        })
    }
}

/// Loaded or synthesized inputs for one run.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub corpus: ToolCorpus,
    pub embeddings: EmbeddingTable,
    pub trajectories: TrajectorySet,
    /// Planted group labels, aligned with embedding order (synthetic only).
    pub groups: Option<Vec<usize>>,
}

impl Inputs {
    /// The co-occurrence graph over the embedded tools.
    pub fn graph(&self, mode: CountMode, top_k: Option<usize>) -> Result<CooccurrenceGraph> {
        Ok(similarity(build_cooccurrence(&self.trajectories, &self.corpus, mode)?, top_k))
    }
}
