use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};
use weaver_core::codec::{assign_codes, build_trie, write_codemap_tsv, CodeAssignment};
use weaver_core::collab::export_similarity;
use weaver_core::config::{Inputs, RunConfig};
use weaver_core::corpus::{write_embeddings_jsonl, write_tools, write_trajectories};
use weaver_core::eval::{
    code_sharing_rate, parse_queries, run_eval, sweep_depth, sweep_lambda, sweep_vocab, synthetic_queries, write_queries,
    QuerySet, SweepKind,
};
use weaver_core::persistence::{self, Kind};
use weaver_core::quantizer::{fit, LossBreakdown, QuantizerModel};
use weaver_core::sinkhorn::{uniformity_stats, SinkhornSettings, UniformityReport};
use weaver_core::{Error, Result};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

macro_rules! emitln {
    ($($arg:tt)*) => {
        emit(&format!("{}\n", format_args!($($arg)*)))
    };
}

/// Print to stdout, ignoring a closed pipe (`weaver eval | head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn loss_table(log: &[LossBreakdown]) -> String {
    let mut out = format!("{:>6} {:>14} {:>14} {:>14} {:>14}\n", "epoch", "recon", "quant", "collab", "total");
    for (i, l) in log.iter().enumerate() {
        out.push_str(&format!(
            "{:>6} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}\n",
            i + 1,
            l.recon,
            l.quant,
            l.collab,
            l.total
        ));
    }
    out
}

fn uniformity_line(label: &str, u: &UniformityReport) -> String {
    format!(
        "{label}: codes={} mean={:.3} std={:.3} relative_std={:.4} min={} p5={} p95={} max={}",
        u.counts.len(),
        u.mean,
        u.std,
        u.relative_std,
        u.min,
        u.p5,
        u.p95,
        u.max
    )
}

fn last_level_stats(a: &CodeAssignment) -> UniformityReport {
    let last: Vec<usize> = a.codes.values().map(|p| p[a.levels - 1]).collect();
    uniformity_stats(&last, a.codes_per_level)
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn inputs(&self) -> Result<Inputs> {
        self.cfg.load_inputs()
    }

    fn queries(&self, inputs: &Inputs) -> Result<QuerySet> {
        match &self.cfg.corpus.queries {
            Some(p) => {
                let known: BTreeSet<&str> = inputs.embeddings.ids().iter().map(String::as_str).collect();
                parse_queries(&read_to_string(p)?, inputs.embeddings.dim(), Some(&known))
            }
            None => synthetic_queries(
                &inputs.embeddings,
                &inputs.trajectories,
                self.cfg.eval.query_mode,
                self.cfg.eval.query_noise,
                self.cfg.seed,
            ),
        }
    }

    pub fn synth(&self) -> Result<()> {
        let inputs = self.inputs()?;
        write(&self.path("tools.jsonl"), write_tools(&inputs.corpus))?;
        write(&self.path("embeddings.jsonl"), write_embeddings_jsonl(&inputs.embeddings))?;
        write(&self.path("trajectories.jsonl"), write_trajectories(&inputs.trajectories))?;
        write(&self.path("queries.jsonl"), write_queries(&self.queries(&inputs)?))?;
        write(&self.path("run.toml"), self.cfg.to_toml())?;
        emitln!(
            "wrote {} tools, {} trajectories to {}",
            inputs.embeddings.len(),
            inputs.trajectories.len(),
            self.out.display()
        );
        Ok(())
    }

    pub fn fit(&self) -> Result<()> {
        let inputs = self.inputs()?;
        let graph = inputs.graph(self.cfg.corpus.count_mode, self.cfg.corpus.similarity_top_k)?;
        let model = fit(&inputs.embeddings, &graph, &self.cfg.quantizer)?;
        let fp = persistence::save_model(self.path("model.json"), &model)?;
        persistence::save_graph(self.path("graph.json"), &graph)?;
        persistence::save_report(self.path("training_log.json"), &model.training_log)?;
        emit(&loss_table(&model.training_log));
        emitln!("model {fp}");
        Ok(())
    }

    fn model(&self, path: Option<PathBuf>) -> Result<QuantizerModel> {
        persistence::load_model(path.unwrap_or_else(|| self.path("model.json")))
    }

    pub fn assign(&self, model: Option<PathBuf>, no_sinkhorn: bool) -> Result<()> {
        let model = self.model(model)?;
        let inputs = self.inputs()?;
        let settings = SinkhornSettings {
            enabled: self.cfg.quantizer.sinkhorn.enabled && !no_sinkhorn,
            ..self.cfg.quantizer.sinkhorn.clone()
        };
        let outcome = assign_codes(&model, &inputs.embeddings, &settings)?;
        let a = &outcome.assignment;
        let fp = persistence::save_codemap(self.path("codemap.json"), a)?;
        let counts = last_level_stats(a);
        let sharing = inputs
            .groups
            .as_ref()
            .map(|g| code_sharing_rate(a, inputs.embeddings.ids(), g));
        let report = json!({
            "collision_report": a.collision_report,
            "moved": outcome.moved,
            "sinkhorn": settings.enabled,
            "uniformity": outcome.uniformity,
            "soft_uniformity": outcome.soft_uniformity,
            "final_counts": counts,
            "group_sharing": sharing,
        });
        persistence::save_report(self.path("assign_report.json"), &report)?;
        emitln!("collision_report: {}", a.collision_report);
        emitln!("moved by resolution: {}", outcome.moved.len());
        if let Some(u) = &outcome.uniformity {
            emitln!("{}", uniformity_line("uniformity", u));
        }
        if let Some(u) = &outcome.soft_uniformity {
            emitln!("{}", uniformity_line("soft uniformity", u));
        }
        emitln!("{}", uniformity_line("final counts", &counts));
        if let Some(s) = sharing {
            emitln!("within-group level-1 sharing: {s:.4}");
        }
        emitln!("codemap {fp}");
        Ok(())
    }

    pub fn eval(&self, model: Option<PathBuf>, codemap: Option<PathBuf>) -> Result<()> {
        let model = self.model(model)?;
        let a = persistence::load_codemap(codemap.unwrap_or_else(|| self.path("codemap.json")))?;
        let inputs = self.inputs()?;
        let queries = self.queries(&inputs)?;
        let trie = build_trie(&a)?;
        let report = run_eval(&queries, &model, &trie, &self.cfg.eval)?;
        let fp = persistence::save_report(self.path("eval.json"), &report)?;
        write(&self.path("eval_per_query.jsonl"), report.to_jsonl())?;
        emit(&report.to_table());
        emitln!("report {fp}");
        Ok(())
    }

    pub fn sweep(&self, kind: SweepKind) -> Result<()> {
        if self.cfg.uses_files() {
            return Err(Error::Config("sweeps run on the synthetic corpus only".into()));
        }
        let (c, s) = (&self.cfg, &self.cfg.sweep);
        let table = match kind {
            SweepKind::Lambda => sweep_lambda(&c.synthetic, &c.quantizer, &c.eval, &s.lambdas, &s.seeds)?,
            SweepKind::Vocab => sweep_vocab(&c.synthetic, &c.quantizer, &c.eval, &s.codes_per_level, &s.seeds)?,
            SweepKind::Depth => sweep_depth(&c.synthetic, &c.quantizer, &c.eval, &s.levels, &s.seeds)?,
        };
        let name = match kind {
            SweepKind::Lambda => "lambda",
            SweepKind::Vocab => "vocab",
            SweepKind::Depth => "depth",
        };
        let csv = table.to_csv();
        write(&self.path(&format!("sweep_{name}.csv")), &csv)?;
        persistence::save_report(self.path(&format!("sweep_{name}.json")), &table)?;
        emit(&csv);
        Ok(())
    }

    pub fn report(&self, bundle: &Path) -> Result<()> {
        let head: Value = serde_json::from_str(&read_to_string(bundle)?)
            .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        let kind = head.get("kind").and_then(Value::as_str).unwrap_or_default();
        match kind {
            "model" => {
                let m = persistence::load_model(bundle)?;
                let c = &m.config;
                emitln!(
                    "model: D={} D'={} L={} K={} lambda={} epochs={}",
                    c.input_dim,
                    c.latent_dim,
                    c.levels,
                    c.codes_per_level,
                    c.collab_lambda,
                    m.training_log.len()
                );
                emit(&loss_table(&m.training_log));
            }
            "codemap" => {
                let a = persistence::load_codemap(bundle)?;
                let first: BTreeSet<usize> = a.codes.values().map(|p| p[0]).collect();
                emitln!(
                    "codemap: tools={} L={} K={} collision_report={} level-1 codes used={}",
                    a.len(),
                    a.levels,
                    a.codes_per_level,
                    a.collision_report,
                    first.len()
                );
                emitln!("{}", uniformity_line("final counts", &last_level_stats(&a)));
            }
            "graph" => {
                let g = persistence::load_graph(bundle)?;
                emitln!("graph: tools={} similarity pairs={}", g.len(), g.similarity_pairs().len());
            }
            _ => {
                let v: Value = persistence::load(bundle, Kind::Report)?;
                emitln!("{}", serde_json::to_string_pretty(&v).expect("value serializes"));
            }
        }
        let bytes = std::fs::read(bundle).map_err(|e| Error::Io {
            path: bundle.to_path_buf(),
            source: e,
        })?;
        emitln!("fingerprint {}", persistence::fingerprint(&bytes));
        Ok(())
    }

    pub fn export(&self, codemap: Option<PathBuf>) -> Result<()> {
        let a = persistence::load_codemap(codemap.unwrap_or_else(|| self.path("codemap.json")))?;
        write(&self.path("codemap.tsv"), write_codemap_tsv(&a))?;
        write(&self.path("vocab.txt"), a.vocabulary().join("\n") + "\n")?;
        let graph_path = self.path("graph.json");
        if graph_path.exists() {
            let g = persistence::load_graph(&graph_path)?;
            write(&self.path("similarity.jsonl"), export_similarity(&g))?;
        } else {
            info!("no graph bundle at {}, skipping similarity export", graph_path.display());
        }
        emitln!("exported {} code sequences, {} tokens", a.len(), a.vocabulary().len());
        Ok(())
    }
}
