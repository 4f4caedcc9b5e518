//! Loss evaluation with analytic gradients, and the training loop.
//!
//! Gradient conventions for one batch of size `B`:
//! * `recon` and `quant` are batch means; `collab` is the plain double sum
//!   `sum_{i,j} A_ij ||zhat_i - zhat_j||^2` over the tools in the batch.
//! * Selected code indices are constants. The quantized latent passes its
//!   upstream gradient both to the selected centroids and, straight through,
//!   to the encoder output `z`.
//! * In the quantization term, `||sg[r_l] - v||^2` updates only the centroid
//!   and `beta ||r_l - sg[v]||^2` updates only the residual `r_l`, which
//!   depends on `z` and the centroids chosen at earlier levels.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::kmeans::kmeans;
use super::mlp::{Mlp, Trace};
use super::optim::AdamW;
use super::{quantize_level, Codebook, LossBreakdown, QuantizerConfig, QuantizerModel, ReconMode};
use crate::collab::{collab_loss, CooccurrenceGraph};
use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sinkhorn::uniform_assign;

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Mlp,
    pub decoder: Option<Mlp>,
    pub codebooks: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    fn zeros_like(model: &QuantizerModel) -> Self {
        Self {
            encoder: model.encoder.zeros_like(),
            decoder: model.decoder.as_ref().map(Mlp::zeros_like),
            codebooks: model
                .codebooks
                .iter()
                .map(|cb| vec![vec![0.0; cb.dim()]; cb.len()])
                .collect(),
        }
    }

    /// Same order as [`QuantizerModel::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.tensors().for_each(|t| out.extend_from_slice(t));
        if let Some(d) = &self.decoder {
            d.tensors().for_each(|t| out.extend_from_slice(t));
        }
        for cb in &self.codebooks {
            cb.iter().for_each(|v| out.extend_from_slice(v));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: Gradients,
    /// Selected code path per batch element.
    pub codes: Vec<Vec<usize>>,
    /// `residuals[l][i]` is `r_{l+1}` of batch element `i` (0-based level).
    pub residuals: Vec<Vec<Vec<f64>>>,
}

fn check_batch(model: &QuantizerModel, embeddings: &[&[f64]]) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let d = model.encoder.input_dim();
    if let Some((row, e)) = embeddings.iter().enumerate().find(|(_, e)| e.len() != d) {
        return Err(Error::DimensionMismatch {
            row,
            expected: d,
            found: e.len(),
        });
    }
    Ok(())
}

/// Pick codes level by level: nearest centroid, except that balanced
/// assignment replaces it on the last level (or every level) when enabled.
fn select_codes(model: &QuantizerModel, zs: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
    let n = zs.len();
    let levels = model.levels();
    let mut residual: Vec<Vec<f64>> = zs.to_vec();
    let mut codes = vec![Vec::with_capacity(levels); n];
    let s = &model.config.sinkhorn;
    for (l, cb) in model.codebooks.iter().enumerate() {
        let balanced = s.enabled && (s.all_levels || l + 1 == levels);
        let picks: Vec<usize> = if balanced {
            let mut settings = s.clone();
            // batches smaller than K * capacity must still be feasible
            settings.capacity = s.capacity.filter(|&c| n <= c * cb.len());
            uniform_assign(&residual, cb, &settings)?.indices
        } else {
            residual.iter().map(|r| quantize_level(r, cb).0).collect()
        };
        for (i, &k) in picks.iter().enumerate() {
            codes[i].push(k);
            residual[i]
                .iter_mut()
                .zip(&cb.centroids[k])
                .for_each(|(r, v)| *r -= v);
        }
    }
    Ok(codes)
}

/// Loss and gradients for a batch, selecting codes with the model's rules.
/// `pairs` are within-batch similarity weights `(i, j, A_ij)`.
pub fn loss_terms(
    model: &QuantizerModel,
    embeddings: &[&[f64]],
    pairs: &[(usize, usize, f64)],
) -> Result<LossOutput> {
    check_batch(model, embeddings)?;
    let traces: Vec<Trace> = embeddings.iter().map(|e| model.encoder.trace(e)).collect();
    let zs: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
    if zs.iter().flatten().any(|x| !x.is_finite()) {
        // code selection cannot run on a non-finite latent; name the first
        // term in breakdown order that is certainly non-finite
        let term = match model.config.recon_mode {
            ReconMode::Latent => "recon",
            ReconMode::Decoder => "quant",
        };
        return Err(Error::Divergence {
            term,
            epoch: 0,
            last_good: None,
        });
    }
    let codes = select_codes(model, &zs)?;
    evaluate(model, embeddings, &traces, codes, pairs)
}

/// Loss and gradients for a batch with code paths fixed by the caller.
pub fn loss_terms_with_codes(
    model: &QuantizerModel,
    embeddings: &[&[f64]],
    pairs: &[(usize, usize, f64)],
    codes: &[Vec<usize>],
) -> Result<LossOutput> {
    check_batch(model, embeddings)?;
    if codes.len() != embeddings.len()
        || codes
            .iter()
            .any(|c| c.len() != model.levels() || c.iter().any(|&k| k >= model.codes_per_level()))
    {
        return Err(Error::Config("code paths do not match batch and model".into()));
    }
    let traces: Vec<Trace> = embeddings.iter().map(|e| model.encoder.trace(e)).collect();
    evaluate(model, embeddings, &traces, codes.to_vec(), pairs)
}

fn evaluate(
    model: &QuantizerModel,
    embeddings: &[&[f64]],
    traces: &[Trace],
    codes: Vec<Vec<usize>>,
    pairs: &[(usize, usize, f64)],
) -> Result<LossOutput> {
    let cfg = &model.config;
    let b = embeddings.len();
    let inv_b = 1.0 / b as f64;
    let beta = cfg.commitment_beta;
    let lambda = cfg.collab_lambda;
    let levels = model.levels();
    let dim = cfg.latent_dim;
    let mut grads = Gradients::zeros_like(model);

    // forward: residual chain and quantized latent per element
    let mut residuals: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(b); levels];
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::with_capacity(b);
    let mut zhats: Vec<Vec<f64>> = Vec::with_capacity(b);
    for (i, trace) in traces.iter().enumerate() {
        let mut chain = vec![trace.output().to_vec()];
        let mut zhat = vec![0.0; dim];
        for (l, cb) in model.codebooks.iter().enumerate() {
            let v = &cb.centroids[codes[i][l]];
            let next: Vec<f64> = chain[l].iter().zip(v).map(|(r, c)| r - c).collect();
            zhat.iter_mut().zip(v).for_each(|(s, c)| *s += c);
            residuals[l].push(next.clone());
            chain.push(next);
        }
        chains.push(chain);
        zhats.push(zhat);
    }

    let (collab_raw, collab_grad) = collab_loss(&zhats, pairs)?;

    let mut recon_sum = 0.0;
    let mut quant_sum = 0.0;
    for i in 0..b {
        let chain = &chains[i];
        let mut g_z = vec![0.0; dim];
        // gradient reaching zhat through the straight-through path
        let mut g_ste: Vec<f64> = collab_grad[i].iter().map(|g| lambda * g).collect();
        // gradient reaching only the centroids (latent reconstruction)
        let mut g_plain = vec![0.0; dim];

        match cfg.recon_mode {
            ReconMode::Decoder => {
                let dec = model.decoder.as_ref().expect("decoder mode has a decoder");
                let dtrace = dec.trace(&zhats[i]);
                let y = dtrace.output();
                let e = embeddings[i];
                let mut dy = Vec::with_capacity(y.len());
                for (yk, ek) in y.iter().zip(e.iter()) {
                    let diff = ek - yk;
                    recon_sum += diff * diff;
                    dy.push(-2.0 * diff * inv_b);
                }
                let dgrads = grads.decoder.as_mut().expect("decoder grads");
                let back = dec.backward(&dtrace, &dy, dgrads);
                g_ste.iter_mut().zip(&back).for_each(|(g, x)| *g += x);
            }
            ReconMode::Latent => {
                let last = &chain[levels];
                for k in 0..dim {
                    recon_sum += last[k] * last[k];
                    g_z[k] += 2.0 * last[k] * inv_b;
                    g_plain[k] -= 2.0 * last[k] * inv_b;
                }
            }
        }

        for k in 0..dim {
            g_z[k] += g_ste[k];
        }
        for l in 0..levels {
            let code = codes[i][l];
            let diff = &chain[l + 1];
            let d2: f64 = diff.iter().map(|x| x * x).sum();
            quant_sum += (1.0 + beta) * d2;
            {
                let gq = &mut grads.codebooks[l][code];
                for k in 0..dim {
                    gq[k] += g_ste[k] + g_plain[k] - 2.0 * diff[k] * inv_b;
                }
            }
            if beta != 0.0 {
                let g_r: Vec<f64> = diff.iter().map(|x| 2.0 * beta * x * inv_b).collect();
                g_z.iter_mut().zip(&g_r).for_each(|(g, x)| *g += x);
                for j in 0..l {
                    let gq = &mut grads.codebooks[j][codes[i][j]];
                    gq.iter_mut().zip(&g_r).for_each(|(g, x)| *g -= x);
                }
            }
        }
        model.encoder.backward(&traces[i], &g_z, &mut grads.encoder);
    }

    let breakdown = LossBreakdown::new(
        recon_sum * inv_b,
        quant_sum * inv_b,
        collab_raw,
        lambda,
    );
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::Divergence {
            term,
            epoch: 0,
            last_good: None,
        });
    }
    Ok(LossOutput {
        breakdown,
        grads,
        codes,
        residuals,
    })
}

/// Fresh model: fan-in scaled random affine layers and codebooks
/// initialized by k-means, level by level, on the residuals left by the
/// levels before.
pub fn initialize(embeddings: &EmbeddingTable, config: &QuantizerConfig) -> Result<QuantizerModel> {
    let mut rng = rng::stream(config.seed, Stream::Init);
    let encoder = Mlp::init(&config.encoder_dims(), &mut rng);
    let decoder = match config.recon_mode {
        ReconMode::Decoder => Some(Mlp::init(&config.decoder_dims(), &mut rng)),
        ReconMode::Latent => None,
    };
    let mut residual: Vec<Vec<f64>> = embeddings.vectors().iter().map(|e| encoder.forward(e)).collect();
    let mut codebooks = Vec::with_capacity(config.levels);
    for level in 1..=config.levels {
        let km = kmeans(&residual, config.codes_per_level, config.kmeans_max_iters, &mut rng);
        for (r, &a) in residual.iter_mut().zip(&km.assignments) {
            r.iter_mut().zip(&km.centroids[a]).for_each(|(x, c)| *x -= c);
        }
        debug!("level {level} k-means inertia {:.6} after {} iters", km.inertia, km.iterations);
        codebooks.push(Codebook {
            level,
            centroids: km.centroids,
        });
    }
    Ok(QuantizerModel {
        config: config.clone(),
        encoder,
        decoder,
        codebooks,
        training_log: Vec::new(),
    })
}

/// Graph row of each embedding row, if the tool appears in the graph.
fn graph_rows(embeddings: &EmbeddingTable, graph: &CooccurrenceGraph) -> Vec<Option<usize>> {
    embeddings.ids().iter().map(|id| graph.position(id)).collect()
}

fn batch_pairs(
    graph: &CooccurrenceGraph,
    rows: &[Option<usize>],
    batch: &[usize],
) -> Vec<(usize, usize, f64)> {
    let present: Vec<usize> = (0..batch.len()).filter(|&i| rows[batch[i]].is_some()).collect();
    let tools: Vec<usize> = present.iter().map(|&i| rows[batch[i]].unwrap()).collect();
    graph
        .batch_pairs(&tools)
        .into_iter()
        .map(|(a, b, w)| (present[a], present[b], w))
        .collect()
}

/// Train the quantizer with minibatch adaptive-moment descent.
pub fn fit(
    embeddings: &EmbeddingTable,
    graph: &CooccurrenceGraph,
    config: &QuantizerConfig,
) -> Result<QuantizerModel> {
    config.validate()?;
    if embeddings.is_empty() {
        return Err(Error::Config("no embeddings to fit".into()));
    }
    if embeddings.dim() != config.input_dim {
        return Err(Error::Config(format!(
            "embedding dim {} does not match input_dim {}",
            embeddings.dim(),
            config.input_dim
        )));
    }
    let mut model = initialize(embeddings, config)?;
    if config.epochs == 0 {
        return Ok(model);
    }

    let n = embeddings.len();
    let rows = graph_rows(embeddings, graph);
    let batch_size = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = rng::stream(config.seed, Stream::Shuffle);
    let mut reseed_rng = rng::stream(config.seed, Stream::Reseed);
    let mut opt = AdamW::new(model.param_count(), config.weight_decay);
    let mut params = model.params_flat();
    let k = config.codes_per_level;

    for epoch in 0..config.epochs {
        let lr = if config.warmup_epochs > 0 {
            config.learning_rate * ((epoch + 1) as f64 / config.warmup_epochs as f64).min(1.0)
        } else {
            config.learning_rate
        };
        order.shuffle(&mut shuffle);
        let mut usage = vec![vec![0usize; k]; config.levels];
        let (mut recon, mut quant, mut collab) = (0.0, 0.0, 0.0);
        let mut last_residuals: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut last_z: Vec<Vec<f64>> = Vec::new();

        for batch in order.chunks(batch_size) {
            let es: Vec<&[f64]> = batch.iter().map(|&i| embeddings.vectors()[i].as_slice()).collect();
            let pairs = batch_pairs(graph, &rows, batch);
            let out = loss_terms(&model, &es, &pairs).map_err(|e| match e {
                Error::Divergence { term, .. } => Error::Divergence {
                    term,
                    epoch,
                    last_good: epoch.checked_sub(1),
                },
                other => other,
            })?;
            let w = batch.len() as f64;
            recon += out.breakdown.recon * w;
            quant += out.breakdown.quant * w;
            collab += out.breakdown.collab * w;
            for path in &out.codes {
                for (l, &c) in path.iter().enumerate() {
                    usage[l][c] += 1;
                }
            }
            let g = out.grads.flatten();
            opt.step(&mut params, &g, lr);
            model.set_params_flat(&params);
            last_z = es.iter().map(|e| model.encoder.forward(e)).collect();
            last_residuals = out.residuals;
        }

        let nf = n as f64;
        let entry = LossBreakdown::new(recon / nf, quant / nf, collab / nf, config.collab_lambda);
        if let Some(term) = entry.non_finite_term() {
            return Err(Error::Divergence {
                term,
                epoch,
                last_good: epoch.checked_sub(1),
            });
        }
        model.training_log.push(entry);
        debug!(
            "epoch {epoch}: recon {:.6} quant {:.6} collab {:.6} total {:.6}",
            entry.recon, entry.quant, entry.collab, entry.total
        );

        if config.reseed_dead_codes && epoch + 1 < config.epochs {
            let mut reseeded = 0;
            for l in 0..config.levels {
                // level-l inputs are the residuals left by level l-1
                let pool: &[Vec<f64>] = if l == 0 { &last_z } else { &last_residuals[l - 1] };
                if pool.is_empty() {
                    continue;
                }
                let scale = {
                    let m = pool.iter().flatten().map(|x| x * x).sum::<f64>()
                        / (pool.len() * config.latent_dim) as f64;
                    1e-2 * m.sqrt().max(1e-6)
                };
                for code in 0..k {
                    if usage[l][code] > 0 {
                        continue;
                    }
                    let src = &pool[reseed_rng.random_range(0..pool.len())];
                    let fresh: Vec<f64> = src
                        .iter()
                        .map(|x| x + scale * rng::normal(&mut reseed_rng))
                        .collect();
                    let off = model.centroid_offset(l, code);
                    params[off..off + config.latent_dim].copy_from_slice(&fresh);
                    opt.reset(off, config.latent_dim);
                    reseeded += 1;
                }
            }
            if reseeded > 0 {
                model.set_params_flat(&params);
                debug!("epoch {epoch}: re-seeded {reseeded} dead codes");
            }
        }
    }
    if let (Some(first), Some(last)) = (model.training_log.first(), model.training_log.last()) {
        info!(
            "fit: {} epochs, recon {:.5} -> {:.5}, total {:.5} -> {:.5}",
            model.training_log.len(),
            first.recon,
            last.recon,
            first.total,
            last.total
        );
    }
    Ok(model)
}
