//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng as _;
use weaver_core::codec::{assign_codes, build_trie, CodeAssignment, CodeTrie, Hit};
use weaver_core::corpus::EmbeddingTable;
use weaver_core::quantizer::{Codebook, Layer, Mlp, QuantizerConfig, QuantizerModel, ReconMode};
use weaver_core::rng::{stream, Rng, Stream};
use weaver_core::sinkhorn::SinkhornSettings;

pub fn random_model(cfg: QuantizerConfig, rng: &mut Rng) -> QuantizerModel {
    let mut layer = |i: usize, o: usize| Layer {
        inputs: i,
        outputs: o,
        weights: (0..i * o).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: (0..o).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let mlp = |dims: &[usize], layer: &mut dyn FnMut(usize, usize) -> Layer| Mlp {
        layers: dims.windows(2).map(|w| layer(w[0], w[1])).collect(),
    };
    let encoder = mlp(&cfg.encoder_dims(), &mut layer);
    let decoder = match cfg.recon_mode {
        ReconMode::Decoder => Some(mlp(&cfg.decoder_dims(), &mut layer)),
        ReconMode::Latent => None,
    };
    let codebooks = (1..=cfg.levels)
        .map(|level| Codebook {
            level,
            centroids: (0..cfg.codes_per_level)
                .map(|_| (0..cfg.latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        })
        .collect();
    QuantizerModel {
        config: cfg,
        encoder,
        decoder,
        codebooks,
        training_log: vec![],
    }
}

pub fn tiny_config(mode: ReconMode, lambda: f64) -> QuantizerConfig {
    QuantizerConfig {
        input_dim: 6,
        latent_dim: 3,
        hidden_dims: vec![4],
        levels: 2,
        codes_per_level: 3,
        commitment_beta: 0.25,
        collab_lambda: lambda,
        recon_mode: mode,
        ..Default::default()
    }
}

fn mlp_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (n, l) in m.layers.iter().enumerate() {
        let mut y = l.bias.clone();
        for o in 0..l.outputs {
            for i in 0..l.inputs {
                y[o] += l.weights[o * l.inputs + i] * a[i];
            }
        }
        if n + 1 < m.layers.len() {
            y.iter_mut().for_each(|v| *v /= 1.0 + (-*v).exp());
        }
        a = y;
    }
    a
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stop-gradient surrogate of the tokenizer loss. Anything read from
/// `frozen` is a constant, so differentiating in `live` yields exactly the
/// straight-through gradient of the forward loss at `live == frozen`.
pub fn surrogate_loss(
    live: &QuantizerModel,
    frozen: &QuantizerModel,
    es: &[Vec<f64>],
    codes: &[Vec<usize>],
    pairs: &[(usize, usize, f64)],
) -> f64 {
    let cfg = &live.config;
    let b = es.len() as f64;
    let (mut recon, mut quant) = (0.0, 0.0);
    let mut ste = Vec::new();
    for (e, path) in es.iter().zip(codes) {
        let z = mlp_forward(&live.encoder, e);
        let z0 = mlp_forward(&frozen.encoder, e);
        let q: Vec<&Vec<f64>> = path.iter().enumerate().map(|(l, &k)| &live.codebooks[l].centroids[k]).collect();
        let q0: Vec<&Vec<f64>> = path.iter().enumerate().map(|(l, &k)| &frozen.codebooks[l].centroids[k]).collect();
        let (mut r, mut r0) = (z.clone(), z0.clone());
        let mut zhat = vec![0.0; z.len()];
        for l in 0..path.len() {
            quant += sq(&r0, q[l]) + cfg.commitment_beta * sq(&r, q0[l]);
            for d in 0..z.len() {
                r[d] -= q[l][d];
                r0[d] -= q0[l][d];
                zhat[d] += q[l][d];
            }
        }
        let zs: Vec<f64> = (0..z.len()).map(|d| zhat[d] + z[d] - z0[d]).collect();
        recon += match cfg.recon_mode {
            ReconMode::Decoder => sq(e, &mlp_forward(live.decoder.as_ref().unwrap(), &zs)),
            ReconMode::Latent => sq(&z, &zhat),
        };
        ste.push(zs);
    }
    let collab: f64 = pairs.iter().map(|&(i, j, a)| 2.0 * a * sq(&ste[i], &ste[j])).sum();
    recon / b + quant / b + cfg.collab_lambda * collab
}

/// Central-difference gradient of the surrogate over the flat parameters.
pub fn fd_gradient(
    model: &QuantizerModel,
    es: &[Vec<f64>],
    codes: &[Vec<usize>],
    pairs: &[(usize, usize, f64)],
    h: f64,
) -> Vec<f64> {
    let base = model.params_flat();
    let mut live = model.clone();
    (0..base.len())
        .map(|p| {
            let mut theta = base.clone();
            theta[p] = base[p] + h;
            live.set_params_flat(&theta);
            let up = surrogate_loss(&live, model, es, codes, pairs);
            theta[p] = base[p] - h;
            live.set_params_flat(&theta);
            let down = surrogate_loss(&live, model, es, codes, pairs);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise relative error, with a floor so that entries
/// that are both essentially zero do not blow up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn random_batch(seed: u64, n: usize, d: usize, k: usize, levels: usize) -> (Vec<Vec<f64>>, Vec<Vec<usize>>, Vec<(usize, usize, f64)>) {
    let mut rng = stream(seed, Stream::Corpus);
    let es = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let codes = (0..n).map(|_| (0..levels).map(|_| rng.random_range(0..k)).collect()).collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.4) {
                pairs.push((i, j, rng.random_range(0.0..1.0)));
            }
        }
    }
    (es, codes, pairs)
}

/// Identity-width latent model with no hidden layers.
pub fn config(d: usize, k: usize, levels: usize) -> QuantizerConfig {
    QuantizerConfig {
        input_dim: d,
        latent_dim: d,
        hidden_dims: vec![],
        levels,
        codes_per_level: k,
        recon_mode: ReconMode::Latent,
        ..Default::default()
    }
}

pub fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
    let d = rows[0].len();
    EmbeddingTable::from_rows(d, rows.into_iter().enumerate().map(|(i, v)| (format!("tool_{i:03}"), v)).collect())
        .unwrap()
}

pub fn random_feasible_trial(seed: u64) -> CodeAssignment {
    let mut rng = stream(seed, Stream::Corpus);
    let k: usize = rng.random_range(2..=5);
    let levels: usize = rng.random_range(1..=3);
    let d = rng.random_range(1..=4);
    let cap = k.pow(levels as u32);
    let n = rng.random_range(1..=cap);
    let model = random_model(config(d, k, levels), &mut stream(seed, Stream::Init));
    // few distinct points so that many tools compete for the same path
    let distinct = rng.random_range(1..=n);
    let pool: Vec<Vec<f64>> = (0..distinct).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let rows = (0..n).map(|_| pool[rng.random_range(0..distinct)].clone()).collect();
    let s = SinkhornSettings { enabled: rng.random_bool(0.5), ..Default::default() };
    let out = assign_codes(&model, &table(rows), &s).unwrap();
    assert_eq!(out.assignment.len(), n);
    out.assignment
}

pub fn random_trie(rng: &mut Rng, k: usize, levels: usize, n: usize) -> CodeTrie {
    let mut paths = HashSet::new();
    while paths.len() < n {
        paths.insert((0..levels).map(|_| rng.random_range(0..k)).collect::<Vec<_>>());
    }
    let mut paths: Vec<_> = paths.into_iter().collect();
    paths.sort();
    let codes = paths.into_iter().enumerate().map(|(i, p)| (format!("t{i:02}"), p)).collect();
    build_trie(&CodeAssignment::new(levels, k, codes, 0).unwrap()).unwrap()
}

/// Scores drawn from a small set so that ties are frequent.
pub fn table_scorer(rng: &mut Rng, k: usize, levels: usize) -> impl Fn(&[usize]) -> Vec<f64> {
    let mut table = std::collections::HashMap::new();
    let mut stack = vec![vec![]];
    while let Some(p) = stack.pop() {
        if p.len() == levels {
            continue;
        }
        table.insert(p.clone(), (0..k).map(|_| -(rng.random_range(0..4) as f64) * 0.5).collect::<Vec<f64>>());
        for c in 0..k {
            let mut q = p.clone();
            q.push(c);
            stack.push(q);
        }
    }
    move |p: &[usize]| table[p].clone()
}

pub fn exhaustive(trie: &CodeTrie, scorer: &dyn Fn(&[usize]) -> Vec<f64>) -> Vec<Hit> {
    let mut all: Vec<Hit> = trie
        .leaves()
        .into_iter()
        .map(|(path, id)| {
            let score = (0..path.len()).map(|l| scorer(&path[..l])[path[l]]).sum();
            Hit { tool_id: id.to_string(), path, score }
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
    all
}
