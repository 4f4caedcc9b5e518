//! Residual quantizer over projected tool embeddings.
//!
//! An encoder MLP maps each embedding `e` to a latent `z`; `L` codebooks then
//! quantize the running residual greedily, so `z ~ sum_l v[l][i_l]`.

mod kmeans;
mod mlp;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sinkhorn::SinkhornSettings;

pub use kmeans::{kmeans, nearest, KMeansResult};
pub use mlp::{silu, silu_grad, Layer, Mlp, Trace};
pub use optim::AdamW;
pub use train::{fit, initialize, loss_terms, loss_terms_with_codes, Gradients, LossOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    /// Reconstruct the input embedding through a mirrored decoder.
    #[default]
    Decoder,
    /// Penalize `||z - zhat||^2` in latent space.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub levels: usize,
    pub codes_per_level: usize,
    pub commitment_beta: f64,
    pub collab_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub kmeans_max_iters: usize,
    pub recon_mode: ReconMode,
    /// Re-seed codes that went unused for a whole epoch.
    pub reseed_dead_codes: bool,
    pub sinkhorn: SinkhornSettings,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            latent_dim: 64,
            hidden_dims: vec![1024, 512, 256, 128],
            levels: 2,
            codes_per_level: 1024,
            commitment_beta: 0.25,
            collab_lambda: 1.0,
            learning_rate: 1e-5,
            batch_size: 5096,
            epochs: 100,
            warmup_epochs: 50,
            weight_decay: 0.0,
            kmeans_max_iters: 100,
            recon_mode: ReconMode::Decoder,
            reseed_dead_codes: true,
            sinkhorn: SinkhornSettings::default(),
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels == 0 {
            return fail("levels must be >= 1");
        }
        if self.codes_per_level < 2 {
            return fail("codes_per_level must be >= 2");
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_dims.contains(&0) {
            return fail("layer widths must be positive");
        }
        if self.latent_dim > self.input_dim {
            return fail("latent_dim must not exceed input_dim");
        }
        if !(self.commitment_beta >= 0.0 && self.commitment_beta.is_finite()) {
            return fail("commitment_beta must be >= 0");
        }
        if !(self.collab_lambda >= 0.0 && self.collab_lambda.is_finite()) {
            return fail("collab_lambda must be >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.sinkhorn.epsilon > 0.0 && self.sinkhorn.epsilon.is_finite()) {
            return fail("sinkhorn.epsilon must be positive");
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.latent_dim);
        d
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut d = self.encoder_dims();
        d.reverse();
        d
    }

    /// Number of distinct code sequences, saturating at `u128::MAX`.
    pub fn capacity(&self) -> u128 {
        (self.codes_per_level as u128)
            .checked_pow(self.levels as u32)
            .unwrap_or(u128::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// 1-based level.
    pub level: usize,
    pub centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub quant: f64,
    pub collab: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, quant: f64, collab: f64, lambda: f64) -> Self {
        Self {
            recon,
            quant,
            collab,
            total: recon + quant + lambda * collab,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("quant", self.quant),
            ("collab", self.collab),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub config: QuantizerConfig,
    pub encoder: Mlp,
    pub decoder: Option<Mlp>,
    pub codebooks: Vec<Codebook>,
    pub training_log: Vec<LossBreakdown>,
}

/// Output of greedy residual quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    pub zhat: Vec<f64>,
    /// `r_1 = z` through `r_{L+1}`.
    pub residuals: Vec<Vec<f64>>,
}

impl QuantizerModel {
    /// Check that every tensor agrees with the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let check_mlp = |m: &Mlp, dims: &[usize], name: &str| -> Result<()> {
            if m.layers.len() + 1 != dims.len() {
                return Err(Error::schema(name, "layer count does not match config"));
            }
            for (i, l) in m.layers.iter().enumerate() {
                if l.inputs != dims[i]
                    || l.outputs != dims[i + 1]
                    || l.weights.len() != l.inputs * l.outputs
                    || l.bias.len() != l.outputs
                {
                    return Err(Error::schema(format!("{name}.layers[{i}]"), "shape mismatch"));
                }
                if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                    return Err(Error::schema(format!("{name}.layers[{i}]"), "non-finite value"));
                }
            }
            Ok(())
        };
        check_mlp(&self.encoder, &c.encoder_dims(), "encoder")?;
        match (&self.decoder, c.recon_mode) {
            (Some(d), ReconMode::Decoder) => check_mlp(d, &c.decoder_dims(), "decoder")?,
            (None, ReconMode::Latent) => {}
            _ => return Err(Error::schema("decoder", "presence does not match recon_mode")),
        }
        if self.codebooks.len() != c.levels {
            return Err(Error::schema("codebooks", "count does not match levels"));
        }
        for (l, cb) in self.codebooks.iter().enumerate() {
            if cb.level != l + 1
                || cb.centroids.len() != c.codes_per_level
                || cb.centroids.iter().any(|v| v.len() != c.latent_dim)
            {
                return Err(Error::schema(format!("codebooks[{l}]"), "shape mismatch"));
            }
            if cb.centroids.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::schema(format!("codebooks[{l}]"), "non-finite value"));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codes_per_level(&self) -> usize {
        self.config.codes_per_level
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.as_ref().map_or(0, Mlp::param_count)
            + self
                .codebooks
                .iter()
                .map(|c| c.centroids.len() * c.dim())
                .sum::<usize>()
    }

    /// All parameters in a fixed order: encoder, decoder, codebooks.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.tensors().for_each(|t| out.extend_from_slice(t));
        if let Some(d) = &self.decoder {
            d.tensors().for_each(|t| out.extend_from_slice(t));
        }
        for cb in &self.codebooks {
            cb.centroids.iter().for_each(|v| out.extend_from_slice(v));
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        self.encoder.tensors_mut().for_each(&mut take);
        if let Some(d) = &mut self.decoder {
            d.tensors_mut().for_each(&mut take);
        }
        for cb in &mut self.codebooks {
            cb.centroids.iter_mut().for_each(|v| take(v));
        }
    }

    /// Flat offset of centroid `code` at 0-based `level`.
    pub fn centroid_offset(&self, level: usize, code: usize) -> usize {
        let mut off = self.encoder.param_count() + self.decoder.as_ref().map_or(0, Mlp::param_count);
        for cb in &self.codebooks[..level] {
            off += cb.centroids.len() * cb.dim();
        }
        off + code * self.codebooks[level].dim()
    }
}

/// Project an input embedding into latent space.
pub fn encode(model: &QuantizerModel, e: &[f64]) -> Result<Vec<f64>> {
    if e.len() != model.encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: model.encoder.input_dim(),
            found: e.len(),
        });
    }
    Ok(model.encoder.forward(e))
}

/// Map a latent back to input space; requires decoder mode.
pub fn decode(model: &QuantizerModel, zhat: &[f64]) -> Result<Vec<f64>> {
    let dec = model
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Config("model has no decoder (latent recon_mode)".into()))?;
    if zhat.len() != dec.input_dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: dec.input_dim(),
            found: zhat.len(),
        });
    }
    Ok(dec.forward(zhat))
}

/// Nearest centroid of `r` (ties to the smallest index) and the residual
/// left after subtracting it.
pub fn quantize_level(r: &[f64], cb: &Codebook) -> (usize, Vec<f64>) {
    let (k, _) = nearest(r, &cb.centroids);
    let next = r.iter().zip(&cb.centroids[k]).map(|(a, b)| a - b).collect();
    (k, next)
}

/// Greedy residual quantization through every level.
pub fn quantize(model: &QuantizerModel, z: &[f64]) -> Quantized {
    quantize_codebooks(&model.codebooks, z)
}

pub fn quantize_codebooks(codebooks: &[Codebook], z: &[f64]) -> Quantized {
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    residuals.push(z.to_vec());
    let mut indices = Vec::with_capacity(codebooks.len());
    let mut zhat = vec![0.0; z.len()];
    for cb in codebooks {
        let (k, next) = quantize_level(residuals.last().unwrap(), cb);
        zhat.iter_mut().zip(&cb.centroids[k]).for_each(|(s, v)| *s += v);
        indices.push(k);
        residuals.push(next);
    }
    Quantized {
        indices,
        zhat,
        residuals,
    }
}

/// `zhat` for an explicit code path.
pub fn reconstruct_path(codebooks: &[Codebook], path: &[usize]) -> Vec<f64> {
    let dim = codebooks.first().map_or(0, Codebook::dim);
    let mut zhat = vec![0.0; dim];
    for (cb, &k) in codebooks.iter().zip(path) {
        zhat.iter_mut().zip(&cb.centroids[k]).for_each(|(s, v)| *s += v);
    }
    zhat
}
