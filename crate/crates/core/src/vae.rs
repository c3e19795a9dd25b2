//! Transformer VAE over weight-token sequences: per-layer MLP embeddings with
//! learned positional embeddings, post-norm transformer blocks, per-token
//! Gaussian posterior, mirrored decoder with per-layer output MLPs, and ELBO
//! training on a corpus of expert payloads.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::layers::{
    self, init_attention, init_ffn, init_linear, init_norm, BoundParams, ParamStore,
};
use crate::nn::{adam_step, one_cycle_lr, AdamState, Tape, Tensor, Var};
use crate::tokenizer::{tokenize, TokenSeq, WeightSchema};
use crate::util::{format_f64, randn_vec, seeded_rng};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VaeConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_z: usize,
    /// KL weight in the ELBO.
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            d_model: 128,
            layers: 2,
            heads: 8,
            d_z: 32,
            beta: 1e-6,
            lr: 1e-4,
            weight_decay: 3e-9,
            batch: 32,
            epochs: 500,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.d_z == 0 || self.layers == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("d_z, layers, batch and epochs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        Ok(())
    }
}

/// Per-schema-layer standardization of token values, computed corpus-wide.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl TokenStats {
    /// Corpus-wide per-layer mean/std over every token value.
    pub fn from_corpus(schema: &WeightSchema, corpus: &[TokenSeq]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("empty token corpus".into()));
        }
        let l = schema.layers.len();
        let mut means = vec![0.0; l];
        let mut stds = vec![0.0; l];
        for li in 0..l {
            let mut sum = 0.0;
            let mut count = 0usize;
            for seq in corpus {
                sum += seq[li].data.iter().sum::<f64>();
                count += seq[li].data.len();
            }
            let mean = sum / count as f64;
            let mut var = 0.0;
            for seq in corpus {
                var += seq[li].data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            means[li] = mean;
            stds[li] = (var / count as f64).sqrt().max(1e-12);
        }
        Ok(TokenStats { means, stds })
    }

    pub fn normalize(&self, seq: &TokenSeq) -> TokenSeq {
        seq.iter()
            .enumerate()
            .map(|(li, t)| Tensor {
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| (v - self.means[li]) / self.stds[li]).collect(),
            })
            .collect()
    }

    pub fn denormalize(&self, seq: &TokenSeq) -> TokenSeq {
        seq.iter()
            .enumerate()
            .map(|(li, t)| Tensor {
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| v * self.stds[li] + self.means[li]).collect(),
            })
            .collect()
    }

    pub fn to_metadata(&self) -> String {
        self.means
            .iter()
            .zip(&self.stds)
            .map(|(m, s)| format!("{},{}", format_f64(*m), format_f64(*s)))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_metadata(s: &str) -> Result<Self> {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for part in s.split(';') {
            let (m, sd) = part
                .split_once(',')
                .ok_or_else(|| Error::Artifact(format!("bad token stats entry '{part}'")))?;
            means.push(m.parse::<f64>().map_err(|e| Error::Artifact(e.to_string()))?);
            stds.push(sd.parse::<f64>().map_err(|e| Error::Artifact(e.to_string()))?);
        }
        Ok(TokenStats { means, stds })
    }
}

fn init_block(
    store: &mut ParamStore,
    name: &str,
    d_model: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    init_attention(store, &format!("{name}.attn"), d_model, rng)?;
    init_norm(store, &format!("{name}.norm1"), d_model)?;
    init_ffn(store, &format!("{name}.ffn"), d_model, rng)?;
    init_norm(store, &format!("{name}.norm2"), d_model)
}

/// Post-norm transformer block: attention, add & norm, FFN, add & norm.
fn block_forward(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    h: Var,
    heads: usize,
) -> Result<Var> {
    let a = layers::multi_head_attention(tape, p, &format!("{name}.attn"), h, heads)?;
    let s = tape.add(h, a)?;
    let h = layers::layer_norm(tape, p, &format!("{name}.norm1"), s)?;
    let f = layers::ffn(tape, p, &format!("{name}.ffn"), h)?;
    let s = tape.add(h, f)?;
    layers::layer_norm(tape, p, &format!("{name}.norm2"), s)
}

/// Register all VAE parameters for a fixed schema. Registration order is the
/// checkpoint schema order.
pub fn init_vae(
    store: &mut ParamStore,
    cfg: &VaeConfig,
    schema: &WeightSchema,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    if schema.layers.is_empty() {
        return Err(Error::Config("weight schema has no layers".into()));
    }
    let d = cfg.d_model;
    let m = schema.total_tokens();
    // layer-wise embedding MLPs f_l: token_dim -> d_model -> d_model
    for (li, layer) in schema.layers.iter().enumerate() {
        init_linear(store, &format!("embed{li}.fc1"), d, layer.token_dim, rng)?;
        init_linear(store, &format!("embed{li}.fc2"), d, d, rng)?;
    }
    store.insert("enc_pos", Tensor::zeros(vec![m, d]))?;
    for b in 0..cfg.layers {
        init_block(store, &format!("enc{b}"), d, rng)?;
    }
    init_linear(store, "mu", cfg.d_z, d, rng)?;
    init_linear(store, "logvar", cfg.d_z, d, rng)?;
    // decoder
    init_linear(store, "lift", d, cfg.d_z, rng)?;
    store.insert("dec_pos", Tensor::zeros(vec![m, d]))?;
    for b in 0..cfg.layers {
        init_block(store, &format!("dec{b}"), d, rng)?;
    }
    // layer-wise output MLPs g_l: d_model -> d_model -> token_dim
    for (li, layer) in schema.layers.iter().enumerate() {
        init_linear(store, &format!("out{li}.fc1"), d, d, rng)?;
        init_linear(store, &format!("out{li}.fc2"), layer.token_dim, d, rng)?;
    }
    Ok(())
}

fn check_seq(schema: &WeightSchema, seq: &[Var], tape: &Tape) -> Result<()> {
    if seq.len() != schema.layers.len() {
        return Err(Error::Shape(format!(
            "{} token layers for a schema of {}",
            seq.len(),
            schema.layers.len()
        )));
    }
    for (layer, v) in schema.layers.iter().zip(seq) {
        let s = &tape.value(*v).shape;
        if *s != vec![layer.tokens, layer.token_dim] {
            return Err(Error::Shape(format!(
                "layer {}: token shape {s:?}, expected ({}, {})",
                layer.name, layer.tokens, layer.token_dim
            )));
        }
    }
    Ok(())
}

/// Map normalized token tensors (one Var per schema layer) to a single
/// (M, d_model) embedding with positional embeddings added.
pub fn embed_tokens(
    tape: &mut Tape,
    p: &BoundParams,
    schema: &WeightSchema,
    seq: &[Var],
) -> Result<Var> {
    check_seq(schema, seq, tape)?;
    let mut parts = Vec::with_capacity(seq.len());
    for (li, v) in seq.iter().enumerate() {
        let h = layers::linear(tape, p, &format!("embed{li}.fc1"), *v)?;
        let h = tape.relu(h);
        parts.push(layers::linear(tape, p, &format!("embed{li}.fc2"), h)?);
    }
    let h = tape.concat_rows(&parts)?;
    let pos = p.var("enc_pos")?;
    tape.add(h, pos)
}

/// Encoder: embeddings -> transformer blocks -> per-token mu and clamped
/// log-variance.
pub fn encode(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &VaeConfig,
    h: Var,
) -> Result<(Var, Var)> {
    let mut h = h;
    for b in 0..cfg.layers {
        h = block_forward(tape, p, &format!("enc{b}"), h, cfg.heads)?;
    }
    let mu = layers::linear(tape, p, "mu", h)?;
    let lv = layers::linear(tape, p, "logvar", h)?;
    let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    Ok((mu, lv))
}

/// z = mu + exp(logvar / 2) * noise.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let scaled = tape.mul(sigma, noise)?;
    tape.add(mu, scaled)
}

/// Decoder: latent tokens -> lifted sequence -> transformer blocks ->
/// per-layer output MLPs, returning one Var per schema layer (normalized
/// token scale).
pub fn decode(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &VaeConfig,
    schema: &WeightSchema,
    z: Var,
) -> Result<Vec<Var>> {
    let zs = &tape.value(z).shape;
    let m = schema.total_tokens();
    if *zs != vec![m, cfg.d_z] {
        return Err(Error::Shape(format!(
            "latent shape {zs:?}, expected ({m}, {})",
            cfg.d_z
        )));
    }
    let mut h = layers::linear(tape, p, "lift", z)?;
    let pos = p.var("dec_pos")?;
    h = tape.add(h, pos)?;
    for b in 0..cfg.layers {
        h = block_forward(tape, p, &format!("dec{b}"), h, cfg.heads)?;
    }
    let mut out = Vec::with_capacity(schema.layers.len());
    let mut row = 0;
    for (li, layer) in schema.layers.iter().enumerate() {
        let hl = tape.slice_rows(h, row, row + layer.tokens)?;
        row += layer.tokens;
        let g = layers::linear(tape, p, &format!("out{li}.fc1"), hl)?;
        let g = tape.relu(g);
        out.push(layers::linear(tape, p, &format!("out{li}.fc2"), g)?);
    }
    Ok(out)
}

/// ELBO (minimized): value-mean reconstruction MSE plus beta-weighted KL.
pub fn elbo_loss(
    tape: &mut Tape,
    schema: &WeightSchema,
    original: &[Var],
    recon: &[Var],
    mu: Var,
    logvar: Var,
    beta: f64,
) -> Result<Var> {
    check_seq(schema, original, tape)?;
    check_seq(schema, recon, tape)?;
    let mut se: Option<Var> = None;
    for (o, r) in original.iter().zip(recon) {
        let d = tape.sub(*r, *o)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum_all(sq);
        se = Some(match se {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let mse = tape.scale(se.unwrap(), 1.0 / schema.total_values as f64);
    let kl = layers::gaussian_kl(tape, mu, logvar)?;
    let klb = tape.scale(kl, beta);
    tape.add(mse, klb)
}

/// Bind a normalized token sequence as non-grad leaves.
pub fn seq_leaves(tape: &mut Tape, seq: &TokenSeq) -> Vec<Var> {
    seq.iter().map(|t| tape.leaf(t.clone(), false)).collect()
}

#[derive(Debug, Clone)]
pub struct VaeTrainReport {
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// Train the VAE on a corpus of flat payloads sharing one schema.
pub fn train_vae(
    cfg: &VaeConfig,
    schema: &WeightSchema,
    payloads: &[Vec<f64>],
    seed: u64,
) -> Result<(ParamStore, TokenStats, VaeTrainReport)> {
    cfg.validate()?;
    if payloads.len() < 2 {
        return Err(Error::Config(format!(
            "VAE training needs at least 2 experts, got {}",
            payloads.len()
        )));
    }
    let corpus: Vec<TokenSeq> = payloads
        .iter()
        .map(|p| tokenize(schema, p))
        .collect::<Result<_>>()?;
    let stats = TokenStats::from_corpus(schema, &corpus)?;
    let normalized: Vec<TokenSeq> = corpus.iter().map(|s| stats.normalize(s)).collect();

    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(seed, "vae-init");
    init_vae(&mut store, cfg, schema, &mut init_rng)?;
    let mut adam = AdamState::new(&store, cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = seeded_rng(seed, "vae-shuffle");
    let mut noise_rng = seeded_rng(seed, "vae-noise");
    let m = schema.total_tokens();

    let batches_per_epoch = normalized.len().div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut step = 0u64;
    let mut first_epoch_loss = f64::NAN;
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..normalized.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut batch_loss: Option<Var> = None;
            for &idx in chunk {
                let seq = seq_leaves(&mut tape, &normalized[idx]);
                let h = embed_tokens(&mut tape, &bound, schema, &seq)?;
                let (mu, lv) = encode(&mut tape, &bound, cfg, h)?;
                let noise = tape.leaf(
                    Tensor::new(vec![m, cfg.d_z], randn_vec(&mut noise_rng, m * cfg.d_z))?,
                    false,
                );
                let z = reparameterize(&mut tape, mu, lv, noise)?;
                let recon = decode(&mut tape, &bound, cfg, schema, z)?;
                let item = elbo_loss(&mut tape, schema, &seq, &recon, mu, lv, cfg.beta)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, item)?,
                    None => item,
                });
            }
            let loss = tape.scale(batch_loss.unwrap(), 1.0 / chunk.len() as f64);
            let loss_v = tape
                .scalar_value(loss)
                .map_err(|e| Error::Numeric(format!("VAE epoch {epoch}: {e}")))?;
            tape.backward(loss)?;
            store.zero_grads();
            store.accumulate_grads(&tape, &bound);
            step += 1;
            adam.lr = one_cycle_lr(step, total_steps, cfg.lr);
            adam_step(&mut store, &mut adam, step)
                .map_err(|e| Error::Numeric(format!("VAE epoch {epoch}: {e}")))?;
            epoch_loss += loss_v;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        if epoch == 0 {
            first_epoch_loss = epoch_loss;
        }
        last_epoch_loss = epoch_loss;
    }
    Ok((store, stats, VaeTrainReport { first_epoch_loss, last_epoch_loss }))
}

/// Posterior-mean latent of one payload (no sampling, no gradients).
pub fn encode_payload(
    cfg: &VaeConfig,
    schema: &WeightSchema,
    store: &ParamStore,
    stats: &TokenStats,
    payload: &[f64],
) -> Result<Tensor> {
    let seq = stats.normalize(&tokenize(schema, payload)?);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vars = seq_leaves(&mut tape, &seq);
    let h = embed_tokens(&mut tape, &bound, schema, &vars)?;
    let (mu, _) = encode(&mut tape, &bound, cfg, h)?;
    tape.check_finite()?;
    Ok(tape.value(mu).clone())
}

/// Decode a latent token tensor back to a flat payload.
pub fn decode_latent(
    cfg: &VaeConfig,
    schema: &WeightSchema,
    store: &ParamStore,
    stats: &TokenStats,
    z: &Tensor,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let zv = tape.leaf(z.clone(), false);
    let recon = decode(&mut tape, &bound, cfg, schema, zv)?;
    tape.check_finite()?;
    let seq: TokenSeq = recon.iter().map(|v| tape.value(*v).clone()).collect();
    crate::tokenizer::detokenize(schema, &stats.denormalize(&seq))
}
