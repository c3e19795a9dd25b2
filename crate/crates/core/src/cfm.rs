//! Conditional flow matching in the VAE latent space: Gaussian-bridge paths
//! with a constant target velocity, an AdaLN-conditioned transformer vector
//! field, and forward-Euler generation of latents for unseen coefficients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{
    self, init_attention, init_ffn, init_linear, init_norm, BoundParams, ParamStore,
};
use crate::nn::{adam_step, one_cycle_lr, AdamState, Tape, Tensor, Var};
use crate::util::{format_f64, randn_vec, seeded_rng};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CfmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Standard deviation of the Gaussian bridge around the straight path.
    pub sigma_path: f64,
    /// Euler integration steps at generation time.
    pub n_steps: usize,
    /// Dimensionality of the coefficient vector e.
    pub condition_dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for CfmConfig {
    fn default() -> Self {
        CfmConfig {
            d_model: 128,
            layers: 4,
            heads: 2,
            dropout: 0.1,
            sigma_path: 0.0,
            n_steps: 100,
            condition_dim: 1,
            lr: 1e-4,
            batch: 64,
            epochs: 500,
        }
    }
}

impl CfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.sigma_path < 0.0 || !self.sigma_path.is_finite() {
            return Err(Error::Config(format!("sigma_path must be >= 0, got {}", self.sigma_path)));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.condition_dim == 0 || self.layers == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "condition_dim, layers, batch and epochs must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// z_t = (1 - t) z0 + t z1 + sigma * noise.
pub fn sample_path_point(
    z0: &Tensor,
    z1: &Tensor,
    t: f64,
    sigma_path: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if z0.shape != z1.shape {
        return Err(Error::Shape(format!(
            "path endpoints {:?} vs {:?}",
            z0.shape, z1.shape
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("path time {t} outside [0, 1]")));
    }
    let mut data: Vec<f64> = z0
        .data
        .iter()
        .zip(&z1.data)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    if sigma_path > 0.0 {
        let noise = noise.ok_or_else(|| Error::Config("sigma_path > 0 needs noise".into()))?;
        if noise.shape != z0.shape {
            return Err(Error::Shape("noise shape mismatch".into()));
        }
        for (d, n) in data.iter_mut().zip(&noise.data) {
            *d += sigma_path * n;
        }
    }
    Ok(Tensor { shape: z0.shape.clone(), data })
}

/// Constant bridge velocity u = z1 - z0 (independent of t).
pub fn target_velocity(z0: &Tensor, z1: &Tensor) -> Result<Tensor> {
    if z0.shape != z1.shape {
        return Err(Error::Shape(format!(
            "velocity endpoints {:?} vs {:?}",
            z0.shape, z1.shape
        )));
    }
    Ok(Tensor {
        shape: z0.shape.clone(),
        data: z1.data.iter().zip(&z0.data).map(|(b, a)| b - a).collect(),
    })
}

/// Sinusoidal time embedding with d/2 frequency pairs, t in [0, 1].
pub fn time_embedding(t: f64, d: usize) -> Vec<f64> {
    let pairs = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..pairs {
        let freq = 1.0 / 10000f64.powf(i as f64 / pairs.max(1) as f64);
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// Normalize a coefficient vector to [0, 1] per coordinate using dataset
/// manifest ranges; values beyond twice the range are clamped with a warning.
pub fn normalize_condition(e: &[f64], ranges: &[(f64, f64)]) -> Result<(Vec<f64>, bool)> {
    if e.len() != ranges.len() {
        return Err(Error::Shape(format!(
            "condition has {} coefficients, ranges describe {}",
            e.len(),
            ranges.len()
        )));
    }
    let mut out = Vec::with_capacity(e.len());
    let mut clamped = false;
    for (v, (lo, hi)) in e.iter().zip(ranges) {
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite coefficient {v}")));
        }
        let w = hi - lo;
        let norm = if w > 0.0 { (v - lo) / w } else { 0.0 };
        // allow extrapolation up to half a range width beyond each end
        if !(-0.5..=1.5).contains(&norm) {
            clamped = true;
            out.push(norm.clamp(-0.5, 1.5));
        } else {
            out.push(norm);
        }
    }
    Ok((out, clamped))
}

/// Register the vector-field network for latents of shape (tokens, d_z).
pub fn init_cfm(
    store: &mut ParamStore,
    cfg: &CfmConfig,
    d_z: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    if d_z == 0 {
        return Err(Error::Config("latent dimension must be positive".into()));
    }
    let d = cfg.d_model;
    init_linear(store, "cond.fc1", d, cfg.condition_dim, rng)?;
    init_linear(store, "cond.fc2", d, d, rng)?;
    init_linear(store, "lift", d, d_z, rng)?;
    for b in 0..cfg.layers {
        // AdaLN producers start as the identity modulation: gamma = 1, beta = 0
        init_linear(store, &format!("blk{b}.gamma.fc1"), d, d, rng)?;
        init_linear(store, &format!("blk{b}.gamma.fc2"), d, d, rng)?;
        {
            let w = store.get_mut(&format!("blk{b}.gamma.fc2.w"))?;
            w.data.iter_mut().for_each(|v| *v = 0.0);
            let bias = store.get_mut(&format!("blk{b}.gamma.fc2.b"))?;
            bias.data.iter_mut().for_each(|v| *v = 1.0);
        }
        init_linear(store, &format!("blk{b}.beta.fc1"), d, d, rng)?;
        init_linear(store, &format!("blk{b}.beta.fc2"), d, d, rng)?;
        store
            .get_mut(&format!("blk{b}.beta.fc2.w"))?
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        init_attention(store, &format!("blk{b}.attn"), d, rng)?;
        init_norm(store, &format!("blk{b}.norm2"), d)?;
        init_ffn(store, &format!("blk{b}.ffn"), d, rng)?;
    }
    init_linear(store, "head", d_z, d, rng)
}

/// cond = MLP(normalized e) + sinusoidal(t), as a (1, d_model) Var.
pub fn embed_condition(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &CfmConfig,
    e_norm: &[f64],
    t: f64,
) -> Result<Var> {
    if e_norm.len() != cfg.condition_dim {
        return Err(Error::Shape(format!(
            "condition dim {} != configured {}",
            e_norm.len(),
            cfg.condition_dim
        )));
    }
    let ev = tape.leaf(Tensor::new(vec![1, cfg.condition_dim], e_norm.to_vec())?, false);
    let h = layers::linear(tape, p, "cond.fc1", ev)?;
    let h = tape.relu(h);
    let h = layers::linear(tape, p, "cond.fc2", h)?;
    let te = tape.leaf(Tensor::new(vec![1, cfg.d_model], time_embedding(t, cfg.d_model))?, false);
    tape.add(h, te)
}

/// gamma(cond) * LayerNorm(h) + beta(cond), per channel.
pub fn adaln_modulate(
    tape: &mut Tape,
    p: &BoundParams,
    block: &str,
    h: Var,
    cond: Var,
) -> Result<Var> {
    let d = tape.value(cond).last_dim();
    let g = layers::linear(tape, p, &format!("{block}.gamma.fc1"), cond)?;
    let g = tape.relu(g);
    let g = layers::linear(tape, p, &format!("{block}.gamma.fc2"), g)?;
    let gamma = tape.reshape(g, vec![d])?;
    let b = layers::linear(tape, p, &format!("{block}.beta.fc1"), cond)?;
    let b = tape.relu(b);
    let b = layers::linear(tape, p, &format!("{block}.beta.fc2"), b)?;
    let beta = tape.reshape(b, vec![d])?;
    let n = tape.layer_norm_rows(h);
    let scaled = tape.mul_row(n, gamma)?;
    tape.add_row(scaled, beta)
}

/// v_xi(z_t, t, e): lift to d_model, `layers` blocks of AdaLN-modulated
/// attention plus a plain pre-norm FFN, then a head back to d_z.
/// Dropout is active only when `dropout_rng` is provided (training mode).
pub fn vector_field_forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &CfmConfig,
    z_t: Var,
    cond: Var,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Var> {
    let zs = tape.value(z_t).shape.clone();
    if zs.len() != 2 {
        return Err(Error::Shape(format!("latent must be 2-D, got {zs:?}")));
    }
    let mut h = layers::linear(tape, p, "lift", z_t)?;
    for b in 0..cfg.layers {
        let name = format!("blk{b}");
        let m = adaln_modulate(tape, p, &name, h, cond)?;
        let mut a = layers::multi_head_attention(tape, p, &format!("{name}.attn"), m, cfg.heads)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            a = layers::dropout(tape, a, cfg.dropout, rng)?;
        }
        h = tape.add(h, a)?;
        let n = layers::layer_norm(tape, p, &format!("{name}.norm2"), h)?;
        let mut f = layers::ffn(tape, p, &format!("{name}.ffn"), n)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            f = layers::dropout(tape, f, cfg.dropout, rng)?;
        }
        h = tape.add(h, f)?;
    }
    layers::linear(tape, p, "head", h)
}

/// Per-flattened-dimension standardization of the latent corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub shape: Vec<usize>,
}

impl LatentStats {
    pub fn from_corpus(latents: &[Tensor]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| Error::Config("empty latent corpus".into()))?;
        let n = first.numel();
        for l in latents {
            if l.shape != first.shape {
                return Err(Error::Shape("latent corpus shapes differ".into()));
            }
        }
        let count = latents.len() as f64;
        let mut mean = vec![0.0; n];
        for l in latents {
            for (m, v) in mean.iter_mut().zip(&l.data) {
                *m += v / count;
            }
        }
        let mut std = vec![0.0; n];
        for l in latents {
            for (s, (v, m)) in std.iter_mut().zip(l.data.iter().zip(&mean)) {
                *s += (v - m) * (v - m) / count;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-12);
        }
        Ok(LatentStats { mean, std, shape: first.shape.clone() })
    }

    pub fn normalize(&self, z: &Tensor) -> Tensor {
        Tensor {
            shape: z.shape.clone(),
            data: z
                .data
                .iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
        }
    }

    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        Tensor {
            shape: z.shape.clone(),
            data: z
                .data
                .iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| v * s + m)
                .collect(),
        }
    }

    pub fn to_metadata(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let vals: Vec<String> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| format!("{},{}", format_f64(*m), format_f64(*s)))
            .collect();
        format!("{}|{}", dims.join("x"), vals.join(";"))
    }

    pub fn from_metadata(s: &str) -> Result<Self> {
        let (dims, vals) = s
            .split_once('|')
            .ok_or_else(|| Error::Artifact("bad latent stats metadata".into()))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|e| Error::Artifact(format!("bad latent shape: {e}"))))
            .collect::<Result<_>>()?;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for part in vals.split(';') {
            let (m, sd) = part
                .split_once(',')
                .ok_or_else(|| Error::Artifact(format!("bad latent stats entry '{part}'")))?;
            mean.push(m.parse::<f64>().map_err(|e| Error::Artifact(e.to_string()))?);
            std.push(sd.parse::<f64>().map_err(|e| Error::Artifact(e.to_string()))?);
        }
        Ok(LatentStats { mean, std, shape })
    }
}

/// One training item: target latent plus its coefficient vector.
pub type LatentCorpus = Vec<(Tensor, Vec<f64>)>;

/// Flow-matching regression loss over a batch: independently sampled priors
/// and times per item, squared error against the constant bridge velocity.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &CfmConfig,
    items: &[(Tensor, Vec<f64>)],
    ranges: &[(f64, f64)],
    prior_rng: &mut rand_chacha::ChaCha8Rng,
    time_rng: &mut rand_chacha::ChaCha8Rng,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Config("empty flow-matching batch".into()));
    }
    let mut drng = dropout_rng;
    let mut acc: Option<Var> = None;
    for (z1, e) in items {
        let z0 = Tensor::new(z1.shape.clone(), randn_vec(prior_rng, z1.numel()))?;
        let t: f64 = time_rng.gen_range(0.0..1.0);
        let noise = if cfg.sigma_path > 0.0 {
            Some(Tensor::new(z1.shape.clone(), randn_vec(prior_rng, z1.numel()))?)
        } else {
            None
        };
        let zt = sample_path_point(&z0, z1, t, cfg.sigma_path, noise.as_ref())?;
        let u = target_velocity(&z0, z1)?;
        let (e_norm, _) = normalize_condition(e, ranges)?;
        let cond = embed_condition(tape, bound, cfg, &e_norm, t)?;
        let zt_v = tape.leaf(zt, false);
        let u_v = tape.leaf(u, false);
        let v = vector_field_forward(tape, bound, cfg, zt_v, cond, drng.as_deref_mut())?;
        let item = layers::mse_loss(tape, v, u_v)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, item)?,
            None => item,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / items.len() as f64))
}

#[derive(Debug, Clone)]
pub struct CfmTrainReport {
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// Train the vector field on a latent corpus. Latents are standardized
/// per dimension; the statistics are returned for generation.
pub fn train_cfm(
    cfg: &CfmConfig,
    corpus: &LatentCorpus,
    ranges: &[(f64, f64)],
    seed: u64,
) -> Result<(ParamStore, LatentStats, CfmTrainReport)> {
    let (snaps, store, stats, report) = train_cfm_snapshots(cfg, corpus, ranges, seed, &[])?;
    debug_assert!(snaps.is_empty());
    Ok((store, stats, report))
}

/// As `train_cfm`, additionally capturing flat parameter snapshots after the
/// listed epochs (1-based counts) so a validation split can pick a checkpoint.
pub fn train_cfm_snapshots(
    cfg: &CfmConfig,
    corpus: &LatentCorpus,
    ranges: &[(f64, f64)],
    seed: u64,
    snapshot_epochs: &[usize],
) -> Result<(Vec<(usize, Vec<f64>)>, ParamStore, LatentStats, CfmTrainReport)> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Config(format!(
            "flow matching needs a corpus of at least 2 latents, got {}",
            corpus.len()
        )));
    }
    for (_, e) in corpus {
        if e.len() != cfg.condition_dim {
            return Err(Error::Config(format!(
                "coefficient vector of length {} does not match condition_dim {}",
                e.len(),
                cfg.condition_dim
            )));
        }
    }
    let latents: Vec<Tensor> = corpus.iter().map(|(z, _)| z.clone()).collect();
    let stats = LatentStats::from_corpus(&latents)?;
    let d_z = stats.shape[1];
    let normalized: LatentCorpus = corpus
        .iter()
        .map(|(z, e)| (stats.normalize(z), e.clone()))
        .collect();

    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(seed, "cfm-init");
    init_cfm(&mut store, cfg, d_z, &mut init_rng)?;
    let mut adam = AdamState::new(&store, cfg.lr, 0.0);
    let mut shuffle_rng = seeded_rng(seed, "cfm-shuffle");
    let mut prior_rng = seeded_rng(seed, "cfm-prior");
    let mut time_rng = seeded_rng(seed, "cfm-time");
    let mut dropout_rng = seeded_rng(seed, "cfm-dropout");

    let batches_per_epoch = normalized.len().div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut step = 0u64;
    let mut first_epoch_loss = f64::NAN;
    let mut last_epoch_loss = f64::NAN;
    let mut snapshots = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..normalized.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let items: Vec<(Tensor, Vec<f64>)> =
                chunk.iter().map(|&i| normalized[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = batch_loss(
                &mut tape,
                &bound,
                cfg,
                &items,
                ranges,
                &mut prior_rng,
                &mut time_rng,
                Some(&mut dropout_rng),
            )?;
            let loss_v = tape
                .scalar_value(loss)
                .map_err(|e| Error::Numeric(format!("CFM epoch {epoch}: {e}")))?;
            tape.backward(loss)?;
            store.zero_grads();
            store.accumulate_grads(&tape, &bound);
            step += 1;
            adam.lr = one_cycle_lr(step, total_steps, cfg.lr);
            adam_step(&mut store, &mut adam, step)
                .map_err(|e| Error::Numeric(format!("CFM epoch {epoch}: {e}")))?;
            epoch_loss += loss_v;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        if epoch == 0 {
            first_epoch_loss = epoch_loss;
        }
        last_epoch_loss = epoch_loss;
        if snapshot_epochs.contains(&(epoch + 1)) {
            snapshots.push((epoch + 1, store.flat_payload()));
        }
    }
    Ok((snapshots, store, stats, CfmTrainReport { first_epoch_loss, last_epoch_loss }))
}

/// Latent path from a seeded prior draw to the generated endpoint, both in
/// the original (de-standardized) latent scale. `path[0]` is z0, `path[n]`
/// is the result of n forward-Euler steps.
pub fn generate_latent(
    cfg: &CfmConfig,
    store: &ParamStore,
    stats: &LatentStats,
    ranges: &[(f64, f64)],
    e_new: &[f64],
    seed: u64,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (e_norm, clamped) = normalize_condition(e_new, ranges)?;
    if clamped {
        eprintln!(
            "warning: condition {:?} outside twice the training range; clamped",
            e_new
        );
    }
    let mut rng = seeded_rng(seed, "cfm-generate-prior");
    let mut z = Tensor::new(stats.shape.clone(), randn_vec(&mut rng, stats.shape.iter().product()))?;
    let n = cfg.n_steps;
    let mut path = Vec::with_capacity(n + 1);
    path.push(stats.denormalize(&z));
    for k in 0..n {
        let t = k as f64 / n as f64;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let cond = embed_condition(&mut tape, &bound, cfg, &e_norm, t)?;
        let zv = tape.leaf(z.clone(), false);
        let v = vector_field_forward(&mut tape, &bound, cfg, zv, cond, None)?;
        tape.check_finite()
            .map_err(|e| Error::Numeric(format!("generation step {k}: {e}")))?;
        let vv = tape.value(v);
        for (zi, vi) in z.data.iter_mut().zip(&vv.data) {
            *zi += vi / n as f64;
        }
        if z.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent at generation step {k}")));
        }
        path.push(stats.denormalize(&z));
    }
    Ok((path[n].clone(), path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn toy_cfg() -> CfmConfig {
        CfmConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            sigma_path: 0.0,
            n_steps: 20,
            condition_dim: 1,
            lr: 3e-3,
            batch: 8,
            epochs: 50,
        }
    }

    fn t1(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![1, n], data).unwrap()
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let z0 = t1(vec![0.0, 0.0]);
        let z1 = t1(vec![2.0, 2.0]);
        assert_eq!(sample_path_point(&z0, &z1, 0.0, 0.0, None).unwrap().data, z0.data);
        assert_eq!(sample_path_point(&z0, &z1, 1.0, 0.0, None).unwrap().data, z1.data);
        assert_eq!(sample_path_point(&z0, &z1, 0.5, 0.0, None).unwrap().data, vec![1.0, 1.0]);
        assert!(sample_path_point(&z0, &z1, 1.5, 0.0, None).is_err());
    }

    #[test]
    fn velocity_is_constant_difference() {
        let z0 = t1(vec![0.0, 1.0]);
        let z1 = t1(vec![1.0, 1.0]);
        let u = target_velocity(&z0, &z1).unwrap();
        assert_eq!(u.data, vec![1.0, 0.0]);
        assert_eq!(target_velocity(&z0, &z0).unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn time_embedding_zero_phase() {
        let e = time_embedding(0.0, 8);
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        assert_ne!(time_embedding(0.3, 8), time_embedding(0.7, 8));
    }

    #[test]
    fn condition_normalization() {
        let ranges = [(0.2, 0.4), (0.02, 0.02)];
        let (n, clamped) = normalize_condition(&[0.2, 0.02], &ranges).unwrap();
        assert_eq!(n, vec![0.0, 0.0]);
        assert!(!clamped);
        let (n, _) = normalize_condition(&[0.4, 0.02], &ranges).unwrap();
        assert_eq!(n[0], 1.0);
        let (n, clamped) = normalize_condition(&[1.0, 0.02], &ranges).unwrap();
        assert!(clamped);
        assert_eq!(n[0], 1.5);
        assert!(normalize_condition(&[0.3], &ranges).is_err());
    }

    #[test]
    fn adaln_is_identity_at_init() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0, "adaln-init");
        init_cfm(&mut store, &cfg, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let cond = embed_condition(&mut tape, &bound, &cfg, &[0.4], 0.3).unwrap();
        let h = tape.leaf(
            Tensor::new(vec![2, 16], (0..32).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap(),
            false,
        );
        let out = adaln_modulate(&mut tape, &bound, "blk0", h, cond).unwrap();
        let plain = tape.layer_norm_rows(h);
        for (a, b) in tape.value(out).data.iter().zip(&tape.value(plain).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_zero_velocity_and_identity_flow() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1, "zero-head");
        init_cfm(&mut store, &cfg, 3, &mut rng).unwrap();
        store.get_mut("head.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("head.b").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let cond = embed_condition(&mut tape, &bound, &cfg, &[0.5], 0.0).unwrap();
        let z = tape.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), false);
        let v = vector_field_forward(&mut tape, &bound, &cfg, z, cond, None).unwrap();
        assert_eq!(tape.value(v).shape, vec![2, 3]);
        assert!(tape.value(v).data.iter().all(|x| *x == 0.0));

        // zero field: z_N == z0 exactly
        let stats = LatentStats {
            mean: vec![0.0; 6],
            std: vec![1.0; 6],
            shape: vec![2, 3],
        };
        let (z_n, path) =
            generate_latent(&cfg, &store, &stats, &[(0.0, 1.0)], &[0.5], 7).unwrap();
        assert_eq!(path.len(), cfg.n_steps + 1);
        assert_eq!(z_n.data, path[0].data);
    }

    #[test]
    fn constant_field_is_step_count_independent() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2, "const-field");
        init_cfm(&mut store, &cfg, 2, &mut rng).unwrap();
        store.get_mut("head.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let c = [0.7, -1.3];
        store.get_mut("head.b").unwrap().data.copy_from_slice(&c);
        let stats = LatentStats { mean: vec![0.0; 2], std: vec![1.0; 2], shape: vec![1, 2] };
        let run = |n: usize| {
            let cfg = CfmConfig { n_steps: n, ..toy_cfg() };
            generate_latent(&cfg, &store, &stats, &[(0.0, 1.0)], &[0.2], 3).unwrap().0
        };
        let a = run(1);
        let b = run(100);
        for ((x, y), (z0, ci)) in a.data.iter().zip(&b.data).zip(run(1).data.iter().zip(&c)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            let _ = (z0, ci);
        }
        // telescoping: z_N - z_0 = c for any N
        let (z_n, path) = {
            let cfg = CfmConfig { n_steps: 37, ..toy_cfg() };
            generate_latent(&cfg, &store, &stats, &[(0.0, 1.0)], &[0.2], 3).unwrap()
        };
        for ((zn, z0), ci) in z_n.data.iter().zip(&path[0].data).zip(&c) {
            assert!((zn - z0 - ci).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = CfmConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            sigma_path: 0.0,
            n_steps: 5,
            condition_dim: 2,
            lr: 1e-3,
            batch: 2,
            epochs: 1,
        };
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3, "cfm-gc");
        init_cfm(&mut store, &cfg, 3, &mut rng).unwrap();
        let items = vec![
            (Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.9, 1.1, 0.0, -0.7]).unwrap(), vec![0.3, 0.6]),
            (Tensor::new(vec![2, 3], vec![-0.4, 0.8, 0.1, -1.0, 0.5, 0.2]).unwrap(), vec![0.9, 0.1]),
        ];
        let ranges = vec![(0.0, 1.0), (0.0, 1.0)];
        let err = grad_check(
            |tape, bound| {
                let mut prior = seeded_rng(4, "cfm-gc-prior");
                let mut time = seeded_rng(5, "cfm-gc-time");
                batch_loss(tape, bound, &cfg, &items, &ranges, &mut prior, &mut time, None)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn training_is_deterministic_and_loss_drops() {
        let cfg = toy_cfg();
        let mut rng = seeded_rng(6, "cfm-det");
        let corpus: LatentCorpus = (0..8)
            .map(|i| {
                let e = i as f64 / 7.0;
                (t1(vec![2.0 * e - 1.0 + 0.01 * rng.gen_range(-1.0..1.0)]), vec![e])
            })
            .collect();
        let ranges = vec![(0.0, 1.0)];
        let (a, sa, rep) = train_cfm(&cfg, &corpus, &ranges, 9).unwrap();
        let (b, sb, _) = train_cfm(&cfg, &corpus, &ranges, 9).unwrap();
        assert_eq!(a.flat_payload(), b.flat_payload());
        assert_eq!(sa, sb);
        assert!(rep.last_epoch_loss < rep.first_epoch_loss);
        assert!(rep.first_epoch_loss >= 0.0);
        // corpus of one rejected
        assert!(train_cfm(&cfg, &corpus[..1].to_vec(), &ranges, 0).is_err());
    }

    #[test]
    fn affine_map_toy_generates_oracle_latents() {
        // target manifold: z1(e) = 2e - 1 on a single 1-dim token
        let cfg = CfmConfig { epochs: 400, ..toy_cfg() };
        let corpus: LatentCorpus = (0..11)
            .map(|i| {
                let e = i as f64 / 10.0;
                (t1(vec![2.0 * e - 1.0]), vec![e])
            })
            .collect();
        let ranges = vec![(0.0, 1.0)];
        let (store, stats, _) = train_cfm(&cfg, &corpus, &ranges, 17).unwrap();
        let held_out: Vec<f64> = (0..10).map(|i| 0.05 + i as f64 * 0.1).collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &e in &held_out {
            let (z, _) = generate_latent(&cfg, &store, &stats, &ranges, &[e], 23).unwrap();
            xs.push(2.0 * e - 1.0);
            ys.push(z.data[0]);
        }
        // R^2 of generated endpoints against the oracle affine map
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - x) * (y - x)).sum();
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.95, "R^2 = {r2}, pairs: {:?}", xs.iter().zip(&ys).collect::<Vec<_>>());
    }
}
