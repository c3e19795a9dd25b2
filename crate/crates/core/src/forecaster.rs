//! Spatio-temporal graph forecaster: gated temporal convolutions and graph
//! convolutions over a sliding window, trained per environment with a
//! multi-step mean-squared objective on standardized states.

use rand::seq::SliceRandom;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::layers::{
    self, init_conv, init_linear, init_matrix, init_norm, BoundParams, ParamStore,
};
use crate::nn::{adam_step, one_cycle_lr, AdamState, ConstId, Tape, Tensor, Var};
use crate::util::seeded_rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ForecasterConfig {
    /// Input window length (time steps fed to the model).
    pub window: usize,
    /// Forecast horizon (time steps predicted in one shot).
    pub horizon: usize,
    /// Hidden channels per block.
    pub channels: usize,
    /// Temporal kernel width.
    pub kernel: usize,
    /// Number of conv blocks.
    pub blocks: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Stride between consecutive training window starts.
    pub stride: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            window: 50,
            horizon: 50,
            channels: 8,
            kernel: 3,
            blocks: 2,
            epochs: 500,
            batch: 64,
            lr: 1e-4,
            stride: 1,
        }
    }
}

impl ForecasterConfig {
    /// Time steps left after all block convolutions; the collapse kernel.
    pub fn collapse_kernel(&self) -> usize {
        self.window
            .saturating_sub(self.blocks * 2 * (self.kernel - 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 2 || self.channels == 0 || self.blocks == 0 {
            return Err(Error::Config("forecaster needs kernel >= 2, channels and blocks > 0".into()));
        }
        if self.collapse_kernel() == 0 {
            return Err(Error::Config(format!(
                "window {} too short for {} blocks of kernel {}: needs at least {}",
                self.window,
                self.blocks,
                self.kernel,
                self.blocks * 2 * (self.kernel - 1) + 1
            )));
        }
        if self.horizon == 0 || self.stride == 0 || self.batch == 0 {
            return Err(Error::Config("horizon, stride and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Register all forecaster parameters. The registration order is the
/// checkpoint and tokenizer schema order, so it must stay stable.
pub fn init_forecaster(
    store: &mut ParamStore,
    cfg: &ForecasterConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut c_in = 1;
    for b in 0..cfg.blocks {
        init_conv(store, &format!("block{b}.tconv1"), 2 * c, c_in, cfg.kernel, rng)?;
        init_matrix(store, &format!("block{b}.gconv"), c, c, rng)?;
        init_conv(store, &format!("block{b}.tconv2"), c, c, cfg.kernel, rng)?;
        init_norm(store, &format!("block{b}.norm"), c)?;
        c_in = c;
    }
    init_conv(store, "collapse", c, c, cfg.collapse_kernel(), rng)?;
    init_linear(store, "head", cfg.horizon, c, rng)
}

/// Forward pass on a standardized window batch.
///
/// `x` has shape (window, batch * n, 1); the batch is folded into the spatial
/// axis so temporal convolutions see all windows at once. Returns
/// (batch * n, horizon) standardized predictions.
pub fn forecaster_forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ForecasterConfig,
    adj: ConstId,
    x: Var,
    n: usize,
) -> Result<Var> {
    let shape = tape.value(x).shape.clone();
    if shape.len() != 3 || shape[0] != cfg.window || shape[1] % n != 0 {
        return Err(Error::Shape(format!(
            "forecaster input shape {shape:?} incompatible with window {} and n {n}",
            cfg.window
        )));
    }
    let s = shape[1];
    let c = cfg.channels;
    let mut h = x;
    for b in 0..cfg.blocks {
        h = layers::temporal_conv(tape, p, &format!("block{b}.tconv1"), h, true)?;
        let t = tape.value(h).shape[0];
        // fold time into the batch axis so the adjacency applies per frame
        let folded = tape.reshape(h, vec![t * (s / n), n, c])?;
        let g = layers::graph_conv(tape, p, &format!("block{b}.gconv"), adj, folded)?;
        let g = tape.relu(g);
        h = tape.reshape(g, vec![t, s, c])?;
        h = layers::temporal_conv(tape, p, &format!("block{b}.tconv2"), h, false)?;
        h = layers::layer_norm(tape, p, &format!("block{b}.norm"), h)?;
    }
    let h = layers::temporal_conv(tape, p, "collapse", h, false)?;
    let t = tape.value(h).shape[0];
    if t != 1 {
        return Err(Error::Shape(format!("collapse left {t} time steps")));
    }
    let flat = tape.reshape(h, vec![s, c])?;
    layers::linear(tape, p, "head", flat)
}

/// Standardize a trajectory with its stored per-environment stats.
pub fn standardized_states(traj: &Trajectory) -> Vec<f64> {
    traj.states.iter().map(|v| (v - traj.mean) / traj.std).collect()
}

/// Window start indices whose full (window + horizon) extent fits in
/// [lo, hi) time steps, spaced by `stride`.
pub fn window_starts(
    cfg: &ForecasterConfig,
    lo: usize,
    hi: usize,
) -> Vec<usize> {
    let extent = cfg.window + cfg.horizon;
    if hi < lo + extent {
        return vec![];
    }
    (lo..=hi - extent).step_by(cfg.stride).collect()
}

/// Starts of the training region (leading train_time_frac of the trajectory).
pub fn train_window_starts(cfg: &ForecasterConfig, traj: &Trajectory, frac: f64) -> Vec<usize> {
    let hi = ((traj.steps as f64) * frac).floor() as usize;
    window_starts(cfg, 0, hi)
}

/// Starts of the held-out tail region.
pub fn eval_window_starts(cfg: &ForecasterConfig, traj: &Trajectory, frac: f64) -> Vec<usize> {
    let lo = ((traj.steps as f64) * frac).floor() as usize;
    window_starts(cfg, lo, traj.steps)
}

/// Build the (window, batch * n, 1) input and (batch * n, horizon) target
/// tensors for a set of window starts, in standardized units.
pub fn batch_tensors(
    cfg: &ForecasterConfig,
    std_states: &[f64],
    n: usize,
    starts: &[usize],
) -> Result<(Tensor, Tensor)> {
    if starts.is_empty() {
        return Err(Error::Config("empty window batch".into()));
    }
    let b = starts.len();
    let mut x = vec![0.0; cfg.window * b * n];
    let mut y = vec![0.0; b * n * cfg.horizon];
    for (bi, &s0) in starts.iter().enumerate() {
        if (s0 + cfg.window + cfg.horizon) * n > std_states.len() {
            return Err(Error::Shape(format!("window start {s0} out of range")));
        }
        for t in 0..cfg.window {
            let frame = &std_states[(s0 + t) * n..(s0 + t + 1) * n];
            x[(t * b + bi) * n..(t * b + bi + 1) * n].copy_from_slice(frame);
        }
        for j in 0..cfg.horizon {
            let frame = &std_states[(s0 + cfg.window + j) * n..(s0 + cfg.window + j + 1) * n];
            for i in 0..n {
                y[(bi * n + i) * cfg.horizon + j] = frame[i];
            }
        }
    }
    Ok((
        Tensor::new(vec![cfg.window, b * n, 1], x)?,
        Tensor::new(vec![b * n, cfg.horizon], y)?,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub first_epoch_loss: f64,
    pub best_epoch_loss: f64,
    pub train_windows: usize,
}

/// Train one expert on a trajectory. `init_seed` controls the weight
/// initialization and is deliberately shared across environments so expert
/// weights vary smoothly with the dynamics coefficients; `train_seed`
/// controls batch shuffling.
pub fn train_expert(
    cfg: &ForecasterConfig,
    graph: &Graph,
    traj: &Trajectory,
    train_frac: f64,
    init_seed: u64,
    train_seed: u64,
) -> Result<(ParamStore, TrainReport)> {
    cfg.validate()?;
    let n = graph.n;
    let std_states = standardized_states(traj);
    let starts = train_window_starts(cfg, traj, train_frac);
    if starts.is_empty() {
        return Err(Error::Config(format!(
            "trajectory of {} steps yields no training windows (window {} + horizon {})",
            traj.steps, cfg.window, cfg.horizon
        )));
    }
    let mut init_rng = seeded_rng(init_seed, "forecaster-init");
    let mut store = ParamStore::new();
    init_forecaster(&mut store, cfg, &mut init_rng)?;
    let norm_adj = Tensor::new(vec![n, n], graph.norm_adjacency())?;
    let mut adam = AdamState::new(&store, cfg.lr, 0.0);
    // the label deliberately excludes the environment id: with a shared
    // train_seed every environment sees the same batch order (common random
    // numbers), so expert weights vary smoothly with the coefficients
    let mut shuffle_rng = seeded_rng(train_seed, "forecaster-train");
    let batches_per_epoch = starts.len().div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;

    let mut best_loss = f64::INFINITY;
    let mut best_payload = store.flat_payload();
    let mut first_epoch_loss = f64::NAN;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = starts.clone();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let (xt, yt) = batch_tensors(cfg, &std_states, n, chunk)?;
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let adj = tape.constant_tensor(norm_adj.clone());
            let x = tape.leaf(xt, false);
            let y = tape.leaf(yt, false);
            let pred = forecaster_forward(&mut tape, &bound, cfg, adj, x, n)?;
            let loss = layers::mse_loss(&mut tape, pred, y)?;
            let loss_v = tape.scalar_value(loss).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}: {e}"))
            })?;
            tape.backward(loss)?;
            store.zero_grads();
            store.accumulate_grads(&tape, &bound);
            step += 1;
            adam.lr = one_cycle_lr(step, total_steps, cfg.lr);
            adam_step(&mut store, &mut adam, step)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            epoch_loss += loss_v;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        if epoch == 0 {
            first_epoch_loss = epoch_loss;
        }
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_payload = store.flat_payload();
        }
    }
    store.load_flat_payload(&best_payload)?;
    Ok((
        store,
        TrainReport {
            epochs_run: cfg.epochs,
            first_epoch_loss,
            best_epoch_loss: best_loss,
            train_windows: starts.len(),
        },
    ))
}

/// Raw-scale RMSE of the model over the given window starts.
pub fn evaluate_rmse(
    cfg: &ForecasterConfig,
    store: &ParamStore,
    graph: &Graph,
    traj: &Trajectory,
    starts: &[usize],
) -> Result<f64> {
    let n = graph.n;
    let std_states = standardized_states(traj);
    let (xt, yt) = batch_tensors(cfg, &std_states, n, starts)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let adj = tape.constant_tensor(Tensor::new(vec![n, n], graph.norm_adjacency())?);
    let x = tape.leaf(xt, false);
    let pred = forecaster_forward(&mut tape, &bound, cfg, adj, x, n)?;
    tape.check_finite()?;
    let pv = tape.value(pred);
    let mut se = 0.0;
    for (p, t) in pv.data.iter().zip(&yt.data) {
        let raw_p = p * traj.std + traj.mean;
        let raw_t = t * traj.std + traj.mean;
        se += (raw_p - raw_t) * (raw_p - raw_t);
    }
    Ok((se / yt.data.len() as f64).sqrt())
}

/// Raw-scale RMSE of repeating the last observed frame over the horizon.
pub fn persistence_baseline(
    cfg: &ForecasterConfig,
    traj: &Trajectory,
    starts: &[usize],
) -> Result<f64> {
    if starts.is_empty() {
        return Err(Error::Config("empty window batch".into()));
    }
    let n = traj.nodes;
    let mut se = 0.0;
    let mut count = 0usize;
    for &s0 in starts {
        let last = traj.frame(s0 + cfg.window - 1);
        for j in 0..cfg.horizon {
            let target = traj.frame(s0 + cfg.window + j);
            for i in 0..n {
                se += (last[i] - target[i]) * (last[i] - target[i]);
                count += 1;
            }
        }
    }
    Ok((se / count as f64).sqrt())
}
