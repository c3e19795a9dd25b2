//! Parameter store and the composite layers built from tape primitives.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{ConstId, Tape, Var};
use crate::nn::tensor::Tensor;

/// Named parameters with matching gradient slots, in registration order.
/// The registration order defines the checkpoint schema order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.grads.push(Tensor::zeros(t.shape.clone()));
        self.params.push(t);
        self.names.push(name);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.grads[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter())
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flat_payload(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }

    /// Overwrite all parameters from a flat payload in registration order.
    pub fn load_flat_payload(&mut self, payload: &[f64]) -> Result<()> {
        if payload.len() != self.total_values() {
            return Err(Error::Shape(format!(
                "payload length {} != parameter count {}",
                payload.len(),
                self.total_values()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data.copy_from_slice(&payload[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Register every parameter on a tape as a grad-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Pull the tape gradients of every bound parameter into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (i, var) in bound.vars.iter().enumerate() {
            if let Some(g) = tape.grad(*var) {
                for (acc, v) in self.grads[i].data.iter_mut().zip(&g.data) {
                    *acc += v;
                }
            }
        }
    }

    pub(crate) fn param_at(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub(crate) fn param_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i]
    }

    pub(crate) fn grad_at(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }
}

/// Tape handles of a store's parameters for one forward/backward pass.
pub struct BoundParams {
    pub(crate) vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }
}

// ---- initialization ----

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, data }
}

/// Linear layer: `<name>.w` of shape (d_out, d_in) and `<name>.b` of shape (d_out).
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), glorot(vec![d_out, d_in], d_in, d_out, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(vec![d_out]))
}

/// Bias-free weight matrix `<name>.w` of shape (d_out, d_in).
pub fn init_matrix(
    store: &mut ParamStore,
    name: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), glorot(vec![d_out, d_in], d_in, d_out, rng))
}

/// Temporal conv kernel `<name>.w` of shape (c_out, c_in, k), bias-free.
pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(
        format!("{name}.w"),
        glorot(vec![c_out, c_in, k], c_in * k, c_out * k, rng),
    )
}

/// Layer-norm affine: `<name>.scale` ones and `<name>.shift` zeros, both (d).
pub fn init_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.scale"), Tensor::filled(vec![d], 1.0))?;
    store.insert(format!("{name}.shift"), Tensor::zeros(vec![d]))
}

// ---- composite layers ----

/// y = x W^T + b over the last axis.
pub fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.matmul(x, w, true)?;
    tape.add_row(y, b)
}

/// Bias-free matrix application y = x W^T.
pub fn apply_matrix(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    tape.matmul(x, w, true)
}

/// Valid temporal convolution; with `glu` the output channels are split into
/// value/gate halves and combined as value * sigmoid(gate).
pub fn temporal_conv(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    x: Var,
    glu: bool,
) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let y = tape.conv_time(x, w)?;
    if !glu {
        return Ok(y);
    }
    let c = tape.value(y).last_dim();
    if c % 2 != 0 {
        return Err(Error::Shape(format!("GLU requires even channels, got {c}")));
    }
    let value = tape.slice_cols(y, 0, c / 2)?;
    let gate = tape.slice_cols(y, c / 2, c)?;
    let sg = tape.sigmoid(gate);
    tape.mul(value, sg)
}

/// First-order graph convolution Y = A_hat X W^T over the (..., n, c) view.
pub fn graph_conv(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    adj: ConstId,
    x: Var,
) -> Result<Var> {
    let mixed = tape.adj_matmul(adj, x)?;
    apply_matrix(tape, p, name, mixed)
}

/// Layer norm over the last axis followed by a learned affine.
pub fn layer_norm(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let scale = p.var(&format!("{name}.scale"))?;
    let shift = p.var(&format!("{name}.shift"))?;
    let n = tape.layer_norm_rows(x);
    let s = tape.mul_row(n, scale)?;
    tape.add_row(s, shift)
}

pub fn init_attention(
    store: &mut ParamStore,
    name: &str,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), d_model, d_model, rng)?;
    }
    Ok(())
}

/// Scaled dot-product multi-head self-attention on a (M, d_model) sequence.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).last_dim();
    if d % heads != 0 {
        return Err(Error::Shape(format!(
            "d_model {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = linear(tape, p, &format!("{name}.q"), x)?;
    let k = linear(tape, p, &format!("{name}.k"), x)?;
    let v = linear(tape, p, &format!("{name}.v"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, from, to)?;
        let kh = tape.slice_cols(k, from, to)?;
        let vh = tape.slice_cols(v, from, to)?;
        let scores = tape.matmul(qh, kh, true)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        outs.push(tape.matmul(attn, vh, false)?);
    }
    let cat = tape.concat_cols(&outs)?;
    linear(tape, p, &format!("{name}.o"), cat)
}

pub fn init_ffn(
    store: &mut ParamStore,
    name: &str,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_linear(store, &format!("{name}.fc1"), 4 * d_model, d_model, rng)?;
    init_linear(store, &format!("{name}.fc2"), d_model, 4 * d_model, rng)
}

/// Position-wise feed-forward: linear -> ReLU -> linear, hidden 4 * d_model.
pub fn ffn(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{name}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{name}.fc2"), h)
}

/// Mean of squared elementwise differences.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// KL(q || N(0, I)) summed over latent dims, averaged over tokens:
/// mean_tokens( 0.5 * sum_d (mu^2 + sigma^2 - log sigma^2 - 1) ).
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let shape = tape.value(mu).shape.clone();
    if shape != tape.value(logvar).shape {
        return Err(Error::Shape("gaussian_kl: mu/logvar shape mismatch".into()));
    }
    let tokens = tape.value(mu).rows() as f64;
    let dz = tape.value(mu).last_dim() as f64;
    let mu2 = tape.mul(mu, mu)?;
    let s_mu2 = tape.sum_all(mu2);
    let var = tape.exp(logvar);
    let s_var = tape.sum_all(var);
    let s_lv = tape.sum_all(logvar);
    let a = tape.add(s_mu2, s_var)?;
    let b = tape.sub(a, s_lv)?;
    let scaled = tape.scale(b, 0.5 / tokens);
    Ok(tape.add_scalar(scaled, -0.5 * dz))
}

/// Inverted-scaling dropout mask as a tape constant; identity when p = 0.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape.clone();
    let keep = 1.0 - p;
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant_tensor(Tensor { shape, data });
    tape.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn linear_hand_arithmetic() {
        let mut store = ParamStore::new();
        store
            .insert("l.w", Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        store.insert("l.b", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
        let y = linear(&mut tape, &bound, "l", x).unwrap();
        assert_eq!(tape.value(y).data, vec![4.0]);
    }

    #[test]
    fn glu_zero_gate_halves_value() {
        // kernel width 1, identity value path, zero gate path
        let mut store = ParamStore::new();
        store
            .insert(
                "c.w",
                Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(), false);
        let y = temporal_conv(&mut tape, &bound, "c", x, true).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0]); // 2.0 * sigmoid(0) = 1.0
    }

    #[test]
    fn ffn_identity_construction() {
        // W1 = (I; -I), W2 = (I, -I): ReLU(x) - ReLU(-x) = x
        let d = 3;
        let mut store = ParamStore::new();
        let mut w1 = Tensor::zeros(vec![4 * d, d]);
        let mut w2 = Tensor::zeros(vec![d, 4 * d]);
        for i in 0..d {
            w1.data[i * d + i] = 1.0;
            w1.data[(d + i) * d + i] = -1.0;
            w2.data[i * 4 * d + i] = 1.0;
            w2.data[i * 4 * d + d + i] = -1.0;
        }
        store.insert("f.fc1.w", w1).unwrap();
        store.insert("f.fc1.b", Tensor::zeros(vec![4 * d])).unwrap();
        store.insert("f.fc2.w", w2).unwrap();
        store.insert("f.fc2.b", Tensor::zeros(vec![d])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.5, 2.0]).unwrap(), false);
        let y = ffn(&mut tape, &bound, "f", x).unwrap();
        for (a, b) in tape.value(y).data.iter().zip([0.5, -1.5, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_equal_tokens_average() {
        let d = 4;
        let mut rng = seeded_rng(0, "attn-test");
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", d, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        // two identical tokens: output rows must be identical
        let x = tape.leaf(
            Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap(),
            false,
        );
        let y = multi_head_attention(&mut tape, &bound, "a", x, 2).unwrap();
        let v = tape.value(y);
        for j in 0..4 {
            assert!((v.data[j] - v.data[4 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_token_passthrough() {
        let d = 4;
        let mut rng = seeded_rng(1, "attn-single");
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", d, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.5, 0.25]).unwrap(), false);
        // softmax over one key is 1, so output = O(V(x))
        let y = multi_head_attention(&mut tape, &bound, "a", x, 1).unwrap();
        let v = linear(&mut tape, &bound, "a.v", x).unwrap();
        let expect = linear(&mut tape, &bound, "a.o", v).unwrap();
        for (a, b) in tape.value(y).data.iter().zip(&tape.value(expect).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_and_kl_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let t = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), false);
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 1.0);

        let mu0 = tape.leaf(Tensor::zeros(vec![1, 1]), false);
        let lv0 = tape.leaf(Tensor::zeros(vec![1, 1]), false);
        let kl0 = gaussian_kl(&mut tape, mu0, lv0).unwrap();
        assert!(tape.scalar_value(kl0).unwrap().abs() < 1e-15);

        let mu1 = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), false);
        let kl1 = gaussian_kl(&mut tape, mu1, lv0).unwrap();
        assert!((tape.scalar_value(kl1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_property() {
        let mut rng = seeded_rng(3, "kl-prop");
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let mu = tape.leaf(
                Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
                    .unwrap(),
                false,
            );
            let lv = tape.leaf(
                Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect())
                    .unwrap(),
                false,
            );
            let kl = gaussian_kl(&mut tape, mu, lv).unwrap();
            assert!(tape.scalar_value(kl).unwrap() >= -1e-12);
        }
    }
}
