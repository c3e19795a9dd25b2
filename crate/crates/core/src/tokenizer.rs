//! Lossless conversion between a flat forecaster payload and a per-output-unit
//! token sequence. Each convolution output channel, each linear output row
//! (with its bias), each bias-free matrix row, and each norm affine pair
//! becomes one token; detokenization restores the payload bit-exactly.

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// 3-D kernel (c_out, c_in, k): c_out tokens of c_in * k values.
    Conv,
    /// Weight (d_out, d_in) plus bias (d_out): d_out tokens of d_in + 1.
    Linear,
    /// Bias-free weight (d_out, d_in): d_out tokens of d_in.
    Matrix,
    /// Norm scale and shift, both (d): one token of 2 * d.
    NormAffine,
}

impl TokenKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TokenKind::Conv => "conv",
            TokenKind::Linear => "linear",
            TokenKind::Matrix => "matrix",
            TokenKind::NormAffine => "norm_affine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(TokenKind::Conv),
            "linear" => Ok(TokenKind::Linear),
            "matrix" => Ok(TokenKind::Matrix),
            "norm_affine" => Ok(TokenKind::NormAffine),
            other => Err(Error::Config(format!("unknown token kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayer {
    /// Base parameter name without the .w / .b / .scale / .shift suffix.
    pub name: String,
    pub kind: TokenKind,
    pub tokens: usize,
    pub token_dim: usize,
    /// Offset of this layer's first value in the flat payload.
    pub payload_offset: usize,
}

impl TokenLayer {
    pub fn payload_len(&self) -> usize {
        self.tokens * self.token_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSchema {
    pub layers: Vec<TokenLayer>,
    pub total_values: usize,
}

impl WeightSchema {
    pub fn total_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.tokens).sum()
    }
}

/// Derive the token schema from a parameter store's registration order.
/// Recognized patterns, in order of the store's names:
/// `X.w` (3-D) -> conv; `X.w` (2-D) then `X.b` -> linear; `X.w` (2-D)
/// alone -> matrix; `X.scale` then `X.shift` -> norm affine.
pub fn derive_schema(store: &ParamStore) -> Result<WeightSchema> {
    let names = store.names();
    let mut layers = Vec::new();
    let mut offset = 0usize;
    let mut i = 0;
    while i < names.len() {
        let name = &names[i];
        let t = store.get(name)?;
        if let Some(base) = name.strip_suffix(".w") {
            match t.shape.len() {
                3 => {
                    layers.push(TokenLayer {
                        name: base.to_string(),
                        kind: TokenKind::Conv,
                        tokens: t.shape[0],
                        token_dim: t.shape[1] * t.shape[2],
                        payload_offset: offset,
                    });
                    offset += t.numel();
                    i += 1;
                }
                2 => {
                    let has_bias = names
                        .get(i + 1)
                        .is_some_and(|n| n == &format!("{base}.b"));
                    if has_bias {
                        let b = store.get(&names[i + 1])?;
                        if b.shape != vec![t.shape[0]] {
                            return Err(Error::Shape(format!(
                                "{base}: bias shape {:?} does not match weight rows {}",
                                b.shape, t.shape[0]
                            )));
                        }
                        layers.push(TokenLayer {
                            name: base.to_string(),
                            kind: TokenKind::Linear,
                            tokens: t.shape[0],
                            token_dim: t.shape[1] + 1,
                            payload_offset: offset,
                        });
                        offset += t.numel() + b.numel();
                        i += 2;
                    } else {
                        layers.push(TokenLayer {
                            name: base.to_string(),
                            kind: TokenKind::Matrix,
                            tokens: t.shape[0],
                            token_dim: t.shape[1],
                            payload_offset: offset,
                        });
                        offset += t.numel();
                        i += 1;
                    }
                }
                d => {
                    return Err(Error::Shape(format!(
                        "{name}: unsupported weight rank {d}"
                    )))
                }
            }
        } else if let Some(base) = name.strip_suffix(".scale") {
            let shift_name = format!("{base}.shift");
            if names.get(i + 1) != Some(&shift_name) {
                return Err(Error::Config(format!(
                    "{name} not followed by {shift_name}"
                )));
            }
            let shift = store.get(&shift_name)?;
            if t.shape != shift.shape || t.shape.len() != 1 {
                return Err(Error::Shape(format!(
                    "{base}: norm affine expects matching 1-D scale/shift, got {:?} / {:?}",
                    t.shape, shift.shape
                )));
            }
            layers.push(TokenLayer {
                name: base.to_string(),
                kind: TokenKind::NormAffine,
                tokens: 1,
                token_dim: 2 * t.shape[0],
                payload_offset: offset,
            });
            offset += 2 * t.numel();
            i += 2;
        } else {
            return Err(Error::Config(format!(
                "parameter '{name}' does not match any token pattern"
            )));
        }
    }
    if offset != store.total_values() {
        return Err(Error::Shape(format!(
            "schema spans {offset} values, store holds {}",
            store.total_values()
        )));
    }
    Ok(WeightSchema { layers, total_values: offset })
}

/// Token sequence grouped by layer: one (tokens, token_dim) tensor per layer.
pub type TokenSeq = Vec<Tensor>;

/// Rearrange a flat payload into per-layer token tensors.
pub fn tokenize(schema: &WeightSchema, payload: &[f64]) -> Result<TokenSeq> {
    if payload.len() != schema.total_values {
        return Err(Error::Shape(format!(
            "payload length {} != schema total {}",
            payload.len(),
            schema.total_values
        )));
    }
    let mut out = Vec::with_capacity(schema.layers.len());
    for layer in &schema.layers {
        let src = &payload[layer.payload_offset..layer.payload_offset + layer.payload_len()];
        let data = match layer.kind {
            // conv kernels and bias-free rows are already unit-contiguous
            TokenKind::Conv | TokenKind::Matrix | TokenKind::NormAffine => src.to_vec(),
            TokenKind::Linear => {
                let d_in = layer.token_dim - 1;
                let rows = layer.tokens;
                let (w, b) = src.split_at(rows * d_in);
                let mut data = Vec::with_capacity(src.len());
                for r in 0..rows {
                    data.extend_from_slice(&w[r * d_in..(r + 1) * d_in]);
                    data.push(b[r]);
                }
                data
            }
        };
        out.push(Tensor::new(vec![layer.tokens, layer.token_dim], data)?);
    }
    Ok(out)
}

/// Inverse of `tokenize`: bit-exact payload reconstruction.
pub fn detokenize(schema: &WeightSchema, tokens: &TokenSeq) -> Result<Vec<f64>> {
    if tokens.len() != schema.layers.len() {
        return Err(Error::Shape(format!(
            "{} token layers for a schema of {}",
            tokens.len(),
            schema.layers.len()
        )));
    }
    let mut payload = vec![0.0; schema.total_values];
    for (layer, t) in schema.layers.iter().zip(tokens) {
        if t.shape != vec![layer.tokens, layer.token_dim] {
            return Err(Error::Shape(format!(
                "layer {}: token tensor {:?}, expected ({}, {})",
                layer.name, t.shape, layer.tokens, layer.token_dim
            )));
        }
        let dst = &mut payload[layer.payload_offset..layer.payload_offset + layer.payload_len()];
        match layer.kind {
            TokenKind::Conv | TokenKind::Matrix | TokenKind::NormAffine => {
                dst.copy_from_slice(&t.data)
            }
            TokenKind::Linear => {
                let d_in = layer.token_dim - 1;
                let rows = layer.tokens;
                let (w, b) = dst.split_at_mut(rows * d_in);
                for r in 0..rows {
                    let tok = &t.data[r * layer.token_dim..(r + 1) * layer.token_dim];
                    w[r * d_in..(r + 1) * d_in].copy_from_slice(&tok[..d_in]);
                    b[r] = tok[d_in];
                }
            }
        }
    }
    Ok(payload)
}

/// Structure-blind baseline for ablations: chop the flat payload into
/// fixed-width chunks, zero-padding the last one.
pub fn flat_tokenize(payload: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Config("flat token dim must be positive".into()));
    }
    if payload.is_empty() {
        return Err(Error::Config("cannot tokenize an empty payload".into()));
    }
    let tokens = payload.len().div_ceil(dim);
    let mut data = vec![0.0; tokens * dim];
    data[..payload.len()].copy_from_slice(payload);
    Tensor::new(vec![tokens, dim], data)
}

/// Inverse of `flat_tokenize`; drops the zero padding.
pub fn flat_detokenize(tokens: &Tensor, total_values: usize) -> Result<Vec<f64>> {
    if tokens.shape.len() != 2 {
        return Err(Error::Shape(format!("flat tokens must be 2-D, got {:?}", tokens.shape)));
    }
    if total_values > tokens.numel() || tokens.numel() - total_values >= tokens.shape[1] {
        return Err(Error::Shape(format!(
            "{total_values} values cannot come from a {:?} token tensor",
            tokens.shape
        )));
    }
    Ok(tokens.data[..total_values].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::{init_forecaster, ForecasterConfig};
    use crate::util::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn forecaster_schema_layout() {
        let cfg = ForecasterConfig::default();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0, "tok-schema");
        init_forecaster(&mut store, &cfg, &mut rng).unwrap();
        let schema = derive_schema(&store).unwrap();
        assert_eq!(schema.total_values, store.total_values());
        // 2 blocks of (conv, matrix, conv, norm) + collapse conv + linear head
        assert_eq!(schema.layers.len(), 10);
        assert_eq!(schema.layers[0].kind, TokenKind::Conv);
        assert_eq!(schema.layers[0].token_dim, 1 * 3);
        assert_eq!(schema.layers[0].tokens, 16);
        assert_eq!(schema.layers[3].kind, TokenKind::NormAffine);
        assert_eq!(schema.layers[3].token_dim, 16);
        assert_eq!(schema.layers[9].kind, TokenKind::Linear);
        assert_eq!(schema.layers[9].token_dim, 9);
        assert_eq!(schema.layers[9].tokens, 50);
    }

    #[test]
    fn linear_token_carries_bias() {
        let mut store = ParamStore::new();
        store
            .insert("h.w", Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        store.insert("h.b", Tensor::new(vec![2], vec![10.0, 20.0]).unwrap()).unwrap();
        let schema = derive_schema(&store).unwrap();
        let toks = tokenize(&schema, &store.flat_payload()).unwrap();
        assert_eq!(toks[0].data, vec![0.0, 1.0, 2.0, 10.0, 3.0, 4.0, 5.0, 20.0]);
        let back = detokenize(&schema, &toks).unwrap();
        assert_eq!(back, store.flat_payload());
    }

    #[test]
    fn flat_round_trip_with_padding() {
        let payload: Vec<f64> = (0..7).map(|v| v as f64 * 0.5).collect();
        let t = flat_tokenize(&payload, 3).unwrap();
        assert_eq!(t.shape, vec![3, 3]);
        assert_eq!(t.data[7], 0.0);
        assert_eq!(flat_detokenize(&t, 7).unwrap(), payload);
        assert!(flat_detokenize(&t, 5).is_err());
    }

    fn random_store(case: u64) -> ParamStore {
        let mut rng = seeded_rng(case, "tok-random-store");
        let mut store = ParamStore::new();
        let n_layers = rng.gen_range(1..6);
        for li in 0..n_layers {
            let d1 = rng.gen_range(1..7usize);
            let d2 = rng.gen_range(1..7usize);
            let fill = |rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>| {
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|_| rng.gen_range(-5.0..5.0)).collect();
                Tensor::new(shape, data).unwrap()
            };
            match rng.gen_range(0..4) {
                0 => {
                    let k = rng.gen_range(1..4usize);
                    let t = fill(&mut rng, vec![d1, d2, k]);
                    store.insert(format!("l{li}.w"), t).unwrap();
                }
                1 => {
                    let w = fill(&mut rng, vec![d1, d2]);
                    let b = fill(&mut rng, vec![d1]);
                    store.insert(format!("l{li}.w"), w).unwrap();
                    store.insert(format!("l{li}.b"), b).unwrap();
                }
                2 => {
                    let w = fill(&mut rng, vec![d1, d2]);
                    store.insert(format!("l{li}.w"), w).unwrap();
                }
                _ => {
                    let s = fill(&mut rng, vec![d1]);
                    let sh = fill(&mut rng, vec![d1]);
                    store.insert(format!("l{li}.scale"), s).unwrap();
                    store.insert(format!("l{li}.shift"), sh).unwrap();
                }
            }
        }
        store
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip_is_bit_exact(case in 0u64..1_000_000) {
            let store = random_store(case);
            let payload = store.flat_payload();
            let schema = derive_schema(&store).unwrap();
            let toks = tokenize(&schema, &payload).unwrap();
            let back = detokenize(&schema, &toks).unwrap();
            prop_assert_eq!(payload.len(), back.len());
            for (a, b) in payload.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn flat_round_trip_is_bit_exact(len in 1usize..200, dim in 1usize..32, seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed, "tok-flat");
            let payload: Vec<f64> = (0..len).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let t = flat_tokenize(&payload, dim).unwrap();
            let back = flat_detokenize(&t, len).unwrap();
            for (a, b) in payload.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
